//! Line-delimited JSON request/reply protocol shared by external measurers
//! and generators.
//!
//! Every message is one JSON object on one line. Measurer traffic:
//!
//! ```text
//! -> {"req_id":"7","text":"a fine film"}
//! <- {"req_id":"7","kind":"continuous","value":0.75}
//! <- {"req_id":"8","kind":"binary","label":"significant","confidence":0.9}
//! ```
//!
//! Generator traffic streams one line per completion and a terminator:
//!
//! ```text
//! -> {"req_id":"9","conditioning":"<doc> ...","n":2,"temperature":0.6,"mode":"sample"}
//! <- {"req_id":"9","seq_no":0,"text":"...","log_prob":-3.2}
//! <- {"req_id":"9","seq_no":1,"text":"..."}
//! <- {"req_id":"9","done":true}
//! ```
//!
//! A backend that cannot serve a request replies `{"req_id":..,"error":".."}`
//! and stays alive. The same schema runs over a child process's standard
//! streams (`exec:` endpoints) or a TCP socket (`tcp://` endpoints).

use std::fmt;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::{Label, LexiconMeasurer, Measurement, Measurer};

/// Where an external backend lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `tcp://host:port`
    Tcp(String),
    /// `exec:program arg1 arg2`, spoken over the child's stdin/stdout.
    Process { program: String, args: Vec<String> },
}

impl FromStr for Endpoint {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |reason: &str| ProtocolError::BadEndpoint {
            endpoint: s.to_string(),
            reason: reason.to_string(),
        };
        if let Some(addr) = s.strip_prefix("tcp://") {
            if addr.is_empty() {
                return Err(bad("missing host:port"));
            }
            Ok(Endpoint::Tcp(addr.to_string()))
        } else if let Some(cmd) = s.strip_prefix("exec:") {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts.next().ok_or_else(|| bad("missing program"))?;
            Ok(Endpoint::Process {
                program,
                args: parts.collect(),
            })
        } else {
            Err(bad("expected tcp://host:port or exec:command"))
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(addr) => write!(f, "tcp://{addr}"),
            Endpoint::Process { program, args } => {
                write!(f, "exec:{program}")?;
                for a in args {
                    write!(f, " {a}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid endpoint {endpoint:?}: {reason}")]
    BadEndpoint { endpoint: String, reason: String },
    #[error("{endpoint}: unreachable: {source}")]
    Connect {
        endpoint: String,
        #[source]
        source: io::Error,
    },
    #[error("{endpoint}: i/o error: {source}")]
    Io {
        endpoint: String,
        #[source]
        source: io::Error,
    },
    #[error("{endpoint}: no reply within {after:?}")]
    Timeout { endpoint: String, after: Duration },
    #[error("{endpoint}: connection closed mid-stream")]
    Disconnected { endpoint: String },
    #[error("{endpoint}: malformed reply {line:?}: {reason}")]
    Malformed {
        endpoint: String,
        line: String,
        reason: String,
    },
    #[error("{endpoint}: backend error for request {req_id}: {message}")]
    Remote {
        endpoint: String,
        req_id: String,
        message: String,
    },
}

impl ProtocolError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ProtocolError::Connect { .. }
                | ProtocolError::Io { .. }
                | ProtocolError::Timeout { .. }
                | ProtocolError::Disconnected { .. }
        )
    }

    pub fn endpoint(&self) -> Option<&str> {
        match self {
            ProtocolError::BadEndpoint { endpoint, .. }
            | ProtocolError::Connect { endpoint, .. }
            | ProtocolError::Io { endpoint, .. }
            | ProtocolError::Timeout { endpoint, .. }
            | ProtocolError::Disconnected { endpoint }
            | ProtocolError::Malformed { endpoint, .. }
            | ProtocolError::Remote { endpoint, .. } => Some(endpoint),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureRequest {
    pub req_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MeasureReply {
    pub req_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MeasureReply {
    pub fn from_measurement(req_id: String, m: &Measurement) -> Self {
        match *m {
            Measurement::Continuous { value } => MeasureReply {
                req_id,
                kind: Some("continuous".into()),
                value: Some(value),
                ..Default::default()
            },
            Measurement::Binary { label, confidence } => MeasureReply {
                req_id,
                kind: Some("binary".into()),
                label: Some(label),
                confidence: Some(confidence),
                ..Default::default()
            },
        }
    }

    pub fn error(req_id: String, message: impl Into<String>) -> Self {
        MeasureReply {
            req_id,
            error: Some(message.into()),
            ..Default::default()
        }
    }

    pub fn into_measurement(self, endpoint: &Endpoint) -> Result<Measurement, ProtocolError> {
        let malformed = |reason: &str, reply: &MeasureReply| ProtocolError::Malformed {
            endpoint: endpoint.to_string(),
            line: serde_json::to_string(reply).unwrap_or_default(),
            reason: reason.to_string(),
        };
        if let Some(message) = self.error {
            return Err(ProtocolError::Remote {
                endpoint: endpoint.to_string(),
                req_id: self.req_id,
                message,
            });
        }
        let m = match (self.kind.as_deref(), self.value, self.label) {
            (Some("continuous"), Some(v), None) => Measurement::continuous(v).ok(),
            (Some("binary"), None, Some(label)) => Measurement::binary(label, self.confidence.unwrap_or(1.0)).ok(),
            _ => return Err(malformed("expected kind with value or label", &self)),
        };
        m.ok_or_else(|| malformed("value or confidence outside [0, 1]", &self))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub req_id: String,
    pub conditioning: String,
    pub n: usize,
    pub temperature: f64,
    pub mode: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GenerateReply {
    pub req_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_no: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub done: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

static NEXT_REQ_ID: AtomicU64 = AtomicU64::new(1);

/// One live connection to a backend.
///
/// Lines are read on a helper thread so every receive can time out uniformly
/// for both sockets and child processes.
pub struct Connection {
    endpoint: Endpoint,
    label: String,
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    timeout: Duration,
    child: Option<Child>,
    socket: Option<TcpStream>,
}

impl Connection {
    pub fn open(endpoint: &Endpoint, timeout: Duration) -> Result<Self, ProtocolError> {
        let label = endpoint.to_string();
        let connect_err = |source| ProtocolError::Connect {
            endpoint: label.clone(),
            source,
        };
        let (tx, rx) = mpsc::channel();
        let conn = match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(connect_err)?;
                let read_half = stream.try_clone().map_err(connect_err)?;
                spawn_line_reader(read_half, tx);
                Connection {
                    endpoint: endpoint.clone(),
                    label: label.clone(),
                    writer: Box::new(stream.try_clone().map_err(connect_err)?),
                    lines: rx,
                    timeout,
                    child: None,
                    socket: Some(stream),
                }
            }
            Endpoint::Process { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(connect_err)?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                spawn_line_reader(stdout, tx);
                Connection {
                    endpoint: endpoint.clone(),
                    label: label.clone(),
                    writer: Box::new(stdin),
                    lines: rx,
                    timeout,
                    child: Some(child),
                    socket: None,
                }
            }
        };
        Ok(conn)
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn next_req_id(&self) -> String {
        NEXT_REQ_ID.fetch_add(1, Ordering::Relaxed).to_string()
    }

    pub fn send<T: Serialize>(&mut self, message: &T) -> Result<(), ProtocolError> {
        let mut line = serde_json::to_string(message).expect("protocol messages serialize");
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|source| self.io_error(source))
    }

    pub fn recv(&mut self) -> Result<String, ProtocolError> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(source)) => Err(self.io_error(source)),
            Err(RecvTimeoutError::Timeout) => Err(ProtocolError::Timeout {
                endpoint: self.label.clone(),
                after: self.timeout,
            }),
            Err(RecvTimeoutError::Disconnected) => Err(ProtocolError::Disconnected {
                endpoint: self.label.clone(),
            }),
        }
    }

    pub fn parse<T: DeserializeOwned>(&self, line: &str) -> Result<T, ProtocolError> {
        serde_json::from_str(line).map_err(|e| ProtocolError::Malformed {
            endpoint: self.label.clone(),
            line: line.to_string(),
            reason: e.to_string(),
        })
    }

    pub fn expect_req_id(&self, expected: &str, got: &str) -> Result<(), ProtocolError> {
        if expected == got {
            Ok(())
        } else {
            Err(ProtocolError::Malformed {
                endpoint: self.label.clone(),
                line: format!("req_id {got:?}"),
                reason: format!("expected req_id {expected:?}"),
            })
        }
    }

    fn io_error(&self, source: io::Error) -> ProtocolError {
        ProtocolError::Io {
            endpoint: self.label.clone(),
            source,
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(s) = &self.socket {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn spawn_line_reader<R: io::Read + Send + 'static>(source: R, tx: mpsc::Sender<io::Result<String>>) {
    thread::spawn(move || {
        let mut reader = BufReader::new(source);
        loop {
            let mut line = String::new();
            match reader.read_line(&mut line) {
                Ok(0) => return,
                Ok(_) => {
                    let trimmed = line.trim_end_matches(['\n', '\r']).to_string();
                    if trimmed.is_empty() {
                        continue;
                    }
                    if tx.send(Ok(trimmed)).is_err() {
                        return;
                    }
                }
                Err(e) => {
                    let _ = tx.send(Err(e));
                    return;
                }
            }
        }
    });
}

struct PoolState {
    idle: Vec<Connection>,
    open: usize,
}

/// Bounded pool of connections to one endpoint; at most `capacity` requests
/// are in flight at once, one per connection.
pub struct ConnectionPool {
    endpoint: Endpoint,
    capacity: usize,
    timeout: Duration,
    state: Mutex<PoolState>,
    available: Condvar,
}

impl ConnectionPool {
    pub fn new(endpoint: Endpoint, capacity: usize, timeout: Duration) -> Self {
        ConnectionPool {
            endpoint,
            capacity: capacity.max(1),
            timeout,
            state: Mutex::new(PoolState {
                idle: Vec::new(),
                open: 0,
            }),
            available: Condvar::new(),
        }
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Run `f` on a pooled connection. A connection that saw an error is
    /// dropped rather than reused, since its stream position is unknown.
    pub fn with_connection<R>(
        &self,
        f: impl FnOnce(&mut Connection) -> Result<R, ProtocolError>,
    ) -> Result<R, ProtocolError> {
        let mut conn = self.acquire()?;
        let result = f(&mut conn);
        let mut state = self.state.lock().unwrap();
        if result.is_ok() {
            state.idle.push(conn);
        } else {
            state.open -= 1;
            drop(conn);
        }
        self.available.notify_one();
        result
    }

    fn acquire(&self) -> Result<Connection, ProtocolError> {
        let mut state = self.state.lock().unwrap();
        loop {
            if let Some(c) = state.idle.pop() {
                return Ok(c);
            }
            if state.open < self.capacity {
                state.open += 1;
                drop(state);
                return Connection::open(&self.endpoint, self.timeout).inspect_err(|_| {
                    self.state.lock().unwrap().open -= 1;
                    self.available.notify_one();
                });
            }
            state = self.available.wait(state).unwrap();
        }
    }
}

/// Server side of the protocol.
pub trait Backend: Send + Sync {
    fn measure(&self, text: &str) -> Result<Measurement, String>;
    /// Completions for one generate request, each with an optional log-probability.
    fn generate(&self, request: &GenerateRequest) -> Result<Vec<(String, Option<f64>)>, String>;
}

/// Test backend: generation returns canned replies (or echoes the
/// conditioning when none are configured); measurement uses the builtin lexicon.
#[derive(Debug, Clone)]
pub struct EchoBackend {
    canned: Vec<String>,
    log_probs: bool,
    lexicon: LexiconMeasurer,
}

impl EchoBackend {
    pub fn new(canned: Vec<String>, log_probs: bool) -> Self {
        EchoBackend {
            canned,
            log_probs,
            lexicon: LexiconMeasurer::builtin(),
        }
    }
}

impl Default for EchoBackend {
    fn default() -> Self {
        EchoBackend::new(Vec::new(), false)
    }
}

impl Backend for EchoBackend {
    fn measure(&self, text: &str) -> Result<Measurement, String> {
        self.lexicon.measure(text).map_err(|e| e.to_string())
    }

    fn generate(&self, request: &GenerateRequest) -> Result<Vec<(String, Option<f64>)>, String> {
        Ok((0..request.n)
            .map(|k| {
                let text = if self.canned.is_empty() {
                    request.conditioning.clone()
                } else {
                    self.canned[k % self.canned.len()].clone()
                };
                // Earlier replies are reported as more probable.
                let lp = self.log_probs.then_some(-(k as f64));
                (text, lp)
            })
            .collect())
    }
}

fn write_line<W: Write, T: Serialize>(out: &mut W, message: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *out, message)?;
    out.write_all(b"\n")?;
    out.flush()
}

/// Answer requests from `input` until end of stream. Bad requests get error
/// replies; only I/O failures end the loop early.
pub fn serve_lines<R: BufRead, W: Write>(input: R, mut output: W, backend: &dyn Backend) -> io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                write_line(
                    &mut output,
                    &MeasureReply::error(String::new(), format!("bad json: {e}")),
                )?;
                continue;
            }
        };
        let req_id = value
            .get("req_id")
            .map(|v| match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .unwrap_or_default();
        if value.get("conditioning").is_some() {
            let request: GenerateRequest = match serde_json::from_value(value) {
                Ok(r) => r,
                Err(e) => {
                    write_line(&mut output, &gen_error(req_id, e.to_string()))?;
                    continue;
                }
            };
            match backend.generate(&request) {
                Ok(outputs) => {
                    for (seq_no, (text, log_prob)) in outputs.into_iter().enumerate() {
                        write_line(
                            &mut output,
                            &GenerateReply {
                                req_id: request.req_id.clone(),
                                seq_no: Some(seq_no),
                                text: Some(text),
                                log_prob,
                                ..Default::default()
                            },
                        )?;
                    }
                    write_line(
                        &mut output,
                        &GenerateReply {
                            req_id: request.req_id,
                            done: Some(true),
                            ..Default::default()
                        },
                    )?;
                }
                Err(message) => write_line(&mut output, &gen_error(request.req_id, message))?,
            }
        } else if value.get("text").is_some() {
            let request: MeasureRequest = match serde_json::from_value(value) {
                Ok(r) => r,
                Err(e) => {
                    write_line(&mut output, &MeasureReply::error(req_id, e.to_string()))?;
                    continue;
                }
            };
            let reply = match backend.measure(&request.text) {
                Ok(m) => MeasureReply::from_measurement(request.req_id, &m),
                Err(message) => MeasureReply::error(request.req_id, message),
            };
            write_line(&mut output, &reply)?;
        } else {
            write_line(
                &mut output,
                &MeasureReply::error(req_id, "request has neither text nor conditioning"),
            )?;
        }
    }
    Ok(())
}

fn gen_error(req_id: String, message: String) -> GenerateReply {
    GenerateReply {
        req_id,
        error: Some(message),
        ..Default::default()
    }
}

/// Serve every accepted connection on its own thread. Runs until the
/// listener fails.
pub fn serve_tcp(listener: TcpListener, backend: Arc<dyn Backend>) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let backend = Arc::clone(&backend);
        thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(r) => BufReader::new(r),
                Err(e) => {
                    log::warn!("echo backend: {e}");
                    return;
                }
            };
            if let Err(e) = serve_lines(reader, &stream, backend.as_ref()) {
                log::debug!("echo backend connection ended: {e}");
            }
        });
    }
    Ok(())
}
