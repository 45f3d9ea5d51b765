use std::time::Duration;

use super::{Candidate, CandidateSet, DecodeError, GenerationRequest, Generator};
use crate::protocol::{Connection, ConnectionPool, Endpoint, GenerateReply, GenerateRequest, ProtocolError};

fn request_samples(
    conn: &mut Connection,
    conditioning: &str,
    n: usize,
    temperature: f64,
) -> Result<Vec<Candidate>, ProtocolError> {
    let req_id = conn.next_req_id();
    conn.send(&GenerateRequest {
        req_id: req_id.clone(),
        conditioning: conditioning.to_string(),
        n,
        temperature,
        mode: "sample".to_string(),
    })?;
    let mut out = Vec::with_capacity(n);
    loop {
        let line = conn.recv()?;
        let reply: GenerateReply = conn.parse(&line)?;
        conn.expect_req_id(&req_id, &reply.req_id)?;
        let malformed = |reason: String| ProtocolError::Malformed {
            endpoint: conn.endpoint().to_string(),
            line: line.clone(),
            reason,
        };
        if let Some(message) = reply.error {
            return Err(ProtocolError::Remote {
                endpoint: conn.endpoint().to_string(),
                req_id,
                message,
            });
        }
        if reply.done == Some(true) {
            if out.len() != n {
                return Err(malformed(format!("requested {n} completions, got {}", out.len())));
            }
            return Ok(out);
        }
        match (reply.seq_no, reply.text) {
            (Some(seq), Some(text)) if seq == out.len() => {
                if reply.log_prob.is_some_and(|lp| !lp.is_finite()) {
                    return Err(malformed("log_prob is not finite".into()));
                }
                out.push(Candidate::new(text, reply.log_prob));
            }
            (Some(seq), Some(_)) => return Err(malformed(format!("expected seq_no {}, got {seq}", out.len()))),
            _ => return Err(malformed("reply needs seq_no and text, or done".into())),
        }
    }
}

/// Ask an external generator for `n` sampled completions.
///
/// Opens a dedicated connection for the call. A stream that ends before its
/// terminator yields a retryable error and no candidates.
pub fn sample_external(
    endpoint: &Endpoint,
    conditioning: &str,
    n: usize,
    temperature: f64,
    timeout: Duration,
) -> Result<CandidateSet, DecodeError> {
    if n == 0 {
        return Err(DecodeError::Config("n must be positive".into()));
    }
    let mut conn = Connection::open(endpoint, timeout)?;
    let candidates = request_samples(&mut conn, conditioning, n, temperature)?;
    Ok(CandidateSet::new("", candidates))
}

/// [`Generator`] over a pooled external backend.
pub struct ExternalGenerator {
    pool: ConnectionPool,
    n: usize,
    temperature: f64,
}

impl ExternalGenerator {
    pub fn new(endpoint: Endpoint, n: usize, temperature: f64, in_flight: usize, timeout: Duration) -> Self {
        ExternalGenerator {
            pool: ConnectionPool::new(endpoint, in_flight, timeout),
            n,
            temperature,
        }
    }
}

impl Generator for ExternalGenerator {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<CandidateSet, DecodeError> {
        if self.n == 0 {
            return Err(DecodeError::Config("n must be positive".into()));
        }
        let candidates = self
            .pool
            .with_connection(|conn| request_samples(conn, request.conditioning, self.n, self.temperature))?;
        Ok(CandidateSet::new(request.instance.id.clone(), candidates))
    }
}
