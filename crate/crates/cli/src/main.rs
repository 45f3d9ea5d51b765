//! `synth`: run synthesis experiments, emit plot tables, or serve the echo
//! test backend.
//!
//! Exit codes: 0 on success, 1 on configuration errors, 2 when the run failed
//! or finished with per-instance errors (partial results are kept on disk).

use std::fs;
use std::io::{self, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use toml::{Table, Value};

use synthesis_core::protocol::{serve_lines, serve_tcp, EchoBackend};
use synthesis_core::runner::{
    emit_plot_data, load_records, run_experiment, ExperimentConfig, PlotKind, StudyKind, RECORDS_FILE,
};

#[derive(Parser)]
#[command(
    name = "synth",
    version,
    about = "Measure and improve synthesis in multi-document summarization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Measurement-model calibration: references, input aggregates and system outputs vs gold.
    Calibrate(RunArgs),
    /// Input-order permutation study.
    Permute(RunArgs),
    /// Input-composition study.
    Compose(RunArgs),
    /// Significance-flip study (trials schema).
    Flip(RunArgs),
    /// Generate diverse candidates and select (or abstain).
    Improve(RunArgs),
    /// Write the table behind one figure from a records file.
    Plotdata(PlotArgs),
    /// Serve the echo test backend over stdio or TCP.
    ServeEcho(EchoArgs),
}

/// Every flag overrides the matching field of the config file.
#[derive(Args, Default)]
struct RunArgs {
    /// TOML experiment config; the study kind comes from the subcommand.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// movies or trials
    #[arg(long)]
    schema: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<u64>,
    /// toy or external
    #[arg(long)]
    generator: Option<String>,
    /// tcp://host:port or exec:program args
    #[arg(long)]
    generator_endpoint: Option<String>,
    /// Completions requested from an external generator.
    #[arg(long)]
    samples: Option<u64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Toy n-gram order (1 to 3).
    #[arg(long)]
    order: Option<u64>,
    #[arg(long)]
    smoothing: Option<f64>,
    #[arg(long)]
    train_corpus: Option<PathBuf>,
    /// builtin_lexicon, builtin_keyword or external
    #[arg(long)]
    measurer: Option<String>,
    #[arg(long)]
    measurer_endpoint: Option<String>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// beam, diverse_beam or constrained_beam
    #[arg(long)]
    decode: Option<String>,
    #[arg(long)]
    beam_width: Option<u64>,
    #[arg(long)]
    groups: Option<u64>,
    #[arg(long)]
    beams_per_group: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// nearest_continuous, agree_or_abstain, oracle_nearest or oracle_agree
    #[arg(long)]
    policy: Option<String>,
    /// gold or reference_measure
    #[arg(long)]
    oracle_target: Option<String>,
    #[arg(long)]
    abstain_delta: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    n_permutations: Option<u64>,
    #[arg(long)]
    separator: Option<String>,
    #[arg(long)]
    max_length: Option<u64>,
    /// Comma-separated composition schedule, e.g. 0.25,0.5,1.0
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    /// weakest_first or seeded:N
    #[arg(long)]
    removal: Option<String>,
}

#[derive(Args)]
struct PlotArgs {
    /// records.jsonl, or the output directory containing it.
    #[arg(long)]
    records: PathBuf,
    /// spread_hist, entropy_hist, sensitivity_scatter or candidate_range_hist
    #[arg(long)]
    figure: String,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EchoArgs {
    /// Listen on this address instead of serving stdin/stdout.
    #[arg(long)]
    tcp: Option<String>,
    /// Canned completion, repeatable; without any, the conditioning is echoed.
    #[arg(long)]
    canned: Vec<String>,
    /// Attach log-probabilities 0, -1, -2, ... to completions.
    #[arg(long)]
    log_probs: bool,
}

/// Errors that map to exit code 1.
#[derive(Debug)]
struct ConfigFailure(anyhow::Error);

impl std::fmt::Display for ConfigFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigFailure {}

fn config_err(e: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(ConfigFailure(e))
}

fn sub_table<'a>(table: &'a mut Table, key: &str) -> Result<&'a mut Table> {
    table
        .entry(key.to_string())
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .ok_or_else(|| anyhow!("config key {key:?} must be a table"))
}

fn set<V: Into<Value>>(table: &mut Table, key: &str, value: Option<V>) {
    if let Some(v) = value {
        table.insert(key.to_string(), v.into());
    }
}

fn path_value(p: Option<&PathBuf>) -> Option<String> {
    p.map(|p| p.to_string_lossy().into_owned())
}

fn int(v: Option<u64>) -> Option<i64> {
    v.map(|x| x as i64)
}

impl RunArgs {
    /// Config file (if any) with flags layered on top.
    fn to_config(&self, study: StudyKind) -> Result<ExperimentConfig> {
        let mut table = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                text.parse::<Table>()
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => Table::new(),
        };
        table.insert("study".into(), study.as_str().into());

        if self.corpus.is_some() || self.schema.is_some() {
            let corpus = sub_table(&mut table, "corpus")?;
            set(corpus, "path", path_value(self.corpus.as_ref()));
            set(corpus, "schema", self.schema.clone());
        }
        set(&mut table, "output_dir", path_value(self.output_dir.as_ref()));
        set(&mut table, "seed", int(self.seed));
        set(&mut table, "workers", int(self.workers));
        set(&mut table, "threshold", self.threshold);
        set(&mut table, "n_permutations", int(self.n_permutations));
        if let Some(fr) = &self.fractions {
            table.insert("fractions".into(), Value::Array(fr.iter().map(|&f| f.into()).collect()));
        }
        if let Some(r) = &self.removal {
            let value: Value = match r.split_once(':') {
                Some(("seeded", seed)) => {
                    let seed: i64 = seed.parse().with_context(|| format!("bad removal seed {seed:?}"))?;
                    let mut t = Table::new();
                    t.insert("seeded".into(), seed.into());
                    Value::Table(t)
                }
                _ => r.as_str().into(),
            };
            table.insert("removal".into(), value);
        }
        if self.separator.is_some() || self.max_length.is_some() {
            let lin = sub_table(&mut table, "linearize")?;
            set(lin, "separator", self.separator.clone());
            set(lin, "max_length", int(self.max_length));
        }

        let generator_flags = self.generator.is_some()
            || self.generator_endpoint.is_some()
            || self.samples.is_some()
            || self.temperature.is_some()
            || self.order.is_some()
            || self.smoothing.is_some()
            || self.train_corpus.is_some();
        if generator_flags {
            let g = sub_table(&mut table, "generator")?;
            set(g, "kind", self.generator.clone());
            if self.generator_endpoint.is_some() && !g.contains_key("kind") {
                g.insert("kind".into(), "external".into());
            }
            g.entry("kind").or_insert_with(|| "toy".into());
            set(g, "endpoint", self.generator_endpoint.clone());
            set(g, "n", int(self.samples));
            set(g, "temperature", self.temperature);
            set(g, "order", int(self.order));
            set(g, "smoothing", self.smoothing);
            set(g, "train_corpus", path_value(self.train_corpus.as_ref()));
        }

        if self.measurer.is_some() || self.measurer_endpoint.is_some() || self.lexicon.is_some() {
            let m = sub_table(&mut table, "measurer")?;
            set(m, "kind", self.measurer.clone());
            if !m.contains_key("kind") {
                let kind = if self.measurer_endpoint.is_some() {
                    "external"
                } else {
                    "builtin_lexicon"
                };
                m.insert("kind".into(), kind.into());
            }
            set(m, "endpoint", self.measurer_endpoint.clone());
            set(m, "lexicon_path", path_value(self.lexicon.as_ref()));
        }

        let decode_flags = self.decode.is_some()
            || self.beam_width.is_some()
            || self.groups.is_some()
            || self.beams_per_group.is_some()
            || self.lambda.is_some()
            || self.max_tokens.is_some()
            || self.epsilon.is_some();
        if decode_flags {
            let d = sub_table(&mut table, "decode")?;
            set(d, "mode", self.decode.clone());
            d.entry("mode").or_insert_with(|| "diverse_beam".into());
            set(d, "beam_width", int(self.beam_width));
            set(d, "groups", int(self.groups));
            set(d, "beams_per_group", int(self.beams_per_group));
            set(d, "diversity_lambda", self.lambda);
            set(d, "max_tokens", int(self.max_tokens));
            set(d, "epsilon", self.epsilon);
        }

        let policy_flags = self.policy.is_some() || self.oracle_target.is_some() || self.abstain_delta.is_some();
        if policy_flags {
            let p = sub_table(&mut table, "policy")?;
            set(p, "kind", self.policy.clone());
            set(p, "oracle_target", self.oracle_target.clone());
            set(p, "abstain_delta", self.abstain_delta);
        }

        // Fill schema-dependent defaults into partially specified sections.
        let schema = table
            .get("corpus")
            .and_then(|c| c.get("schema"))
            .and_then(Value::as_str)
            .map(str::to_string);
        let threshold = table.get("threshold").cloned();
        if let Some(d) = table.get_mut("decode").and_then(Value::as_table_mut) {
            if !d.contains_key("max_tokens") {
                let default = if schema.as_deref() == Some("trials") { 256 } else { 64 };
                d.insert("max_tokens".into(), Value::Integer(default));
            }
        }
        if let Some(p) = table.get_mut("policy").and_then(Value::as_table_mut) {
            if !p.contains_key("kind") {
                let kind = if schema.as_deref() == Some("trials") {
                    "agree_or_abstain"
                } else {
                    "nearest_continuous"
                };
                p.insert("kind".into(), kind.into());
            }
            if let Some(t) = threshold {
                p.entry("threshold").or_insert(t);
            }
        }

        let mut config: ExperimentConfig = Value::Table(table).try_into().context("invalid experiment config")?;
        config.apply_env_overrides(|k| std::env::var(k).ok());
        Ok(config)
    }
}

fn run_study(study: StudyKind, args: &RunArgs) -> Result<ExitCode> {
    let config = args.to_config(study).map_err(config_err)?;
    config.validate().map_err(|e| config_err(e.into()))?;
    info!(
        "{} study on {} ({} workers)",
        study.as_str(),
        config.corpus.path.display(),
        config.workers
    );
    let record = run_experiment(&config).map_err(|e| {
        if e.is_config() {
            config_err(e.into())
        } else {
            anyhow::Error::new(e)
        }
    })?;
    if let Some(line) = record.aggregate_json() {
        println!("{line}");
    }
    let failed = record.failed_instances();
    let records = config.output_dir.join(RECORDS_FILE);
    if failed > 0 {
        eprintln!(
            "{failed} of {} instances failed; see {}",
            record.instances.len(),
            records.display()
        );
        return Ok(ExitCode::from(2));
    }
    info!("records written to {}", records.display());
    Ok(ExitCode::SUCCESS)
}

fn plot(args: &PlotArgs) -> Result<ExitCode> {
    let figure: PlotKind = args.figure.parse().map_err(|e: String| config_err(anyhow!(e)))?;
    let path = if args.records.is_dir() {
        args.records.join(RECORDS_FILE)
    } else {
        args.records.clone()
    };
    let record = load_records(&path)?;
    let table = emit_plot_data(&record, figure).map_err(|e| config_err(e.into()))?;
    let tsv = table.to_tsv();
    match &args.out {
        Some(out) => write_file(out, &tsv)?,
        None => io::stdout().write_all(tsv.as_bytes())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn serve_echo(args: &EchoArgs) -> Result<ExitCode> {
    let backend = EchoBackend::new(args.canned.clone(), args.log_probs);
    match &args.tcp {
        Some(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            // Tests read the bound address from this line.
            println!("listening on {}", listener.local_addr()?);
            io::stdout().flush()?;
            serve_tcp(listener, Arc::new(backend))?;
        }
        None => {
            let stdin = io::stdin();
            serve_lines(stdin.lock(), io::stdout().lock(), &backend)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Calibrate(a) => run_study(StudyKind::Calibration, a),
        Command::Permute(a) => run_study(StudyKind::Permutation, a),
        Command::Compose(a) => run_study(StudyKind::Composition, a),
        Command::Flip(a) => run_study(StudyKind::Flip, a),
        Command::Improve(a) => run_study(StudyKind::Improve, a),
        Command::Plotdata(a) => plot(a),
        Command::ServeEcho(a) => serve_echo(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigFailure>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
