//! Experiment orchestration.
//!
//! An [`ExperimentConfig`] names a corpus, the generator and measurer to use,
//! and one study kind. [`run_experiment`] processes instances on a bounded
//! worker pool and streams one JSON line per instance to
//! `<output_dir>/records.jsonl` in instance-id order, followed by an aggregate
//! metrics line and a timing line. Lines are flushed as written, so an
//! interrupted run leaves every completed instance readable.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::AggregateTarget;
use crate::corpus::{load_corpus, Corpus, CorpusError, Instance, LinearizeOptions, Schema, Task};
use crate::decode::{
    train_toy_scorer, Candidate, DecodeConfig, DecodeMode, ExternalGenerator, Generator, ScorerGenerator,
};
use crate::measure::{Label, Measurement, Measurer, MeasurerKind, MeasurerSpec};
use crate::metrics::{self, histogram, macro_f1_accuracy, PairedSeries};
use crate::perturb::{
    self, construct_significance_flip, permutation_seeds, run_composition_study, run_permutation_study,
    CompositionOptions, CompositionStudy, FlipConstruction, PermutationOptions, PermutationStudy, PerturbError,
    RemovalOrder, StepError,
};
use crate::protocol::Endpoint;
use crate::select::{cautious_summarize, estimate_target, PolicyKind, SelectionOutcome, SelectionPolicy};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const RECORDS_FILE: &str = "records.jsonl";

/// Environment variable replacing an external generator's endpoint.
pub const GENERATOR_ENDPOINT_ENV: &str = "SYNTH_GENERATOR_ENDPOINT";
/// Environment variable replacing an external measurer's endpoint.
pub const MEASURER_ENDPOINT_ENV: &str = "SYNTH_MEASURER_ENDPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Calibration,
    Permutation,
    Composition,
    Flip,
    Improve,
}

impl StudyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StudyKind::Calibration => "calibration",
            StudyKind::Permutation => "permutation",
            StudyKind::Composition => "composition",
            StudyKind::Flip => "flip",
            StudyKind::Improve => "improve",
        }
    }
}

fn default_order() -> usize {
    2
}
fn default_smoothing() -> f64 {
    0.1
}
fn default_samples() -> usize {
    5
}
fn default_temperature() -> f64 {
    1.0
}
fn default_in_flight() -> usize {
    4
}
fn default_timeout_ms() -> u64 {
    30_000
}

/// Where candidates come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    /// Count-based n-gram scorer decoded with the configured beam search.
    Toy {
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default = "default_smoothing")]
        smoothing: f64,
        /// Training corpus (same schema); defaults to the evaluation corpus.
        #[serde(default)]
        train_corpus: Option<PathBuf>,
    },
    /// Sampling backend speaking the generator line protocol.
    External {
        endpoint: String,
        #[serde(default = "default_samples")]
        n: usize,
        #[serde(default = "default_temperature")]
        temperature: f64,
        #[serde(default = "default_in_flight")]
        in_flight: usize,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec::Toy {
            order: default_order(),
            smoothing: default_smoothing(),
            train_corpus: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub path: PathBuf,
    pub schema: Schema,
}

fn default_workers() -> usize {
    1
}
fn default_permutations() -> usize {
    perturb::DEFAULT_PERMUTATIONS
}
fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub study: StudyKind,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub generator: GeneratorSpec,
    /// Defaults to the lexicon measurer for movies and the keyword measurer
    /// for trials.
    #[serde(default)]
    pub measurer: Option<MeasurerSpec>,
    /// Defaults to diverse beam search with 5 groups of 1 beam, λ = 0.5, and
    /// 64 (movies) or 256 (trials) tokens.
    #[serde(default)]
    pub decode: Option<DecodeConfig>,
    /// Defaults to nearest selection (movies) or agree-or-abstain (trials).
    #[serde(default)]
    pub policy: Option<SelectionPolicy>,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub linearize: LinearizeOptions,
    #[serde(default = "default_permutations")]
    pub n_permutations: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Composition schedule; defaults to 10%, 20%, ..., 100%.
    #[serde(default)]
    pub fractions: Option<Vec<f64>>,
    #[serde(default)]
    pub removal: RemovalOrder,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

impl ExperimentConfig {
    pub fn new(study: StudyKind, corpus: impl Into<PathBuf>, schema: Schema, output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            study,
            corpus: CorpusSpec {
                path: corpus.into(),
                schema,
            },
            generator: GeneratorSpec::default(),
            measurer: None,
            decode: None,
            policy: None,
            seed: 0,
            output_dir: output_dir.into(),
            workers: 1,
            linearize: LinearizeOptions::default(),
            n_permutations: perturb::DEFAULT_PERMUTATIONS,
            threshold: default_threshold(),
            fractions: None,
            removal: RemovalOrder::default(),
        }
    }

    pub fn task(&self) -> Task {
        self.corpus.schema.task()
    }

    pub fn measurer_spec(&self) -> MeasurerSpec {
        self.measurer.clone().unwrap_or_else(|| match self.corpus.schema {
            Schema::Movies => MeasurerSpec::lexicon(),
            Schema::Trials => MeasurerSpec::keyword(),
        })
    }

    pub fn decode_config(&self) -> DecodeConfig {
        self.decode.clone().unwrap_or_else(|| DecodeConfig {
            max_tokens: match self.corpus.schema {
                Schema::Movies => 64,
                Schema::Trials => 256,
            },
            ..DecodeConfig::default()
        })
    }

    pub fn selection_policy(&self) -> SelectionPolicy {
        self.policy.unwrap_or_else(|| SelectionPolicy {
            threshold: self.threshold,
            ..SelectionPolicy::default_for(self.task(), false)
        })
    }

    /// Replace external endpoints from the environment (see
    /// [`GENERATOR_ENDPOINT_ENV`] and [`MEASURER_ENDPOINT_ENV`]).
    pub fn apply_env_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let (GeneratorSpec::External { endpoint, .. }, Some(ep)) =
            (&mut self.generator, lookup(GENERATOR_ENDPOINT_ENV))
        {
            *endpoint = ep;
        }
        if let Some(ep) = lookup(MEASURER_ENDPOINT_ENV) {
            let mut spec = self.measurer_spec();
            if spec.kind == MeasurerKind::External {
                spec.endpoint = Some(ep);
                self.measurer = Some(spec);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(invalid("workers must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(invalid(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.linearize.separator.split_whitespace().next().is_none() {
            return Err(invalid("separator must contain a non-whitespace character"));
        }
        let measurer = self.measurer_spec();
        measurer.validate().map_err(|e| invalid(format!("measurer: {e}")))?;
        if let Some(ep) = &measurer.endpoint {
            ep.parse::<Endpoint>().map_err(|e| invalid(format!("measurer: {e}")))?;
        }
        let decode = self.decode_config();
        decode.validate().map_err(|e| invalid(e.to_string()))?;
        match &self.generator {
            GeneratorSpec::Toy { order, smoothing, .. } => {
                if !(1..=3).contains(order) {
                    return Err(invalid(format!("toy generator order must be 1, 2 or 3, got {order}")));
                }
                if !(*smoothing > 0.0) {
                    return Err(invalid("toy generator smoothing must be positive"));
                }
            }
            GeneratorSpec::External { endpoint, n, .. } => {
                endpoint
                    .parse::<Endpoint>()
                    .map_err(|e| invalid(format!("generator: {e}")))?;
                if *n == 0 {
                    return Err(invalid("generator n must be positive"));
                }
                if decode.mode == DecodeMode::ConstrainedBeam {
                    return Err(invalid("constrained decoding needs the toy generator"));
                }
            }
        }
        let policy = self.selection_policy();
        policy.validate().map_err(|e| invalid(e.to_string()))?;
        let task = self.task();
        match self.study {
            StudyKind::Flip if self.corpus.schema != Schema::Trials => {
                return Err(invalid("flip study requires the trials schema"))
            }
            StudyKind::Permutation if self.n_permutations < 2 => {
                return Err(invalid("permutation study needs n_permutations >= 2"))
            }
            StudyKind::Composition => {
                if let Some(fr) = &self.fractions {
                    if fr.is_empty() || fr.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
                        return Err(invalid("composition fractions must be non-empty and lie in (0, 1]"));
                    }
                }
            }
            StudyKind::Improve if policy.kind.is_nearest() && task == Task::Binary => {
                return Err(invalid("nearest selection needs a continuous task"))
            }
            _ => {}
        }
        if policy.kind.is_nearest() && measurer.kind == MeasurerKind::BuiltinKeyword {
            return Err(invalid("nearest selection needs a continuous measurer"));
        }
        Ok(())
    }
}

/// Failure of one instance: where in the pipeline and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceError {
    pub stage: String,
    pub cause: String,
    #[serde(default)]
    pub retryable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub document_measurements: Vec<Measurement>,
    /// Aggregate of the document measurements.
    pub input_aggregate: AggregateTarget,
    pub reference_measure: Measurement,
    /// Top candidate of the configured generator.
    pub summary: String,
    pub summary_measure: Measurement,
    pub gold: f64,
    pub gold_label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipResult {
    pub construction: FlipConstruction,
    pub before_summary: String,
    pub before_measure: Measurement,
    pub after_summary: String,
    pub after_measure: Measurement,
    /// The generated summary's label changed along with the meta-analysis.
    pub output_flipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImproveResult {
    pub gold: f64,
    pub gold_label: Label,
    /// First candidate, what the generator would emit without selection.
    pub baseline: Candidate,
    pub selection: SelectionOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum InstanceOutcome {
    Calibration(CalibrationResult),
    Permutation(PermutationStudy),
    Composition(CompositionStudy),
    Flip(FlipResult),
    Improve(ImproveResult),
    /// The instance does not qualify for the study.
    Skipped {
        reason: String,
    },
    Error(InstanceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: String,
    pub outcome: InstanceOutcome,
}

impl InstanceRecord {
    pub fn error(&self) -> Option<&InstanceError> {
        match &self.outcome {
            InstanceOutcome::Error(e) => Some(e),
            _ => None,
        }
    }
}

/// Corpus-level results. Contains nothing run-dependent, so identical
/// configurations produce identical blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub study: StudyKind,
    pub instances: usize,
    pub completed: usize,
    pub skipped: usize,
    pub errors: usize,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub elapsed_ms: u64,
    pub workers: usize,
}

/// One line of `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RecordLine {
    Config {
        engine_version: String,
        config: ExperimentConfig,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        corpus_errors: Vec<String>,
    },
    Instance(InstanceRecord),
    Aggregate(AggregateMetrics),
    Timing(Timing),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub engine_version: String,
    pub config: ExperimentConfig,
    #[serde(default)]
    pub corpus_errors: Vec<String>,
    pub instances: Vec<InstanceRecord>,
    /// Absent when the run was interrupted.
    pub aggregate: Option<AggregateMetrics>,
    pub timing: Option<Timing>,
}

impl ExperimentRecord {
    pub fn failed_instances(&self) -> usize {
        self.instances.iter().filter(|r| r.error().is_some()).count()
    }

    /// The aggregate line exactly as written to the records file.
    pub fn aggregate_json(&self) -> Option<String> {
        self.aggregate
            .as_ref()
            .map(|a| serde_json::to_string(&RecordLine::Aggregate(a.clone())).expect("serializable"))
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error("corpus: {0}")]
    Corpus(#[from] CorpusError),
    #[error("{context}: {message}")]
    Setup { context: &'static str, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl RunError {
    pub fn is_config(&self) -> bool {
        matches!(self, RunError::Config(_))
    }
}

struct Components {
    measurer: Arc<dyn Measurer>,
    generator: Arc<dyn Generator>,
}

fn build_components(config: &ExperimentConfig, corpus: &Corpus) -> Result<Components, RunError> {
    let measurer = config.measurer_spec().build().map_err(|e| RunError::Setup {
        context: "measurer",
        message: e.to_string(),
    })?;
    let decode = config.decode_config();
    let generator: Arc<dyn Generator> = match &config.generator {
        GeneratorSpec::Toy {
            order,
            smoothing,
            train_corpus,
        } => {
            let trained = match train_corpus {
                Some(path) => {
                    let loaded = load_corpus(path, config.corpus.schema)?;
                    train_toy_scorer(&loaded.corpus, *order, *smoothing)
                }
                None => train_toy_scorer(corpus, *order, *smoothing),
            }
            .map_err(|e| RunError::Setup {
                context: "toy generator",
                message: e.to_string(),
            })?;
            let scorer = trained.with_separator(config.linearize.separator.clone());
            let g = ScorerGenerator::new(Arc::new(scorer), decode).map_err(|e| RunError::Setup {
                context: "toy generator",
                message: e.to_string(),
            })?;
            Arc::new(g.with_measurer(measurer.clone()))
        }
        GeneratorSpec::External {
            endpoint,
            n,
            temperature,
            in_flight,
            timeout_ms,
        } => {
            let ep: Endpoint = endpoint
                .parse()
                .map_err(|e: crate::protocol::ProtocolError| RunError::Setup {
                    context: "generator",
                    message: e.to_string(),
                })?;
            Arc::new(ExternalGenerator::new(
                ep,
                *n,
                *temperature,
                (*in_flight).max(1),
                Duration::from_millis(*timeout_ms),
            ))
        }
    };
    Ok(Components { measurer, generator })
}

fn step_error(e: StepError) -> InstanceError {
    let (stage, retryable) = match &e {
        StepError::Linearize(_) => ("linearize", false),
        StepError::Decode(d) => ("decode", d.is_retryable()),
        StepError::EmptyCandidateSet => ("decode", false),
        StepError::Measure(m) => ("measure", m.is_retryable()),
        StepError::Aggregate(_) => ("aggregate", false),
    };
    InstanceError {
        stage: stage.into(),
        cause: e.to_string(),
        retryable,
    }
}

fn perturb_error(stage: &str, e: PerturbError) -> InstanceError {
    InstanceError {
        stage: stage.into(),
        retryable: e.is_retryable(),
        cause: e.to_string(),
    }
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    components: Components,
    policy: SelectionPolicy,
    seeds: Vec<u64>,
}

impl Context<'_> {
    fn process(&self, index: usize, instance: &Instance) -> InstanceOutcome {
        let result = match self.config.study {
            StudyKind::Calibration => self.calibrate(instance),
            StudyKind::Permutation => self.permute(index, instance),
            StudyKind::Composition => self.compose(instance),
            StudyKind::Flip => self.flip(instance),
            StudyKind::Improve => self.improve(instance),
        };
        result.unwrap_or_else(InstanceOutcome::Error)
    }

    fn decode_top(&self, instance: &Instance, target: Option<f64>) -> Result<(String, Measurement), InstanceError> {
        perturb::decode_top(
            instance,
            self.components.generator.as_ref(),
            self.components.measurer.as_ref(),
            &self.config.linearize,
            target,
        )
        .map_err(step_error)
    }

    fn calibrate(&self, instance: &Instance) -> Result<InstanceOutcome, InstanceError> {
        let measurer = self.components.measurer.as_ref();
        let texts: Vec<&str> = instance.documents.iter().map(|d| d.text.as_str()).collect();
        let document_measurements = measurer.measure_batch(&texts).map_err(|e| InstanceError {
            stage: "measure_documents".into(),
            retryable: e.is_retryable(),
            cause: e.to_string(),
        })?;
        let estimator = SelectionPolicy::default_for(instance.task, false);
        let input_aggregate = estimate_target(
            instance,
            &document_measurements,
            &SelectionPolicy {
                threshold: self.config.threshold,
                ..estimator
            },
            measurer,
        )
        .map_err(|e| InstanceError {
            stage: e.stage().to_string(),
            retryable: e.is_retryable(),
            cause: e.to_string(),
        })?;
        let reference_measure = measurer
            .measure(&instance.reference_summary)
            .map_err(|e| InstanceError {
                stage: "measure_reference".into(),
                retryable: e.is_retryable(),
                cause: e.to_string(),
            })?;
        let (summary, summary_measure) = self.decode_top(instance, Some(input_aggregate.value))?;
        Ok(InstanceOutcome::Calibration(CalibrationResult {
            document_measurements,
            input_aggregate,
            reference_measure,
            summary,
            summary_measure,
            gold: instance.gold_aggregate.value(),
            gold_label: instance.gold_aggregate.label(self.config.threshold),
        }))
    }

    fn permute(&self, index: usize, instance: &Instance) -> Result<InstanceOutcome, InstanceError> {
        let opts = PermutationOptions {
            n_permutations: self.config.n_permutations,
            seed: self.seeds[index],
            threshold: self.config.threshold,
            linearize: self.config.linearize.clone(),
            workers: 1,
        };
        run_permutation_study(
            instance,
            self.components.generator.as_ref(),
            self.components.measurer.as_ref(),
            &opts,
        )
        .map(InstanceOutcome::Permutation)
        .map_err(|e| perturb_error("permutation", e))
    }

    fn compose(&self, instance: &Instance) -> Result<InstanceOutcome, InstanceError> {
        let mut opts = CompositionOptions {
            threshold: self.config.threshold,
            removal: self.config.removal,
            linearize: self.config.linearize.clone(),
            ..CompositionOptions::default()
        };
        if let Some(fr) = &self.config.fractions {
            opts.fractions = fr.clone();
        }
        match run_composition_study(
            instance,
            self.components.generator.as_ref(),
            self.components.measurer.as_ref(),
            &opts,
        ) {
            Ok(study) => Ok(InstanceOutcome::Composition(study)),
            Err(e @ PerturbError::NotMixed { .. }) => Ok(InstanceOutcome::Skipped { reason: e.to_string() }),
            Err(e) => Err(perturb_error("composition", e)),
        }
    }

    fn flip(&self, instance: &Instance) -> Result<InstanceOutcome, InstanceError> {
        let construction = match construct_significance_flip(instance) {
            Ok(c) => c,
            Err(e @ PerturbError::NotFlippable) => return Ok(InstanceOutcome::Skipped { reason: e.to_string() }),
            Err(e) => return Err(perturb_error("flip", e)),
        };
        let flipped = construction.apply(instance);
        let (before_summary, before_measure) = self.decode_top(instance, None)?;
        let (after_summary, after_measure) = self.decode_top(&flipped, None)?;
        let t = self.config.threshold;
        let output_flipped = before_measure.label_at(t) != after_measure.label_at(t);
        Ok(InstanceOutcome::Flip(FlipResult {
            construction,
            before_summary,
            before_measure,
            after_summary,
            after_measure,
            output_flipped,
        }))
    }

    fn improve(&self, instance: &Instance) -> Result<InstanceOutcome, InstanceError> {
        let selection = cautious_summarize(
            instance,
            self.components.generator.as_ref(),
            self.components.measurer.as_ref(),
            &self.policy,
            &self.config.linearize,
        )
        .map_err(|e| InstanceError {
            stage: e.stage().to_string(),
            retryable: e.is_retryable(),
            cause: e.to_string(),
        })?;
        let baseline = selection.provenance.candidates[0].clone();
        Ok(InstanceOutcome::Improve(ImproveResult {
            gold: instance.gold_aggregate.value(),
            gold_label: instance.gold_aggregate.label(self.policy.threshold),
            baseline,
            selection,
        }))
    }
}

struct RecordWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RecordWriter {
    fn create(path: PathBuf) -> Result<Self, RunError> {
        let file = File::create(&path).map_err(|source| RunError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(RecordWriter {
            path,
            out: BufWriter::new(file),
        })
    }

    fn write(&mut self, line: &RecordLine) -> Result<(), RunError> {
        let json = serde_json::to_string(line).expect("records serialize");
        writeln!(self.out, "{json}")
            .and_then(|_| self.out.flush())
            .map_err(|source| RunError::Io {
                path: self.path.clone(),
                source,
            })
    }
}

/// Load the corpus, run the configured study over every instance and stream
/// records to `<output_dir>/records.jsonl`.
///
/// Instance failures are recorded, not returned; only configuration, corpus
/// and I/O problems fail the run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentRecord, RunError> {
    config.validate()?;
    let started = Instant::now();
    let loaded = load_corpus(&config.corpus.path, config.corpus.schema)?;
    let corpus_errors: Vec<String> = loaded.errors.iter().map(|e| e.to_string()).collect();
    for w in &loaded.warnings {
        log::warn!("{}: {w}", config.corpus.path.display());
    }
    for e in &corpus_errors {
        log::warn!("{}: skipped record: {e}", config.corpus.path.display());
    }
    let corpus = loaded.corpus;
    let components = build_components(config, &corpus)?;

    fs::create_dir_all(&config.output_dir).map_err(|source| RunError::Io {
        path: config.output_dir.clone(),
        source,
    })?;
    let mut writer = RecordWriter::create(config.output_dir.join(RECORDS_FILE))?;
    writer.write(&RecordLine::Config {
        engine_version: ENGINE_VERSION.to_string(),
        config: config.clone(),
        corpus_errors: corpus_errors.clone(),
    })?;

    let mut instances: Vec<&Instance> = corpus.instances.iter().collect();
    instances.sort_by(|a, b| a.id.cmp(&b.id));
    let ctx = Context {
        config,
        components,
        policy: config.selection_policy(),
        seeds: permutation_seeds(config.seed, instances.len()),
    };

    let records = process_streaming(&ctx, &instances, config.workers, &mut writer)?;
    let aggregate = aggregate_metrics(config, &records);
    writer.write(&RecordLine::Aggregate(aggregate.clone()))?;
    let timing = Timing {
        elapsed_ms: started.elapsed().as_millis() as u64,
        workers: config.workers,
    };
    writer.write(&RecordLine::Timing(timing))?;
    Ok(ExperimentRecord {
        engine_version: ENGINE_VERSION.to_string(),
        config: config.clone(),
        corpus_errors,
        instances: records,
        aggregate: Some(aggregate),
        timing: Some(timing),
    })
}

/// Run instances on `workers` threads; the calling thread writes records in
/// input order as soon as each prefix is complete.
fn process_streaming(
    ctx: &Context<'_>,
    instances: &[&Instance],
    workers: usize,
    writer: &mut RecordWriter,
) -> Result<Vec<InstanceRecord>, RunError> {
    let workers = workers.max(1).min(instances.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, InstanceRecord)>();
    std::thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            s.spawn(move || loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= instances.len() {
                    break;
                }
                let inst = instances[i];
                log::debug!("instance {} started", inst.id);
                let outcome = ctx.process(i, inst);
                if let InstanceOutcome::Error(e) = &outcome {
                    log::warn!("instance {}: {} failed: {}", inst.id, e.stage, e.cause);
                }
                let record = InstanceRecord {
                    instance_id: inst.id.clone(),
                    outcome,
                };
                if tx.send((i, record)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending: HashMap<usize, InstanceRecord> = HashMap::new();
        let mut out = Vec::with_capacity(instances.len());
        for (i, record) in rx {
            pending.insert(i, record);
            while let Some(r) = pending.remove(&out.len()) {
                writer.write(&RecordLine::Instance(r.clone()))?;
                out.push(r);
            }
        }
        Ok(out)
    })
}

#[derive(Default)]
struct MetricSink {
    values: BTreeMap<String, f64>,
    notes: Vec<String>,
}

impl MetricSink {
    fn put(&mut self, key: impl Into<String>, value: f64) {
        let key = key.into();
        if value.is_finite() {
            self.values.insert(key, value);
        } else {
            self.notes.push(format!("{key}: not finite"));
        }
    }

    fn put_result<E: std::fmt::Display>(&mut self, key: &str, r: Result<f64, E>) -> Option<f64> {
        match r {
            Ok(v) => {
                self.put(key, v);
                Some(v)
            }
            Err(e) => {
                self.notes.push(format!("{key}: {e}"));
                None
            }
        }
    }

    /// R², Pearson and MSE of `predictions` against `targets`.
    fn continuous(&mut self, prefix: &str, predictions: Vec<f64>, targets: Vec<f64>) -> [Option<f64>; 3] {
        self.put(format!("{prefix}.n"), predictions.len() as f64);
        let series = match PairedSeries::new(predictions, targets) {
            Ok(s) => s,
            Err(e) => {
                self.notes.push(format!("{prefix}: {e}"));
                return [None; 3];
            }
        };
        [
            self.put_result(&format!("{prefix}.r2"), metrics::r_squared_centered(&series)),
            self.put_result(&format!("{prefix}.pcc"), metrics::pearson(&series)),
            self.put_result(&format!("{prefix}.mse"), metrics::mse(&series)),
        ]
    }

    /// Macro-F1 and accuracy of `predicted` against `gold`.
    fn binary(&mut self, prefix: &str, predicted: &[Label], gold: &[Label]) -> [Option<f64>; 2] {
        self.put(format!("{prefix}.n"), predicted.len() as f64);
        match macro_f1_accuracy(predicted, gold) {
            Ok((f1, acc)) => {
                self.put(format!("{prefix}.macro_f1"), f1);
                self.put(format!("{prefix}.accuracy"), acc);
                [Some(f1), Some(acc)]
            }
            Err(e) => {
                self.notes.push(format!("{prefix}: {e}"));
                [None; 2]
            }
        }
    }

    fn delta(&mut self, key: &str, selected: Option<f64>, baseline: Option<f64>) {
        if let (Some(s), Some(b)) = (selected, baseline) {
            self.put(format!("delta.{key}"), s - b);
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Corpus-level metrics for the study, computed from records in id order.
pub fn aggregate_metrics(config: &ExperimentConfig, records: &[InstanceRecord]) -> AggregateMetrics {
    let mut sink = MetricSink::default();
    let task = config.task();
    let threshold = config.threshold;
    let outcomes: Vec<&InstanceOutcome> = records.iter().map(|r| &r.outcome).collect();
    match config.study {
        StudyKind::Calibration => {
            let rs: Vec<&CalibrationResult> = outcomes
                .iter()
                .filter_map(|o| match o {
                    InstanceOutcome::Calibration(c) => Some(c),
                    _ => None,
                })
                .collect();
            match task {
                Task::Continuous => {
                    let gold: Vec<f64> = rs.iter().map(|r| r.gold).collect();
                    sink.continuous(
                        "reference",
                        rs.iter().map(|r| r.reference_measure.as_scalar()).collect(),
                        gold.clone(),
                    );
                    sink.continuous(
                        "inputs",
                        rs.iter().map(|r| r.input_aggregate.value).collect(),
                        gold.clone(),
                    );
                    sink.continuous(
                        "system",
                        rs.iter().map(|r| r.summary_measure.as_scalar()).collect(),
                        gold,
                    );
                }
                Task::Binary => {
                    let gold: Vec<Label> = rs.iter().map(|r| r.gold_label).collect();
                    let refs: Vec<Label> = rs.iter().map(|r| r.reference_measure.label_at(threshold)).collect();
                    let inputs: Vec<Label> = rs
                        .iter()
                        .map(|r| r.input_aggregate.label.unwrap_or(Label::NotSignificant))
                        .collect();
                    let sys: Vec<Label> = rs.iter().map(|r| r.summary_measure.label_at(threshold)).collect();
                    sink.binary("reference", &refs, &gold);
                    sink.binary("inputs", &inputs, &gold);
                    sink.binary("system", &sys, &gold);
                }
            }
        }
        StudyKind::Permutation => {
            let studies: Vec<&PermutationStudy> = outcomes
                .iter()
                .filter_map(|o| match o {
                    InstanceOutcome::Permutation(p) => Some(p),
                    _ => None,
                })
                .collect();
            if !studies.is_empty() {
                sink.put("n_permutations", config.n_permutations as f64);
                let rouge: Vec<f64> = studies.iter().flat_map(|s| s.rouge1.iter().copied()).collect();
                sink.put("rouge1.mean", mean(&rouge));
                match task {
                    Task::Continuous => {
                        let abs: Vec<f64> = studies.iter().flat_map(|s| s.spread.iter().map(|v| v.abs())).collect();
                        sink.put("spread.mean_abs", mean(&abs));
                        sink.put("spread.max_abs", abs.iter().copied().fold(0.0, f64::max));
                        let stds: Vec<f64> = studies
                            .iter()
                            .map(|s| (s.spread.iter().map(|v| v * v).sum::<f64>() / s.spread.len() as f64).sqrt())
                            .collect();
                        sink.put("spread.std_mean", mean(&stds));
                        let sensitive = stds.iter().filter(|&&s| s > 0.0).count();
                        sink.put("order_sensitive_fraction", sensitive as f64 / stds.len() as f64);
                    }
                    Task::Binary => {
                        let ent: Vec<f64> = studies.iter().filter_map(|s| s.entropy_bits).collect();
                        sink.put("entropy.mean", mean(&ent));
                        sink.put("entropy.max", ent.iter().copied().fold(0.0, f64::max));
                        let sensitive = ent.iter().filter(|&&e| e > 0.0).count();
                        sink.put("order_sensitive_fraction", sensitive as f64 / ent.len() as f64);
                    }
                }
            }
        }
        StudyKind::Composition => {
            let studies: Vec<&CompositionStudy> = outcomes
                .iter()
                .filter_map(|o| match o {
                    InstanceOutcome::Composition(c) => Some(c),
                    _ => None,
                })
                .collect();
            if !studies.is_empty() {
                let slopes: Vec<f64> = studies.iter().map(|s| s.fitted_slope).collect();
                let intercepts: Vec<f64> = studies.iter().map(|s| s.fitted_intercept).collect();
                sink.put("slope.mean", mean(&slopes));
                sink.put("intercept.mean", mean(&intercepts));
                let xs: Vec<f64> = studies
                    .iter()
                    .flat_map(|s| s.points.iter().map(|p| p.input_aggregate))
                    .collect();
                let ys: Vec<f64> = studies
                    .iter()
                    .flat_map(|s| s.points.iter().map(|p| p.output_measure))
                    .collect();
                match metrics::least_squares_fit(&xs, &ys) {
                    Ok((m, b)) => {
                        sink.put("pooled.slope", m);
                        sink.put("pooled.intercept", b);
                    }
                    Err(e) => sink.notes.push(format!("pooled fit: {e}")),
                }
                let exhausted = studies
                    .iter()
                    .flat_map(|s| s.points.iter())
                    .filter(|p| p.polarity_exhausted)
                    .count();
                if exhausted > 0 {
                    sink.notes
                        .push(format!("{exhausted} points remove every document of one polarity"));
                }
            }
        }
        StudyKind::Flip => {
            let rs: Vec<&FlipResult> = outcomes
                .iter()
                .filter_map(|o| match o {
                    InstanceOutcome::Flip(f) => Some(f),
                    _ => None,
                })
                .collect();
            if !rs.is_empty() {
                let flipped = rs.iter().filter(|r| r.output_flipped).count();
                sink.put("output_flip_rate", flipped as f64 / rs.len() as f64);
                let before_gold: Vec<Label> = rs
                    .iter()
                    .map(|r| Label::from_bool(r.construction.before.significant))
                    .collect();
                let after_gold: Vec<Label> = rs
                    .iter()
                    .map(|r| Label::from_bool(r.construction.after.significant))
                    .collect();
                let before: Vec<Label> = rs.iter().map(|r| r.before_measure.label_at(threshold)).collect();
                let after: Vec<Label> = rs.iter().map(|r| r.after_measure.label_at(threshold)).collect();
                sink.binary("before", &before, &before_gold);
                sink.binary("after", &after, &after_gold);
            }
        }
        StudyKind::Improve => {
            let rs: Vec<&ImproveResult> = outcomes
                .iter()
                .filter_map(|o| match o {
                    InstanceOutcome::Improve(r) => Some(r),
                    _ => None,
                })
                .collect();
            if !rs.is_empty() {
                let abstained = rs.iter().filter(|r| r.selection.is_abstention()).count();
                sink.put("abstained", abstained as f64);
                sink.put("abstention_rate", abstained as f64 / rs.len() as f64);
                let returned: Vec<&&ImproveResult> = rs.iter().filter(|r| !r.selection.is_abstention()).collect();
                let measure_of = |c: &Candidate| c.measurement.expect("measured candidate");
                let policy = config.selection_policy();
                match task {
                    Task::Continuous => {
                        let [b_r2, b_pcc, b_mse] = sink.continuous(
                            "baseline",
                            rs.iter().map(|r| measure_of(&r.baseline).as_scalar()).collect(),
                            rs.iter().map(|r| r.gold).collect(),
                        );
                        let [s_r2, s_pcc, s_mse] = sink.continuous(
                            "selected",
                            returned
                                .iter()
                                .map(|r| r.selection.measurement().expect("selected").as_scalar())
                                .collect(),
                            returned.iter().map(|r| r.gold).collect(),
                        );
                        sink.delta("r2", s_r2, b_r2);
                        sink.delta("pcc", s_pcc, b_pcc);
                        sink.delta("mse", s_mse, b_mse);
                    }
                    Task::Binary => {
                        let t = policy.threshold;
                        let [b_f1, b_acc] = sink.binary(
                            "baseline",
                            &rs.iter()
                                .map(|r| measure_of(&r.baseline).label_at(t))
                                .collect::<Vec<_>>(),
                            &rs.iter().map(|r| r.gold_label).collect::<Vec<_>>(),
                        );
                        let [s_f1, s_acc] = sink.binary(
                            "selected",
                            &returned
                                .iter()
                                .map(|r| r.selection.measurement().expect("selected").label_at(t))
                                .collect::<Vec<_>>(),
                            &returned.iter().map(|r| r.gold_label).collect::<Vec<_>>(),
                        );
                        sink.delta("macro_f1", s_f1, b_f1);
                        sink.delta("accuracy", s_acc, b_acc);
                    }
                }
                if policy.kind == PolicyKind::OracleNearest || policy.kind == PolicyKind::OracleAgree {
                    sink.notes.push("oracle selection: targets are gold aggregates".into());
                }
            }
        }
    }
    let count = |f: fn(&InstanceOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count();
    let errors = count(|o| matches!(o, InstanceOutcome::Error(_)));
    let skipped = count(|o| matches!(o, InstanceOutcome::Skipped { .. }));
    AggregateMetrics {
        study: config.study,
        instances: records.len(),
        completed: records.len() - errors - skipped,
        skipped,
        errors,
        metrics: sink.values,
        notes: sink.notes,
    }
}

/// Read a records file back. A file without aggregate and timing lines (an
/// interrupted run) loads with those fields empty.
pub fn load_records(path: &Path) -> Result<ExperimentRecord, RunError> {
    let content = fs::read_to_string(path).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut header = None;
    let mut instances = Vec::new();
    let mut aggregate = None;
    let mut timing = None;
    let line_count = content.lines().count();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = match serde_json::from_str(line) {
            Ok(p) => p,
            // A write cut short by an interruption leaves an unterminated last line.
            Err(e) if i + 1 == line_count && !content.ends_with('\n') => {
                log::warn!("{}:{}: ignoring incomplete final line: {e}", path.display(), i + 1);
                break;
            }
            Err(e) => {
                return Err(RunError::Record {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        };
        match parsed {
            RecordLine::Config {
                engine_version,
                config,
                corpus_errors,
            } => header = Some((engine_version, config, corpus_errors)),
            RecordLine::Instance(r) => instances.push(r),
            RecordLine::Aggregate(a) => aggregate = Some(a),
            RecordLine::Timing(t) => timing = Some(t),
        }
    }
    let (engine_version, config, corpus_errors) = header.ok_or_else(|| RunError::Record {
        path: path.to_path_buf(),
        line: 1,
        message: "missing config line".into(),
    })?;
    Ok(ExperimentRecord {
        engine_version,
        config,
        corpus_errors,
        instances,
        aggregate,
        timing,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    SpreadHist,
    EntropyHist,
    SensitivityScatter,
    CandidateRangeHist,
}

impl std::str::FromStr for PlotKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "spread_hist" => Ok(PlotKind::SpreadHist),
            "entropy_hist" => Ok(PlotKind::EntropyHist),
            "sensitivity_scatter" => Ok(PlotKind::SensitivityScatter),
            "candidate_range_hist" => Ok(PlotKind::CandidateRangeHist),
            other => Err(format!(
                "unknown figure {other:?}; expected spread_hist, entropy_hist, sensitivity_scatter or candidate_range_hist"
            )),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PlotError {
    #[error("{figure} needs {requirement}")]
    MissingStudy {
        figure: &'static str,
        requirement: &'static str,
    },
}

/// A header row plus data rows, rendered as tab-separated text.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotTable {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl PlotTable {
    pub fn to_tsv(&self) -> String {
        let mut out = self.header.join("\t");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }
}

pub const SPREAD_BINS: usize = 20;
pub const ENTROPY_BINS: usize = 10;

fn bin_rows(bins: Vec<metrics::HistogramBin>) -> Vec<Vec<String>> {
    bins.into_iter()
        .map(|b| vec![b.lo.to_string(), b.hi.to_string(), b.count.to_string()])
        .collect()
}

/// Tabular data behind one figure.
///
/// * `spread_hist`: `bin_lo bin_hi count` over every zero-meaned
///   per-permutation measure (continuous permutation studies).
/// * `entropy_hist`: `bin_lo bin_hi count` over per-instance entropy on
///   `[0, 1]` (binary permutation studies).
/// * `sensitivity_scatter`: `instance_id polarity_removed fraction_removed
///   input_aggregate output_measure`, one row per instance and schedule point.
/// * `candidate_range_hist`: `instance_id min max range` of candidate
///   measurements, one row per instance (improve studies).
pub fn emit_plot_data(record: &ExperimentRecord, figure: PlotKind) -> Result<PlotTable, PlotError> {
    let outcomes = record.instances.iter().map(|r| (&r.instance_id, &r.outcome));
    match figure {
        PlotKind::SpreadHist => {
            let spreads: Vec<f64> = outcomes
                .filter_map(|(_, o)| match o {
                    InstanceOutcome::Permutation(p) if p.p_fraction.is_none() => Some(p.spread.clone()),
                    _ => None,
                })
                .flatten()
                .collect();
            if spreads.is_empty() {
                return Err(PlotError::MissingStudy {
                    figure: "spread_hist",
                    requirement: "continuous permutation studies",
                });
            }
            let bins = histogram(&spreads, SPREAD_BINS, None).expect("positive bin count");
            Ok(PlotTable {
                header: vec!["bin_lo", "bin_hi", "count"],
                rows: bin_rows(bins),
            })
        }
        PlotKind::EntropyHist => {
            let ent: Vec<f64> = outcomes
                .filter_map(|(_, o)| match o {
                    InstanceOutcome::Permutation(p) => p.entropy_bits,
                    _ => None,
                })
                .collect();
            if ent.is_empty() {
                return Err(PlotError::MissingStudy {
                    figure: "entropy_hist",
                    requirement: "binary permutation studies",
                });
            }
            let bins = histogram(&ent, ENTROPY_BINS, Some((0.0, 1.0))).expect("valid range");
            Ok(PlotTable {
                header: vec!["bin_lo", "bin_hi", "count"],
                rows: bin_rows(bins),
            })
        }
        PlotKind::SensitivityScatter => {
            let mut rows = Vec::new();
            for (id, o) in outcomes {
                if let InstanceOutcome::Composition(c) = o {
                    for p in &c.points {
                        if let Some(s) = p.schedule {
                            let pol = match s.polarity_removed {
                                perturb::Polarity::Positive => "positive",
                                perturb::Polarity::Negative => "negative",
                            };
                            rows.push(vec![
                                id.clone(),
                                pol.to_string(),
                                s.fraction_removed.to_string(),
                                p.input_aggregate.to_string(),
                                p.output_measure.to_string(),
                            ]);
                        }
                    }
                }
            }
            if rows.is_empty() {
                return Err(PlotError::MissingStudy {
                    figure: "sensitivity_scatter",
                    requirement: "composition studies",
                });
            }
            Ok(PlotTable {
                header: vec![
                    "instance_id",
                    "polarity_removed",
                    "fraction_removed",
                    "input_aggregate",
                    "output_measure",
                ],
                rows,
            })
        }
        PlotKind::CandidateRangeHist => {
            let mut rows = Vec::new();
            for (id, o) in outcomes {
                if let InstanceOutcome::Improve(r) = o {
                    let vals: Vec<f64> = r
                        .selection
                        .provenance
                        .candidates
                        .iter()
                        .filter_map(|c| c.measurement.map(|m| m.as_scalar()))
                        .collect();
                    if vals.is_empty() {
                        continue;
                    }
                    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    rows.push(vec![id.clone(), lo.to_string(), hi.to_string(), (hi - lo).to_string()]);
                }
            }
            if rows.is_empty() {
                return Err(PlotError::MissingStudy {
                    figure: "candidate_range_hist",
                    requirement: "improve studies",
                });
            }
            Ok(PlotTable {
                header: vec!["instance_id", "min", "max", "range"],
                rows,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(study: StudyKind, schema: Schema) -> ExperimentConfig {
        ExperimentConfig::new(study, "c.jsonl", schema, "out")
    }

    #[test]
    fn defaults_follow_schema() {
        let m = cfg(StudyKind::Improve, Schema::Movies);
        assert_eq!(m.decode_config().max_tokens, 64);
        assert_eq!(m.measurer_spec(), MeasurerSpec::lexicon());
        assert_eq!(m.selection_policy().kind, PolicyKind::NearestContinuous);
        let t = cfg(StudyKind::Improve, Schema::Trials);
        assert_eq!(t.decode_config().max_tokens, 256);
        assert_eq!(t.selection_policy().kind, PolicyKind::AgreeOrAbstain);
        assert!(m.validate().is_ok() && t.validate().is_ok());
    }

    #[test]
    fn validation_rejects_mismatched_components() {
        assert!(cfg(StudyKind::Flip, Schema::Movies).validate().is_err());
        let mut c = cfg(StudyKind::Permutation, Schema::Movies);
        c.n_permutations = 1;
        assert!(c.validate().is_err());
        let mut c = cfg(StudyKind::Improve, Schema::Trials);
        c.policy = Some(SelectionPolicy::new(PolicyKind::NearestContinuous));
        assert!(c.validate().is_err());
        let mut c = cfg(StudyKind::Calibration, Schema::Movies);
        c.workers = 0;
        assert!(c.validate().is_err());
        let mut c = cfg(StudyKind::Calibration, Schema::Movies);
        c.generator = GeneratorSpec::External {
            endpoint: "http://x".into(),
            n: 2,
            temperature: 1.0,
            in_flight: 1,
            timeout_ms: 10,
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn env_overrides_only_touch_external_endpoints() {
        let env = |k: &str| match k {
            GENERATOR_ENDPOINT_ENV => Some("tcp://127.0.0.1:9".to_string()),
            MEASURER_ENDPOINT_ENV => Some("tcp://127.0.0.1:8".to_string()),
            _ => None,
        };
        let mut c = cfg(StudyKind::Calibration, Schema::Movies);
        c.apply_env_overrides(env);
        assert_eq!(c.generator, GeneratorSpec::default());
        assert_eq!(c.measurer, None);
        c.generator = GeneratorSpec::External {
            endpoint: "tcp://a:1".into(),
            n: 2,
            temperature: 1.0,
            in_flight: 1,
            timeout_ms: 10,
        };
        c.measurer = Some(MeasurerSpec::external("tcp://b:1"));
        c.apply_env_overrides(env);
        assert!(matches!(&c.generator, GeneratorSpec::External { endpoint, .. } if endpoint == "tcp://127.0.0.1:9"));
        assert_eq!(c.measurer.unwrap().endpoint.as_deref(), Some("tcp://127.0.0.1:8"));
    }

    #[test]
    fn config_json_roundtrip_with_defaults() {
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"study":"permutation","corpus":{"path":"x","schema":"movies"},"output_dir":"o"}"#)
                .unwrap();
        assert_eq!(c, cfg(StudyKind::Permutation, Schema::Movies).with_paths("x", "o"));
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    impl ExperimentConfig {
        fn with_paths(mut self, corpus: &str, out: &str) -> Self {
            self.corpus.path = corpus.into();
            self.output_dir = out.into();
            self
        }
    }

    #[test]
    fn plot_kind_parses() {
        assert_eq!("spread_hist".parse::<PlotKind>().unwrap(), PlotKind::SpreadHist);
        assert!("bogus".parse::<PlotKind>().is_err());
    }

    #[test]
    fn missing_study_names_requirement() {
        let record = ExperimentRecord {
            engine_version: ENGINE_VERSION.into(),
            config: cfg(StudyKind::Calibration, Schema::Movies),
            corpus_errors: vec![],
            instances: vec![],
            aggregate: None,
            timing: None,
        };
        let err = emit_plot_data(&record, PlotKind::SensitivityScatter).unwrap_err();
        assert_eq!(err.to_string(), "sensitivity_scatter needs composition studies");
    }
}
