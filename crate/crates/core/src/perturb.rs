//! Sensitivity harnesses: how a generator's measured output responds to the
//! order of its inputs, to their polarity mix, and to removing studies until a
//! meta-analysis changes its verdict.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{self, AggregateError, MetaAnalysisResult, Study};
use crate::corpus::{linearize, permute_documents, EmptySeparator, Instance, LinearizeOptions, Task};
use crate::decode::{DecodeError, GenerationRequest, Generator};
use crate::measure::{Label, MeasureError, Measurement, Measurer};
use crate::metrics::{least_squares_fit, rouge1_f};
use crate::par::parallel_map;

pub const DEFAULT_PERMUTATIONS: usize = 100;

/// Failure of one decode-and-measure step inside a study.
#[derive(Debug, Error)]
pub enum StepError {
    #[error("linearize: {0}")]
    Linearize(#[from] EmptySeparator),
    #[error("decode: {0}")]
    Decode(#[from] DecodeError),
    #[error("decode: empty candidate set")]
    EmptyCandidateSet,
    #[error("measure: {0}")]
    Measure(#[from] MeasureError),
    #[error("aggregate: {0}")]
    Aggregate(#[from] AggregateError),
}

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("need at least 2 permutations, got {0}")]
    TooFewPermutations(usize),
    #[error("entropy argument {0} outside [0, 1]")]
    EntropyDomain(f64),
    #[error("permutation {index}: {source}")]
    Permutation {
        index: usize,
        #[source]
        source: StepError,
    },
    #[error("measuring documents: {0}")]
    Documents(#[source] MeasureError),
    #[error("instance is not mixed: {positives} positive and {negatives} negative documents")]
    NotMixed { positives: usize, negatives: usize },
    #[error("composition point {polarity:?} {fraction}: {source}")]
    CompositionPoint {
        polarity: Option<Polarity>,
        fraction: f64,
        #[source]
        source: StepError,
    },
    #[error("invalid removal fraction {0}; fractions must lie in (0, 1]")]
    BadFraction(f64),
    #[error("line fit: {0}")]
    Fit(String),
    #[error("document {0} has no effect/variance")]
    MissingStudy(String),
    #[error("meta-analysis: {0}")]
    Aggregate(#[from] AggregateError),
    #[error("instance not flippable")]
    NotFlippable,
}

impl PerturbError {
    pub fn is_retryable(&self) -> bool {
        let step = |s: &StepError| match s {
            StepError::Decode(e) => e.is_retryable(),
            StepError::Measure(e) => e.is_retryable(),
            _ => false,
        };
        match self {
            PerturbError::Permutation { source, .. } | PerturbError::CompositionPoint { source, .. } => step(source),
            PerturbError::Documents(e) => e.is_retryable(),
            _ => false,
        }
    }
}

/// `−p·log₂p − (1−p)·log₂(1−p)`, with `0·log 0 = 0`.
pub fn binary_entropy(p: f64) -> Result<f64, PerturbError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(PerturbError::EntropyDomain(p));
    }
    let term = |x: f64| if x == 0.0 { 0.0 } else { -x * x.log2() };
    Ok(term(p) + term(1.0 - p))
}

/// Decode `instance` as ordered and measure the top candidate.
pub(crate) fn decode_top(
    instance: &Instance,
    generator: &dyn Generator,
    measurer: &dyn Measurer,
    opts: &LinearizeOptions,
    target: Option<f64>,
) -> Result<(String, Measurement), StepError> {
    let linear = linearize(instance, &opts.separator, opts.max_length)?;
    let set = generator.generate(&GenerationRequest {
        instance,
        conditioning: &linear.text,
        target,
    })?;
    let top = set.candidates.into_iter().next().ok_or(StepError::EmptyCandidateSet)?;
    let m = measurer.measure(&top.text)?;
    Ok((top.text, m))
}

fn default_threshold() -> f64 {
    0.5
}

fn default_permutations() -> usize {
    DEFAULT_PERMUTATIONS
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationOptions {
    #[serde(default = "default_permutations")]
    pub n_permutations: usize,
    #[serde(default)]
    pub seed: u64,
    /// Labels continuous output measures on binary tasks.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub linearize: LinearizeOptions,
    /// Permutations decoded concurrently. Results never depend on it.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl Default for PermutationOptions {
    fn default() -> Self {
        PermutationOptions {
            n_permutations: DEFAULT_PERMUTATIONS,
            seed: 0,
            threshold: default_threshold(),
            linearize: LinearizeOptions::default(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationStudy {
    pub instance_id: String,
    pub n_permutations: usize,
    pub seed: u64,
    /// Shuffle seed of each permutation, derived from `seed`.
    pub permutation_seeds: Vec<u64>,
    pub per_permutation_measures: Vec<Measurement>,
    /// Continuous tasks: measures minus their mean over permutations.
    #[serde(default)]
    pub spread: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_bits: Option<f64>,
    /// ROUGE-1 F of each permutation's summary against the reference.
    #[serde(default)]
    pub rouge1: Vec<f64>,
    #[serde(default)]
    pub summaries: Vec<String>,
}

/// Measures minus their mean, computed relative to the first measure so that
/// identical measures give exact zeros rather than rounding residue.
fn zero_mean(measures: &[Measurement]) -> Vec<f64> {
    let first = measures.first().map_or(0.0, Measurement::as_scalar);
    let offsets: Vec<f64> = measures.iter().map(|m| m.as_scalar() - first).collect();
    let mean = offsets.iter().sum::<f64>() / offsets.len() as f64;
    offsets.iter().map(|d| d - mean).collect()
}

/// Per-permutation shuffle seeds: a ChaCha stream keyed by the study seed.
pub fn permutation_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Decode the instance under `n` seeded random input orders and summarize
/// the spread (continuous task) or label entropy (binary task) of the
/// measured outputs.
pub fn run_permutation_study(
    instance: &Instance,
    generator: &dyn Generator,
    measurer: &dyn Measurer,
    opts: &PermutationOptions,
) -> Result<PermutationStudy, PerturbError> {
    let n = opts.n_permutations;
    if n < 2 {
        return Err(PerturbError::TooFewPermutations(n));
    }
    let seeds = permutation_seeds(opts.seed, n);
    let results = parallel_map(&seeds, opts.workers, |_, &s| {
        let permuted = permute_documents(instance, s);
        decode_top(&permuted, generator, measurer, &opts.linearize, None)
    });
    let mut summaries = Vec::with_capacity(n);
    let mut measures = Vec::with_capacity(n);
    for (index, r) in results.into_iter().enumerate() {
        let (text, m) = r.map_err(|source| PerturbError::Permutation { index, source })?;
        summaries.push(text);
        measures.push(m);
    }
    let rouge1 = summaries
        .iter()
        .map(|s| rouge1_f(s, &instance.reference_summary))
        .collect();
    let (spread, p_fraction, entropy_bits) = match instance.task {
        Task::Continuous => (zero_mean(&measures), None, None),
        Task::Binary => {
            let positives = measures
                .iter()
                .filter(|m| m.label_at(opts.threshold).is_positive())
                .count();
            let p = positives as f64 / n as f64;
            (Vec::new(), Some(p), Some(binary_entropy(p)?))
        }
    };
    Ok(PermutationStudy {
        instance_id: instance.id.clone(),
        n_permutations: n,
        seed: opts.seed,
        permutation_seeds: seeds,
        per_permutation_measures: measures,
        spread,
        p_fraction,
        entropy_bits,
        rouge1,
        summaries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    fn of(label: Label) -> Self {
        if label.is_positive() {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }
}

/// Which documents of a polarity go first.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalOrder {
    /// Closest to the threshold first, ties by position.
    #[default]
    WeakestFirst,
    /// Seeded random order.
    Seeded(u64),
}

fn default_fractions() -> Vec<f64> {
    (1..=10).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionOptions {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Fractions of one polarity removed, applied first to positives and then
    /// to negatives.
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default)]
    pub removal: RemovalOrder,
    #[serde(default)]
    pub linearize: LinearizeOptions,
}

impl Default for CompositionOptions {
    fn default() -> Self {
        CompositionOptions {
            threshold: default_threshold(),
            fractions: default_fractions(),
            removal: RemovalOrder::default(),
            linearize: LinearizeOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulePoint {
    pub fraction_removed: f64,
    pub polarity_removed: Polarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionPoint {
    /// `None` for the unmodified baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<SchedulePoint>,
    pub removed_document_ids: Vec<String>,
    pub input_aggregate: f64,
    pub output_measure: f64,
    /// Every document of the removed polarity is gone.
    #[serde(default)]
    pub polarity_exhausted: bool,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionStudy {
    pub instance_id: String,
    pub schedule: Vec<SchedulePoint>,
    /// Baseline first, then one point per schedule entry.
    pub points: Vec<CompositionPoint>,
    pub fitted_slope: f64,
    pub fitted_intercept: f64,
}

/// Indices of the documents to remove for one schedule point.
fn removal_set(order: &[usize], fraction: f64) -> &[usize] {
    let k = ((fraction * order.len() as f64).round() as usize).min(order.len());
    &order[..k]
}

/// Remove growing fractions of each polarity, decode each reduced instance
/// and fit the measured output against the recomputed input aggregate.
pub fn run_composition_study(
    instance: &Instance,
    generator: &dyn Generator,
    measurer: &dyn Measurer,
    opts: &CompositionOptions,
) -> Result<CompositionStudy, PerturbError> {
    for &f in &opts.fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(PerturbError::BadFraction(f));
        }
    }
    let texts: Vec<&str> = instance.documents.iter().map(|d| d.text.as_str()).collect();
    let doc_measures = measurer.measure_batch(&texts).map_err(PerturbError::Documents)?;
    let polarity: Vec<Polarity> = doc_measures
        .iter()
        .map(|m| Polarity::of(m.label_at(opts.threshold)))
        .collect();
    let positives = polarity.iter().filter(|&&p| p == Polarity::Positive).count();
    let negatives = polarity.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(PerturbError::NotMixed { positives, negatives });
    }

    let removal_order = |pol: Polarity| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..polarity.len()).filter(|&i| polarity[i] == pol).collect();
        match opts.removal {
            RemovalOrder::WeakestFirst => idx.sort_by(|&a, &b| {
                let da = (doc_measures[a].as_scalar() - opts.threshold).abs();
                let db = (doc_measures[b].as_scalar() - opts.threshold).abs();
                da.total_cmp(&db).then(a.cmp(&b))
            }),
            RemovalOrder::Seeded(seed) => {
                let salt = if pol == Polarity::Positive { 0 } else { 1 };
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ salt));
            }
        }
        idx
    };
    let orders = [
        (Polarity::Positive, removal_order(Polarity::Positive)),
        (Polarity::Negative, removal_order(Polarity::Negative)),
    ];

    let mut schedule = Vec::new();
    let mut points = Vec::new();
    let mut run_point = |sched: Option<SchedulePoint>, removed: &[usize], exhausted: bool| {
        let keep: Vec<usize> = (0..instance.documents.len()).filter(|i| !removed.contains(i)).collect();
        let reduced = instance.with_documents(keep.iter().map(|&i| instance.documents[i].clone()).collect());
        let kept_measures: Vec<Measurement> = keep.iter().map(|&i| doc_measures[i]).collect();
        let wrap = |source: StepError| PerturbError::CompositionPoint {
            polarity: sched.map(|s| s.polarity_removed),
            fraction: sched.map_or(0.0, |s| s.fraction_removed),
            source,
        };
        let input_aggregate =
            aggregate::fraction_positive(&kept_measures, opts.threshold).map_err(|e| wrap(e.into()))?;
        let (summary, m) =
            decode_top(&reduced, generator, measurer, &opts.linearize, Some(input_aggregate)).map_err(wrap)?;
        points.push(CompositionPoint {
            schedule: sched,
            removed_document_ids: removed.iter().map(|&i| instance.documents[i].id.clone()).collect(),
            input_aggregate,
            output_measure: m.as_scalar(),
            polarity_exhausted: exhausted,
            summary,
        });
        Ok::<(), PerturbError>(())
    };

    run_point(None, &[], false)?;
    for (pol, order) in &orders {
        for &fraction in &opts.fractions {
            let sched = SchedulePoint {
                fraction_removed: fraction,
                polarity_removed: *pol,
            };
            let removed = removal_set(order, fraction);
            run_point(Some(sched), removed, removed.len() == order.len())?;
            schedule.push(sched);
        }
    }

    let xs: Vec<f64> = points.iter().map(|p| p.input_aggregate).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.output_measure).collect();
    let (fitted_slope, fitted_intercept) = least_squares_fit(&xs, &ys).map_err(|e| PerturbError::Fit(e.to_string()))?;
    Ok(CompositionStudy {
        instance_id: instance.id.clone(),
        schedule,
        points,
        fitted_slope,
        fitted_intercept,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipConstruction {
    pub instance_id: String,
    /// In removal order.
    pub removed_document_ids: Vec<String>,
    pub before: MetaAnalysisResult,
    pub after: MetaAnalysisResult,
}

impl FlipConstruction {
    /// The instance with the removed studies dropped and its gold label set
    /// to the post-removal verdict.
    pub fn apply(&self, instance: &Instance) -> Instance {
        let documents = instance
            .documents
            .iter()
            .filter(|d| !self.removed_document_ids.contains(&d.id))
            .cloned()
            .collect();
        let mut out = instance.with_documents(documents);
        out.gold_aggregate = crate::corpus::GoldAggregate::Binary {
            label: Label::from_bool(self.after.significant),
            p_value: Some(self.after.p_value),
        };
        out
    }
}

/// Remove studies in decreasing order of `|θ/v|` (the inverse-variance
/// weighted effect), re-running the meta-analysis after each removal, until
/// its significance verdict changes. At least one study always remains.
///
/// Greedy removal is a heuristic: an instance reported as not flippable may
/// still have some other subset whose removal flips the verdict.
pub fn construct_significance_flip(instance: &Instance) -> Result<FlipConstruction, PerturbError> {
    let mut studies: Vec<(usize, Study)> = Vec::with_capacity(instance.documents.len());
    for (i, d) in instance.documents.iter().enumerate() {
        studies.push((i, d.study().ok_or_else(|| PerturbError::MissingStudy(d.id.clone()))?));
    }
    let all: Vec<Study> = studies.iter().map(|(_, s)| *s).collect();
    let before = aggregate::fixed_effects_meta_analysis(&all)?;
    let weighted = |s: &Study| (s.effect / s.variance).abs();
    studies.sort_by(|(ia, a), (ib, b)| weighted(b).total_cmp(&weighted(a)).then(ia.cmp(ib)));
    for k in 1..studies.len() {
        // Survivors in document order, so the result matches a fresh analysis
        // of the reduced instance exactly.
        let mut rest: Vec<(usize, Study)> = studies[k..].to_vec();
        rest.sort_by_key(|(i, _)| *i);
        let rest: Vec<Study> = rest.into_iter().map(|(_, s)| s).collect();
        let after = aggregate::fixed_effects_meta_analysis(&rest)?;
        if after.significant != before.significant {
            return Ok(FlipConstruction {
                instance_id: instance.id.clone(),
                removed_document_ids: studies[..k]
                    .iter()
                    .map(|(i, _)| instance.documents[*i].id.clone())
                    .collect(),
                before,
                after,
            });
        }
    }
    Err(PerturbError::NotFlippable)
}
