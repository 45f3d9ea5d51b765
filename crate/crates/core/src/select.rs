//! Candidate selection: keep the candidate whose measured property best
//! matches the expected aggregate of the inputs, or abstain.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{self, AggregateError, AggregateKind, AggregateTarget};
use crate::corpus::{linearize, EmptySeparator, GoldAggregate, Instance, LinearizeOptions, Task};
use crate::decode::{Candidate, CandidateSet, DecodeError, GenerationRequest, Generator};
use crate::measure::{Label, MeasureError, Measurement, Measurer};

/// Distances within this of the minimum count as ties. Without it, targets
/// like 0.4 between 0.3 and 0.5 would be decided by rounding noise.
pub const DISTANCE_TIE_TOLERANCE: f64 = 1e-9;

pub const NO_AGREEING_CANDIDATE: &str = "no candidate matches target label";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStatus {
    Selected,
    Abstained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    NearestContinuous,
    AgreeOrAbstain,
    OracleNearest,
    OracleAgree,
}

impl PolicyKind {
    pub fn is_oracle(self) -> bool {
        matches!(self, PolicyKind::OracleNearest | PolicyKind::OracleAgree)
    }

    pub fn is_nearest(self) -> bool {
        matches!(self, PolicyKind::NearestContinuous | PolicyKind::OracleNearest)
    }
}

/// What oracle policies target on continuous tasks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleTarget {
    /// The gold aggregate (the Tomatometer for movies).
    #[default]
    Gold,
    /// The measured sentiment of the reference summary.
    ReferenceMeasure,
}

fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub kind: PolicyKind,
    /// Binarization threshold for labels derived from continuous measures.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Abstain on nearest selection when the best distance exceeds this.
    #[serde(default)]
    pub abstain_delta: Option<f64>,
    #[serde(default)]
    pub oracle_target: OracleTarget,
}

impl SelectionPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        SelectionPolicy {
            kind,
            threshold: default_threshold(),
            abstain_delta: None,
            oracle_target: OracleTarget::Gold,
        }
    }

    /// Nearest selection for continuous tasks, agreement for binary ones.
    pub fn default_for(task: Task, oracle: bool) -> Self {
        let kind = match (task, oracle) {
            (Task::Continuous, false) => PolicyKind::NearestContinuous,
            (Task::Continuous, true) => PolicyKind::OracleNearest,
            (Task::Binary, false) => PolicyKind::AgreeOrAbstain,
            (Task::Binary, true) => PolicyKind::OracleAgree,
        };
        SelectionPolicy::new(kind)
    }

    pub fn validate(&self) -> Result<(), SelectError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(SelectError::Policy(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if let Some(d) = self.abstain_delta {
            if !(d >= 0.0) {
                return Err(SelectError::Policy(format!("abstain_delta {d} must be non-negative")));
            }
            if !self.kind.is_nearest() {
                return Err(SelectError::Policy(
                    "abstain_delta applies to nearest selection only".into(),
                ));
            }
        }
        Ok(())
    }
}

/// How candidates were ranked when the selector needed a preference order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBasis {
    LogProb,
    /// At least one candidate had no log-probability; earlier candidates rank higher.
    ArrivalOrder,
}

/// Intermediate artifacts of a selection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default)]
    pub document_measurements: Vec<Measurement>,
    /// Every candidate with its measurement, in generation order.
    #[serde(default)]
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_basis: Option<RankBasis>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Provenance {
    pub fn candidate_measurements(&self) -> Vec<Measurement> {
        self.candidates.iter().filter_map(|c| c.measurement).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub status: SelectionStatus,
    /// Present exactly when selected; carries its measurement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<Candidate>,
    /// Present exactly when abstained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub target: AggregateTarget,
    #[serde(default)]
    pub provenance: Provenance,
}

impl SelectionOutcome {
    fn selected(candidate: Candidate, target: AggregateTarget, provenance: Provenance) -> Self {
        SelectionOutcome {
            status: SelectionStatus::Selected,
            candidate: Some(candidate),
            reason: None,
            target,
            provenance,
        }
    }

    fn abstained(reason: impl Into<String>, target: AggregateTarget, provenance: Provenance) -> Self {
        SelectionOutcome {
            status: SelectionStatus::Abstained,
            candidate: None,
            reason: Some(reason.into()),
            target,
            provenance,
        }
    }

    pub fn is_abstention(&self) -> bool {
        self.status == SelectionStatus::Abstained
    }

    pub fn measurement(&self) -> Option<Measurement> {
        self.candidate.as_ref().and_then(|c| c.measurement)
    }
}

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("empty candidate set")]
    EmptyCandidateSet,
    #[error("candidate {index} ({text:?}): {source}")]
    Candidate {
        index: usize,
        text: String,
        #[source]
        source: MeasureError,
    },
    #[error("target {0} is not a finite value")]
    Target(f64),
    #[error("invalid selection policy: {0}")]
    Policy(String),
}

impl SelectError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, SelectError::Candidate { source, .. } if source.is_retryable())
    }
}

/// Measure every candidate, naming the one that fails.
fn measure_candidates(set: &CandidateSet, measurer: &dyn Measurer) -> Result<Vec<Candidate>, SelectError> {
    if set.is_empty() {
        return Err(SelectError::EmptyCandidateSet);
    }
    let texts = set.texts();
    let measured = measurer.measure_batch(&texts).map_err(|e| match e {
        MeasureError::Batch { index, source } => SelectError::Candidate {
            index,
            text: texts[index].to_string(),
            source: *source,
        },
        other => SelectError::Candidate {
            index: 0,
            text: texts[0].to_string(),
            source: other,
        },
    })?;
    Ok(set
        .candidates
        .iter()
        .zip(measured)
        .map(|(c, m)| Candidate {
            measurement: Some(m),
            ..c.clone()
        })
        .collect())
}

fn rank_basis(candidates: &[Candidate]) -> RankBasis {
    if candidates.iter().all(|c| c.log_prob.is_some()) {
        RankBasis::LogProb
    } else {
        RankBasis::ArrivalOrder
    }
}

/// Preference order among candidates with equal selection merit: higher
/// log-probability (or earlier arrival), then lexicographically smaller text.
fn prefer(basis: RankBasis, candidates: &[Candidate], a: usize, b: usize) -> Ordering {
    let primary = match basis {
        RankBasis::LogProb => {
            let (la, lb) = (candidates[a].log_prob.unwrap(), candidates[b].log_prob.unwrap());
            lb.total_cmp(&la)
        }
        RankBasis::ArrivalOrder => a.cmp(&b),
    };
    primary.then_with(|| candidates[a].text.cmp(&candidates[b].text))
}

fn best_of(basis: RankBasis, candidates: &[Candidate], pool: impl Iterator<Item = usize>) -> Option<usize> {
    pool.min_by(|&a, &b| prefer(basis, candidates, a, b))
}

fn basis_note(basis: RankBasis) -> Option<String> {
    (basis == RankBasis::ArrivalOrder).then(|| "candidates lack log-probabilities; ranked by arrival order".to_string())
}

fn nearest_with(
    candidates: Vec<Candidate>,
    target: AggregateTarget,
    abstain_delta: Option<f64>,
    mut provenance: Provenance,
) -> Result<SelectionOutcome, SelectError> {
    let t = target.value;
    if !t.is_finite() {
        return Err(SelectError::Target(t));
    }
    let mut distances = Vec::with_capacity(candidates.len());
    for (index, c) in candidates.iter().enumerate() {
        let value = c
            .measurement
            .and_then(|m| m.value())
            .ok_or_else(|| SelectError::Candidate {
                index,
                text: c.text.clone(),
                source: MeasureError::NotContinuous,
            })?;
        distances.push((value - t).abs());
    }
    let best = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let basis = rank_basis(&candidates);
    provenance.rank_basis = Some(basis);
    provenance.notes.extend(basis_note(basis));
    let tied = (0..candidates.len()).filter(|&i| distances[i] <= best + DISTANCE_TIE_TOLERANCE);
    let chosen = best_of(basis, &candidates, tied).expect("non-empty candidate set");
    if let Some(delta) = abstain_delta {
        if best > delta {
            provenance.candidates = candidates;
            return Ok(SelectionOutcome::abstained(
                format!("no candidate within {delta} of target"),
                target,
                provenance,
            ));
        }
    }
    let pick = candidates[chosen].clone();
    provenance.candidates = candidates;
    Ok(SelectionOutcome::selected(pick, target, provenance))
}

fn agree_with(
    candidates: Vec<Candidate>,
    target: AggregateTarget,
    label: Label,
    threshold: f64,
    mut provenance: Provenance,
) -> SelectionOutcome {
    let basis = rank_basis(&candidates);
    provenance.rank_basis = Some(basis);
    provenance.notes.extend(basis_note(basis));
    let agreeing = (0..candidates.len()).filter(|&i| {
        candidates[i]
            .measurement
            .is_some_and(|m| m.label_at(threshold) == label)
    });
    match best_of(basis, &candidates, agreeing) {
        Some(i) => {
            let pick = candidates[i].clone();
            provenance.candidates = candidates;
            SelectionOutcome::selected(pick, target, provenance)
        }
        None => {
            provenance.candidates = candidates;
            SelectionOutcome::abstained(NO_AGREEING_CANDIDATE, target, provenance)
        }
    }
}

/// Select the candidate whose continuous measure is closest to `target`.
///
/// Ties (within [`DISTANCE_TIE_TOLERANCE`]) go to the higher log-probability,
/// or the earlier candidate when log-probabilities are missing, then to the
/// lexicographically smaller text.
pub fn select_nearest(
    candidates: &CandidateSet,
    target: f64,
    measurer: &dyn Measurer,
) -> Result<SelectionOutcome, SelectError> {
    let measured = measure_candidates(candidates, measurer)?;
    nearest_with(measured, AggregateTarget::mean(target), None, Provenance::default())
}

/// Select the most probable candidate whose measured label equals
/// `target_label`, or abstain when none does. Continuous measurements are
/// labelled at `threshold`.
pub fn select_agree_or_abstain(
    candidates: &CandidateSet,
    target_label: Label,
    measurer: &dyn Measurer,
    threshold: f64,
) -> Result<SelectionOutcome, SelectError> {
    let measured = measure_candidates(candidates, measurer)?;
    Ok(agree_with(
        measured,
        AggregateTarget::majority(target_label),
        target_label,
        threshold,
        Provenance::default(),
    ))
}

/// Pipeline stage at which [`cautious_summarize`] failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    MeasureDocuments,
    EstimateTarget,
    Linearize,
    Decode,
    Select,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::MeasureDocuments => "measure_documents",
            Stage::EstimateTarget => "estimate_target",
            Stage::Linearize => "linearize",
            Stage::Decode => "decode",
            Stage::Select => "select",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("measure_documents: {0}")]
    MeasureDocuments(#[source] MeasureError),
    #[error("estimate_target: {0}")]
    EstimateTarget(String),
    #[error("linearize: {0}")]
    Linearize(#[source] EmptySeparator),
    #[error("decode: {0}")]
    Decode(#[source] DecodeError),
    #[error("select: {0}")]
    Select(#[source] SelectError),
}

impl PipelineError {
    pub fn stage(&self) -> Stage {
        match self {
            PipelineError::MeasureDocuments(_) => Stage::MeasureDocuments,
            PipelineError::EstimateTarget(_) => Stage::EstimateTarget,
            PipelineError::Linearize(_) => Stage::Linearize,
            PipelineError::Decode(_) => Stage::Decode,
            PipelineError::Select(_) => Stage::Select,
        }
    }

    pub fn is_retryable(&self) -> bool {
        match self {
            PipelineError::MeasureDocuments(e) => e.is_retryable(),
            PipelineError::Decode(e) => e.is_retryable(),
            PipelineError::Select(e) => e.is_retryable(),
            _ => false,
        }
    }
}

fn aggregate_err(e: AggregateError) -> PipelineError {
    PipelineError::EstimateTarget(e.to_string())
}

/// Expected aggregate of an instance from measured documents (or gold, for
/// oracle policies).
pub fn estimate_target(
    instance: &Instance,
    document_measurements: &[Measurement],
    policy: &SelectionPolicy,
    measurer: &dyn Measurer,
) -> Result<AggregateTarget, PipelineError> {
    if policy.kind.is_oracle() {
        return match (instance.gold_aggregate, policy.oracle_target) {
            (GoldAggregate::Fraction(v), OracleTarget::Gold) => {
                Ok(AggregateTarget::fraction_positive(v, policy.threshold))
            }
            (GoldAggregate::Fraction(_), OracleTarget::ReferenceMeasure) => {
                let m = measurer
                    .measure(&instance.reference_summary)
                    .map_err(|e| PipelineError::EstimateTarget(format!("reference summary: {e}")))?;
                let v = m.value().ok_or_else(|| {
                    PipelineError::EstimateTarget("reference summary measurement is not continuous".into())
                })?;
                let mut t = AggregateTarget::mean(v);
                t.label = Some(Label::from_bool(v >= policy.threshold));
                Ok(t)
            }
            (GoldAggregate::Binary { label, p_value }, _) => Ok(AggregateTarget {
                kind: AggregateKind::MetaAnalysis,
                value: instance.gold_aggregate.value(),
                label: Some(label),
                p_value,
            }),
        };
    }
    match instance.task {
        Task::Continuous => aggregate::fraction_positive(document_measurements, policy.threshold)
            .map(|v| AggregateTarget::fraction_positive(v, policy.threshold))
            .map_err(aggregate_err),
        Task::Binary => {
            let labels: Vec<Label> = document_measurements
                .iter()
                .map(|m| m.label_at(policy.threshold))
                .collect();
            aggregate::majority_vote(&labels)
                .map(AggregateTarget::majority)
                .map_err(aggregate_err)
        }
    }
}

/// Measure the inputs, estimate the target aggregate, generate candidates
/// from the linearized inputs and select among them under `policy`.
pub fn cautious_summarize(
    instance: &Instance,
    generator: &dyn Generator,
    measurer: &dyn Measurer,
    policy: &SelectionPolicy,
    linearize_options: &LinearizeOptions,
) -> Result<SelectionOutcome, PipelineError> {
    policy.validate().map_err(PipelineError::Select)?;
    let doc_texts: Vec<&str> = instance.documents.iter().map(|d| d.text.as_str()).collect();
    let document_measurements = measurer
        .measure_batch(&doc_texts)
        .map_err(PipelineError::MeasureDocuments)?;
    let target = estimate_target(instance, &document_measurements, policy, measurer)?;

    let linear = linearize(instance, &linearize_options.separator, linearize_options.max_length)
        .map_err(PipelineError::Linearize)?;
    let request = GenerationRequest {
        instance,
        conditioning: &linear.text,
        target: Some(target.value),
    };
    let set = generator.generate(&request).map_err(PipelineError::Decode)?;
    let candidates = measure_candidates(&set, measurer).map_err(PipelineError::Select)?;
    let provenance = Provenance {
        document_measurements,
        candidates: Vec::new(),
        rank_basis: None,
        notes: linear.warnings,
    };
    if policy.kind.is_nearest() {
        nearest_with(candidates, target, policy.abstain_delta, provenance).map_err(PipelineError::Select)
    } else {
        let label = target
            .label
            .ok_or_else(|| PipelineError::EstimateTarget("target has no label".into()))?;
        Ok(agree_with(candidates, target, label, policy.threshold, provenance))
    }
}
