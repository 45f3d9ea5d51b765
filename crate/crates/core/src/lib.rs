//! Synthesis evaluation and controlled decoding for multi-document summarizers.
//!
//! A summary *synthesizes* its inputs when a latent property measured on the
//! summary (sentiment, whether a treatment effect is significant) matches an
//! aggregate of the same property measured on each input. This crate provides:
//!
//! * [`corpus`]: loading, validating and linearizing multi-document instances.
//! * [`measure`]: the measurement-model contract plus builtin and external measurers.
//! * [`aggregate`]: aggregation functions, including fixed-effects meta-analysis.
//! * [`decode`]: beam, diverse beam and measurement-constrained beam search over a
//!   pluggable token scorer, a count-based toy scorer, and an external sampling client.
//! * [`select`]: choose the candidate best aligned with the expected aggregate, or abstain.
//! * [`perturb`]: input-order and input-composition sensitivity studies.
//! * [`metrics`]: calibration and classification statistics, ROUGE-1 and histograms.
//! * [`protocol`]: the line-delimited JSON wire protocol and an echo test backend.
//! * [`runner`]: experiment orchestration, record persistence and plot-data emission.

// Negated comparisons such as `!(x > 0.0)` deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod corpus;
pub mod decode;
pub mod measure;
pub mod metrics;
mod par;
pub mod perturb;
pub mod protocol;
pub mod runner;
pub mod select;

pub use aggregate::{AggregateTarget, MetaAnalysisResult, Study};
pub use corpus::{Corpus, Document, Instance, Task};
pub use decode::{Candidate, CandidateSet, DecodeConfig, Generator, TokenScorer};
pub use measure::{Label, Measurement, Measurer, MeasurerSpec};
pub use select::{SelectionOutcome, SelectionPolicy};
