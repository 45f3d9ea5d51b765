//! Candidate generation.
//!
//! Decoders search over a [`TokenScorer`], an abstract next-token distribution
//! conditioned on the linearized input. Three searches share one beam-update
//! routine: standard beam search, diverse beam search (groups penalized for
//! repeating tokens chosen by earlier groups at the same position) and
//! measurement-constrained beam search. Anything else that can produce
//! candidate summaries plugs in through [`Generator`].

mod beam;
mod external;
mod ngram;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Instance;
use crate::measure::{MeasureError, Measurement, Measurer};
use crate::protocol::ProtocolError;

pub use beam::{
    beam_search, constrained_beam_search, diverse_beam_search, diverse_beam_search_groups, ConstraintStep,
    ConstraintTrace, Hypothesis,
};
pub use external::{sample_external, ExternalGenerator};
pub use ngram::{train_toy_scorer, NgramScorer, EOS_TOKEN};

pub type TokenId = usize;

/// Tolerance on `Σ exp(log p) = 1` for scorer outputs.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Next-token distribution conditioned on a prefix and an input string.
///
/// `score` returns one natural-log probability per vocabulary entry. Outputs
/// must be normalized and deterministic for a fixed `(prefix, conditioning)`.
pub trait TokenScorer: Send + Sync {
    fn vocabulary(&self) -> &[String];
    fn eos(&self) -> TokenId;
    fn score(&self, prefix: &[TokenId], conditioning: &str) -> Vec<f64>;

    fn render(&self, tokens: &[TokenId]) -> String {
        let vocab = self.vocabulary();
        let eos = self.eos();
        tokens
            .iter()
            .filter(|&&t| t != eos)
            .map(|&t| vocab[t].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl<S: TokenScorer + ?Sized> TokenScorer for Arc<S> {
    fn vocabulary(&self) -> &[String] {
        (**self).vocabulary()
    }
    fn eos(&self) -> TokenId {
        (**self).eos()
    }
    fn score(&self, prefix: &[TokenId], conditioning: &str) -> Vec<f64> {
        (**self).score(prefix, conditioning)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Beam,
    DiverseBeam,
    ConstrainedBeam,
}

fn default_width() -> usize {
    5
}
fn default_groups() -> usize {
    5
}
fn default_beams_per_group() -> usize {
    1
}
fn default_lambda() -> f64 {
    0.5
}
fn default_max_tokens() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    #[serde(default = "default_width")]
    pub beam_width: usize,
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default = "default_beams_per_group")]
    pub beams_per_group: usize,
    #[serde(default = "default_lambda")]
    pub diversity_lambda: f64,
    /// Cap on generated tokens, end-of-sequence included.
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Rank finished hypotheses by per-token log-probability. Off by default.
    #[serde(default)]
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::DiverseBeam,
            beam_width: default_width(),
            groups: default_groups(),
            beams_per_group: default_beams_per_group(),
            diversity_lambda: default_lambda(),
            max_tokens: default_max_tokens(),
            epsilon: None,
            length_normalize: false,
        }
    }
}

impl DecodeConfig {
    pub fn beam(beam_width: usize, max_tokens: usize) -> Self {
        DecodeConfig {
            mode: DecodeMode::Beam,
            beam_width,
            max_tokens,
            ..Default::default()
        }
    }

    pub fn diverse(groups: usize, beams_per_group: usize, lambda: f64, max_tokens: usize) -> Self {
        DecodeConfig {
            mode: DecodeMode::DiverseBeam,
            groups,
            beams_per_group,
            diversity_lambda: lambda,
            max_tokens,
            ..Default::default()
        }
    }

    pub fn constrained(beam_width: usize, epsilon: f64, max_tokens: usize) -> Self {
        DecodeConfig {
            mode: DecodeMode::ConstrainedBeam,
            beam_width,
            epsilon: Some(epsilon),
            max_tokens,
            ..Default::default()
        }
    }

    /// Total number of beams the configured search keeps.
    pub fn total_beams(&self) -> usize {
        match self.mode {
            DecodeMode::DiverseBeam => self.groups * self.beams_per_group,
            _ => self.beam_width,
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |m: &str| Err(DecodeError::Config(m.to_string()));
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        match self.mode {
            DecodeMode::Beam if self.beam_width == 0 => bad("beam_width must be positive"),
            DecodeMode::DiverseBeam if self.groups == 0 || self.beams_per_group == 0 => {
                bad("groups and beams_per_group must be positive")
            }
            DecodeMode::DiverseBeam if !(self.diversity_lambda >= 0.0) => bad("diversity_lambda must be non-negative"),
            DecodeMode::ConstrainedBeam if self.beam_width == 0 => bad("beam_width must be positive"),
            DecodeMode::ConstrainedBeam => match self.epsilon {
                Some(e) if e > 0.0 => Ok(()),
                _ => bad("constrained mode requires a positive epsilon"),
            },
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    /// Sequence log-probability; absent when the backend does not report one.
    #[serde(default)]
    pub log_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurement: Option<Measurement>,
}

impl Candidate {
    pub fn new(text: impl Into<String>, log_prob: Option<f64>) -> Self {
        Candidate {
            text: text.into(),
            log_prob,
            measurement: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub source_instance: String,
}

impl CandidateSet {
    pub fn new(source_instance: impl Into<String>, candidates: Vec<Candidate>) -> Self {
        CandidateSet {
            candidates,
            source_instance: source_instance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.text.as_str()).collect()
    }
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error("scorer contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("{0}")]
    Domain(String),
}

impl DecodeError {
    pub fn is_retryable(&self) -> bool {
        match self {
            DecodeError::Protocol(e) => e.is_retryable(),
            DecodeError::Measure(e) => e.is_retryable(),
            _ => false,
        }
    }
}

/// What a generator sees for one instance.
#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub instance: &'a Instance,
    /// Linearized documents, in the instance's current order.
    pub conditioning: &'a str,
    /// Expected aggregate, used by constrained decoding.
    pub target: Option<f64>,
}

/// Anything that turns an instance into candidate summaries.
pub trait Generator: Send + Sync {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<CandidateSet, DecodeError>;
}

impl<G: Generator + ?Sized> Generator for Arc<G> {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<CandidateSet, DecodeError> {
        (**self).generate(request)
    }
}

/// Generator backed by a token scorer and one of the beam decoders.
pub struct ScorerGenerator {
    scorer: Arc<dyn TokenScorer>,
    config: DecodeConfig,
    measurer: Option<Arc<dyn Measurer>>,
}

impl ScorerGenerator {
    pub fn new(scorer: Arc<dyn TokenScorer>, config: DecodeConfig) -> Result<Self, DecodeError> {
        config.validate()?;
        Ok(ScorerGenerator {
            scorer,
            config,
            measurer: None,
        })
    }

    /// Measurer used by constrained decoding.
    pub fn with_measurer(mut self, measurer: Arc<dyn Measurer>) -> Self {
        self.measurer = Some(measurer);
        self
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.config
    }
}

impl Generator for ScorerGenerator {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<CandidateSet, DecodeError> {
        let scorer = self.scorer.as_ref();
        let mut set = match self.config.mode {
            DecodeMode::Beam => beam_search(scorer, request.conditioning, &self.config)?,
            DecodeMode::DiverseBeam => diverse_beam_search(scorer, request.conditioning, &self.config)?,
            DecodeMode::ConstrainedBeam => {
                let measurer = self
                    .measurer
                    .as_deref()
                    .ok_or_else(|| DecodeError::Config("constrained mode needs a measurer".into()))?;
                let target = request
                    .target
                    .ok_or_else(|| DecodeError::Config("constrained mode needs a target".into()))?;
                constrained_beam_search(scorer, request.conditioning, &self.config, measurer, target)?.0
            }
        };
        // An immediate end-of-sequence is not a summary and cannot be measured.
        set.candidates.retain(|c| !c.text.trim().is_empty());
        set.source_instance = request.instance.id.clone();
        Ok(set)
    }
}
