//! Measurement models: map any text to the latent property being synthesized.
//!
//! A measurement is either a continuous score in `[0, 1]` (sentiment) or a
//! binary label with a confidence (significant effect or not). The builtin
//! measurers are deterministic desk-scale stand-ins; real neural measurers
//! attach through [`ExternalMeasurer`] and the line protocol in
//! [`crate::protocol`].

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{ConnectionPool, Endpoint, MeasureReply, MeasureRequest, ProtocolError};

/// Binary outcome of a measurement.
///
/// For evidence syntheses this is "significant effect" vs "no significant
/// effect". Continuous sentiment binarizes onto the same type, with
/// [`Label::POSITIVE`] mapping to `Significant`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Significant,
    NotSignificant,
}

impl Label {
    pub const POSITIVE: Label = Label::Significant;
    pub const NEGATIVE: Label = Label::NotSignificant;

    pub fn is_positive(self) -> bool {
        self == Label::Significant
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Significant
        } else {
            Label::NotSignificant
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Significant => "significant",
            Label::NotSignificant => "not_significant",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = MeasureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "significant" | "positive" | "sig" | "1" => Ok(Label::Significant),
            "not_significant" | "negative" | "not" | "0" => Ok(Label::NotSignificant),
            other => Err(MeasureError::InvalidLabel(other.to_string())),
        }
    }
}

/// Output of a measurement model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Measurement {
    Continuous { value: f64 },
    Binary { label: Label, confidence: f64 },
}

impl Measurement {
    pub fn continuous(value: f64) -> Result<Self, MeasureError> {
        if !(0.0..=1.0).contains(&value) {
            return Err(MeasureError::OutOfRange { what: "value", value });
        }
        Ok(Measurement::Continuous { value })
    }

    pub fn binary(label: Label, confidence: f64) -> Result<Self, MeasureError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(MeasureError::OutOfRange {
                what: "confidence",
                value: confidence,
            });
        }
        Ok(Measurement::Binary { label, confidence })
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            Measurement::Continuous { value } => Some(value),
            Measurement::Binary { .. } => None,
        }
    }

    pub fn label(&self) -> Option<Label> {
        match *self {
            Measurement::Continuous { .. } => None,
            Measurement::Binary { label, .. } => Some(label),
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, Measurement::Continuous { .. })
    }

    /// Label of this measurement: binarized at `threshold` when continuous,
    /// unchanged when already binary.
    pub fn label_at(&self, threshold: f64) -> Label {
        match *self {
            Measurement::Continuous { value } => Label::from_bool(value >= threshold),
            Measurement::Binary { label, .. } => label,
        }
    }

    /// Numeric view used where a scalar is needed: the value for continuous
    /// measurements, 1.0/0.0 for significant/not significant labels.
    pub fn as_scalar(&self) -> f64 {
        match *self {
            Measurement::Continuous { value } => value,
            Measurement::Binary { label, .. } => {
                if label.is_positive() {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("text is empty")]
    EmptyText,
    #[error("{what} {value} outside [0, 1]")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("expected a continuous measurement, got a binary one")]
    NotContinuous,
    #[error("expected a binary measurement, got a continuous one")]
    NotBinary,
    #[error("invalid label {0:?}")]
    InvalidLabel(String),
    #[error("external measurer requires an endpoint")]
    MissingEndpoint,
    #[error("lexicon {path}: {reason}")]
    Lexicon { path: PathBuf, reason: String },
    #[error("no stored measurement for text {0:?}")]
    Unknown(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("batch element {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<MeasureError>,
    },
}

impl MeasureError {
    /// True for transport failures (unreachable, timeout, disconnect) that may
    /// succeed when retried.
    pub fn is_retryable(&self) -> bool {
        match self {
            MeasureError::Protocol(e) => e.is_retryable(),
            MeasureError::Batch { source, .. } => source.is_retryable(),
            _ => false,
        }
    }
}

/// The measurement-model contract `g`.
pub trait Measurer: Send + Sync {
    fn measure(&self, text: &str) -> Result<Measurement, MeasureError>;

    /// Element `i` of the result corresponds to `texts[i]`. A single failure
    /// fails the batch and names the failing index.
    fn measure_batch(&self, texts: &[&str]) -> Result<Vec<Measurement>, MeasureError> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                self.measure(t).map_err(|e| MeasureError::Batch {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

impl<M: Measurer + ?Sized> Measurer for Arc<M> {
    fn measure(&self, text: &str) -> Result<Measurement, MeasureError> {
        (**self).measure(text)
    }

    fn measure_batch(&self, texts: &[&str]) -> Result<Vec<Measurement>, MeasureError> {
        (**self).measure_batch(texts)
    }
}

impl<M: Measurer + ?Sized> Measurer for Box<M> {
    fn measure(&self, text: &str) -> Result<Measurement, MeasureError> {
        (**self).measure(text)
    }

    fn measure_batch(&self, texts: &[&str]) -> Result<Vec<Measurement>, MeasureError> {
        (**self).measure_batch(texts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurerKind {
    BuiltinLexicon,
    BuiltinKeyword,
    External,
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout_ms() -> u64 {
    30_000
}

/// Configuration-level description of a measurer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurerSpec {
    pub kind: MeasurerKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub lexicon_path: Option<PathBuf>,
    /// Maximum concurrent requests to an external measurer.
    #[serde(default = "default_in_flight")]
    pub in_flight: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

impl MeasurerSpec {
    pub fn lexicon() -> Self {
        Self::of_kind(MeasurerKind::BuiltinLexicon)
    }

    pub fn keyword() -> Self {
        Self::of_kind(MeasurerKind::BuiltinKeyword)
    }

    pub fn external(endpoint: impl Into<String>) -> Self {
        MeasurerSpec {
            endpoint: Some(endpoint.into()),
            ..Self::of_kind(MeasurerKind::External)
        }
    }

    fn of_kind(kind: MeasurerKind) -> Self {
        MeasurerSpec {
            kind,
            endpoint: None,
            lexicon_path: None,
            in_flight: default_in_flight(),
            timeout_ms: default_timeout_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), MeasureError> {
        if self.kind == MeasurerKind::External && self.endpoint.is_none() {
            return Err(MeasureError::MissingEndpoint);
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Arc<dyn Measurer>, MeasureError> {
        self.validate()?;
        Ok(match self.kind {
            MeasurerKind::BuiltinLexicon => match &self.lexicon_path {
                Some(p) => Arc::new(LexiconMeasurer::from_file(p)?),
                None => Arc::new(LexiconMeasurer::builtin()),
            },
            MeasurerKind::BuiltinKeyword => Arc::new(KeywordMeasurer::builtin()),
            MeasurerKind::External => {
                let endpoint: Endpoint = self.endpoint.as_deref().ok_or(MeasureError::MissingEndpoint)?.parse()?;
                Arc::new(ExternalMeasurer::new(
                    endpoint,
                    self.in_flight.max(1),
                    Duration::from_millis(self.timeout_ms),
                ))
            }
        })
    }
}

pub fn measure_text(spec: &MeasurerSpec, text: &str) -> Result<Measurement, MeasureError> {
    spec.build()?.measure(text)
}

pub fn measure_batch(spec: &MeasurerSpec, texts: &[&str]) -> Result<Vec<Measurement>, MeasureError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    spec.build()?.measure_batch(texts)
}

/// Binarize a continuous measurement.
///
/// The label is positive iff `value >= threshold`. Confidence is the distance
/// to the threshold rescaled by the largest distance possible on that side,
/// so it lies in `[0, 1]`.
pub fn binarize(m: &Measurement, threshold: f64) -> Result<Measurement, MeasureError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(MeasureError::OutOfRange {
            what: "threshold",
            value: threshold,
        });
    }
    let value = m.value().ok_or(MeasureError::NotContinuous)?;
    let (label, span) = if value >= threshold {
        (Label::POSITIVE, 1.0 - threshold)
    } else {
        (Label::NEGATIVE, threshold)
    };
    let confidence = if span > 0.0 {
        ((value - threshold).abs() / span).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Measurement::binary(label, confidence)
}

/// Lowercased word tokens; punctuation other than apostrophes splits words.
pub(crate) fn word_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.trim_matches('\'').to_lowercase())
        .filter(|w| !w.is_empty())
}

const POSITIVE_WORDS: &[&str] = &[
    "amazing",
    "beautiful",
    "best",
    "brilliant",
    "captivating",
    "charming",
    "clever",
    "compelling",
    "delight",
    "delightful",
    "effective",
    "engaging",
    "enjoyable",
    "entertaining",
    "excellent",
    "exceptional",
    "fantastic",
    "fascinating",
    "fine",
    "fresh",
    "fun",
    "funny",
    "gem",
    "good",
    "gorgeous",
    "great",
    "gripping",
    "heartfelt",
    "hilarious",
    "impressive",
    "inspired",
    "intelligent",
    "love",
    "loved",
    "lovely",
    "magnificent",
    "marvelous",
    "masterpiece",
    "memorable",
    "moving",
    "outstanding",
    "perfect",
    "pleasant",
    "pleasure",
    "powerful",
    "remarkable",
    "rewarding",
    "riveting",
    "satisfying",
    "smart",
    "solid",
    "strong",
    "stunning",
    "superb",
    "sweet",
    "terrific",
    "thoughtful",
    "thrilling",
    "touching",
    "triumph",
    "wonderful",
    "worthwhile",
];

const NEGATIVE_WORDS: &[&str] = &[
    "annoying",
    "awful",
    "bad",
    "bland",
    "bloated",
    "boring",
    "clumsy",
    "confused",
    "crass",
    "crude",
    "dreadful",
    "dull",
    "embarrassing",
    "empty",
    "failure",
    "flat",
    "forgettable",
    "hollow",
    "horrible",
    "inconsistent",
    "lame",
    "lazy",
    "lifeless",
    "mediocre",
    "mess",
    "messy",
    "miss",
    "misses",
    "muddled",
    "painful",
    "pointless",
    "poor",
    "predictable",
    "ridiculous",
    "sloppy",
    "slow",
    "stale",
    "stupid",
    "tedious",
    "terrible",
    "tiresome",
    "ugly",
    "uneven",
    "uninspired",
    "unfunny",
    "waste",
    "weak",
    "worst",
    "worse",
];

/// Polarity-lexicon sentiment scorer.
///
/// `score = (pos - neg) / (pos + neg + 1)`, mapped affinely from `(-1, 1)`
/// onto `[0, 1]`. Zero lexicon hits give the neutral point 0.5.
#[derive(Debug, Clone)]
pub struct LexiconMeasurer {
    positive: HashSet<String>,
    negative: HashSet<String>,
}

impl LexiconMeasurer {
    pub fn builtin() -> Self {
        LexiconMeasurer {
            positive: POSITIVE_WORDS.iter().map(|w| w.to_string()).collect(),
            negative: NEGATIVE_WORDS.iter().map(|w| w.to_string()).collect(),
        }
    }

    /// Load a lexicon file: one `word polarity` pair per line, polarity being
    /// `positive`/`negative` (or `+`/`-`). Blank lines and `#` comments are skipped.
    pub fn from_file(path: &Path) -> Result<Self, MeasureError> {
        let err = |reason: String| MeasureError::Lexicon {
            path: path.to_path_buf(),
            reason,
        };
        let content = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut positive = HashSet::new();
        let mut negative = HashSet::new();
        for (lineno, line) in content.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(word), Some(polarity), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(err(format!("line {}: expected `word polarity`", lineno + 1)));
            };
            match polarity {
                "positive" | "pos" | "+" => positive.insert(word.to_lowercase()),
                "negative" | "neg" | "-" => negative.insert(word.to_lowercase()),
                other => return Err(err(format!("line {}: unknown polarity {other:?}", lineno + 1))),
            };
        }
        Ok(LexiconMeasurer { positive, negative })
    }

    /// Positive and negative lexicon hit counts.
    pub fn hits(&self, text: &str) -> (usize, usize) {
        word_tokens(text).fold((0, 0), |(p, n), w| {
            if self.positive.contains(&w) {
                (p + 1, n)
            } else if self.negative.contains(&w) {
                (p, n + 1)
            } else {
                (p, n)
            }
        })
    }

    /// Score on `[0, 1]` without the empty-text check.
    pub fn score(&self, text: &str) -> f64 {
        let (p, n) = self.hits(text);
        let raw = (p as f64 - n as f64) / (p as f64 + n as f64 + 1.0);
        (raw + 1.0) / 2.0
    }
}

impl Measurer for LexiconMeasurer {
    fn measure(&self, text: &str) -> Result<Measurement, MeasureError> {
        if text.trim().is_empty() {
            return Err(MeasureError::EmptyText);
        }
        Measurement::continuous(self.score(text))
    }
}

/// One cue-phrase rule of the keyword measurer.
#[derive(Debug, Clone, PartialEq)]
pub struct KeywordRule {
    pub cue: String,
    pub label: Label,
    pub confidence: f64,
}

const NEGATED_CUES: &[&str] = &[
    "no significant",
    "not significant",
    "not statistically significant",
    "non-significant",
    "nonsignificant",
    "did not differ",
    "do not differ",
    "did not significantly",
    "no statistically significant",
    "no difference",
    "no differences",
    "no clear",
    "no evidence",
    "insufficient evidence",
    "not improve",
    "not reduce",
    "failed to show",
];

const POSITIVE_CUES: &[&str] = &[
    "significantly improved",
    "significantly reduced",
    "significantly increased",
    "significantly decreased",
    "significantly lower",
    "significantly higher",
    "significantly better",
    "significantly fewer",
    "significantly more",
    "significant improvement",
    "significant reduction",
    "significant increase",
    "significant decrease",
    "significant difference",
    "significant effect",
    "significant benefit",
    "statistically significant",
    "was effective",
    "were effective",
];

const DEFAULT_CONFIDENCE: f64 = 0.5;
const CUE_CONFIDENCE: f64 = 0.9;

/// Significance classifier over an ordered list of cue phrases.
///
/// Rules are matched against the lowercased text in order; the first rule whose
/// cue occurs wins. Negated cues precede affirmative ones, so "no significant
/// difference" never reaches "significant difference". Texts matching no rule
/// are labelled not significant.
#[derive(Debug, Clone)]
pub struct KeywordMeasurer {
    rules: Vec<KeywordRule>,
}

impl KeywordMeasurer {
    pub fn builtin() -> Self {
        let rule = |label| {
            move |cue: &&str| KeywordRule {
                cue: cue.to_string(),
                label,
                confidence: CUE_CONFIDENCE,
            }
        };
        let rules = NEGATED_CUES
            .iter()
            .map(rule(Label::NotSignificant))
            .chain(POSITIVE_CUES.iter().map(rule(Label::Significant)))
            .collect();
        KeywordMeasurer { rules }
    }

    pub fn with_rules(rules: Vec<KeywordRule>) -> Self {
        KeywordMeasurer { rules }
    }

    pub fn rules(&self) -> &[KeywordRule] {
        &self.rules
    }

    /// Index of the first matching rule.
    pub fn matched_rule(&self, text: &str) -> Option<usize> {
        let lower = text.to_lowercase();
        self.rules.iter().position(|r| lower.contains(&r.cue))
    }
}

impl Measurer for KeywordMeasurer {
    fn measure(&self, text: &str) -> Result<Measurement, MeasureError> {
        if text.trim().is_empty() {
            return Err(MeasureError::EmptyText);
        }
        match self.matched_rule(text) {
            Some(i) => Measurement::binary(self.rules[i].label, self.rules[i].confidence),
            None => Measurement::binary(Label::NotSignificant, DEFAULT_CONFIDENCE),
        }
    }
}

/// Replays stored measurements keyed by exact text.
///
/// Used to re-run selection over candidate sets that were measured elsewhere.
#[derive(Debug, Clone, Default)]
pub struct LookupMeasurer {
    table: HashMap<String, Measurement>,
}

impl LookupMeasurer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, text: impl Into<String>, m: Measurement) {
        self.table.insert(text.into(), m);
    }
}

impl FromIterator<(String, Measurement)> for LookupMeasurer {
    fn from_iter<I: IntoIterator<Item = (String, Measurement)>>(iter: I) -> Self {
        LookupMeasurer {
            table: iter.into_iter().collect(),
        }
    }
}

impl Measurer for LookupMeasurer {
    fn measure(&self, text: &str) -> Result<Measurement, MeasureError> {
        self.table
            .get(text)
            .copied()
            .ok_or_else(|| MeasureError::Unknown(text.to_string()))
    }
}

/// Client for a measurer speaking the line protocol.
///
/// Up to `in_flight` requests run concurrently, one per connection; batch
/// outputs keep input order.
pub struct ExternalMeasurer {
    pool: ConnectionPool,
}

impl ExternalMeasurer {
    pub fn new(endpoint: Endpoint, in_flight: usize, timeout: Duration) -> Self {
        ExternalMeasurer {
            pool: ConnectionPool::new(endpoint, in_flight, timeout),
        }
    }

    pub fn endpoint(&self) -> &Endpoint {
        self.pool.endpoint()
    }

    fn request(&self, text: &str) -> Result<Measurement, MeasureError> {
        let reply: MeasureReply = self.pool.with_connection(|conn| {
            let req_id = conn.next_req_id();
            conn.send(&MeasureRequest {
                req_id: req_id.clone(),
                text: text.to_string(),
            })?;
            let line = conn.recv()?;
            let reply: MeasureReply = conn.parse(&line)?;
            conn.expect_req_id(&req_id, &reply.req_id)?;
            Ok(reply)
        })?;
        Ok(reply.into_measurement(self.pool.endpoint())?)
    }
}

impl Measurer for ExternalMeasurer {
    fn measure(&self, text: &str) -> Result<Measurement, MeasureError> {
        if text.trim().is_empty() {
            return Err(MeasureError::EmptyText);
        }
        self.request(text)
    }

    fn measure_batch(&self, texts: &[&str]) -> Result<Vec<Measurement>, MeasureError> {
        let workers = self.pool.capacity().min(texts.len()).max(1);
        let chunk = texts.len().div_ceil(workers).max(1);
        let results: Vec<Result<Vec<Measurement>, MeasureError>> = std::thread::scope(|s| {
            let handles: Vec<_> = texts
                .chunks(chunk)
                .enumerate()
                .map(|(ci, part)| {
                    s.spawn(move || {
                        part.iter()
                            .enumerate()
                            .map(|(j, t)| {
                                self.measure(t).map_err(|e| MeasureError::Batch {
                                    index: ci * chunk + j,
                                    source: Box::new(e),
                                })
                            })
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("measurement worker panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> LexiconMeasurer {
        LexiconMeasurer::builtin()
    }

    #[test]
    fn all_positive_text_scores_above_neutral() {
        let v = lex().measure("excellent superb wonderful").unwrap().value().unwrap();
        assert!(v > 0.5);
        // (3 - 0) / (3 + 0 + 1) = 0.75 -> 0.875
        assert!((v - 0.875).abs() < 1e-12);
    }

    #[test]
    fn zero_hits_is_neutral() {
        assert_eq!(lex().measure("the film runs two hours").unwrap().value(), Some(0.5));
    }

    #[test]
    fn empty_text_rejected() {
        assert!(matches!(lex().measure("   "), Err(MeasureError::EmptyText)));
        assert!(matches!(
            KeywordMeasurer::builtin().measure(""),
            Err(MeasureError::EmptyText)
        ));
    }

    #[test]
    fn keyword_rule_for_no_significant_difference() {
        let k = KeywordMeasurer::builtin();
        let text = "no significant difference was found";
        // "no significant" is the first rule in the list.
        assert_eq!(k.matched_rule(text), Some(0));
        let m = k.measure(text).unwrap();
        assert_eq!(m.label(), Some(Label::NotSignificant));
    }

    #[test]
    fn keyword_rules_cover_affirmative_and_default() {
        let k = KeywordMeasurer::builtin();
        assert_eq!(
            k.measure("The drug significantly reduced mortality").unwrap().label(),
            Some(Label::Significant)
        );
        assert_eq!(
            k.measure("The effect was not statistically significant")
                .unwrap()
                .label(),
            Some(Label::NotSignificant)
        );
        let default = k.measure("patients were enrolled").unwrap();
        assert_eq!(
            default,
            Measurement::Binary {
                label: Label::NotSignificant,
                confidence: 0.5
            }
        );
    }

    #[test]
    fn batch_matches_single_calls() {
        let m = lex();
        assert!(m.measure_batch(&[]).unwrap().is_empty());
        let texts = ["good", "bad", "a good but boring film"];
        let batch = m.measure_batch(&texts).unwrap();
        let single: Vec<_> = texts.iter().map(|t| m.measure(t).unwrap()).collect();
        assert_eq!(batch, single);
        assert!(batch[0].value().unwrap() > batch[1].value().unwrap());
    }

    #[test]
    fn batch_failure_names_index() {
        let err = lex().measure_batch(&["good", " ", "bad"]).unwrap_err();
        assert!(matches!(err, MeasureError::Batch { index: 1, .. }));
    }

    #[test]
    fn spec_level_helpers() {
        assert!(measure_batch(&MeasurerSpec::lexicon(), &[]).unwrap().is_empty());
        let m = measure_text(&MeasurerSpec::keyword(), "significantly improved").unwrap();
        assert_eq!(m.label(), Some(Label::Significant));
        let bad = MeasurerSpec {
            endpoint: None,
            ..MeasurerSpec::external("x")
        };
        assert!(matches!(bad.build(), Err(MeasureError::MissingEndpoint)));
    }

    #[test]
    fn binarize_examples() {
        let c = |v| Measurement::continuous(v).unwrap();
        assert_eq!(binarize(&c(0.9), 0.5).unwrap().label(), Some(Label::POSITIVE));
        assert_eq!(binarize(&c(0.5), 0.5).unwrap().label(), Some(Label::POSITIVE));
        let low = binarize(&c(0.2), 0.5).unwrap();
        assert_eq!(low.label(), Some(Label::NEGATIVE));
        let Measurement::Binary { confidence, .. } = low else {
            unreachable!()
        };
        assert!((confidence - 0.6).abs() < 1e-12);
        let b = Measurement::binary(Label::Significant, 0.3).unwrap();
        assert!(matches!(binarize(&b, 0.5), Err(MeasureError::NotContinuous)));
    }

    #[test]
    fn binarize_edge_thresholds() {
        let one = Measurement::continuous(1.0).unwrap();
        assert_eq!(
            binarize(&one, 1.0).unwrap(),
            Measurement::Binary {
                label: Label::POSITIVE,
                confidence: 0.0
            }
        );
        let zero = Measurement::continuous(0.0).unwrap();
        assert_eq!(binarize(&zero, 0.0).unwrap().label(), Some(Label::POSITIVE));
        assert!(binarize(&zero, 1.5).is_err());
    }

    #[test]
    fn measurement_constructors_validate() {
        assert!(Measurement::continuous(1.2).is_err());
        assert!(Measurement::binary(Label::Significant, -0.1).is_err());
    }

    #[test]
    fn lexicon_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lex.txt");
        std::fs::write(&path, "# tiny\nyay positive\nboo -\n").unwrap();
        let m = LexiconMeasurer::from_file(&path).unwrap();
        assert_eq!(m.hits("Yay yay boo meh"), (2, 1));
        std::fs::write(&path, "yay sideways\n").unwrap();
        assert!(LexiconMeasurer::from_file(&path).is_err());
    }

    #[test]
    fn measurement_wire_shape() {
        let m = Measurement::binary(Label::Significant, 0.9).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"kind":"binary","label":"significant","confidence":0.9}"#);
        let c: Measurement = serde_json::from_str(r#"{"kind":"continuous","value":0.25}"#).unwrap();
        assert_eq!(c.value(), Some(0.25));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn word() -> impl Strategy<Value = String> {
            prop_oneof![
                proptest::sample::select(POSITIVE_WORDS).prop_map(str::to_string),
                proptest::sample::select(NEGATIVE_WORDS).prop_map(str::to_string),
                "[a-z]{1,8}",
            ]
        }

        proptest! {
            #[test]
            fn lexicon_is_monotone_in_positive_words(
                words in proptest::collection::vec(word(), 1..30),
                pos in proptest::sample::select(POSITIVE_WORDS),
            ) {
                let m = LexiconMeasurer::builtin();
                let text = words.join(" ");
                let before = m.score(&text);
                let after = m.score(&format!("{text} {pos}"));
                prop_assert!(after >= before);
                prop_assert!((0.0..=1.0).contains(&before));
            }

            #[test]
            fn lexicon_is_pure(words in proptest::collection::vec(word(), 1..20)) {
                let text = words.join(" ");
                let a = LexiconMeasurer::builtin().measure(&text).unwrap();
                let b = LexiconMeasurer::builtin().measure(&text).unwrap();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn binarize_is_idempotent_on_labels(v in 0.0f64..=1.0, t in 0.0f64..=1.0) {
                let once = binarize(&Measurement::continuous(v).unwrap(), t).unwrap();
                prop_assert_eq!(once.label_at(t), once.label().unwrap());
                prop_assert_eq!(once.label().unwrap(), Measurement::continuous(v).unwrap().label_at(t));
                let Measurement::Binary { confidence, .. } = once else { unreachable!() };
                prop_assert!((0.0..=1.0).contains(&confidence));
            }
        }
    }
}
