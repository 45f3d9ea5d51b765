//! Multi-document instances: loading, validation and linearization.
//!
//! Two line-oriented record schemas are supported, one JSON object per line:
//!
//! * movies: `{"id", "reviews": [{"id", "text"}], "meta_review", "tomatometer"}`
//! * trials: `{"id", "studies": [{"id", "text", "effect"?, "variance"?, "gold_label"?}], "summary", "p_value"?}`

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{fixed_effects_meta_analysis, Study, SIGNIFICANCE_LEVEL};
use crate::measure::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    #[default]
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    Movies,
    Trials,
}

impl Schema {
    pub fn task(self) -> Task {
        match self {
            Schema::Movies => Task::Continuous,
            Schema::Trials => Task::Binary,
        }
    }
}

impl FromStr for Schema {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "movies" => Ok(Schema::Movies),
            "trials" => Ok(Schema::Trials),
            other => Err(format!("unknown schema {other:?} (expected movies or trials)")),
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schema::Movies => "movies",
            Schema::Trials => "trials",
        })
    }
}

/// Per-document gold measure `z_ij`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GoldMeasure {
    Continuous(f64),
    Label(Label),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    /// Aggregation weight; 1.0 gives the unweighted mean.
    pub weight: f64,
    pub gold_measure: Option<GoldMeasure>,
    pub effect: Option<f64>,
    pub variance: Option<f64>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            weight: 1.0,
            gold_measure: None,
            effect: None,
            variance: None,
        }
    }

    pub fn with_study(mut self, effect: f64, variance: f64) -> Self {
        self.effect = Some(effect);
        self.variance = Some(variance);
        self
    }

    pub fn study(&self) -> Option<Study> {
        Some(Study {
            effect: self.effect?,
            variance: self.variance?,
        })
    }

    pub fn validate(&self) -> Result<(), InvalidInstance> {
        let bad = |reason: String| InvalidInstance::Document {
            id: self.id.clone(),
            reason,
        };
        if self.text.trim().is_empty() {
            return Err(bad("text is empty".into()));
        }
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(bad(format!("weight must be non-negative, got {}", self.weight)));
        }
        if let Some(v) = self.variance {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad("variance must be positive".into()));
            }
        }
        if let Some(e) = self.effect {
            if !e.is_finite() {
                return Err(bad("effect must be finite".into()));
            }
        }
        if let Some(GoldMeasure::Continuous(z)) = self.gold_measure {
            if !(0.0..=1.0).contains(&z) {
                return Err(bad(format!("gold measure {z} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Gold aggregate `z_i` of an instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldAggregate {
    /// Fraction of positive inputs (the Tomatometer for movies).
    Fraction(f64),
    /// Significance of the pooled effect. `p_value` is kept when the source
    /// recorded one; otherwise the label was resolved from the study statistics.
    Binary { label: Label, p_value: Option<f64> },
}

impl GoldAggregate {
    pub fn value(&self) -> f64 {
        match *self {
            GoldAggregate::Fraction(v) => v,
            GoldAggregate::Binary { label, .. } => {
                if label.is_positive() {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn label(&self, threshold: f64) -> Label {
        match *self {
            GoldAggregate::Fraction(v) => Label::from_bool(v >= threshold),
            GoldAggregate::Binary { label, .. } => label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    /// Order is significant: it is what permutation studies vary.
    pub documents: Vec<Document>,
    pub reference_summary: String,
    pub gold_aggregate: GoldAggregate,
    pub task: Task,
}

impl Instance {
    pub fn validate(&self) -> Result<(), InvalidInstance> {
        if self.documents.is_empty() {
            return Err(InvalidInstance::NoDocuments);
        }
        for d in &self.documents {
            d.validate()?;
        }
        match (self.task, self.gold_aggregate) {
            (Task::Continuous, GoldAggregate::Fraction(v)) => {
                if !(0.0..=1.0).contains(&v) {
                    return Err(InvalidInstance::Gold(format!("aggregate {v} outside [0, 1]")));
                }
            }
            (Task::Binary, GoldAggregate::Binary { p_value, .. }) => {
                if let Some(p) = p_value {
                    if !(p > 0.0 && p <= 1.0) {
                        return Err(InvalidInstance::Gold(format!("p_value {p} outside (0, 1]")));
                    }
                }
            }
            (task, gold) => {
                return Err(InvalidInstance::Gold(format!("{gold:?} does not fit a {task:?} task")));
            }
        }
        Ok(())
    }

    /// Study statistics of every document, or `None` if any document lacks them.
    pub fn studies(&self) -> Option<Vec<Study>> {
        self.documents.iter().map(Document::study).collect()
    }

    pub fn with_documents(&self, documents: Vec<Document>) -> Instance {
        Instance {
            documents,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InvalidInstance {
    #[error("instance has no documents")]
    NoDocuments,
    #[error("document {id}: {reason}")]
    Document { id: String, reason: String },
    #[error("gold aggregate: {0}")]
    Gold(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub instances: Vec<Instance>,
    pub split: Split,
    pub task: Task,
}

impl Corpus {
    pub fn new(instances: Vec<Instance>, task: Task) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for inst in &instances {
            if inst.task != task {
                return Err(CorpusError::Invalid {
                    id: inst.id.clone(),
                    source: InvalidInstance::Gold(format!("task {:?} in a {task:?} corpus", inst.task)),
                });
            }
            inst.validate().map_err(|source| CorpusError::Invalid {
                id: inst.id.clone(),
                source,
            })?;
            if !seen.insert(inst.id.as_str()) {
                return Err(CorpusError::DuplicateId(inst.id.clone()));
            }
        }
        Ok(Corpus {
            instances,
            split: Split::default(),
            task,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Write the corpus as records of `schema`, one per line.
    pub fn write_records<W: Write>(&self, schema: Schema, mut out: W) -> Result<(), CorpusError> {
        if schema.task() != self.task {
            return Err(CorpusError::SchemaMismatch {
                schema,
                task: self.task,
            });
        }
        for inst in &self.instances {
            let line = match schema {
                Schema::Movies => serde_json::to_string(&MoviesRecord::from_instance(inst)),
                Schema::Trials => serde_json::to_string(&TrialsRecord::from_instance(inst)),
            }
            .expect("records serialize");
            writeln!(out, "{line}").map_err(|source| CorpusError::Write { source })?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("write failed: {source}")]
    Write {
        #[source]
        source: io::Error,
    },
    #[error("instance {id}: {source}")]
    Invalid {
        id: String,
        #[source]
        source: InvalidInstance,
    },
    #[error("duplicate instance id {0:?}")]
    DuplicateId(String),
    #[error("schema {schema} cannot hold a {task:?} corpus")]
    SchemaMismatch { schema: Schema, task: Task },
}

/// A record that failed to parse or validate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordError {
    pub line: usize,
    pub id: Option<String>,
    pub message: String,
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.id {
            Some(id) => write!(f, "line {} ({id}): {}", self.line, self.message),
            None => write!(f, "line {}: {}", self.line, self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub errors: Vec<RecordError>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoviesRecord {
    pub id: String,
    pub reviews: Vec<ReviewRecord>,
    pub meta_review: String,
    pub tomatometer: f64,
}

impl MoviesRecord {
    fn from_instance(inst: &Instance) -> Self {
        MoviesRecord {
            id: inst.id.clone(),
            reviews: inst
                .documents
                .iter()
                .map(|d| ReviewRecord {
                    id: d.id.clone(),
                    text: d.text.clone(),
                })
                .collect(),
            meta_review: inst.reference_summary.clone(),
            tomatometer: inst.gold_aggregate.value(),
        }
    }

    fn into_instance(self) -> Result<Instance, InvalidInstance> {
        let inst = Instance {
            id: self.id,
            documents: self.reviews.into_iter().map(|r| Document::new(r.id, r.text)).collect(),
            reference_summary: self.meta_review,
            gold_aggregate: GoldAggregate::Fraction(self.tomatometer),
            task: Task::Continuous,
        };
        inst.validate()?;
        Ok(inst)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effect: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialsRecord {
    pub id: String,
    pub studies: Vec<StudyRecord>,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
}

impl TrialsRecord {
    fn from_instance(inst: &Instance) -> Self {
        let p_value = match inst.gold_aggregate {
            GoldAggregate::Binary { p_value, .. } => p_value,
            GoldAggregate::Fraction(_) => None,
        };
        TrialsRecord {
            id: inst.id.clone(),
            studies: inst
                .documents
                .iter()
                .map(|d| StudyRecord {
                    id: d.id.clone(),
                    text: d.text.clone(),
                    effect: d.effect,
                    variance: d.variance,
                    gold_label: match d.gold_measure {
                        Some(GoldMeasure::Label(l)) => Some(l),
                        _ => None,
                    },
                })
                .collect(),
            summary: inst.reference_summary.clone(),
            p_value,
        }
    }

    fn into_instance(self) -> Result<Instance, InvalidInstance> {
        let documents: Vec<Document> = self
            .studies
            .into_iter()
            .map(|s| Document {
                id: s.id,
                text: s.text,
                weight: 1.0,
                gold_measure: s.gold_label.map(GoldMeasure::Label),
                effect: s.effect,
                variance: s.variance,
            })
            .collect();
        let mut inst = Instance {
            id: self.id,
            documents,
            reference_summary: self.summary,
            gold_aggregate: GoldAggregate::Binary {
                label: Label::NotSignificant,
                p_value: self.p_value,
            },
            task: Task::Binary,
        };
        inst.validate()?;
        let label = match self.p_value {
            Some(p) => Label::from_bool(p < SIGNIFICANCE_LEVEL),
            None => {
                let studies = inst.studies().ok_or_else(|| {
                    InvalidInstance::Gold("needs p_value or effect and variance on every study".into())
                })?;
                let ma = fixed_effects_meta_analysis(&studies).map_err(|e| InvalidInstance::Gold(e.to_string()))?;
                Label::from_bool(ma.significant)
            }
        };
        inst.gold_aggregate = GoldAggregate::Binary {
            label,
            p_value: self.p_value,
        };
        Ok(inst)
    }
}

fn parse_record(line: &str, schema: Schema) -> Result<Instance, (Option<String>, String)> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| (None, e.to_string()))?;
    let id = value.get("id").and_then(|v| v.as_str()).map(str::to_string);
    let result = match schema {
        Schema::Movies => serde_json::from_value::<MoviesRecord>(value)
            .map_err(|e| e.to_string())
            .and_then(|r| r.into_instance().map_err(|e| e.to_string())),
        Schema::Trials => serde_json::from_value::<TrialsRecord>(value)
            .map_err(|e| e.to_string())
            .and_then(|r| r.into_instance().map_err(|e| e.to_string())),
    };
    result.map_err(|msg| (id, msg))
}

/// Parse records from text. Malformed or invalid records are collected with
/// their 1-based line numbers; blank lines are ignored.
pub fn parse_corpus(content: &str, schema: Schema) -> LoadedCorpus {
    let mut instances = Vec::new();
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(line, schema) {
            Ok(inst) => {
                if seen.insert(inst.id.clone()) {
                    instances.push(inst);
                } else {
                    errors.push(RecordError {
                        line: i + 1,
                        id: Some(inst.id.clone()),
                        message: format!("duplicate instance id {:?}", inst.id),
                    });
                }
            }
            Err((id, message)) => errors.push(RecordError {
                line: i + 1,
                id,
                message,
            }),
        }
    }
    if instances.is_empty() && errors.is_empty() {
        warnings.push("corpus is empty".to_string());
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    for e in &errors {
        log::warn!("skipping record at {e}");
    }
    LoadedCorpus {
        corpus: Corpus {
            instances,
            split: Split::default(),
            task: schema.task(),
        },
        errors,
        warnings,
    }
}

/// Load a record file. Only an unreadable file is fatal.
pub fn load_corpus(path: &Path, schema: Schema) -> Result<LoadedCorpus, CorpusError> {
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(parse_corpus(&content, schema))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizeOptions {
    pub separator: String,
    /// Whitespace-token budget including separators.
    pub max_length: Option<usize>,
}

impl Default for LinearizeOptions {
    fn default() -> Self {
        LinearizeOptions {
            separator: "<doc>".to_string(),
            max_length: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linearized {
    pub text: String,
    pub truncated: bool,
    /// Number of documents that appear (possibly truncated) in `text`.
    pub documents_kept: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("separator must contain a non-whitespace character")]
pub struct EmptySeparator;

/// Concatenate documents in their current order, each preceded by the
/// separator: `sep doc₁ sep doc₂ …`.
///
/// Separator occurrences inside a document are replaced by a space (with a
/// warning). With a token budget, later documents are trimmed first: documents
/// are kept left to right until the budget runs out, the last one cut to the
/// tokens that still fit.
pub fn linearize(
    instance: &Instance,
    separator: &str,
    max_length: Option<usize>,
) -> Result<Linearized, EmptySeparator> {
    let sep_tokens = separator.split_whitespace().count();
    if sep_tokens == 0 {
        return Err(EmptySeparator);
    }
    let mut warnings = Vec::new();
    let mut parts: Vec<String> = Vec::with_capacity(instance.documents.len());
    let mut budget = max_length;
    let mut truncated = false;
    for doc in &instance.documents {
        let mut text = doc.text.trim().to_string();
        if text.contains(separator) {
            warnings.push(format!(
                "document {}: separator {separator:?} replaced by a space",
                doc.id
            ));
            text = text.replace(separator, " ");
        }
        match budget.as_mut() {
            None => parts.push(text),
            Some(remaining) => {
                if *remaining <= sep_tokens {
                    truncated = true;
                    break;
                }
                *remaining -= sep_tokens;
                let tokens: Vec<&str> = text.split_whitespace().collect();
                if tokens.len() <= *remaining {
                    *remaining -= tokens.len();
                    parts.push(text);
                } else {
                    parts.push(tokens[..*remaining].join(" "));
                    *remaining = 0;
                    truncated = true;
                }
            }
        }
    }
    if truncated {
        warnings.push(format!(
            "instance {}: truncated to {} of {} documents",
            instance.id,
            parts.len(),
            instance.documents.len()
        ));
    }
    let text = parts
        .iter()
        .map(|p| format!("{separator} {p}"))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(Linearized {
        text,
        truncated,
        documents_kept: parts.len(),
        warnings,
    })
}

/// Copy of `instance` with documents in a uniformly random order determined by `seed`.
pub fn permute_documents(instance: &Instance, seed: u64) -> Instance {
    let mut documents = instance.documents.clone();
    documents.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    instance.with_documents(documents)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn movie(id: &str, docs: &[&str]) -> Instance {
        Instance {
            id: id.into(),
            documents: docs
                .iter()
                .enumerate()
                .map(|(i, t)| Document::new(format!("{id}-{i}"), *t))
                .collect(),
            reference_summary: "fine".into(),
            gold_aggregate: GoldAggregate::Fraction(0.5),
            task: Task::Continuous,
        }
    }

    const MOVIES: &str = r#"{"id":"m1","reviews":[{"id":"r1","text":"good film"},{"id":"r2","text":"bad film"}],"meta_review":"mixed","tomatometer":0.5}
{"id":"m2","reviews":[{"id":"r1","text":"superb"}],"meta_review":"great","tomatometer":1.0}
"#;

    #[test]
    fn loads_two_movie_records() {
        let loaded = parse_corpus(MOVIES, Schema::Movies);
        assert!(loaded.errors.is_empty());
        assert_eq!(loaded.corpus.len(), 2);
        assert_eq!(loaded.corpus.task, Task::Continuous);
        assert_eq!(loaded.corpus.instances[0].documents[1].text, "bad film");
    }

    #[test]
    fn empty_file_warns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        let loaded = load_corpus(&path, Schema::Movies).unwrap();
        assert!(loaded.corpus.is_empty());
        assert_eq!(loaded.warnings, vec!["corpus is empty".to_string()]);
    }

    #[test]
    fn missing_file_is_fatal() {
        assert!(matches!(
            load_corpus(Path::new("/nonexistent/corpus.jsonl"), Schema::Trials),
            Err(CorpusError::Read { .. })
        ));
    }

    #[test]
    fn zero_variance_is_a_record_error() {
        let content = r#"{"id":"t1","studies":[{"id":"s1","text":"x","effect":0.2,"variance":0}],"summary":"y","p_value":0.5}
{"id":"t2","studies":[{"id":"s1","text":"x","effect":0.2,"variance":0.1}],"summary":"y","p_value":0.5}"#;
        let loaded = parse_corpus(content, Schema::Trials);
        assert_eq!(loaded.corpus.len(), 1);
        assert_eq!(loaded.errors.len(), 1);
        let e = &loaded.errors[0];
        assert_eq!(e.line, 1);
        assert_eq!(e.id.as_deref(), Some("t1"));
        assert!(e.message.contains("variance must be positive"), "{}", e.message);
    }

    #[test]
    fn malformed_and_invalid_records_are_collected() {
        let content = "not json\n\n{\"id\":\"a\",\"reviews\":[],\"meta_review\":\"x\",\"tomatometer\":0.5}\n\
            {\"id\":\"b\",\"reviews\":[{\"id\":\"r\",\"text\":\"  \"}],\"meta_review\":\"x\",\"tomatometer\":0.5}\n\
            {\"id\":\"c\",\"reviews\":[{\"id\":\"r\",\"text\":\"ok\"}],\"meta_review\":\"x\",\"tomatometer\":1.5}\n\
            {\"id\":\"d\",\"reviews\":[{\"id\":\"r\",\"text\":\"ok\"}],\"meta_review\":\"x\",\"tomatometer\":0.5}\n\
            {\"id\":\"d\",\"reviews\":[{\"id\":\"r\",\"text\":\"ok\"}],\"meta_review\":\"x\",\"tomatometer\":0.5}\n";
        let loaded = parse_corpus(content, Schema::Movies);
        assert_eq!(loaded.corpus.len(), 1);
        let lines: Vec<usize> = loaded.errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![1, 3, 4, 5, 7]);
        assert!(loaded.errors[1].message.contains("no documents"));
        assert!(loaded.errors[4].message.contains("duplicate"));
    }

    #[test]
    fn trials_label_resolution() {
        let content = r#"{"id":"p","studies":[{"id":"s","text":"x"}],"summary":"y","p_value":0.01}
{"id":"ma","studies":[{"id":"s","text":"x","effect":1.0,"variance":0.25}],"summary":"y"}
{"id":"none","studies":[{"id":"s","text":"x"}],"summary":"y"}"#;
        let loaded = parse_corpus(content, Schema::Trials);
        assert_eq!(loaded.corpus.len(), 2);
        for inst in &loaded.corpus.instances {
            assert_eq!(inst.gold_aggregate.label(0.5), Label::Significant);
        }
        assert_eq!(loaded.errors[0].id.as_deref(), Some("none"));
    }

    #[test]
    fn linearize_examples() {
        let inst = movie("m", &["good film", "bad film"]);
        assert_eq!(
            linearize(&inst, "<doc>", None).unwrap().text,
            "<doc> good film <doc> bad film"
        );
        let single = movie("s", &["x"]);
        assert_eq!(linearize(&single, "|", None).unwrap().text, "| x");
        assert_eq!(linearize(&single, "  ", None), Err(EmptySeparator));
    }

    #[test]
    fn linearize_truncates_later_documents_first() {
        let ten = "a b c d e f g h i j";
        let inst = movie("m", &[ten, ten]);
        let out = linearize(&inst, "<doc>", Some(15)).unwrap();
        // 1 + 10 for the first document leaves 4: one separator and three tokens.
        assert!(out.truncated);
        assert_eq!(out.text, "<doc> a b c d e f g h i j <doc> a b c");
        assert_eq!(out.text.split_whitespace().count(), 15);

        let exact = linearize(&inst, "<doc>", Some(22)).unwrap();
        assert!(!exact.truncated);
        let dropped = linearize(&inst, "<doc>", Some(12)).unwrap();
        assert!(dropped.truncated);
        assert_eq!(dropped.documents_kept, 1);
        assert_eq!(dropped.text, format!("<doc> {ten}"));
    }

    #[test]
    fn separator_collision_is_replaced() {
        let inst = movie("m", &["before<doc>after"]);
        let out = linearize(&inst, "<doc>", None).unwrap();
        assert_eq!(out.text, "<doc> before after");
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn permutation_basics() {
        let one = movie("m", &["x"]);
        assert_eq!(permute_documents(&one, 3), one);
        let five = movie("m", &["a", "b", "c", "d", "e"]);
        assert_eq!(permute_documents(&five, 7), permute_documents(&five, 7));
        let copy = five.clone();
        let _ = permute_documents(&five, 9);
        assert_eq!(five, copy);
    }

    #[test]
    fn permutations_are_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        use std::collections::HashMap;
        let five = movie("m", &["a", "b", "c", "d", "e"]);
        let mut counts: HashMap<Vec<String>, usize> = HashMap::new();
        let n = 1000;
        for seed in 0..n {
            let order = permute_documents(&five, seed)
                .documents
                .into_iter()
                .map(|d| d.text)
                .collect();
            *counts.entry(order).or_default() += 1;
        }
        assert_eq!(counts.len(), 120, "every ordering observed");
        let expected = n as f64 / 120.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(119.0).unwrap().cdf(chi2);
        assert!(p > 0.001, "chi2 = {chi2}, p = {p}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = Instance> {
            proptest::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,4}", 1..8).prop_map(|docs| {
                let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
                movie("p", &refs)
            })
        }

        proptest! {
            #[test]
            fn permuting_preserves_document_multiset(inst in instance(), seed in any::<u64>()) {
                let permuted = permute_documents(&inst, seed);
                let mut a: Vec<_> = inst.documents.iter().map(|d| d.id.clone()).collect();
                let mut b: Vec<_> = permuted.documents.iter().map(|d| d.id.clone()).collect();
                a.sort();
                b.sort();
                prop_assert_eq!(a, b);

                let split = |s: String| -> Vec<String> {
                    let mut v: Vec<String> = s.split("<doc>").map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect();
                    v.sort();
                    v
                };
                let la = linearize(&inst, "<doc>", None).unwrap().text;
                let lb = linearize(&permuted, "<doc>", None).unwrap().text;
                prop_assert_eq!(split(la), split(lb));
            }

            #[test]
            fn linearized_length_respects_budget(inst in instance(), budget in 0usize..40) {
                let out = linearize(&inst, "<doc>", Some(budget)).unwrap();
                prop_assert!(out.text.split_whitespace().count() <= budget);
            }
        }
    }
}
