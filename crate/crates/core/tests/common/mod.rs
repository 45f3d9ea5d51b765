//! Test fixtures shared by the integration suites: token scorers with known
//! distributions, an exhaustive decoding oracle, and mock generators and
//! measurers over texts that carry their own value.
#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthesis_core::corpus::{Document, GoldAggregate, Instance, Task};
use synthesis_core::decode::{
    Candidate, CandidateSet, DecodeError, GenerationRequest, Generator, TokenId, TokenScorer, EOS_TOKEN,
};
use synthesis_core::measure::{Label, MeasureError, Measurement, Measurer};

const WORDS: [&str; 4] = ["a", "b", "c", "d"];

/// Scorer whose next-token distribution is a pseudo-random function of the
/// seed and the prefix. End-of-sequence is the last vocabulary entry.
pub struct RandomScorer {
    vocab: Vec<String>,
    seed: u64,
}

impl RandomScorer {
    /// `size` counts end-of-sequence, so `size - 1` ordinary words.
    pub fn new(seed: u64, size: usize) -> Self {
        assert!((2..=WORDS.len() + 1).contains(&size));
        let mut vocab: Vec<String> = WORDS[..size - 1].iter().map(|w| w.to_string()).collect();
        vocab.push(EOS_TOKEN.to_string());
        RandomScorer { vocab, seed }
    }
}

impl TokenScorer for RandomScorer {
    fn vocabulary(&self) -> &[String] {
        &self.vocab
    }

    fn eos(&self) -> TokenId {
        self.vocab.len() - 1
    }

    fn score(&self, prefix: &[TokenId], conditioning: &str) -> Vec<f64> {
        let mut h = DefaultHasher::new();
        (self.seed, prefix, conditioning).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let weights: Vec<f64> = (0..self.vocab.len()).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = weights.iter().sum();
        weights.iter().map(|w| (w / total).ln()).collect()
    }
}

/// Scorer defined by explicit probability rows: the row for the longest
/// matching prefix wins, else `default`.
pub struct TableScorer {
    vocab: Vec<String>,
    rows: Vec<(Vec<TokenId>, Vec<f64>)>,
    default: Vec<f64>,
}

impl TableScorer {
    /// `words` excludes end-of-sequence, which is appended last.
    pub fn new(words: &[&str], default: Vec<f64>) -> Self {
        let mut vocab: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        vocab.push(EOS_TOKEN.to_string());
        assert_eq!(default.len(), vocab.len());
        TableScorer {
            vocab,
            rows: Vec::new(),
            default,
        }
    }

    pub fn row(mut self, prefix: &[TokenId], probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), self.vocab.len());
        self.rows.push((prefix.to_vec(), probs));
        self
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.vocab.iter().position(|w| w == word).expect("word in vocabulary")
    }
}

impl TokenScorer for TableScorer {
    fn vocabulary(&self) -> &[String] {
        &self.vocab
    }

    fn eos(&self) -> TokenId {
        self.vocab.len() - 1
    }

    fn score(&self, prefix: &[TokenId], _conditioning: &str) -> Vec<f64> {
        let probs = self
            .rows
            .iter()
            .find(|(p, _)| p.as_slice() == prefix)
            .map_or(&self.default, |(_, probs)| probs);
        probs.iter().map(|p| p.ln()).collect()
    }
}

/// Sum of per-step log-probabilities, computed from scratch.
pub fn rescore(scorer: &dyn TokenScorer, conditioning: &str, tokens: &[TokenId]) -> f64 {
    (0..tokens.len())
        .map(|i| scorer.score(&tokens[..i], conditioning)[tokens[i]])
        .sum()
}

/// Token ids of a rendered candidate. A candidate shorter than `max_tokens`
/// must have ended with end-of-sequence, which rendering drops.
pub fn tokens_of(scorer: &dyn TokenScorer, text: &str, max_tokens: usize) -> Vec<TokenId> {
    let vocab = scorer.vocabulary();
    let mut tokens: Vec<TokenId> = text
        .split_whitespace()
        .map(|w| vocab.iter().position(|v| v == w).expect("rendered word in vocabulary"))
        .collect();
    if tokens.len() < max_tokens {
        tokens.push(scorer.eos());
    }
    tokens
}

/// Every complete sequence: ends with end-of-sequence or has `max_tokens` tokens.
pub fn enumerate_sequences(
    scorer: &dyn TokenScorer,
    conditioning: &str,
    max_tokens: usize,
) -> Vec<(Vec<TokenId>, f64)> {
    fn walk(
        scorer: &dyn TokenScorer,
        conditioning: &str,
        max_tokens: usize,
        prefix: &mut Vec<TokenId>,
        lp: f64,
        out: &mut Vec<(Vec<TokenId>, f64)>,
    ) {
        if prefix.last() == Some(&scorer.eos()) || prefix.len() == max_tokens {
            out.push((prefix.clone(), lp));
            return;
        }
        let scores = scorer.score(prefix, conditioning);
        for (t, s) in scores.into_iter().enumerate() {
            if s.is_finite() {
                prefix.push(t);
                walk(scorer, conditioning, max_tokens, prefix, lp + s, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(scorer, conditioning, max_tokens, &mut Vec::new(), 0.0, &mut out);
    out
}

/// Highest-probability complete sequence; ties go to lexicographic token order.
pub fn exhaustive_best(scorer: &dyn TokenScorer, conditioning: &str, max_tokens: usize) -> (Vec<TokenId>, f64) {
    let vocab = scorer.vocabulary();
    let words = |t: &[TokenId]| t.iter().map(|&i| vocab[i].clone()).collect::<Vec<_>>();
    enumerate_sequences(scorer, conditioning, max_tokens)
        .into_iter()
        .min_by(|(ta, a), (tb, b)| b.total_cmp(a).then_with(|| words(ta).cmp(&words(tb))))
        .expect("at least one sequence")
}

/// Reads the value carried by the last whitespace token of a text, so
/// documents like `"doc3 0.8"` and summaries like `"summary 0.25"` measure as
/// the number they end with.
pub struct TrailingNumberMeasurer;

pub fn trailing_value(text: &str) -> Option<f64> {
    text.split_whitespace().last()?.parse().ok()
}

impl Measurer for TrailingNumberMeasurer {
    fn measure(&self, text: &str) -> Result<Measurement, MeasureError> {
        if text.trim().is_empty() {
            return Err(MeasureError::EmptyText);
        }
        let v = trailing_value(text).ok_or_else(|| MeasureError::Unknown(text.to_string()))?;
        Measurement::continuous(v)
    }
}

fn single(request: &GenerationRequest<'_>, text: String) -> CandidateSet {
    CandidateSet::new(request.instance.id.clone(), vec![Candidate::new(text, Some(0.0))])
}

/// Outputs the fraction of documents valued at or above 0.5: a perfectly
/// calibrated and order-blind summarizer.
pub struct FractionGenerator;

pub fn fraction_positive_of(instance: &Instance) -> f64 {
    let pos = instance
        .documents
        .iter()
        .filter(|d| trailing_value(&d.text).unwrap_or(0.0) >= 0.5)
        .count();
    pos as f64 / instance.documents.len() as f64
}

impl Generator for FractionGenerator {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<CandidateSet, DecodeError> {
        Ok(single(
            request,
            format!("summary {}", fraction_positive_of(request.instance)),
        ))
    }
}

/// Outputs the same value whatever the input.
pub struct ConstantGenerator(pub f64);

impl Generator for ConstantGenerator {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<CandidateSet, DecodeError> {
        Ok(single(request, format!("summary {}", self.0)))
    }
}

/// Copies the value of whichever document comes first in the conditioning.
pub struct FirstDocumentGenerator;

impl Generator for FirstDocumentGenerator {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<CandidateSet, DecodeError> {
        let first = request
            .conditioning
            .split_whitespace()
            .find(|w| w.parse::<f64>().is_ok())
            .unwrap_or("0");
        Ok(single(request, format!("summary {first}")))
    }
}

/// Instance whose documents carry `values`, e.g. `"doc0 0.8"`.
pub fn valued_instance(id: &str, values: &[f64], task: Task) -> Instance {
    let documents: Vec<Document> = values
        .iter()
        .enumerate()
        .map(|(i, v)| Document::new(format!("{id}-d{i}"), format!("doc{i} {v}")))
        .collect();
    let fraction = values.iter().filter(|&&v| v >= 0.5).count() as f64 / values.len() as f64;
    let gold_aggregate = match task {
        Task::Continuous => GoldAggregate::Fraction(fraction),
        Task::Binary => GoldAggregate::Binary {
            label: Label::from_bool(fraction > 0.5),
            p_value: None,
        },
    };
    Instance {
        id: id.to_string(),
        documents,
        reference_summary: format!("summary {fraction}"),
        gold_aggregate,
        task,
    }
}

/// `n` documents with values drawn from `rng`, at least one on each side of 0.5.
pub fn mixed_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    let mut values: Vec<f64> = (0..n).map(|_| (rng.random_range(0..=100) as f64) / 100.0).collect();
    values[0] = rng.random_range(50..=100) as f64 / 100.0;
    values[1] = rng.random_range(0..50) as f64 / 100.0;
    values
}

const POSITIVE_REVIEWS: [&str; 6] = [
    "a superb and moving film",
    "great fun with a brilliant cast",
    "funny, smart and charming",
    "an engaging and memorable ride",
    "solid performances and a strong script",
    "a delightful, heartfelt story",
];
const NEGATIVE_REVIEWS: [&str; 6] = [
    "a dull and tedious mess",
    "boring, predictable and flat",
    "the jokes are stale and crude",
    "a bloated, uneven script",
    "lazy writing and a weak plot",
    "forgettable and painfully slow",
];
const POSITIVE_META: [&str; 3] = [
    "a great film with superb performances",
    "funny and charming with a strong cast",
    "an engaging and moving story",
];
const NEGATIVE_META: [&str; 3] = [
    "a dull and predictable mess",
    "stale jokes and a weak script",
    "boring and uneven throughout",
];
const MIXED_META: [&str; 3] = [
    "some good moments but an uneven script",
    "funny in places yet often dull",
    "a strong cast stuck in a predictable plot",
];

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items[rng.random_range(0..items.len())]
}

/// Movies records with mixed reviews; the Tomatometer is the positive share
/// and the meta-review's tone follows it.
pub fn synthetic_movies(n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for i in 0..n {
        let total = rng.random_range(6..=10);
        let positive = rng.random_range(1..total);
        let mut texts: Vec<&str> = (0..positive).map(|_| pick(&mut rng, &POSITIVE_REVIEWS)).collect();
        texts.extend((positive..total).map(|_| pick(&mut rng, &NEGATIVE_REVIEWS)));
        rand::seq::SliceRandom::shuffle(texts.as_mut_slice(), &mut rng);
        let fraction = positive as f64 / total as f64;
        let meta = if fraction > 0.65 {
            pick(&mut rng, &POSITIVE_META)
        } else if fraction < 0.35 {
            pick(&mut rng, &NEGATIVE_META)
        } else {
            pick(&mut rng, &MIXED_META)
        };
        let reviews: Vec<serde_json::Value> = texts
            .iter()
            .enumerate()
            .map(|(j, t)| serde_json::json!({"id": format!("r{j}"), "text": t}))
            .collect();
        let record = serde_json::json!({
            "id": format!("movie-{i:03}"),
            "reviews": reviews,
            "meta_review": meta,
            "tomatometer": fraction,
        });
        out.push_str(&record.to_string());
        out.push('\n');
    }
    out
}

const SIGNIFICANT_STUDIES: [&str; 3] = [
    "mortality was significantly reduced in the treatment arm",
    "the intervention significantly improved recovery",
    "pain scores were significantly decreased compared with placebo",
];
const NULL_STUDIES: [&str; 3] = [
    "there was no significant difference between groups",
    "outcomes did not differ between arms",
    "the effect was not statistically significant",
];

/// Trials records: strong studies report significance, weak ones do not,
/// and the summary states the pooled verdict.
pub fn synthetic_trials(n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for i in 0..n {
        let count = rng.random_range(3..=6);
        let mut studies = Vec::new();
        let (mut sw, mut swe) = (0.0, 0.0);
        for j in 0..count {
            let strong = rng.random_bool(0.5);
            let (effect, variance): (f64, f64) = if strong {
                (rng.random_range(0.4..0.9), rng.random_range(0.02..0.08))
            } else {
                (rng.random_range(-0.15..0.15), rng.random_range(0.1..0.4))
            };
            sw += 1.0 / variance;
            swe += effect / variance;
            let text = pick(&mut rng, if strong { &SIGNIFICANT_STUDIES } else { &NULL_STUDIES });
            studies
                .push(serde_json::json!({"id": format!("s{j}"), "text": text, "effect": effect, "variance": variance}));
        }
        let z = swe / sw * sw.sqrt();
        let summary = if z.abs() > 1.96 {
            "pooled evidence shows outcomes were significantly improved"
        } else {
            "pooled evidence shows no significant difference between treatments"
        };
        let record = serde_json::json!({"id": format!("review-{i:03}"), "studies": studies, "summary": summary});
        out.push_str(&record.to_string());
        out.push('\n');
    }
    out
}
