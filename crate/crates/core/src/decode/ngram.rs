use std::collections::{BTreeSet, HashMap};

use super::{DecodeError, TokenId, TokenScorer};
use crate::corpus::Corpus;
use crate::measure::LexiconMeasurer;

pub const EOS_TOKEN: &str = "</s>";

const SENTIMENT_BUCKETS: usize = 3;

#[derive(Debug, Clone, Default)]
struct ContextCounts {
    next: HashMap<TokenId, f64>,
    total: f64,
}

/// Add-k smoothed n-gram model over whitespace tokens of reference summaries,
/// with one count table per input-sentiment bucket.
///
/// The bucket comes from the mean builtin-lexicon score of the input
/// documents (split on the separator), so inputs of different polarity get
/// different next-token distributions.
#[derive(Debug, Clone)]
pub struct NgramScorer {
    vocab: Vec<String>,
    eos: TokenId,
    order: usize,
    smoothing: f64,
    separator: String,
    lexicon: LexiconMeasurer,
    tables: Vec<HashMap<Vec<TokenId>, ContextCounts>>,
}

impl NgramScorer {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.vocab.iter().position(|t| t == token)
    }

    /// Separator used to split conditioning strings back into documents.
    pub fn with_separator(mut self, separator: impl Into<String>) -> Self {
        self.separator = separator.into();
        self
    }

    fn bucket_of(&self, mean_score: f64) -> usize {
        ((mean_score * SENTIMENT_BUCKETS as f64) as usize).min(SENTIMENT_BUCKETS - 1)
    }

    fn mean_score<'a>(&self, docs: impl Iterator<Item = &'a str>) -> f64 {
        let (sum, n) = docs
            .filter(|d| !d.trim().is_empty())
            .fold((0.0, 0usize), |(s, n), d| (s + self.lexicon.score(d), n + 1));
        if n == 0 {
            0.5
        } else {
            sum / n as f64
        }
    }

    /// Sentiment bucket of a linearized input.
    pub fn bucket(&self, conditioning: &str) -> usize {
        self.bucket_of(self.mean_score(conditioning.split(self.separator.as_str())))
    }

    /// BOS-padded context of length `order - 1`. BOS is `vocab.len()`, outside
    /// the predictable vocabulary.
    fn context(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        let n = self.order - 1;
        let bos = self.vocab.len();
        let mut ctx = vec![bos; n.saturating_sub(prefix.len())];
        ctx.extend_from_slice(&prefix[prefix.len().saturating_sub(n)..]);
        ctx
    }
}

impl TokenScorer for NgramScorer {
    fn vocabulary(&self) -> &[String] {
        &self.vocab
    }

    fn eos(&self) -> TokenId {
        self.eos
    }

    fn score(&self, prefix: &[TokenId], conditioning: &str) -> Vec<f64> {
        let table = &self.tables[self.bucket(conditioning)];
        let counts = table.get(&self.context(prefix));
        let v = self.vocab.len() as f64;
        let total = counts.map_or(0.0, |c| c.total);
        let denom = (total + self.smoothing * v).ln();
        (0..self.vocab.len())
            .map(|t| {
                let c = counts.and_then(|c| c.next.get(&t)).copied().unwrap_or(0.0);
                (c + self.smoothing).ln() - denom
            })
            .collect()
    }
}

/// Fit an add-`smoothing` n-gram scorer of the given order (1 to 3) on the
/// corpus's reference summaries.
pub fn train_toy_scorer(corpus: &Corpus, order: usize, smoothing: f64) -> Result<NgramScorer, DecodeError> {
    if !(1..=3).contains(&order) {
        return Err(DecodeError::Domain(format!(
            "n-gram order must be 1, 2 or 3, got {order}"
        )));
    }
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(DecodeError::Domain(format!(
            "smoothing must be positive, got {smoothing}"
        )));
    }
    if corpus.is_empty() {
        return Err(DecodeError::Domain("cannot train on an empty corpus".into()));
    }
    let tokenize = |s: &str| -> Vec<String> { s.split_whitespace().map(str::to_lowercase).collect() };
    let words: BTreeSet<String> = corpus
        .instances
        .iter()
        .flat_map(|i| tokenize(&i.reference_summary))
        .filter(|w| w != EOS_TOKEN)
        .collect();
    let mut vocab: Vec<String> = words.into_iter().collect();
    let eos = vocab.len();
    vocab.push(EOS_TOKEN.to_string());
    let index: HashMap<&str, TokenId> = vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();

    let mut scorer = NgramScorer {
        vocab: vocab.clone(),
        eos,
        order,
        smoothing,
        separator: "<doc>".to_string(),
        lexicon: LexiconMeasurer::builtin(),
        tables: vec![HashMap::new(); SENTIMENT_BUCKETS],
    };
    for inst in &corpus.instances {
        let bucket = scorer.bucket_of(scorer.mean_score(inst.documents.iter().map(|d| d.text.as_str())));
        let mut seq: Vec<TokenId> = tokenize(&inst.reference_summary)
            .iter()
            .filter_map(|w| index.get(w.as_str()).copied())
            .collect();
        seq.push(eos);
        for i in 0..seq.len() {
            let ctx = scorer.context(&seq[..i]);
            let entry = scorer.tables[bucket].entry(ctx).or_default();
            *entry.next.entry(seq[i]).or_default() += 1.0;
            entry.total += 1.0;
        }
    }
    Ok(scorer)
}
