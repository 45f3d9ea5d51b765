use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{
    Candidate, CandidateSet, DecodeConfig, DecodeError, DecodeMode, TokenId, TokenScorer, NORMALIZATION_TOLERANCE,
};
use crate::measure::{MeasureError, Measurer};

/// A decoded token sequence with its exact (unpenalized) log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    /// True iff the sequence ends with end-of-sequence; otherwise it was cut
    /// at `max_tokens`.
    pub finished: bool,
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<TokenId>,
    log_prob: f64,
    /// Cumulative score that drives selection; includes diversity penalties.
    steer: f64,
}

fn checked_scores(scorer: &dyn TokenScorer, prefix: &[TokenId], conditioning: &str) -> Result<Vec<f64>, DecodeError> {
    let scores = scorer.score(prefix, conditioning);
    let vocab = scorer.vocabulary().len();
    if scores.len() != vocab {
        return Err(DecodeError::Contract(format!(
            "scorer returned {} scores for a vocabulary of {vocab}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan() || *s == f64::INFINITY) {
        return Err(DecodeError::Contract("scorer returned NaN or +inf".into()));
    }
    let total: f64 = scores.iter().map(|s| s.exp()).sum();
    if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(DecodeError::Contract(format!(
            "probabilities sum to {total} after prefix {prefix:?}"
        )));
    }
    Ok(scores)
}

fn compare_tokens(vocab: &[String], a: &[TokenId], b: &[TokenId]) -> Ordering {
    a.iter()
        .map(|&t| vocab[t].as_str())
        .cmp(b.iter().map(|&t| vocab[t].as_str()))
}

/// Higher score first; equal scores fall back to lexicographic token order.
fn by_score(vocab: &[String], a_score: f64, a: &[TokenId], b_score: f64, b: &[TokenId]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| compare_tokens(vocab, a, b))
}

struct Group {
    width: usize,
    active: Vec<Beam>,
    finished: Vec<Beam>,
    done: bool,
}

impl Group {
    fn new(width: usize) -> Self {
        Group {
            width,
            active: vec![Beam {
                tokens: Vec::new(),
                log_prob: 0.0,
                steer: 0.0,
            }],
            finished: Vec::new(),
            done: false,
        }
    }

    fn expand(
        &self,
        scorer: &dyn TokenScorer,
        conditioning: &str,
        penalty: Option<(&[f64], f64)>,
    ) -> Result<Vec<Beam>, DecodeError> {
        let mut out = Vec::with_capacity(self.active.len() * scorer.vocabulary().len());
        for beam in &self.active {
            let scores = checked_scores(scorer, &beam.tokens, conditioning)?;
            for (token, &lp) in scores.iter().enumerate() {
                if !lp.is_finite() {
                    continue;
                }
                let penalized = match penalty {
                    Some((counts, lambda)) if counts[token] > 0.0 => lp - lambda * counts[token],
                    _ => lp,
                };
                let mut tokens = beam.tokens.clone();
                tokens.push(token);
                out.push(Beam {
                    tokens,
                    log_prob: beam.log_prob + lp,
                    steer: beam.steer + penalized,
                });
            }
        }
        Ok(out)
    }

    fn final_score(beam: &Beam, length_normalize: bool) -> f64 {
        if length_normalize {
            beam.steer / beam.tokens.len().max(1) as f64
        } else {
            beam.steer
        }
    }

    /// Beam update: the top `width` expansions are kept. Terminal ones
    /// (end-of-sequence or length cap) are retired and the rest continue, so
    /// every step extends exactly `width` hypotheses. Returns those kept.
    fn select(
        &mut self,
        mut candidates: Vec<Beam>,
        vocab: &[String],
        eos: TokenId,
        config: &DecodeConfig,
    ) -> Vec<Beam> {
        candidates.sort_by(|a, b| by_score(vocab, a.steer, &a.tokens, b.steer, &b.tokens));
        let mut active = Vec::with_capacity(self.width);
        let mut kept = Vec::with_capacity(self.width);
        for cand in candidates.into_iter().take(self.width) {
            let terminal = cand.tokens.last() == Some(&eos) || cand.tokens.len() >= config.max_tokens;
            kept.push(cand.clone());
            if terminal {
                self.finished.push(cand);
            } else {
                active.push(cand);
            }
        }
        self.active = active;
        let norm = config.length_normalize;
        self.finished.sort_by(|a, b| {
            by_score(
                vocab,
                Self::final_score(a, norm),
                &a.tokens,
                Self::final_score(b, norm),
                &b.tokens,
            )
        });
        self.finished.truncate(self.width);

        // Scores never increase along a path, so once the best live beam is
        // below the worst kept result nothing can change.
        let exhausted = !norm
            && self.finished.len() >= self.width
            && self.active.first().map(|b| b.steer) < self.finished.last().map(|b| b.steer);
        self.done = self.active.is_empty() || exhausted;
        kept
    }

    fn into_hypotheses(self, eos: TokenId) -> Vec<Hypothesis> {
        self.finished
            .into_iter()
            .map(|b| Hypothesis {
                finished: b.tokens.last() == Some(&eos),
                tokens: b.tokens,
                log_prob: b.log_prob,
            })
            .collect()
    }
}

fn to_candidates(scorer: &dyn TokenScorer, hyps: &[Hypothesis]) -> Vec<Candidate> {
    hyps.iter()
        .map(|h| Candidate::new(scorer.render(&h.tokens), Some(h.log_prob)))
        .collect()
}

fn expect_mode(config: &DecodeConfig, mode: DecodeMode) -> Result<(), DecodeError> {
    config.validate()?;
    if config.mode != mode {
        return Err(DecodeError::Config(format!(
            "decoder expects mode {mode:?}, config says {:?}",
            config.mode
        )));
    }
    Ok(())
}

fn run_beam(
    scorer: &dyn TokenScorer,
    conditioning: &str,
    config: &DecodeConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    let vocab = scorer.vocabulary();
    let eos = scorer.eos();
    let mut group = Group::new(config.beam_width);
    for _ in 0..config.max_tokens {
        if group.done {
            break;
        }
        let candidates = group.expand(scorer, conditioning, None)?;
        group.select(candidates, vocab, eos, config);
    }
    Ok(group.into_hypotheses(eos))
}

/// Up to `beam_width` hypotheses, best first, each ending in end-of-sequence
/// or cut at `max_tokens`.
pub fn beam_search(
    scorer: &dyn TokenScorer,
    conditioning: &str,
    config: &DecodeConfig,
) -> Result<CandidateSet, DecodeError> {
    expect_mode(config, DecodeMode::Beam)?;
    let hyps = run_beam(scorer, conditioning, config)?;
    Ok(CandidateSet::new("", to_candidates(scorer, &hyps)))
}

/// Diverse beam search returning each group's hypotheses separately.
///
/// Groups advance one step at a time in fixed order. Group `g` sees
/// `log p(v) − λ · n_v`, where `n_v` counts the beams of groups `< g` that
/// chose token `v` at the current step (Hamming diversity). Stored
/// log-probabilities stay unpenalized.
pub fn diverse_beam_search_groups(
    scorer: &dyn TokenScorer,
    conditioning: &str,
    config: &DecodeConfig,
) -> Result<Vec<Vec<Hypothesis>>, DecodeError> {
    expect_mode(config, DecodeMode::DiverseBeam)?;
    let vocab = scorer.vocabulary();
    let eos = scorer.eos();
    let mut groups: Vec<Group> = (0..config.groups).map(|_| Group::new(config.beams_per_group)).collect();
    let mut counts = vec![0.0; vocab.len()];
    for _ in 0..config.max_tokens {
        if groups.iter().all(|g| g.done) {
            break;
        }
        counts.iter_mut().for_each(|c| *c = 0.0);
        for group in groups.iter_mut().filter(|g| !g.done) {
            let candidates = group.expand(scorer, conditioning, Some((&counts, config.diversity_lambda)))?;
            for beam in group.select(candidates, vocab, eos, config) {
                if let Some(&t) = beam.tokens.last() {
                    counts[t] += 1.0;
                }
            }
        }
    }
    Ok(groups.into_iter().map(|g| g.into_hypotheses(eos)).collect())
}

/// Diverse beam search flattened to a candidate set in group order.
pub fn diverse_beam_search(
    scorer: &dyn TokenScorer,
    conditioning: &str,
    config: &DecodeConfig,
) -> Result<CandidateSet, DecodeError> {
    let groups = diverse_beam_search_groups(scorer, conditioning, config)?;
    let hyps: Vec<Hypothesis> = groups.into_iter().flatten().collect();
    Ok(CandidateSet::new("", to_candidates(scorer, &hyps)))
}

/// One expansion step of a constrained decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintStep {
    pub step: usize,
    /// Every expansion: tokens, measured value (`None` for an empty prefix),
    /// and whether it met the constraint.
    pub candidates: Vec<(Vec<TokenId>, Option<f64>, bool)>,
    /// No candidate met the constraint, so it was lifted for this step.
    pub suspended: bool,
    /// Expansions kept by the beam update.
    pub selected: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintTrace {
    pub steps: Vec<ConstraintStep>,
}

impl ConstraintTrace {
    pub fn suspended_steps(&self) -> Vec<usize> {
        self.steps.iter().filter(|s| s.suspended).map(|s| s.step).collect()
    }
}

/// Beam search that prunes prefixes whose measured value strays from the
/// target: a prefix survives iff `|g(prefix) − target| < ε`.
///
/// Empty prefixes (end-of-sequence first) have nothing to measure and are not
/// pruned. When pruning would remove every expansion at a step, the constraint
/// is suspended for that step and the step is recorded in the trace.
pub fn constrained_beam_search(
    scorer: &dyn TokenScorer,
    conditioning: &str,
    config: &DecodeConfig,
    measurer: &dyn Measurer,
    target: f64,
) -> Result<(CandidateSet, ConstraintTrace), DecodeError> {
    expect_mode(config, DecodeMode::ConstrainedBeam)?;
    let epsilon = config.epsilon.expect("validated");
    let vocab = scorer.vocabulary();
    let eos = scorer.eos();
    let mut group = Group::new(config.beam_width);
    let mut trace = ConstraintTrace::default();
    for step in 0..config.max_tokens {
        if group.done {
            break;
        }
        let expansions = group.expand(scorer, conditioning, None)?;
        let mut measured = Vec::with_capacity(expansions.len());
        for beam in &expansions {
            let text = scorer.render(&beam.tokens);
            let value = match measurer.measure(&text) {
                Ok(m) => Some(m.value().ok_or(MeasureError::NotContinuous)?),
                Err(MeasureError::EmptyText) => None,
                Err(e) => return Err(e.into()),
            };
            let ok = value.is_none_or(|v| (v - target).abs() < epsilon);
            measured.push((beam.tokens.clone(), value, ok));
        }
        let any_ok = measured.iter().any(|(_, _, ok)| *ok);
        let survivors: Vec<Beam> = if any_ok {
            expansions
                .into_iter()
                .zip(&measured)
                .filter(|(_, (_, _, ok))| *ok)
                .map(|(b, _)| b)
                .collect()
        } else {
            log::debug!("constraint suspended at step {step}: every expansion violates it");
            expansions
        };
        let kept = group.select(survivors, vocab, eos, config);
        trace.steps.push(ConstraintStep {
            step,
            candidates: measured,
            suspended: !any_ok,
            selected: kept.into_iter().map(|b| b.tokens).collect(),
        });
    }
    let hyps = group.into_hypotheses(eos);
    Ok((CandidateSet::new("", to_candidates(scorer, &hyps)), trace))
}
