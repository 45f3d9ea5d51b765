//! Aggregation functions `G` mapping per-document measures to the measure a
//! faithful summary should carry.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::{Label, Measurement};

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("cannot aggregate an empty input")]
    Empty,
    #[error("{measures} measures but {weights} weights")]
    LengthMismatch { measures: usize, weights: usize },
    #[error("weight {index} is {value}; weights must be finite and non-negative")]
    BadWeight { index: usize, value: f64 },
    #[error("weights sum to zero")]
    ZeroWeights,
    #[error("study {index}: variance must be positive, got {value}")]
    NonPositiveVariance { index: usize, value: f64 },
    #[error("study {index}: effect is not finite")]
    NonFiniteEffect { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateKind {
    Mean,
    FractionPositive,
    MajorityVote,
    MetaAnalysis,
}

/// The expected summary-level measure for an instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateTarget {
    pub kind: AggregateKind,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
}

impl AggregateTarget {
    pub fn mean(value: f64) -> Self {
        AggregateTarget {
            kind: AggregateKind::Mean,
            value,
            label: None,
            p_value: None,
        }
    }

    pub fn fraction_positive(value: f64, threshold: f64) -> Self {
        AggregateTarget {
            kind: AggregateKind::FractionPositive,
            value,
            label: Some(Label::from_bool(value >= threshold)),
            p_value: None,
        }
    }

    pub fn majority(label: Label) -> Self {
        AggregateTarget {
            kind: AggregateKind::MajorityVote,
            value: if label.is_positive() { 1.0 } else { 0.0 },
            label: Some(label),
            p_value: None,
        }
    }

    pub fn meta_analysis(result: &MetaAnalysisResult) -> Self {
        AggregateTarget {
            kind: AggregateKind::MetaAnalysis,
            value: result.pooled_effect,
            label: Some(Label::from_bool(result.significant)),
            p_value: Some(result.p_value),
        }
    }
}

/// A study-level effect estimate with its sampling variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub effect: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaAnalysisResult {
    pub pooled_effect: f64,
    pub standard_error: f64,
    pub z_score: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// Significance level for the pooled two-sided test.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// `Σ αⱼzⱼ / Σ αⱼ`.
///
/// With unit weights this is the plain mean; the normalized form keeps
/// non-unit weights on the measure's own scale.
pub fn weighted_mean(measures: &[f64], weights: &[f64]) -> Result<f64, AggregateError> {
    if measures.is_empty() {
        return Err(AggregateError::Empty);
    }
    if measures.len() != weights.len() {
        return Err(AggregateError::LengthMismatch {
            measures: measures.len(),
            weights: weights.len(),
        });
    }
    if let Some((index, &value)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
        return Err(AggregateError::BadWeight { index, value });
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(AggregateError::ZeroWeights);
    }
    let num: f64 = measures.iter().zip(weights).map(|(z, a)| z * a).sum();
    Ok(num / total)
}

/// Share of measurements labelled positive at `threshold` (ties count as
/// positive). Binary measurements contribute their label directly.
pub fn fraction_positive(measures: &[Measurement], threshold: f64) -> Result<f64, AggregateError> {
    if measures.is_empty() {
        return Err(AggregateError::Empty);
    }
    let positive = measures.iter().filter(|m| m.label_at(threshold).is_positive()).count();
    Ok(positive as f64 / measures.len() as f64)
}

/// Label held by a strict majority; an exact tie is `NotSignificant`.
pub fn majority_vote(labels: &[Label]) -> Result<Label, AggregateError> {
    if labels.is_empty() {
        return Err(AggregateError::Empty);
    }
    let sig = labels.iter().filter(|l| l.is_positive()).count();
    Ok(Label::from_bool(2 * sig > labels.len()))
}

/// Inverse-variance fixed-effects pooling with a two-sided normal test.
pub fn fixed_effects_meta_analysis(studies: &[Study]) -> Result<MetaAnalysisResult, AggregateError> {
    if studies.is_empty() {
        return Err(AggregateError::Empty);
    }
    let mut sum_w = 0.0;
    let mut sum_wt = 0.0;
    for (index, s) in studies.iter().enumerate() {
        if !(s.variance.is_finite() && s.variance > 0.0) {
            return Err(AggregateError::NonPositiveVariance {
                index,
                value: s.variance,
            });
        }
        if !s.effect.is_finite() {
            return Err(AggregateError::NonFiniteEffect { index });
        }
        let w = 1.0 / s.variance;
        sum_w += w;
        sum_wt += w * s.effect;
    }
    let pooled_effect = sum_wt / sum_w;
    let standard_error = 1.0 / sum_w.sqrt();
    let z_score = pooled_effect / standard_error;
    let p_value = normal_two_sided_p(z_score);
    Ok(MetaAnalysisResult {
        pooled_effect,
        standard_error,
        z_score,
        p_value,
        significant: p_value < SIGNIFICANCE_LEVEL,
    })
}

/// `P(|Z| ≥ |z|)` for a standard normal `Z`, i.e. `erfc(|z|/√2)`, kept
/// strictly positive so it stays in `(0, 1]`.
pub fn normal_two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(f64::MIN_POSITIVE, 1.0)
}

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Complementary error function.
///
/// Below `x = 2.5`: `1 - erf(x)` with `erf(x) = 2/√π · e^{-x²} · Σ 2ⁿx^{2n+1}/(2n+1)!!`,
/// a series of positive terms (no cancellation). From 2.5 up: the Laplace
/// continued fraction `e^{-x²}/√π · 1/(x + ½/(x + 1/(x + 3/2/(x + …))))`,
/// evaluated with the modified Lentz method.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.5 {
        1.0 - erf_series(x)
    } else {
        erfc_continued_fraction(x)
    }
}

fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= 2.0 * x2 / (2.0 * n + 1.0);
        sum += term;
        if term <= sum * 1e-17 {
            break;
        }
    }
    FRAC_2_SQRT_PI * (-x2).exp() * sum
}

fn erfc_continued_fraction(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        d = 1.0 / d;
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (std::f64::consts::PI.sqrt() * f)
}
