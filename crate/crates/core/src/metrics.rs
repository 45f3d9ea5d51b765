//! Evaluation statistics: calibration (centered R², Pearson, MSE),
//! classification (macro-F1, accuracy), unigram ROUGE and histograms.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::Label;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} points, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("{0} have zero variance")]
    ZeroVariance(&'static str),
    #[error("histogram range [{lo}, {hi}] is empty")]
    BadRange { lo: f64, hi: f64 },
    #[error("histogram needs at least one bin")]
    NoBins,
}

/// Predictions aligned with targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSeries {
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
}

impl PairedSeries {
    pub fn new(predictions: Vec<f64>, targets: Vec<f64>) -> Result<Self, MetricsError> {
        if predictions.len() != targets.len() {
            return Err(MetricsError::LengthMismatch(predictions.len(), targets.len()));
        }
        Ok(PairedSeries { predictions, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn require(&self, need: usize) -> Result<(), MetricsError> {
        if self.len() < need {
            return Err(MetricsError::TooShort { need, got: self.len() });
        }
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `1 − Σ(tᵢ−pᵢ)² / Σ(tᵢ−t̄)²`.
pub fn r_squared_centered(series: &PairedSeries) -> Result<f64, MetricsError> {
    series.require(2)?;
    let t_mean = mean(&series.targets);
    let ss_tot: f64 = series.targets.iter().map(|t| (t - t_mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(MetricsError::ZeroVariance("targets"));
    }
    let ss_res: f64 = series
        .targets
        .iter()
        .zip(&series.predictions)
        .map(|(t, p)| (t - p).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Product-moment correlation between predictions and targets.
pub fn pearson(series: &PairedSeries) -> Result<f64, MetricsError> {
    series.require(2)?;
    let pm = mean(&series.predictions);
    let tm = mean(&series.targets);
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (p, t) in series.predictions.iter().zip(&series.targets) {
        let (dp, dt) = (p - pm, t - tm);
        cov += dp * dt;
        vp += dp * dp;
        vt += dt * dt;
    }
    if vp == 0.0 {
        return Err(MetricsError::ZeroVariance("predictions"));
    }
    if vt == 0.0 {
        return Err(MetricsError::ZeroVariance("targets"));
    }
    Ok((cov / (vp.sqrt() * vt.sqrt())).clamp(-1.0, 1.0))
}

pub fn mse(series: &PairedSeries) -> Result<f64, MetricsError> {
    series.require(1)?;
    Ok(series
        .targets
        .iter()
        .zip(&series.predictions)
        .map(|(t, p)| (t - p).powi(2))
        .sum::<f64>()
        / series.len() as f64)
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn least_squares_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64), MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricsError::TooShort { need: 2, got: xs.len() });
    }
    let (xm, ym) = (mean(xs), mean(ys));
    let sxx: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    if sxx == 0.0 {
        return Err(MetricsError::ZeroVariance("x values"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    Ok((slope, ym - slope * xm))
}

/// One-vs-rest counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ClassCounts {
    /// F1 of this class; 0 when it has neither support nor predictions.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Confusion counts for the two labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub significant: ClassCounts,
    pub not_significant: ClassCounts,
}

impl ConfusionCounts {
    pub fn tally(predicted: &[Label], gold: &[Label]) -> Result<Self, MetricsError> {
        if predicted.len() != gold.len() {
            return Err(MetricsError::LengthMismatch(predicted.len(), gold.len()));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &g) in predicted.iter().zip(gold) {
            for (class, counts) in [
                (Label::Significant, &mut c.significant),
                (Label::NotSignificant, &mut c.not_significant),
            ] {
                match (p == class, g == class) {
                    (true, true) => counts.tp += 1,
                    (true, false) => counts.fp += 1,
                    (false, true) => counts.fn_ += 1,
                    (false, false) => counts.tn += 1,
                }
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        let s = self.significant;
        s.tp + s.fp + s.fn_ + s.tn
    }

    pub fn macro_f1(&self) -> f64 {
        (self.significant.f1() + self.not_significant.f1()) / 2.0
    }

    pub fn accuracy(&self) -> f64 {
        let correct = self.significant.tp + self.not_significant.tp;
        correct as f64 / self.total().max(1) as f64
    }
}

/// Macro-averaged F1 over both labels and exact-match accuracy. A label with
/// no support and no predictions still enters the average, at F1 = 0.
pub fn macro_f1_accuracy(predicted: &[Label], gold: &[Label]) -> Result<(f64, f64), MetricsError> {
    if predicted.is_empty() && gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    let c = ConfusionCounts::tally(predicted, gold)?;
    Ok((c.macro_f1(), c.accuracy()))
}

fn unigram_counts(text: &str) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for tok in text.split_whitespace() {
        *counts.entry(tok.to_lowercase()).or_insert(0) += 1;
    }
    counts
}

/// ROUGE-1 F-measure over lowercased whitespace tokens with clipped counts.
/// Two empty strings score 1; exactly one empty string scores 0.
pub fn rouge1_f(candidate: &str, reference: &str) -> f64 {
    let cand = unigram_counts(candidate);
    let refs = unigram_counts(reference);
    let cand_total: usize = cand.values().sum();
    let ref_total: usize = refs.values().sum();
    match (cand_total, ref_total) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let overlap: usize = cand
        .iter()
        .map(|(tok, &c)| c.min(refs.get(tok).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Uniform-width histogram. Bins are right-open except the last, which is
/// closed. Without an explicit range the observed min and max are used (a
/// single repeated value gets a unit-wide range centred on it). Values outside
/// an explicit range and NaNs are not counted.
pub fn histogram(values: &[f64], bins: usize, range: Option<(f64, f64)>) -> Result<Vec<HistogramBin>, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::NoBins);
    }
    let (lo, hi) = match range {
        Some((lo, hi)) => {
            if !(lo < hi) {
                return Err(MetricsError::BadRange { lo, hi });
            }
            (lo, hi)
        }
        None => {
            let finite = values.iter().copied().filter(|v| v.is_finite());
            let lo = finite.clone().fold(f64::INFINITY, f64::min);
            let hi = finite.fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if lo == hi {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        }
    };
    let edge = |i: usize| {
        if i == bins {
            hi
        } else {
            lo + (hi - lo) * i as f64 / bins as f64
        }
    };
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: edge(i),
            hi: edge(i + 1),
            count: 0,
        })
        .collect();
    for &v in values {
        if !(v >= lo && v <= hi) {
            continue;
        }
        let idx = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
        out[idx.min(bins - 1)].count += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Label::{NotSignificant as N, Significant as S};

    fn series(p: &[f64], t: &[f64]) -> PairedSeries {
        PairedSeries::new(p.to_vec(), t.to_vec()).unwrap()
    }

    #[test]
    fn r_squared_examples() {
        assert_eq!(
            r_squared_centered(&series(&[0.1, 0.5, 0.9], &[0.1, 0.5, 0.9])).unwrap(),
            1.0
        );
        assert!(
            r_squared_centered(&series(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]))
                .unwrap()
                .abs()
                < 1e-15
        );
        assert!((r_squared_centered(&series(&[0.0, 1.0, 1.0], &[0.0, 1.0, 2.0])).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(
            r_squared_centered(&series(&[0.0, 1.0], &[1.0, 1.0])),
            Err(MetricsError::ZeroVariance("targets"))
        );
    }

    #[test]
    fn pearson_examples() {
        let t = [0.2, 0.4, 0.9, 0.1];
        assert!((pearson(&series(&t, &t)).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = t.iter().map(|x| -x).collect();
        assert!((pearson(&series(&neg, &t)).unwrap() + 1.0).abs() < 1e-15);
        // scipy.stats.pearsonr([1,2,3],[1,2,4])
        assert!(
            (pearson(&series(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0])).unwrap() - 0.981_980_506_061_965_5).abs() < 1e-12
        );
        assert!(pearson(&series(&[1.0, 1.0], &[0.0, 1.0])).is_err());
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&series(&[0.3, 0.2], &[0.3, 0.2])).unwrap(), 0.0);
        assert_eq!(mse(&series(&[0.0, 0.0], &[1.0, 1.0])).unwrap(), 1.0);
        assert!((mse(&series(&[0.1, 0.3], &[0.2, 0.1])).unwrap() - 0.025).abs() < 1e-15);
        assert!(mse(&series(&[], &[])).is_err());
        assert!(PairedSeries::new(vec![1.0], vec![]).is_err());
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1_accuracy(&[S, N, S], &[S, N, S]).unwrap(), (1.0, 1.0));
        let (f1, acc) = macro_f1_accuracy(&[S, N, S, N], &[S, N, N, N]).unwrap();
        // class F1s 2/3 and 4/5
        assert!((f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
        assert_eq!(acc, 0.75);
        let (_, acc) = macro_f1_accuracy(&[S, S, S, S], &[S, N, S, N]).unwrap();
        assert_eq!(acc, 0.5);
        assert!(macro_f1_accuracy(&[S], &[S, N]).is_err());
        // Zero-support class averaged in at 0.
        assert_eq!(macro_f1_accuracy(&[S, S], &[S, S]).unwrap(), (0.5, 1.0));
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge1_f("The cat sat", "the cat sat"), 1.0);
        assert!((rouge1_f("the cat sat", "the cat") - 0.8).abs() < 1e-15);
        assert_eq!(rouge1_f("a b", "c d"), 0.0);
        assert_eq!(rouge1_f("", ""), 1.0);
        assert_eq!(rouge1_f("", "x"), 0.0);
        // Clipping: "the the the" vs "the" has overlap 1.
        assert!((rouge1_f("the the the", "the") - 0.5).abs() < 1e-15);
    }

    #[test]
    fn histogram_examples() {
        let h = histogram(&[0.5], 1, Some((0.0, 1.0))).unwrap();
        assert_eq!(
            h,
            vec![HistogramBin {
                lo: 0.0,
                hi: 1.0,
                count: 1
            }]
        );
        let h = histogram(&[0.0, 0.5, 1.0], 2, Some((0.0, 1.0))).unwrap();
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![1, 2]);
        assert!(histogram(&[0.1], 2, Some((1.0, 1.0))).is_err());
        assert!(histogram(&[0.1], 0, None).is_err());
        let flat = histogram(&[0.0, 0.0, 0.0], 4, None).unwrap();
        assert_eq!(flat.iter().map(|b| b.count).sum::<usize>(), 3);
    }

    #[test]
    fn fit_recovers_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        let (m, b) = least_squares_fit(&xs, &ys).unwrap();
        assert!((m - 2.0).abs() < 1e-12 && (b + 1.0).abs() < 1e-12);
        assert!(least_squares_fit(&[1.0, 1.0], &[0.0, 1.0]).is_err());
    }

    fn finite_series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (3usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(-10.0f64..10.0, n),
                proptest::collection::vec(-10.0f64..10.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn pearson_affine_invariance((p, t) in finite_series(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let Ok(r) = pearson(&series(&p, &t)) else { return Ok(()) };
            let scaled: Vec<f64> = p.iter().map(|x| a * x + b).collect();
            let r2 = pearson(&series(&scaled, &t)).unwrap();
            prop_assert!((r - r2).abs() < 1e-9);
            let flipped: Vec<f64> = p.iter().map(|x| -a * x + b).collect();
            let r3 = pearson(&series(&flipped, &t)).unwrap();
            prop_assert!((r + r3).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&r));
        }

        #[test]
        fn r_squared_bounded_and_equals_pcc_sq_at_ls_fit((p, t) in finite_series()) {
            let Ok(r2) = r_squared_centered(&series(&p, &t)) else { return Ok(()) };
            prop_assert!(r2 <= 1.0);
            let Ok((slope, intercept)) = least_squares_fit(&p, &t) else { return Ok(()) };
            let fitted: Vec<f64> = p.iter().map(|x| slope * x + intercept).collect();
            let lhs = r_squared_centered(&series(&fitted, &t)).unwrap();
            let pcc = pearson(&series(&p, &t)).unwrap();
            prop_assert!((lhs - pcc * pcc).abs() < 1e-9);
        }

        #[test]
        fn rouge_symmetric(a in "[a-c ]{0,20}", b in "[a-c ]{0,20}") {
            prop_assert_eq!(rouge1_f(&a, &b), rouge1_f(&b, &a));
            let f = rouge1_f(&a, &b);
            prop_assert!((0.0..=1.0).contains(&f));
        }

        #[test]
        fn histogram_partitions(values in proptest::collection::vec(-100.0f64..100.0, 0..200), bins in 1usize..30) {
            let h = histogram(&values, bins, None).unwrap();
            prop_assert_eq!(h.len(), bins);
            prop_assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), values.len());
        }
    }
}
