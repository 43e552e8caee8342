//! Accuracy and uncertainty metrics. Logarithms are natural throughout.

use crate::error::{param_err, Result};
use crate::scalar::Scalar;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Equal-width binning on `[0, 1]` for [`ece`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CalibrationConfig {
    pub num_bins: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { num_bins: 15 }
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return param_err(format!("length mismatch: {a} vs {b}"));
    }
    if a == 0 {
        return param_err("metric needs at least one element");
    }
    Ok(())
}

/// Root mean squared error.
pub fn rmse<T: Scalar>(y: &[T], pred_mean: &[T]) -> Result<T> {
    same_len(y.len(), pred_mean.len())?;
    let ss: T = y.iter().zip(pred_mean).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok((ss / T::from_usize_lossy(y.len())).sqrt())
}

/// Mean Gaussian negative log predictive density.
pub fn nlpd<T: Scalar>(y: &[T], mean: &[T], var: &[T]) -> Result<T> {
    same_len(y.len(), mean.len())?;
    same_len(y.len(), var.len())?;
    let half = T::lit(0.5);
    let mut total = T::zero();
    for k in 0..y.len() {
        let v = var[k];
        if !(v > T::zero()) {
            return param_err(format!("predictive variance at {k} is {v}, must be positive"));
        }
        let r = y[k] - mean[k];
        total += r * r / (T::lit(2.0) * v) + half * (T::lit(LN_2PI) + v.ln());
    }
    Ok(total / T::from_usize_lossy(y.len()))
}

/// Mean negative log-likelihood of the true class under `probs` (rows are examples).
pub fn nll_classification<T: Scalar>(probs: &[Vec<T>], labels: &[usize]) -> Result<T> {
    same_len(probs.len(), labels.len())?;
    let mut total = T::zero();
    for (row, &y) in probs.iter().zip(labels) {
        if y >= row.len() {
            return param_err(format!("label {y} outside 0..{}", row.len()));
        }
        total -= row[y].max(T::min_positive_value()).ln();
    }
    Ok(total / T::from_usize_lossy(labels.len()))
}

/// Fraction of rows whose arg-max equals the label.
pub fn accuracy<T: Scalar>(probs: &[Vec<T>], labels: &[usize]) -> Result<T> {
    same_len(probs.len(), labels.len())?;
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best == y
        })
        .count();
    Ok(T::from_usize_lossy(hits) / T::from_usize_lossy(labels.len()))
}

/// Bin of a confidence: `(k/M, (k+1)/M]`, with the first bin also holding 0.
pub fn ece_bin<T: Scalar>(c: T, num_bins: usize) -> usize {
    let m = T::from_usize_lossy(num_bins);
    let mut k = (c * m).ceil().to_usize().unwrap_or(0).saturating_sub(1);
    // floating-point products can land one bin off at the edges
    if k + 1 < num_bins && c > T::from_usize_lossy(k + 1) / m {
        k += 1;
    }
    if k > 0 && c <= T::from_usize_lossy(k) / m {
        k -= 1;
    }
    k.min(num_bins - 1)
}

/// Expected calibration error.
pub fn ece<T: Scalar>(confidences: &[T], correct: &[bool], cfg: &CalibrationConfig) -> Result<T> {
    same_len(confidences.len(), correct.len())?;
    if cfg.num_bins == 0 {
        return param_err("ECE needs at least one bin");
    }
    let mut count = vec![0usize; cfg.num_bins];
    let mut conf = vec![T::zero(); cfg.num_bins];
    let mut hits = vec![0usize; cfg.num_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(c >= T::zero() && c <= T::one()) {
            return param_err(format!("confidence {c} outside [0, 1]"));
        }
        let k = ece_bin(c, cfg.num_bins);
        count[k] += 1;
        conf[k] += c;
        hits[k] += usize::from(ok);
    }
    let n = T::from_usize_lossy(confidences.len());
    let mut total = T::zero();
    for k in 0..cfg.num_bins {
        if count[k] == 0 {
            continue;
        }
        let nk = T::from_usize_lossy(count[k]);
        let acc = T::from_usize_lossy(hits[k]) / nk;
        total += nk / n * (acc - conf[k] / nk).abs();
    }
    Ok(total)
}

/// `−Σ p log p` of a probability vector, with `0 log 0 = 0`.
pub fn predictive_entropy<T: Scalar>(p: &[T]) -> Result<T> {
    if p.is_empty() {
        return param_err("empty probability vector");
    }
    let mut sum = T::zero();
    let mut h = T::zero();
    for &v in p {
        if !(v >= T::zero()) {
            return param_err(format!("negative probability {v}"));
        }
        sum += v;
        if v > T::zero() {
            h -= v * v.ln();
        }
    }
    if (sum - T::one()).abs() > T::lit(1e-6) {
        return param_err(format!("probabilities sum to {sum}, not 1"));
    }
    Ok(h)
}

/// `H(p̄) − mean_t H(p_t)` over per-draw probability rows, clamped at 0.
pub fn mutual_information<T: Scalar>(per_draw: &[Vec<T>]) -> Result<T> {
    if per_draw.len() < 2 {
        return param_err(format!("mutual information needs at least 2 draws, got {}", per_draw.len()));
    }
    let c = per_draw[0].len();
    if per_draw.iter().any(|r| r.len() != c) {
        return param_err("draws have inconsistent class counts");
    }
    let t = T::from_usize_lossy(per_draw.len());
    let mut mean = vec![T::zero(); c];
    let mut expected = T::zero();
    for row in per_draw {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v / t;
        }
        expected += predictive_entropy(row)? / t;
    }
    Ok((predictive_entropy(&mean)? - expected).max(T::zero()))
}
