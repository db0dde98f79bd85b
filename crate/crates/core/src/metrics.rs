//! Accuracy, likelihood and calibration metrics for probabilistic classifiers.

use serde::{Deserialize, Serialize};

use crate::datasets::check_simplex;
use crate::error::{Error, Result};
use crate::nn::argmax;

/// Default number of confidence bins.
pub const DEFAULT_BIN_COUNT: usize = 15;

/// Floor applied to probabilities before taking logs in the NLL.
pub const NLL_LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub count: usize,
    /// Mean confidence of the bin (0 when empty).
    pub confidence: f64,
    /// Fraction of correct predictions in the bin (0 when empty).
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub acc: f64,
    pub nll: f64,
    pub ece: f64,
    pub oe: f64,
    pub ue: f64,
    pub bins: Vec<BinStat>,
    pub bin_count: usize,
}

/// Zero-based bin for a confidence, with bin `m` covering `(m/M, (m+1)/M]`
/// and a confidence of exactly zero assigned to the first bin.
pub fn bin_index(confidence: f64, bin_count: usize) -> usize {
    let m = bin_count as f64;
    let mut idx = ((confidence * m).ceil() as isize - 1).clamp(0, bin_count as isize - 1) as usize;
    while idx > 0 && confidence <= idx as f64 / m {
        idx -= 1;
    }
    while idx + 1 < bin_count && confidence > (idx + 1) as f64 / m {
        idx += 1;
    }
    idx
}

pub fn evaluate(
    pred_probs: &[Vec<f64>],
    true_labels: &[usize],
    bin_count: usize,
) -> Result<CalibrationReport> {
    if pred_probs.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty prediction set"));
    }
    if pred_probs.len() != true_labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions but {} labels",
            pred_probs.len(),
            true_labels.len()
        )));
    }
    if bin_count == 0 {
        return Err(Error::invalid("bin count must be at least 1"));
    }
    let n = pred_probs.len();
    let mut counts = vec![0usize; bin_count];
    let mut conf_sum = vec![0.0; bin_count];
    let mut correct = vec![0usize; bin_count];
    let mut hits = 0usize;
    let mut nll_sum = 0.0;
    for (i, (p, &y)) in pred_probs.iter().zip(true_labels).enumerate() {
        check_simplex(p).map_err(|e| Error::invalid(format!("prediction {i}: {e}")))?;
        if y >= p.len() {
            return Err(Error::InvalidLabel(format!(
                "label {y} of example {i} out of range for {} classes",
                p.len()
            )));
        }
        let pred = argmax(p);
        let b = bin_index(p[pred], bin_count);
        counts[b] += 1;
        conf_sum[b] += p[pred];
        if pred == y {
            correct[b] += 1;
            hits += 1;
        }
        nll_sum -= p[y].max(NLL_LOG_CLAMP).ln();
    }

    let nf = n as f64;
    let mut oe = 0.0;
    let mut ue = 0.0;
    let bins: Vec<BinStat> = (0..bin_count)
        .map(|b| {
            if counts[b] == 0 {
                return BinStat {
                    count: 0,
                    confidence: 0.0,
                    accuracy: 0.0,
                };
            }
            let c = counts[b] as f64;
            let stat = BinStat {
                count: counts[b],
                confidence: conf_sum[b] / c,
                accuracy: correct[b] as f64 / c,
            };
            let share = c / nf;
            oe += share * (stat.confidence - stat.accuracy).max(0.0);
            ue += share * (stat.accuracy - stat.confidence).max(0.0);
            stat
        })
        .collect();

    Ok(CalibrationReport {
        n,
        acc: hits as f64 / nf,
        nll: nll_sum / nf,
        ece: oe + ue,
        oe,
        ue,
        bins,
        bin_count,
    })
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn predictive_entropy(prob: &[f64]) -> f64 {
    -prob
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// `1 - sum(p^2)` rescaled by `1 - 1/K` so one-hot vectors score 0 and the
/// uniform vector scores 1.
pub fn predictive_uncertainty(prob: &[f64], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::invalid(format!(
            "predictive uncertainty needs K >= 2, got {k}"
        )));
    }
    if prob.len() != k {
        return Err(Error::invalid(format!(
            "probability vector has {} entries, expected {k}",
            prob.len()
        )));
    }
    let raw = 1.0 - prob.iter().map(|p| p * p).sum::<f64>();
    Ok((raw / (1.0 - 1.0 / k as f64)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions() {
        let probs = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]];
        let r = evaluate(&probs, &[0, 2], 15).unwrap();
        assert_eq!((r.acc, r.nll, r.ece, r.oe, r.ue), (1.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.bins[14].count, 2);
    }

    #[test]
    fn hand_binned_example() {
        let probs = vec![vec![0.6, 0.4], vec![0.6, 0.4]];
        let r = evaluate(&probs, &[0, 1], 15).unwrap();
        assert_eq!(r.acc, 0.5);
        let b = bin_index(0.6, 15);
        assert_eq!(b, 8);
        assert_eq!(r.bins[b].count, 2);
        assert_eq!(r.bins[b].accuracy, 0.5);
        assert!((r.ece - 0.1).abs() < 1e-12);
        assert_eq!(r.ece, r.oe);
        assert_eq!(r.ue, 0.0);
        let nll = -(0.6f64.ln() + 0.4f64.ln()) / 2.0;
        assert!((r.nll - nll).abs() < 1e-15);
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_index(0.0, 15), 0);
        assert_eq!(bin_index(1.0, 15), 14);
        assert_eq!(bin_index(1.0 / 15.0, 15), 0);
        assert_eq!(bin_index(2.0 / 15.0, 15), 1);
        assert_eq!(bin_index(1.0 / 15.0 + 1e-15, 15), 1);
        assert_eq!(bin_index(0.5, 2), 0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(evaluate(&[], &[], 15).is_err());
        assert!(evaluate(&[vec![0.5, 0.5]], &[2], 15).is_err());
        assert!(evaluate(&[vec![0.5, 0.6]], &[0], 15).is_err());
        assert!(evaluate(&[vec![0.5, 0.5]], &[0, 1], 15).is_err());
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probs: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let raw: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
        let a = evaluate(&probs, &labels, 15).unwrap();
        let (rp, rl): (Vec<_>, Vec<_>) = probs
            .iter()
            .cloned()
            .zip(labels.iter().copied())
            .rev()
            .unzip();
        let b = evaluate(&rp, &rl, 15).unwrap();
        for (x, y) in [
            (a.acc, b.acc),
            (a.nll, b.nll),
            (a.ece, b.ece),
            (a.oe, b.oe),
            (a.ue, b.ue),
        ] {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(a.ece <= 1.0 && a.oe >= 0.0 && a.ue >= 0.0);
    }

    #[test]
    fn entropy_values() {
        assert_eq!(predictive_entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((predictive_entropy(&[0.2; 5]) - 5f64.ln()).abs() < 1e-12);
        assert!((predictive_entropy(&[0.5, 0.5, 0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn uncertainty_values() {
        assert_eq!(predictive_uncertainty(&[0.0, 1.0], 2).unwrap(), 0.0);
        for k in 2..8 {
            let u = predictive_uncertainty(&vec![1.0 / k as f64; k], k).unwrap();
            assert!((u - 1.0).abs() < 1e-12);
        }
        let u = predictive_uncertainty(&[0.6, 0.1, 0.1, 0.1, 0.1], 5).unwrap();
        assert!((u - 0.75).abs() < 1e-12);
        assert!(predictive_uncertainty(&[1.0], 1).is_err());
    }
}
