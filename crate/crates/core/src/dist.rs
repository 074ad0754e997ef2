//! Probability-vector primitives: normalized categorical distributions,
//! unnormalized log-score vectors, and the summary statistics consumed by
//! the gating features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Construction renormalizes when the raw sum is within this tolerance of 1
/// and rejects otherwise.
pub const SUM_RENORM_TOL: f64 = 1e-6;

/// Normalized probability vector over `C >= 2` classes.
///
/// Invariants: every entry is finite and nonnegative, entries sum to 1
/// within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDistribution {
    probs: Vec<f64>,
}

impl CategoricalDistribution {
    /// Builds a distribution from raw probabilities. The vector is
    /// renormalized if its sum deviates from 1 by at most 1e-6 and rejected
    /// beyond that.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes, got {}",
                probs.len()
            )));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "probability at index {i} is {p}, must be finite and >= 0"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SUM_RENORM_TOL {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, outside renormalization tolerance"
            )));
        }
        let probs = probs.into_iter().map(|p| p / sum).collect();
        Ok(Self { probs })
    }

    pub fn uniform(n_classes: usize) -> Result<Self> {
        Self::new(vec![1.0 / n_classes as f64; n_classes])
    }

    pub fn one_hot(n_classes: usize, index: usize) -> Result<Self> {
        if index >= n_classes {
            return Err(Error::InvalidInput(format!(
                "one-hot index {index} out of range for {n_classes} classes"
            )));
        }
        let mut probs = vec![0.0; n_classes];
        probs[index] = 1.0;
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.probs.len() {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Vector of unnormalized log-scores. All entries must be finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogScoreVector {
    scores: Vec<f64>,
}

impl LogScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes, got {}",
                scores.len()
            )));
        }
        for (i, &s) in scores.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "log-score at index {i} is {s}, must be finite"
                )));
            }
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Max-subtracted exponentiation followed by normalization. Invariant to
/// adding any constant to all scores.
pub fn normalize_log_scores(scores: &LogScoreVector) -> Result<CategoricalDistribution> {
    softmax_lenient(scores.scores())
}

/// Softmax that tolerates `-inf` entries (they map to probability 0). Used
/// by the fusion rule where `omega * ln(prior + eps)` can legitimately be
/// `-inf` when `eps = 0`. `NaN` or `+inf` entries are rejected, as is an
/// all-`-inf` input.
pub(crate) fn softmax_lenient(scores: &[f64]) -> Result<CategoricalDistribution> {
    let mut max = f64::NEG_INFINITY;
    for &s in scores {
        if s.is_nan() || s == f64::INFINITY {
            return Err(Error::InvalidInput(format!("non-finite log-score {s}")));
        }
        if s > max {
            max = s;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidInput(
            "all log-scores are -inf; no probability mass".into(),
        ));
    }
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(CategoricalDistribution {
        probs: exps.into_iter().map(|e| e / sum).collect(),
    })
}

/// Shannon entropy in nats, with the convention `0 * ln 0 = 0`.
/// Result lies in `[0, ln C]`.
pub fn entropy(p: &CategoricalDistribution) -> f64 {
    let mut h = 0.0;
    for &pi in p.probs() {
        if pi > 0.0 {
            h -= pi * pi.ln();
        }
    }
    h.max(0.0)
}

/// Largest entry and the gap to the second-largest entry. Ties are broken
/// by lowest class index, so an exact tie yields margin 0.
pub fn top2_stats(p: &CategoricalDistribution) -> (f64, f64) {
    let probs = p.probs();
    let best = p.argmax();
    let mut second = f64::NEG_INFINITY;
    for (i, &pi) in probs.iter().enumerate() {
        if i != best && pi > second {
            second = pi;
        }
    }
    (probs[best], probs[best] - second)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn normalize_uniform_on_equal_scores() {
        let s = LogScoreVector::new(vec![0.0, 0.0, 0.0]).unwrap();
        let p = normalize_log_scores(&s).unwrap();
        for &pi in p.probs() {
            assert_abs_diff_eq!(pi, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn normalize_ln2_case() {
        let s = LogScoreVector::new(vec![2.0f64.ln(), 0.0]).unwrap();
        let p = normalize_log_scores(&s).unwrap();
        assert_abs_diff_eq!(p.probs()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.probs()[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn normalize_shift_invariance_pinned() {
        for c in [-100.0, 0.0, 3.5, 700.0] {
            let s = LogScoreVector::new(vec![c, c + 3.0f64.ln()]).unwrap();
            let p = normalize_log_scores(&s).unwrap();
            assert_abs_diff_eq!(p.probs()[0], 0.25, epsilon = 1e-12);
            assert_abs_diff_eq!(p.probs()[1], 0.75, epsilon = 1e-12);
        }
    }

    #[test]
    fn non_finite_scores_rejected() {
        assert!(LogScoreVector::new(vec![0.0, f64::NAN]).is_err());
        assert!(LogScoreVector::new(vec![f64::INFINITY, 0.0]).is_err());
        assert!(LogScoreVector::new(vec![f64::NEG_INFINITY, 0.0]).is_err());
    }

    #[test]
    fn construction_tolerance() {
        // within 1e-6: renormalized
        let p = CategoricalDistribution::new(vec![0.5, 0.5 + 5e-7]).unwrap();
        let sum: f64 = p.probs().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-9);
        // beyond 1e-6: rejected
        assert!(CategoricalDistribution::new(vec![0.5, 0.501]).is_err());
        // negative entry rejected
        assert!(CategoricalDistribution::new(vec![1.1, -0.1]).is_err());
        // C = 1 rejected
        assert!(CategoricalDistribution::new(vec![1.0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        let u = CategoricalDistribution::uniform(4).unwrap();
        assert_abs_diff_eq!(entropy(&u), 4.0f64.ln(), epsilon = 1e-12);
        let oh = CategoricalDistribution::one_hot(5, 2).unwrap();
        assert_abs_diff_eq!(entropy(&oh), 0.0, epsilon = 1e-15);
        let p = CategoricalDistribution::new(vec![0.5, 0.25, 0.25]).unwrap();
        assert_abs_diff_eq!(entropy(&p), 1.5 * 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn top2_examples() {
        let p = CategoricalDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        assert_eq!(top2_stats(&p), (0.5, 0.2));
        let oh = CategoricalDistribution::one_hot(3, 1).unwrap();
        assert_eq!(top2_stats(&oh), (1.0, 1.0));
        let u = CategoricalDistribution::uniform(6).unwrap();
        let (m, g) = top2_stats(&u);
        assert_abs_diff_eq!(m, 1.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g, 0.0, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(scores in proptest::collection::vec(-50.0f64..50.0, 2..40)) {
            let s = LogScoreVector::new(scores).unwrap();
            let p = normalize_log_scores(&s).unwrap();
            let sum: f64 = p.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }

        #[test]
        fn softmax_shift_invariant(
            scores in proptest::collection::vec(-30.0f64..30.0, 2..20),
            c in -100.0f64..100.0,
        ) {
            let a = normalize_log_scores(&LogScoreVector::new(scores.clone()).unwrap()).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            let b = normalize_log_scores(&LogScoreVector::new(shifted).unwrap()).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn entropy_bounds(scores in proptest::collection::vec(-20.0f64..20.0, 2..30)) {
            let p = normalize_log_scores(&LogScoreVector::new(scores).unwrap()).unwrap();
            let h = entropy(&p);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (p.n_classes() as f64).ln() + 1e-12);
        }

        #[test]
        fn margin_bounds(scores in proptest::collection::vec(-20.0f64..20.0, 2..30)) {
            let p = normalize_log_scores(&LogScoreVector::new(scores).unwrap()).unwrap();
            let (max_prob, margin) = top2_stats(&p);
            prop_assert!(margin >= 0.0 && margin <= 1.0);
            prop_assert!(margin <= max_prob);
        }
    }
}
