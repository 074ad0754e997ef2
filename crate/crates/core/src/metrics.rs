//! Evaluation metrics: top-1 accuracy, class-mean average precision, macro
//! one-vs-rest AUROC, and mean log-loss.
//!
//! AP and AUROC are implemented with sorted sweeps / rank statistics; the
//! test suite checks them against O(N^2) pairwise brute-force oracles.

use serde::{Deserialize, Serialize};

use crate::dist::CategoricalDistribution;
use crate::error::{Error, Result};
use crate::training::cross_entropy;

/// One evaluation over a labeled set. `per_class_ap` is indexed by class;
/// classes with no positives in the labels hold `None` and are excluded
/// from the macro means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub cmap: f64,
    pub auroc: f64,
    pub mean_log_loss: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub n_samples: usize,
}

impl EvalReport {
    /// Single-line structured record for the CLI.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialization cannot fail")
    }
}

/// Fraction of samples whose argmax prediction matches the label. Argmax
/// ties resolve to the lowest class index.
pub fn top1_accuracy(preds: &[CategoricalDistribution], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let correct = preds
        .iter()
        .zip(labels)
        .filter(|(p, &l)| p.argmax() == l)
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Average precision: mean over positives of precision at each positive's
/// rank, scores sorted descending with ties broken by original index.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::Dimension(format!(
            "{} scores vs {} flags",
            scores.len(),
            positives.len()
        )));
    }
    if !positives.iter().any(|&p| p) {
        return Err(Error::InvalidInput("average precision needs a positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps original-index tie order
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / hits as f64)
}

/// One-vs-rest AUROC for a single class, computed via the Mann–Whitney rank
/// statistic with average ranks on ties. Semantically this equals the
/// pairwise probability `P(score_pos > score_neg) + 0.5 * P(tie)`.
pub fn binary_auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidInput(
            "AUROC needs at least one positive and one negative".into(),
        ));
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // average rank for the tie group, 1-based
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Ok(u / (np * nn))
}

/// Macro one-vs-rest AUROC over the classes that have both a positive and a
/// negative in `labels`.
pub fn macro_auroc(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} score rows vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let c = scores[0].len();
    let mut total = 0.0;
    let mut counted = 0usize;
    for class in 0..c {
        let pos: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == class)
            .map(|(s, _)| s[class])
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l != class)
            .map(|(s, _)| s[class])
            .collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        total += binary_auroc(&pos, &neg)?;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::InvalidInput(
            "no class has both positives and negatives".into(),
        ));
    }
    Ok(total / counted as f64)
}

/// Per-class AP over classes present in the labels (`None` otherwise) plus
/// their unweighted mean.
pub fn class_mean_ap(scores: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Option<f64>>)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Dimension("scores/labels shape mismatch or empty".into()));
    }
    let c = scores[0].len();
    let mut per_class = vec![None; c];
    let mut total = 0.0;
    let mut counted = 0usize;
    for class in 0..c {
        let flags: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        if !flags.iter().any(|&f| f) {
            continue;
        }
        let col: Vec<f64> = scores.iter().map(|s| s[class]).collect();
        let ap = average_precision(&col, &flags)?;
        per_class[class] = Some(ap);
        total += ap;
        counted += 1;
    }
    Ok((total / counted as f64, per_class))
}

/// Full report from predicted distributions and labels.
pub fn evaluate(preds: &[CategoricalDistribution], labels: &[usize]) -> Result<EvalReport> {
    let top1 = top1_accuracy(preds, labels)?;
    let scores: Vec<Vec<f64>> = preds.iter().map(|p| p.probs().to_vec()).collect();
    let (cmap, per_class_ap) = class_mean_ap(&scores, labels)?;
    let auroc = macro_auroc(&scores, labels)?;
    let mut loss = 0.0;
    for (p, &l) in preds.iter().zip(labels) {
        loss += cross_entropy(p, l)?;
    }
    Ok(EvalReport {
        top1,
        cmap,
        auroc,
        mean_log_loss: loss / preds.len() as f64,
        per_class_ap,
        n_samples: preds.len(),
    })
}

#[cfg(test)]
pub(crate) mod oracles {
    //! Brute-force O(N^2) oracles, independent of the sweeping
    //! implementations above.

    /// AP by explicit rank computation per positive: rank of item i is
    /// 1 + #{j : s_j > s_i or (s_j == s_i and j < i)}.
    pub fn brute_force_ap(scores: &[f64], positives: &[bool]) -> f64 {
        let n = scores.len();
        let mut sum = 0.0;
        let mut n_pos = 0usize;
        for i in 0..n {
            if !positives[i] {
                continue;
            }
            n_pos += 1;
            let mut rank = 1usize;
            let mut pos_at_or_above = 0usize;
            for j in 0..n {
                let above = scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
                if above || j == i {
                    if positives[j] {
                        pos_at_or_above += 1;
                    }
                    if j != i {
                        rank += 1;
                    }
                }
            }
            sum += pos_at_or_above as f64 / rank as f64;
        }
        sum / n_pos as f64
    }

    /// AUROC by enumerating every (positive, negative) pair.
    pub fn brute_force_auroc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut total = 0.0;
        for &p in pos {
            for &n in neg {
                if p > n {
                    total += 1.0;
                } else if p == n {
                    total += 0.5;
                }
            }
        }
        total / (pos.len() * neg.len()) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn top1_counting() {
        let one_hot = |i| CategoricalDistribution::one_hot(3, i).unwrap();
        let preds = vec![one_hot(0), one_hot(1), one_hot(2), one_hot(0)];
        assert_eq!(top1_accuracy(&preds, &[0, 1, 2, 0]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&preds, &[1, 0, 0, 1]).unwrap(), 0.0);
        assert_eq!(top1_accuracy(&preds, &[0, 1, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn ap_hand_ranked() {
        // ranking [pos, neg, pos] -> (1/1 + 2/3)/2 = 5/6
        let ap = average_precision(&[0.9, 0.5, 0.1], &[true, false, true]).unwrap();
        assert_abs_diff_eq!(ap, 5.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn ap_edge_cases() {
        assert_eq!(
            average_precision(&[0.9, 0.5, 0.1], &[true, true, true]).unwrap(),
            1.0
        );
        // single positive ranked last of n
        let ap = average_precision(&[0.9, 0.5, 0.1, 0.0], &[false, false, false, true]).unwrap();
        assert_abs_diff_eq!(ap, 0.25, epsilon = 1e-12);
        assert!(average_precision(&[0.9, 0.5], &[false, false]).is_err());
    }

    #[test]
    fn auroc_enumerated_pairs() {
        // positives {0.9, 0.3}, negatives {0.5, 0.7}: 2 of 4 pairs win
        let a = binary_auroc(&[0.9, 0.3], &[0.5, 0.7]).unwrap();
        assert_abs_diff_eq!(a, 0.5, epsilon = 1e-12);
        assert_eq!(binary_auroc(&[1.0, 0.9], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(binary_auroc(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.5);
    }

    #[test]
    fn brute_force_agreement_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..100 {
            let n = rng.gen_range(5..200);
            // coarse grid of scores forces plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
            let mut flags: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            if !flags.iter().any(|&f| f) {
                flags[0] = true;
            }
            if flags.iter().all(|&f| f) {
                flags[0] = false;
            }
            let ap = average_precision(&scores, &flags).unwrap();
            let ap_oracle = oracles::brute_force_ap(&scores, &flags);
            assert_abs_diff_eq!(ap, ap_oracle, epsilon = 1e-12);

            let pos: Vec<f64> = scores
                .iter()
                .zip(&flags)
                .filter(|(_, &f)| f)
                .map(|(&s, _)| s)
                .collect();
            let neg: Vec<f64> = scores
                .iter()
                .zip(&flags)
                .filter(|(_, &f)| !f)
                .map(|(&s, _)| s)
                .collect();
            let auc = binary_auroc(&pos, &neg).unwrap();
            let auc_oracle = oracles::brute_force_auroc(&pos, &neg);
            assert_abs_diff_eq!(auc, auc_oracle, epsilon = 1e-12);
        }
    }

    #[test]
    fn absent_classes_skipped_in_macro_means() {
        // class 2 never appears in labels
        let scores = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.2, 0.7, 0.1],
            vec![0.6, 0.3, 0.1],
        ];
        let labels = [0usize, 1, 0];
        let (_, per_class) = class_mean_ap(&scores, &labels).unwrap();
        assert!(per_class[2].is_none());
        assert!(per_class[0].is_some() && per_class[1].is_some());
        assert!(macro_auroc(&scores, &labels).is_ok());
    }

    proptest! {
        /// AP and AUROC must be invariant under strictly monotone transforms
        /// of the scores.
        #[test]
        fn monotone_transform_invariance(
            scores in proptest::collection::vec(0.0f64..1.0, 6..40),
            flag_seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(flag_seed);
            let mut flags: Vec<bool> = scores.iter().map(|_| rng.gen_bool(0.4)).collect();
            flags[0] = true;
            *flags.last_mut().unwrap() = false;
            let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp() + 1.0).collect();
            let ap1 = average_precision(&scores, &flags).unwrap();
            let ap2 = average_precision(&transformed, &flags).unwrap();
            prop_assert!((ap1 - ap2).abs() < 1e-12);

            let split = |sc: &[f64]| -> (Vec<f64>, Vec<f64>) {
                let pos = sc.iter().zip(&flags).filter(|(_, &f)| f).map(|(&s, _)| s).collect();
                let neg = sc.iter().zip(&flags).filter(|(_, &f)| !f).map(|(&s, _)| s).collect();
                (pos, neg)
            };
            let (p1, n1) = split(&scores);
            let (p2, n2) = split(&transformed);
            let a1 = binary_auroc(&p1, &n1).unwrap();
            let a2 = binary_auroc(&p2, &n2).unwrap();
            prop_assert!((a1 - a2).abs() < 1e-12);
        }
    }
}
