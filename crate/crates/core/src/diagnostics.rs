//! Conditional-dependence diagnostic: within each class, try to predict
//! context-prior statistics from the embedding with a closed-form ridge
//! probe. Held-out R-squared, effect size, and a within-class permutation
//! test quantify whether embeddings leak context information.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{entropy, CategoricalDistribution};
use crate::error::{Error, Result};
use crate::store::{Dataset, PriorTable};

pub const DEFAULT_RIDGE: f64 = 1e-3;
pub const DEFAULT_MIN_SAMPLES_PER_CLASS: usize = 50;
pub const DEFAULT_N_PERM: usize = 199;
/// fraction of each class held out for probe evaluation
const HELD_OUT_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceReport {
    pub class_ids: Vec<usize>,
    pub per_class_r2: Vec<f64>,
    pub mean_r2: f64,
    pub cohens_d: f64,
    pub permutation_p: f64,
    pub frac_positive_improvement: f64,
    pub frac_r2_above_005: f64,
    pub n_classes_tested: usize,
}

/// Centered ridge-regression probe `y_hat = y_mean + (x - x_mean) W`.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub x_mean: Vec<f64>,
    pub y_mean: Vec<f64>,
    /// D x K, row-major
    pub weights: Vec<f64>,
    pub d: usize,
    pub k: usize,
}

impl LinearProbe {
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.y_mean.clone();
        for j in 0..self.d {
            let xc = x[j] - self.x_mean[j];
            for t in 0..self.k {
                out[t] += xc * self.weights[j * self.k + t];
            }
        }
        out
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite
/// matrix (row-major n x n).
fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for t in 0..j {
                sum -= l[i * n + t] * l[j * n + t];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Numeric("matrix not positive definite".into()));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solves `A x = b` given the Cholesky factor of A.
fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for t in 0..i {
            sum -= l[i * n + t] * y[t];
        }
        y[i] = sum / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for t in i + 1..n {
            sum -= l[t * n + i] * x[t];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

fn column_means(rows: &[&[f64]], width: usize) -> Vec<f64> {
    let mut mean = vec![0.0; width];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(*row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= rows.len() as f64;
    }
    mean
}

/// Precomputed design-side quantities shared across permutations of Y.
struct ProbeDesign {
    x_mean: Vec<f64>,
    chol: Vec<f64>,
    d: usize,
}

fn probe_design(x_train: &[&[f64]], ridge: f64) -> Result<ProbeDesign> {
    let d = x_train[0].len();
    let x_mean = column_means(x_train, d);
    let mut xtx = vec![0.0; d * d];
    for row in x_train {
        for i in 0..d {
            let xi = row[i] - x_mean[i];
            for j in 0..d {
                xtx[i * d + j] += xi * (row[j] - x_mean[j]);
            }
        }
    }
    for i in 0..d {
        xtx[i * d + i] += ridge;
    }
    Ok(ProbeDesign {
        x_mean,
        chol: cholesky(&xtx, d)?,
        d,
    })
}

fn fit_with_design(design: &ProbeDesign, x_train: &[&[f64]], y_train: &[&[f64]]) -> LinearProbe {
    let d = design.d;
    let k = y_train[0].len();
    let y_mean = column_means(y_train, k);
    // Xc' Yc, one rhs per target dimension
    let mut weights = vec![0.0; d * k];
    for t in 0..k {
        let mut rhs = vec![0.0; d];
        for (xr, yr) in x_train.iter().zip(y_train) {
            let yc = yr[t] - y_mean[t];
            for j in 0..d {
                rhs[j] += (xr[j] - design.x_mean[j]) * yc;
            }
        }
        let w = chol_solve(&design.chol, d, &rhs);
        for j in 0..d {
            weights[j * k + t] = w[j];
        }
    }
    LinearProbe {
        x_mean: design.x_mean.clone(),
        y_mean,
        weights,
        d,
        k,
    }
}

/// Closed-form ridge regression of Y on X (both row-major lists of rows).
pub fn fit_linear_probe(x: &[Vec<f64>], y: &[Vec<f64>], ridge: f64) -> Result<LinearProbe> {
    if x.len() < 2 || x.len() != y.len() {
        return Err(Error::InvalidInput("probe needs >= 2 paired rows".into()));
    }
    let xr: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
    let yr: Vec<&[f64]> = y.iter().map(Vec::as_slice).collect();
    let design = probe_design(&xr, ridge)?;
    Ok(fit_with_design(&design, &xr, &yr))
}

/// `1 - SS_res / SS_tot` where SS_tot measures deviation from the supplied
/// baseline (the train-split mean). May be negative. Returns 0 for a
/// target with no variance to explain.
pub fn r2_score(y_true: &[f64], y_pred: &[f64], y_baseline_mean: f64) -> Result<f64> {
    if y_true.len() < 2 || y_true.len() != y_pred.len() {
        return Err(Error::InvalidInput("r2_score needs >= 2 paired points".into()));
    }
    let ss_res: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(t, p)| (t - p) * (t - p))
        .sum();
    let ss_tot: f64 = y_true
        .iter()
        .map(|t| (t - y_baseline_mean) * (t - y_baseline_mean))
        .sum();
    if ss_tot <= 1e-12 {
        return Ok(0.0);
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// `mean(a) / sd(a)` with the unbiased (n-1) standard deviation.
pub fn cohens_d(a: &[f64]) -> Result<f64> {
    if a.len() < 2 {
        return Err(Error::InvalidInput("cohens_d needs >= 2 values".into()));
    }
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    let var = a.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (a.len() - 1) as f64;
    if var <= 1e-24 {
        return Err(Error::Numeric("cohens_d is undefined for degenerate spread".into()));
    }
    Ok(mean / var.sqrt())
}

/// Deterministic 80/20 index split.
fn held_out_split(n: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_test = ((HELD_OUT_FRACTION * n as f64).round() as usize).clamp(1, n - 1);
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    (train, test)
}

/// Per-sample held-out improvement: squared error of the mean predictor
/// minus squared error of the probe (positive means the probe helps).
fn held_out_improvements(
    probe: &LinearProbe,
    x_test: &[&[f64]],
    y_test: &[&[f64]],
) -> Vec<f64> {
    x_test
        .iter()
        .zip(y_test)
        .map(|(x, y)| {
            let pred = probe.predict(x);
            let mut mean_se = 0.0;
            let mut probe_se = 0.0;
            for t in 0..probe.k {
                mean_se += (y[t] - probe.y_mean[t]).powi(2);
                probe_se += (y[t] - pred[t]).powi(2);
            }
            mean_se - probe_se
        })
        .collect()
}

struct GroupEval {
    r2: f64,
    improvements: Vec<f64>,
    observed_stat: f64,
}

/// Fits, evaluates, and (optionally) permutes one group of paired rows.
/// Returns the group's evaluation plus the permuted statistics.
fn evaluate_group(
    x: &[&[f64]],
    y: &[&[f64]],
    ridge: f64,
    n_perm: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(GroupEval, Vec<f64>)> {
    let n = x.len();
    let (train, test) = held_out_split(n, rng);
    let x_train: Vec<&[f64]> = train.iter().map(|&i| x[i]).collect();
    let x_test: Vec<&[f64]> = test.iter().map(|&i| x[i]).collect();
    let design = probe_design(&x_train, ridge)?;

    let run = |y_rows: &[&[f64]]| -> (LinearProbe, Vec<f64>) {
        let y_train: Vec<&[f64]> = train.iter().map(|&i| y_rows[i]).collect();
        let y_test: Vec<&[f64]> = test.iter().map(|&i| y_rows[i]).collect();
        let probe = fit_with_design(&design, &x_train, &y_train);
        let imps = held_out_improvements(&probe, &x_test, &y_test);
        (probe, imps)
    };

    let (probe, improvements) = run(y);
    let k = probe.k;
    let mut r2_sum = 0.0;
    for t in 0..k {
        let y_true: Vec<f64> = test.iter().map(|&i| y[i][t]).collect();
        let y_pred: Vec<f64> = test.iter().map(|&i| probe.predict(x[i])[t]).collect();
        r2_sum += r2_score(&y_true, &y_pred, probe.y_mean[t])?;
    }
    let observed_stat = improvements.iter().sum::<f64>() / improvements.len() as f64;

    let mut perm_stats = Vec::with_capacity(n_perm);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..n_perm {
        order.shuffle(rng);
        let y_perm: Vec<&[f64]> = order.iter().map(|&i| y[i]).collect();
        let (_, imps) = run(&y_perm);
        perm_stats.push(imps.iter().sum::<f64>() / imps.len() as f64);
    }

    Ok((
        GroupEval {
            r2: r2_sum / k as f64,
            improvements,
            observed_stat,
        },
        perm_stats,
    ))
}

/// Permutes rows of Y relative to X, refits the probe on the same split,
/// and compares held-out improvement. `p = (1 + #{perm >= obs}) / (1 + n_perm)`.
pub fn permutation_test(x: &[Vec<f64>], y: &[Vec<f64>], n_perm: usize, seed: u64) -> Result<f64> {
    if n_perm < 99 {
        return Err(Error::InvalidInput("permutation test needs n_perm >= 99".into()));
    }
    if x.len() < 5 || x.len() != y.len() {
        return Err(Error::InvalidInput("permutation test needs >= 5 paired rows".into()));
    }
    let xr: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
    let yr: Vec<&[f64]> = y.iter().map(Vec::as_slice).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (eval, perms) = evaluate_group(&xr, &yr, DEFAULT_RIDGE, n_perm, &mut rng)?;
    let beat = perms.iter().filter(|&&s| s >= eval.observed_stat).count();
    Ok((1 + beat) as f64 / (1 + n_perm) as f64)
}

/// Target statistics per prior row: [max, entropy, margin].
pub fn prior_statistics(prior: &CategoricalDistribution) -> [f64; 3] {
    let probs = prior.probs();
    let mut max = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &p in probs {
        if p > max {
            second = max;
            max = p;
        } else if p > second {
            second = p;
        }
    }
    [max, entropy(prior), max - second]
}

/// Per-class probe of prior statistics from embeddings, aggregated into a
/// single report. Permutations shuffle Y within each class (conditioning
/// on the label) and the test statistic is the mean per-class improvement.
pub fn dependence_report(
    dataset: &Dataset,
    priors: &PriorTable,
    min_samples_per_class: usize,
    n_perm: usize,
    seed: u64,
) -> Result<DependenceReport> {
    if n_perm < 99 {
        return Err(Error::InvalidInput("dependence report needs n_perm >= 99".into()));
    }
    let c = dataset.n_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, rec) in dataset.records.iter().enumerate() {
        by_class[rec.label as usize].push(i);
    }

    let mut class_ids = Vec::new();
    let mut per_class_r2 = Vec::new();
    let mut pooled_improvements = Vec::new();
    let mut n_positive = 0usize;
    let mut observed_total = 0.0;
    let mut perm_totals = vec![0.0; n_perm];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for (class, indices) in by_class.iter().enumerate() {
        if indices.len() < min_samples_per_class.max(5) {
            continue;
        }
        let x: Vec<&[f64]> = indices
            .iter()
            .map(|&i| dataset.records[i].embedding.as_slice())
            .collect();
        let y_owned: Vec<[f64; 3]> = indices
            .iter()
            .map(|&i| {
                let prior = priors.lookup(dataset.records[i].sample_id)?;
                Ok(prior_statistics(&prior))
            })
            .collect::<Result<_>>()?;
        let y: Vec<&[f64]> = y_owned.iter().map(|a| a.as_slice()).collect();

        let (eval, perms) = evaluate_group(&x, &y, DEFAULT_RIDGE, n_perm, &mut rng)?;
        class_ids.push(class);
        per_class_r2.push(eval.r2);
        if eval.observed_stat > 0.0 {
            n_positive += 1;
        }
        observed_total += eval.observed_stat;
        for (tot, s) in perm_totals.iter_mut().zip(&perms) {
            *tot += s;
        }
        pooled_improvements.extend(eval.improvements);
    }

    let n_classes_tested = class_ids.len();
    if n_classes_tested == 0 {
        return Err(Error::InvalidInput(
            "no class reaches min_samples_per_class".into(),
        ));
    }
    let beat = perm_totals.iter().filter(|&&s| s >= observed_total).count();
    let d = cohens_d(&pooled_improvements).unwrap_or(0.0);
    let report = DependenceReport {
        mean_r2: per_class_r2.iter().sum::<f64>() / n_classes_tested as f64,
        cohens_d: d,
        permutation_p: (1 + beat) as f64 / (1 + n_perm) as f64,
        frac_positive_improvement: n_positive as f64 / n_classes_tested as f64,
        frac_r2_above_005: per_class_r2.iter().filter(|&&r| r > 0.05).count() as f64
            / n_classes_tested as f64,
        n_classes_tested,
        class_ids,
        per_class_r2,
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn random_matrix(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn r2_trivial_cases() {
        let y = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(r2_score(&y, &y, 2.5).unwrap(), 1.0, epsilon = 1e-12);
        let mean_pred = [2.5; 4];
        assert_abs_diff_eq!(r2_score(&y, &mean_pred, 2.5).unwrap(), 0.0, epsilon = 1e-12);
        let bad = [4.0, 1.0, 4.0, 1.0];
        assert!(r2_score(&y, &bad, 2.5).unwrap() < 0.0);
    }

    #[test]
    fn cohens_d_examples() {
        assert_abs_diff_eq!(cohens_d(&[1.0, -1.0]).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            cohens_d(&[2.0, 4.0]).unwrap(),
            3.0 / 2.0f64.sqrt(),
            epsilon = 1e-12
        );
        assert!(cohens_d(&[3.0, 3.0, 3.0]).is_err());
    }

    #[test]
    fn probe_recovers_exact_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, d) = (200, 5);
        let x = random_matrix(n, d, &mut rng);
        let w: Vec<f64> = (0..d).map(|j| (j as f64 + 1.0) * 0.3).collect();
        let y: Vec<Vec<f64>> = x
            .iter()
            .map(|row| vec![row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 2.0])
            .collect();
        let probe = fit_linear_probe(&x[..160].to_vec(), &y[..160].to_vec(), 1e-9).unwrap();
        let y_true: Vec<f64> = y[160..].iter().map(|r| r[0]).collect();
        let y_pred: Vec<f64> = x[160..].iter().map(|r| probe.predict(r)[0]).collect();
        let r2 = r2_score(&y_true, &y_pred, probe.y_mean[0]).unwrap();
        assert!(r2 > 1.0 - 1e-6, "r2 {r2}");
    }

    #[test]
    fn probe_on_noise_does_not_beat_mean() {
        // average held-out R^2 over repeats should be at most ~0
        let mut total = 0.0;
        let reps = 20;
        for rep in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + rep);
            let x = random_matrix(100, 6, &mut rng);
            let y = random_matrix(100, 1, &mut rng);
            let probe = fit_linear_probe(&x[..80].to_vec(), &y[..80].to_vec(), 1e-3).unwrap();
            let y_true: Vec<f64> = y[80..].iter().map(|r| r[0]).collect();
            let y_pred: Vec<f64> = x[80..].iter().map(|r| probe.predict(r)[0]).collect();
            total += r2_score(&y_true, &y_pred, probe.y_mean[0]).unwrap();
        }
        assert!(total / reps as f64 <= 0.02, "mean r2 {}", total / reps as f64);
    }

    #[test]
    fn constant_columns_reduce_to_mean_predictor() {
        let x = vec![vec![3.0, -1.0]; 40];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = random_matrix(40, 2, &mut rng);
        let probe = fit_linear_probe(&x, &y, 1e-3).unwrap();
        let pred = probe.predict(&[3.0, -1.0]);
        for t in 0..2 {
            assert_abs_diff_eq!(pred[t], probe.y_mean[t], epsilon = 1e-9);
        }
    }

    #[test]
    fn permutation_test_detects_constructed_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_matrix(150, 4, &mut rng);
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![2.0 * r[0] - r[2]]).collect();
        let p = permutation_test(&x, &y, 99, 11).unwrap();
        assert_abs_diff_eq!(p, 0.01, epsilon = 1e-12); // 1/(1+99)
    }

    #[test]
    fn permutation_test_rejects_small_n_perm() {
        let x = vec![vec![0.0]; 10];
        let y = vec![vec![0.0]; 10];
        assert!(permutation_test(&x, &y, 50, 0).is_err());
    }

    #[test]
    fn prior_statistics_values() {
        let p = CategoricalDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let [max, ent, margin] = prior_statistics(&p);
        assert_abs_diff_eq!(max, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(margin, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(ent, entropy(&p), epsilon = 1e-15);
    }

    #[test]
    fn report_fields_are_internally_consistent() {
        let config = crate::synthetic::Preset::Dependent.config(800, 5);
        let samples = crate::synthetic::generate(&config).unwrap();
        let dataset = crate::synthetic::to_dataset(&samples, config.n_classes).unwrap();
        let priors = crate::synthetic::to_prior_table(&samples).unwrap();
        let report = dependence_report(&dataset, &priors, 50, 99, 3).unwrap();
        assert_eq!(report.per_class_r2.len(), report.n_classes_tested);
        assert!(report.permutation_p > 0.0 && report.permutation_p <= 1.0);
        assert!((0.0..=1.0).contains(&report.frac_positive_improvement));
        assert!((0.0..=1.0).contains(&report.frac_r2_above_005));
        let recount = report.per_class_r2.iter().filter(|&&r| r > 0.05).count() as f64
            / report.n_classes_tested as f64;
        assert_abs_diff_eq!(recount, report.frac_r2_above_005, epsilon = 1e-12);
        let mean = report.per_class_r2.iter().sum::<f64>() / report.n_classes_tested as f64;
        assert_abs_diff_eq!(mean, report.mean_r2, epsilon = 1e-12);
        // constructed dependence must be detected decisively
        assert!(report.permutation_p < 0.011, "p {}", report.permutation_p);
    }

    #[test]
    fn report_null_case_does_not_reject_strongly() {
        let config = crate::synthetic::Preset::Ci.config(1200, 19);
        assert_eq!(config.dependence_strength, 0.0);
        let samples = crate::synthetic::generate(&config).unwrap();
        let dataset = crate::synthetic::to_dataset(&samples, config.n_classes).unwrap();
        let priors = crate::synthetic::to_prior_table(&samples).unwrap();
        let report = dependence_report(&dataset, &priors, 50, 99, 7).unwrap();
        assert!(report.permutation_p > 0.01, "p {}", report.permutation_p);
    }
}
