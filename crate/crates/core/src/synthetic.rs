//! Seeded generative benchmark with closed-form posteriors. Classes emit
//! Gaussian embeddings and class-dependent context cells, so the exact
//! Bayes posterior is available and fusion claims (recoverability under
//! conditional independence, risk containment, the dependence gap) can be
//! checked to machine precision.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{CategoricalDistribution, LogScoreVector};
use crate::error::{Error, Result};
use crate::features::SpatioTemporalContext;
use crate::fusion::{fuse, FusionInputs};
use crate::gate::standard_normal;
use crate::store::{Dataset, PriorTable, SampleRecord};
use crate::training::cross_entropy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    None,
    Shuffle,
    Uniform,
    ConfidentWrong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub embed_dim: usize,
    pub n_cells: usize,
    pub n_samples: usize,
    /// separation of the Gaussian class means (norm of each mean)
    pub class_sep: f64,
    /// concentration of the class-conditional cell distribution
    pub prior_peakedness: f64,
    pub corruption: CorruptionMode,
    pub corruption_fraction: f64,
    /// corrupt exactly the left half of the longitude range instead of a
    /// random fraction
    pub region_coupled: bool,
    /// kappa_s in [0,1]: strength of the cell-dependent embedding shift
    /// that breaks conditional independence
    pub dependence_strength: f64,
    /// when set, p(y) is proportional to y+1 instead of uniform
    pub nonuniform_class_prior: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_classes: 16,
            embed_dim: 16,
            n_cells: 20,
            n_samples: 1000,
            class_sep: 1.5,
            prior_peakedness: 3.0,
            corruption: CorruptionMode::None,
            corruption_fraction: 0.0,
            region_coupled: false,
            dependence_strength: 0.0,
            nonuniform_class_prior: false,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.embed_dim < 1 || self.n_cells < 2 || self.n_samples < 1 {
            return Err(Error::InvalidInput(
                "need n_classes >= 2, embed_dim >= 1, n_cells >= 2, n_samples >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.corruption_fraction) {
            return Err(Error::InvalidInput("corruption_fraction must lie in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.dependence_strength) {
            return Err(Error::InvalidInput("dependence_strength must lie in [0,1]".into()));
        }
        if !self.class_sep.is_finite() || self.class_sep < 0.0 {
            return Err(Error::InvalidInput("class_sep must be finite and nonnegative".into()));
        }
        if !self.prior_peakedness.is_finite() || self.prior_peakedness < 0.0 {
            return Err(Error::InvalidInput("prior_peakedness must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn class_prior(&self) -> CategoricalDistribution {
        if self.nonuniform_class_prior {
            let c = self.n_classes;
            let sum = (c * (c + 1) / 2) as f64;
            CategoricalDistribution::new((1..=c).map(|y| y as f64 / sum).collect())
                .expect("positive weights")
        } else {
            CategoricalDistribution::uniform(self.n_classes).expect("n_classes >= 2")
        }
    }
}

/// Named CLI presets mapping to dependence/corruption settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// conditionally independent, clean priors
    Ci,
    /// dependence_strength = 1: embeddings carry cell information
    Dependent,
    /// region-coupled confident-wrong corruption at fraction 0.5
    Heterogeneous,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ci" => Ok(Self::Ci),
            "dependent" => Ok(Self::Dependent),
            "heterogeneous" => Ok(Self::Heterogeneous),
            other => Err(Error::InvalidInput(format!("unknown preset '{other}'"))),
        }
    }

    pub fn config(self, n_samples: usize, seed: u64) -> SyntheticConfig {
        match self {
            Preset::Ci => SyntheticConfig {
                n_samples,
                seed,
                ..SyntheticConfig::default()
            },
            Preset::Dependent => SyntheticConfig {
                n_classes: 8,
                embed_dim: 8,
                n_cells: 12,
                n_samples,
                class_sep: 1.5,
                prior_peakedness: 3.0,
                dependence_strength: 1.0,
                seed,
                ..SyntheticConfig::default()
            },
            Preset::Heterogeneous => SyntheticConfig {
                n_classes: 8,
                embed_dim: 16,
                n_cells: 12,
                n_samples,
                class_sep: 2.0,
                prior_peakedness: 4.0,
                corruption: CorruptionMode::ConfidentWrong,
                corruption_fraction: 0.5,
                region_coupled: true,
                seed,
                ..SyntheticConfig::default()
            },
        }
    }
}

/// A generated record plus the exact posteriors of its generative model.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub record: SampleRecord,
    pub cell: usize,
    /// p(y|x), marginalized over cells when dependence_strength > 0
    pub audio_posterior: CategoricalDistribution,
    /// p(y|s); the stored prior, possibly replaced by [`corrupt_priors`]
    pub context_posterior: CategoricalDistribution,
    /// exact p(y|x,s) of the generative model (valid at any dependence)
    pub bayes: CategoricalDistribution,
    pub corrupted: bool,
}

/// The latent generative parameters, reconstructible from the config seed.
pub struct SyntheticModel {
    pub mu: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
    pub cell_log_probs: Vec<Vec<f64>>,
    pub class_prior: CategoricalDistribution,
}

/// norm of the per-cell embedding offset at dependence_strength = 1
const DELTA_SCALE: f64 = 2.0;

fn random_unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

pub fn build_model(config: &SyntheticConfig) -> Result<SyntheticModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mu: Vec<Vec<f64>> = (0..config.n_classes)
        .map(|_| {
            random_unit_vector(config.embed_dim, &mut rng)
                .into_iter()
                .map(|v| v * config.class_sep)
                .collect()
        })
        .collect();
    let delta: Vec<Vec<f64>> = (0..config.n_cells)
        .map(|_| {
            random_unit_vector(config.embed_dim, &mut rng)
                .into_iter()
                .map(|v| v * DELTA_SCALE)
                .collect()
        })
        .collect();
    // p(s|y) = softmax over cells of peakedness * 1[s == y mod G]
    let cell_log_probs: Vec<Vec<f64>> = (0..config.n_classes)
        .map(|y| {
            let logits: Vec<f64> = (0..config.n_cells)
                .map(|s| {
                    if s == y % config.n_cells {
                        config.prior_peakedness
                    } else {
                        0.0
                    }
                })
                .collect();
            let p = crate::dist::softmax_lenient(&logits).expect("finite logits");
            p.probs().iter().map(|&v| v.ln()).collect()
        })
        .collect();
    Ok(SyntheticModel {
        mu,
        delta,
        cell_log_probs,
        class_prior: config.class_prior(),
    })
}

/// Row-major grid placement of cell ids over [-60,60] x [-150,150] degrees.
pub fn cell_context(cell: usize, n_cells: usize) -> SpatioTemporalContext {
    let cols = (n_cells as f64).sqrt().ceil() as usize;
    let rows = n_cells.div_ceil(cols);
    let row = cell / cols;
    let col = cell % cols;
    let lat = -60.0 + (row as f64 + 0.5) * 120.0 / rows as f64;
    let lon = -150.0 + (col as f64 + 0.5) * 300.0 / cols as f64;
    let day = ((cell * 97) % 365) as f32;
    SpatioTemporalContext::new(lat as f32, lon as f32, day, 12.0).expect("grid stays in range")
}

fn normalize_log_to_dist(log_w: &[f64]) -> CategoricalDistribution {
    crate::dist::softmax_lenient(log_w).expect("finite log weights")
}

impl SyntheticModel {
    fn log_gaussian(&self, x: &[f64], y: usize, cell: usize, kappa: f64) -> f64 {
        // log N(x; mu_y + kappa*delta_cell, I), dropping the shared constant
        let mut acc = 0.0;
        for j in 0..x.len() {
            let d = x[j] - self.mu[y][j] - kappa * self.delta[cell][j];
            acc -= 0.5 * d * d;
        }
        acc
    }

    /// p(y|x): exact marginal over cells.
    pub fn audio_posterior(&self, x: &[f64], kappa: f64) -> CategoricalDistribution {
        let c = self.mu.len();
        let log_w: Vec<f64> = (0..c)
            .map(|y| {
                let lp = self.class_prior.probs()[y].ln();
                if kappa == 0.0 {
                    lp + self.log_gaussian(x, y, 0, 0.0)
                } else {
                    // log sum_s p(s|y) N(x; mu_y + kappa*delta_s, I)
                    let terms: Vec<f64> = (0..self.delta.len())
                        .map(|s| self.cell_log_probs[y][s] + self.log_gaussian(x, y, s, kappa))
                        .collect();
                    lp + log_sum_exp(&terms)
                }
            })
            .collect();
        normalize_log_to_dist(&log_w)
    }

    /// p(y|s).
    pub fn context_posterior(&self, cell: usize) -> CategoricalDistribution {
        let log_w: Vec<f64> = (0..self.mu.len())
            .map(|y| self.class_prior.probs()[y].ln() + self.cell_log_probs[y][cell])
            .collect();
        normalize_log_to_dist(&log_w)
    }

    /// exact joint posterior p(y|x,s).
    pub fn joint_posterior(&self, x: &[f64], cell: usize, kappa: f64) -> CategoricalDistribution {
        let log_w: Vec<f64> = (0..self.mu.len())
            .map(|y| {
                self.class_prior.probs()[y].ln()
                    + self.cell_log_probs[y][cell]
                    + self.log_gaussian(x, y, cell, kappa)
            })
            .collect();
        normalize_log_to_dist(&log_w)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|&t| (t - max).exp()).sum::<f64>().ln()
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn generate(config: &SyntheticConfig) -> Result<Vec<SyntheticSample>> {
    let model = build_model(config)?;
    let kappa = config.dependence_strength;
    let mut samples = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples {
        // per-index seed split so generation order is immaterial
        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1),
        );
        let y = sample_categorical(model.class_prior.probs(), &mut rng);
        let cell_probs: Vec<f64> = model.cell_log_probs[y].iter().map(|&l| l.exp()).collect();
        let cell = sample_categorical(&cell_probs, &mut rng);
        let x: Vec<f64> = (0..config.embed_dim)
            .map(|j| model.mu[y][j] + kappa * model.delta[cell][j] + standard_normal(&mut rng))
            .collect();
        samples.push(SyntheticSample {
            record: SampleRecord {
                sample_id: i as u64,
                label: y as u32,
                context: cell_context(cell, config.n_cells),
                embedding: x.clone(),
            },
            cell,
            audio_posterior: model.audio_posterior(&x, kappa),
            context_posterior: model.context_posterior(cell),
            bayes: model.joint_posterior(&x, cell, kappa),
            corrupted: false,
        });
    }
    Ok(samples)
}

/// Closed-form p(y|x,s) from the stored marginals under conditional
/// independence: normalize(p(y|x) * p(y|s) / p(y)). Only valid when the
/// sample was generated at dependence_strength = 0.
pub fn bayes_posterior(sample: &SyntheticSample, config: &SyntheticConfig) -> Result<CategoricalDistribution> {
    if config.dependence_strength != 0.0 {
        return Err(Error::Contract(
            "bayes_posterior requires dependence_strength = 0".into(),
        ));
    }
    let prior = config.class_prior();
    let w: Vec<f64> = (0..config.n_classes)
        .map(|y| {
            sample.audio_posterior.probs()[y] * sample.context_posterior.probs()[y]
                / prior.probs()[y]
        })
        .collect();
    let sum: f64 = w.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::Numeric("bayes product has no mass".into()));
    }
    CategoricalDistribution::new(w.into_iter().map(|v| v / sum).collect())
}

/// Replaces the stored context posterior of a seeded fraction of samples
/// (or exactly the lon < 0 half when region-coupled) per the configured
/// corruption mode.
pub fn corrupt_priors(samples: &mut [SyntheticSample], config: &SyntheticConfig) -> Result<()> {
    config.validate()?;
    if config.corruption == CorruptionMode::None {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xC0_88_57));
    let targets: Vec<usize> = if config.region_coupled {
        (0..samples.len())
            .filter(|&i| samples[i].record.context.lon < 0.0)
            .collect()
    } else {
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(&mut rng);
        let n = (config.corruption_fraction * samples.len() as f64).round() as usize;
        idx.truncate(n);
        idx
    };
    let c = config.n_classes;
    for i in targets {
        let sample = &mut samples[i];
        let probs = sample.context_posterior.probs().to_vec();
        let new = match config.corruption {
            CorruptionMode::None => unreachable!(),
            CorruptionMode::Uniform => vec![1.0 / c as f64; c],
            CorruptionMode::Shuffle => {
                // rotation by a nonzero offset: a derangement of the entries
                let k = rng.gen_range(1..c);
                (0..c).map(|y| probs[(y + k) % c]).collect()
            }
            CorruptionMode::ConfidentWrong => {
                let label = sample.record.label as usize;
                let mut wrong = rng.gen_range(0..c - 1);
                if wrong >= label {
                    wrong += 1;
                }
                (0..c)
                    .map(|y| if y == wrong { 0.95 } else { 0.05 / (c - 1) as f64 })
                    .collect()
            }
        };
        sample.context_posterior = CategoricalDistribution::new(new)?;
        sample.corrupted = true;
    }
    Ok(())
}

/// 101 evenly spaced weights from 0 to 10.
pub fn default_omega_grid() -> Vec<f64> {
    (0..101).map(|i| i as f64 * 0.1).collect()
}

/// Smoothing used inside the grid oracle so a zero prior entry keeps the
/// loss curve finite and strictly monotone where it should be; small
/// enough to be invisible at the oracle's comparison tolerances.
pub const ORACLE_EPS: f64 = 1e-12;

/// Per-sample grid search over the fusion weight at T=1. Returns the
/// loss-minimizing weight (lowest value on ties) and the full curve.
pub fn omega_grid_oracle(
    audio_log_probs: &[f64],
    prior: &CategoricalDistribution,
    label: usize,
    grid: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if !grid.contains(&0.0) {
        return Err(Error::Contract("omega grid must include 0".into()));
    }
    let mut curve = Vec::with_capacity(grid.len());
    let mut best = (f64::INFINITY, f64::INFINITY);
    for &omega in grid {
        let fused = fuse(&FusionInputs {
            audio_log_probs: LogScoreVector::new(audio_log_probs.to_vec())?,
            prior: prior.clone(),
            omega,
            temperature: 1.0,
            epsilon: ORACLE_EPS,
        })?;
        let loss = cross_entropy(&fused, label)?;
        curve.push(loss);
        if loss < best.0 || (loss == best.0 && omega < best.1) {
            best = (loss, omega);
        }
    }
    Ok((best.1, curve))
}

pub fn total_variation(p: &CategoricalDistribution, q: &CategoricalDistribution) -> Result<f64> {
    if p.n_classes() != q.n_classes() {
        return Err(Error::Dimension("total variation over mismatched supports".into()));
    }
    Ok(0.5
        * p.probs()
            .iter()
            .zip(q.probs())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>())
}

pub fn to_dataset(samples: &[SyntheticSample], n_classes: usize) -> Result<Dataset> {
    Dataset::new(samples.iter().map(|s| s.record.clone()).collect(), n_classes)
}

/// Prior table holding each sample's stored (possibly corrupted) context
/// posterior.
pub fn to_prior_table(samples: &[SyntheticSample]) -> Result<PriorTable> {
    let ids = samples.iter().map(|s| s.record.sample_id).collect();
    let rows = samples
        .iter()
        .map(|s| s.context_posterior.probs().iter().map(|&v| v as f32).collect())
        .collect();
    PriorTable::new(ids, rows)
}
