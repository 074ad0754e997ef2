//! Loss assembly, optimizer, schedule, and the three-stage training
//! pipeline: linear audio head, fixed scalar fusion weight, adaptive gate.
//! Also the metadata-only context MLP used to learn a prior when no
//! external table is available.
//!
//! Stage naming: the pipeline stages here are 1 (audio head), 2 (fixed
//! scalar weight), 3 (adaptive gate); some configuration summaries label
//! the latter two "Stage A" and "Stage B" — A maps to 2, B maps to 3.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::CategoricalDistribution;
use crate::error::{Error, Result};
use crate::features::{build_gating_features, GatingFeatures, GATE_INPUT_DIM};
use crate::fusion::{fuse, fuse_gradients, FusionInputs};
use crate::gate::{
    epsilon_from_raw, epsilon_raw_grad, gate_backward, gate_forward, init_constant_gate,
    standard_normal, GateMode, GateParameters, OMEGA_MAX_HI, OMEGA_MAX_LO,
};
use crate::store::{Dataset, PriorTable};

/// Shared optimization configuration for every training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub lambda_var: f64,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            epochs: 30,
            batch_size: 96,
            warmup_fraction: 0.10,
            lambda_var: 1e-3,
            seed: 0,
            val_fraction: 0.10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidInput("lr must be positive".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::InvalidInput("warmup_fraction must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidInput("val_fraction must lie in [0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Gate architecture knobs for stage 3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub hidden: usize,
    pub dropout_rate: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            dropout_rate: 0.1,
        }
    }
}

/// Frozen linear classification head `logits = A x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioHead {
    /// n_classes x embed_dim, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub n_classes: usize,
    pub embed_dim: usize,
}

impl AudioHead {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weights[c * self.embed_dim..(c + 1) * self.embed_dim];
            for (w, xi) in row.iter().zip(x) {
                *o += w * xi;
            }
        }
        out
    }

    pub fn log_posterior(&self, x: &[f64]) -> Vec<f64> {
        log_softmax(&self.logits(x))
    }

    pub fn posterior(&self, x: &[f64]) -> Result<CategoricalDistribution> {
        crate::dist::softmax_lenient(&self.logits(x))
    }
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Per-epoch training record, written as one JSON line per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub mean_omega: f64,
    pub var_omega: f64,
}

pub fn write_epoch_logs(logs: &[EpochLog], path: &Path) -> Result<()> {
    let mut out = String::new();
    for log in logs {
        out.push_str(&serde_json::to_string(log)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Best-validation snapshot of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCheckpoint {
    pub stage: u8,
    pub head: AudioHead,
    /// softplus-reparameterized scalar fusion weight (stage 2 only)
    pub omega_raw: Option<f64>,
    /// adaptive gate (stage 3 only)
    pub gate: Option<GateParameters>,
    pub temp_raw: f64,
    pub eps_raw: f64,
    pub config: TrainConfig,
    pub best_val_accuracy: f64,
    pub seed: u64,
    /// set when stratification had to fall back to a random split
    pub split_warning: bool,
}

impl StageCheckpoint {
    pub fn validate(&self) -> Result<()> {
        let detail = match self.stage {
            1 if self.omega_raw.is_some() || self.gate.is_some() => {
                Some("stage 1 must not carry fusion parameters")
            }
            2 if self.omega_raw.is_none() => Some("stage 2 requires a scalar omega"),
            2 if self.gate.is_some() => Some("stage 2 must not carry a gate"),
            3 if self.gate.is_none() => Some("stage 3 requires gate parameters"),
            1 | 2 | 3 => None,
            _ => Some("unknown stage tag"),
        };
        match detail {
            None => Ok(()),
            Some(d) => Err(Error::StageMismatch {
                stage: self.stage,
                detail: d.into(),
            }),
        }
    }

    pub fn temperature(&self) -> f64 {
        self.temp_raw.exp()
    }

    pub fn epsilon(&self) -> f64 {
        epsilon_from_raw(self.eps_raw)
    }

    pub fn scalar_omega(&self) -> Option<f64> {
        self.omega_raw.map(softplus)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    // inverse of ln(1 + e^x)
    (y.exp() - 1.0).ln()
}

/// `-ln p(label)`, smoothed at 1e-12 so a zero probability stays finite.
pub fn cross_entropy(p: &CategoricalDistribution, label: usize) -> Result<f64> {
    if label >= p.n_classes() {
        return Err(Error::InvalidInput(format!(
            "label {label} out of range for {} classes",
            p.n_classes()
        )));
    }
    Ok(-(p.probs()[label].max(1e-12)).ln())
}

/// `-lambda * PopVar(omegas)` and its gradient `-lambda * 2 (w_i - mean) / B`.
/// A batch of one contributes zero term and zero gradient.
pub fn variance_penalty(omegas: &[f64], lambda_var: f64) -> (f64, Vec<f64>) {
    let b = omegas.len();
    if b <= 1 {
        return (0.0, vec![0.0; b]);
    }
    let mean = omegas.iter().sum::<f64>() / b as f64;
    let var = omegas.iter().map(|&w| (w - mean).powi(2)).sum::<f64>() / b as f64;
    let grads = omegas
        .iter()
        .map(|&w| -lambda_var * 2.0 * (w - mean) / b as f64)
        .collect();
    (-lambda_var * var, grads)
}

/// Linear warmup to `base_lr` over the first `ceil(warmup_fraction * total)`
/// steps, then cosine decay to zero.
pub fn cosine_warmup_lr(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> f64 {
    assert!(step <= total_steps, "step out of schedule range");
    let warmup = ((warmup_fraction * total_steps as f64).ceil() as usize).max(1);
    if step < warmup {
        base_lr * step as f64 / warmup as f64
    } else if total_steps == warmup {
        base_lr
    } else {
        let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
        base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// AdamW over a flat parameter vector with decoupled weight decay and a
/// per-parameter decay mask. beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    weight_decay: f64,
    decay_mask: Vec<bool>,
}

impl AdamW {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n_params: usize, weight_decay: f64, decay_mask: Vec<bool>) -> Result<Self> {
        if decay_mask.len() != n_params {
            return Err(Error::Dimension("decay mask length mismatch".into()));
        }
        Ok(Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            weight_decay,
            decay_mask,
        })
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grads[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            // decoupled decay acts on the pre-update parameter value
            let decay = if self.decay_mask[i] {
                lr * self.weight_decay * params[i]
            } else {
                0.0
            };
            params[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS) + decay;
        }
    }
}

/// Stratified split into (train, val). Falls back to a plain random split
/// when some class has fewer than 2 samples; the flag reports the fallback.
pub fn stratified_split(
    labels: &[usize],
    val_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if val_fraction <= 0.0 {
        return ((0..labels.len()).collect(), Vec::new(), false);
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let stratifiable = by_class.values().all(|v| v.len() >= 2);
    let mut train = Vec::new();
    let mut val = Vec::new();
    if stratifiable {
        for group in by_class.values() {
            let mut idx = group.clone();
            idx.shuffle(&mut rng);
            let n_val = ((val_fraction * idx.len() as f64).round() as usize).min(idx.len() - 1);
            val.extend_from_slice(&idx[..n_val]);
            train.extend_from_slice(&idx[n_val..]);
        }
    } else {
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        idx.shuffle(&mut rng);
        let n_val = ((val_fraction * idx.len() as f64).round() as usize).min(idx.len() - 1);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val, !stratifiable)
}

fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    // last partial batch kept
    order.chunks(batch_size)
}

// ---------------------------------------------------------------------------
// Stage 1: linear audio head
// ---------------------------------------------------------------------------

pub fn train_stage1(dataset: &Dataset, config: &TrainConfig) -> Result<(StageCheckpoint, Vec<EpochLog>)> {
    config.validate()?;
    let c = dataset.n_classes;
    let d = dataset.embed_dim();
    let labels: Vec<usize> = dataset.records.iter().map(|r| r.label as usize).collect();
    let (train_idx, val_idx, split_warning) = stratified_split(&labels, config.val_fraction, config.seed);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5747_4531));
    let mut params = vec![0.0f64; c * d + c];
    for p in params[..c * d].iter_mut() {
        *p = 0.01 * standard_normal(&mut rng);
    }
    let mut mask = vec![true; c * d];
    mask.extend(vec![false; c]); // bias has no weight decay
    let mut opt = AdamW::new(params.len(), config.weight_decay, mask)?;

    let steps_per_epoch = train_idx.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut global_step = 0usize;
    let mut logs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut order = train_idx.clone();

    let head_of = |params: &[f64]| AudioHead {
        weights: params[..c * d].to_vec(),
        bias: params[c * d..].to_vec(),
        n_classes: c,
        embed_dim: d,
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for batch in batches(&order, config.batch_size) {
            let b = batch.len() as f64;
            let mut grads = vec![0.0f64; params.len()];
            for &i in batch {
                let rec = &dataset.records[i];
                let head = head_of(&params);
                let logp = head.log_posterior(&rec.embedding);
                epoch_loss += -logp[rec.label as usize];
                for y in 0..c {
                    let diff = (logp[y].exp() - if y == rec.label as usize { 1.0 } else { 0.0 }) / b;
                    for j in 0..d {
                        grads[y * d + j] += diff * rec.embedding[j];
                    }
                    grads[c * d + y] += diff;
                }
            }
            global_step += 1;
            last_lr = cosine_warmup_lr(global_step, total_steps, config.lr, config.warmup_fraction);
            opt.step(&mut params, &grads, last_lr);
        }
        let head = head_of(&params);
        let eval_idx = if val_idx.is_empty() { &train_idx } else { &val_idx };
        let mut correct = 0usize;
        for &i in eval_idx {
            let rec = &dataset.records[i];
            let logits = head.logits(&rec.embedding);
            if argmax(&logits) == rec.label as usize {
                correct += 1;
            }
        }
        let val_acc = correct as f64 / eval_idx.len() as f64;
        if best.as_ref().map_or(true, |(acc, _)| val_acc > *acc) {
            best = Some((val_acc, params.clone()));
        }
        logs.push(EpochLog {
            epoch,
            train_loss: epoch_loss / train_idx.len() as f64,
            val_acc,
            lr: last_lr,
            mean_omega: 0.0,
            var_omega: 0.0,
        });
    }

    let (best_val_accuracy, best_params) = best.expect("at least one epoch ran");
    Ok((
        StageCheckpoint {
            stage: 1,
            head: head_of(&best_params),
            omega_raw: None,
            gate: None,
            temp_raw: 0.0,
            eps_raw: 0.0,
            config: config.clone(),
            best_val_accuracy,
            seed: config.seed,
            split_warning,
        },
        logs,
    ))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Fused-sample preparation (shared by stages 2 and 3)
// ---------------------------------------------------------------------------

/// Per-sample quantities fixed during stage 2/3 optimization: the frozen
/// head's log-posterior, the looked-up prior, the gating features, and the
/// label.
#[derive(Debug, Clone)]
pub struct FusedSample {
    pub audio_log_probs: Vec<f64>,
    pub prior: CategoricalDistribution,
    pub features: GatingFeatures,
    pub label: usize,
}

pub fn prepare_fused_samples(
    head: &AudioHead,
    dataset: &Dataset,
    priors: &PriorTable,
) -> Result<Vec<FusedSample>> {
    if priors.n_classes() != dataset.n_classes {
        return Err(Error::Dimension(format!(
            "prior table has {} classes, dataset has {}",
            priors.n_classes(),
            dataset.n_classes
        )));
    }
    dataset
        .records
        .iter()
        .map(|rec| {
            let audio_log_probs = head.log_posterior(&rec.embedding);
            let audio = crate::dist::softmax_lenient(&audio_log_probs)?;
            let prior = priors.lookup(rec.sample_id)?;
            let features = build_gating_features(&audio, &prior, &rec.context)?;
            Ok(FusedSample {
                audio_log_probs,
                prior,
                features,
                label: rec.label as usize,
            })
        })
        .collect()
}

fn fused_prediction(
    sample: &FusedSample,
    omega: f64,
    temperature: f64,
    epsilon: f64,
) -> Result<CategoricalDistribution> {
    fuse(&FusionInputs {
        audio_log_probs: crate::dist::LogScoreVector::new(sample.audio_log_probs.clone())?,
        prior: sample.prior.clone(),
        omega,
        temperature,
        epsilon,
    })
}

// ---------------------------------------------------------------------------
// Stage 2: fixed scalar fusion weight
// ---------------------------------------------------------------------------

/// Mean cross-entropy of the fixed-weight fusion over a batch.
/// `raws = [omega_raw, temp_raw, eps_raw]`.
pub fn stage2_batch_loss(samples: &[&FusedSample], raws: [f64; 3]) -> Result<f64> {
    let omega = softplus(raws[0]);
    let t = raws[1].exp();
    let eps = epsilon_from_raw(raws[2]);
    let mut loss = 0.0;
    for s in samples {
        let p = fused_prediction(s, omega, t, eps)?;
        loss += cross_entropy(&p, s.label)?;
    }
    Ok(loss / samples.len() as f64)
}

/// Mean cross-entropy and its analytic gradients with respect to the three
/// raw scalars of stage 2.
pub fn stage2_batch_grads(samples: &[&FusedSample], raws: [f64; 3]) -> Result<(f64, [f64; 3])> {
    let omega = softplus(raws[0]);
    let t = raws[1].exp();
    let eps = epsilon_from_raw(raws[2]);
    let b = samples.len() as f64;
    let mut loss = 0.0;
    let mut g = [0.0f64; 3];
    for s in samples {
        let inp = FusionInputs {
            audio_log_probs: crate::dist::LogScoreVector::new(s.audio_log_probs.clone())?,
            prior: s.prior.clone(),
            omega,
            temperature: t,
            epsilon: eps,
        };
        let fg = fuse_gradients(&inp, s.label)?;
        loss += cross_entropy(&fg.fused, s.label)?;
        g[0] += fg.d_omega * crate::gate::sigmoid(raws[0]); // softplus'
        g[1] += fg.d_temperature * t; // T = exp(temp_raw)
        g[2] += fg.d_epsilon * epsilon_raw_grad(raws[2]);
    }
    Ok((loss / b, [g[0] / b, g[1] / b, g[2] / b]))
}

pub fn train_stage2(
    dataset: &Dataset,
    priors: &PriorTable,
    stage1: &StageCheckpoint,
    config: &TrainConfig,
) -> Result<(StageCheckpoint, Vec<EpochLog>)> {
    config.validate()?;
    stage1.validate()?;
    if stage1.stage != 1 {
        return Err(Error::StageMismatch {
            stage: stage1.stage,
            detail: "stage 2 must be initialized from a stage-1 checkpoint".into(),
        });
    }
    let samples = prepare_fused_samples(&stage1.head, dataset, priors)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let (train_idx, val_idx, split_warning) = stratified_split(&labels, config.val_fraction, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5747_4532));

    // start from mild contextual influence, carry T and eps over from stage 1
    let mut params = vec![softplus_inv(0.1), stage1.temp_raw, stage1.eps_raw];
    let mut opt = AdamW::new(3, config.weight_decay, vec![false; 3])?;

    let steps_per_epoch = train_idx.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut global_step = 0usize;
    let mut order = train_idx.clone();
    let mut logs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, [f64; 3])> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for batch in batches(&order, config.batch_size) {
            let refs: Vec<&FusedSample> = batch.iter().map(|&i| &samples[i]).collect();
            let (loss, g) = stage2_batch_grads(&refs, [params[0], params[1], params[2]])?;
            epoch_loss += loss * refs.len() as f64;
            global_step += 1;
            last_lr = cosine_warmup_lr(global_step, total_steps, config.lr, config.warmup_fraction);
            opt.step(&mut params, &g, last_lr);
        }
        let eval_idx = if val_idx.is_empty() { &train_idx } else { &val_idx };
        let omega = softplus(params[0]);
        let t = params[1].exp();
        let eps = epsilon_from_raw(params[2]);
        let mut correct = 0usize;
        for &i in eval_idx {
            let p = fused_prediction(&samples[i], omega, t, eps)?;
            if p.argmax() == samples[i].label {
                correct += 1;
            }
        }
        let val_acc = correct as f64 / eval_idx.len() as f64;
        if best.as_ref().map_or(true, |(acc, _)| val_acc > *acc) {
            best = Some((val_acc, [params[0], params[1], params[2]]));
        }
        logs.push(EpochLog {
            epoch,
            train_loss: epoch_loss / train_idx.len() as f64,
            val_acc,
            lr: last_lr,
            mean_omega: omega,
            var_omega: 0.0,
        });
    }

    let (best_val_accuracy, best_params) = best.expect("at least one epoch ran");
    Ok((
        StageCheckpoint {
            stage: 2,
            head: stage1.head.clone(), // frozen, bit-identical
            omega_raw: Some(best_params[0]),
            gate: None,
            temp_raw: best_params[1],
            eps_raw: best_params[2],
            config: config.clone(),
            best_val_accuracy,
            seed: config.seed,
            split_warning,
        },
        logs,
    ))
}

// ---------------------------------------------------------------------------
// Stage 3: adaptive gating network
// ---------------------------------------------------------------------------

/// Flat layout: w1, b1, w2, b2, omega_max_raw, temp_raw, eps_raw.
pub fn gate_to_flat(g: &GateParameters) -> Vec<f64> {
    let mut v = g.w1.clone();
    v.extend(&g.b1);
    v.extend(&g.w2);
    v.push(g.b2);
    v.push(g.omega_max_raw);
    v.push(g.temp_raw);
    v.push(g.eps_raw);
    v
}

pub fn gate_from_flat(template: &GateParameters, flat: &[f64]) -> Result<GateParameters> {
    let h = template.hidden;
    let n1 = h * GATE_INPUT_DIM;
    if flat.len() != n1 + 2 * h + 4 {
        return Err(Error::Dimension("flat gate vector length mismatch".into()));
    }
    let mut g = template.clone();
    g.w1 = flat[..n1].to_vec();
    g.b1 = flat[n1..n1 + h].to_vec();
    g.w2 = flat[n1 + h..n1 + 2 * h].to_vec();
    g.b2 = flat[n1 + 2 * h];
    g.omega_max_raw = flat[n1 + 2 * h + 1];
    g.temp_raw = flat[n1 + 2 * h + 2];
    g.eps_raw = flat[n1 + 2 * h + 3];
    Ok(g)
}

/// Weight decay applies to the two weight matrices and the hidden bias;
/// the output bias and the reparameterized scalars are exempt.
pub fn gate_decay_mask(hidden: usize) -> Vec<bool> {
    let mut mask = vec![true; hidden * GATE_INPUT_DIM + 2 * hidden];
    mask.extend([false, false, false, false]); // b2, omega_max_raw, temp_raw, eps_raw
    mask
}

fn stage3_batch(
    samples: &[&FusedSample],
    gate: &GateParameters,
    lambda_var: f64,
    mode: GateMode,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let b = samples.len() as f64;
    let t = gate.temperature();
    let eps = gate.epsilon();
    let h = gate.hidden;
    let n1 = h * GATE_INPUT_DIM;

    let mut caches = Vec::with_capacity(samples.len());
    let mut omegas = Vec::with_capacity(samples.len());
    for s in samples {
        let (omega, cache) = gate_forward(gate, &s.features, mode, rng)?;
        omegas.push(omega);
        caches.push(cache);
    }
    let (var_term, var_grads) = variance_penalty(&omegas, lambda_var);

    let mut loss = var_term;
    let mut flat = vec![0.0f64; n1 + 2 * h + 4];
    for (k, s) in samples.iter().enumerate() {
        let inp = FusionInputs {
            audio_log_probs: crate::dist::LogScoreVector::new(s.audio_log_probs.clone())?,
            prior: s.prior.clone(),
            omega: omegas[k],
            temperature: t,
            epsilon: eps,
        };
        let fg = fuse_gradients(&inp, s.label)?;
        loss += cross_entropy(&fg.fused, s.label)? / b;
        let dl_domega = fg.d_omega / b + var_grads[k];
        let gg = gate_backward(gate, &caches[k], dl_domega)?;
        for (dst, src) in flat[..n1].iter_mut().zip(&gg.w1) {
            *dst += src;
        }
        for (dst, src) in flat[n1..n1 + h].iter_mut().zip(&gg.b1) {
            *dst += src;
        }
        for (dst, src) in flat[n1 + h..n1 + 2 * h].iter_mut().zip(&gg.w2) {
            *dst += src;
        }
        flat[n1 + 2 * h] += gg.b2;
        flat[n1 + 2 * h + 1] += gg.omega_max_raw;
        flat[n1 + 2 * h + 2] += fg.d_temperature * t / b;
        flat[n1 + 2 * h + 3] += gg.eps_raw + fg.d_epsilon * epsilon_raw_grad(gate.eps_raw) / b;
    }
    Ok((loss, flat, omegas))
}

/// Full stage-3 loss (mean cross-entropy plus the variance regularizer) in
/// deterministic eval mode. Used by the gradient checks.
pub fn stage3_batch_loss(samples: &[&FusedSample], gate: &GateParameters, lambda_var: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = gate.temperature();
    let eps = gate.epsilon();
    let mut omegas = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for s in samples {
        let (omega, _) = gate_forward(gate, &s.features, GateMode::Eval, &mut rng)?;
        omegas.push(omega);
        let p = fused_prediction(s, omega, t, eps)?;
        loss += cross_entropy(&p, s.label)? / samples.len() as f64;
    }
    let (var_term, _) = variance_penalty(&omegas, lambda_var);
    Ok(loss + var_term)
}

/// Analytic gradients of `stage3_batch_loss` in the flat layout of
/// [`gate_to_flat`].
pub fn stage3_batch_grads_eval(
    samples: &[&FusedSample],
    gate: &GateParameters,
    lambda_var: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (loss, grads, _) = stage3_batch(samples, gate, lambda_var, GateMode::Eval, &mut rng)?;
    Ok((loss, grads))
}

pub fn train_stage3(
    dataset: &Dataset,
    priors: &PriorTable,
    stage2: &StageCheckpoint,
    config: &TrainConfig,
    gate_config: &GateConfig,
) -> Result<(StageCheckpoint, Vec<EpochLog>)> {
    config.validate()?;
    stage2.validate()?;
    if stage2.stage != 2 {
        return Err(Error::StageMismatch {
            stage: stage2.stage,
            detail: "stage 3 must be initialized from a stage-2 checkpoint".into(),
        });
    }
    let samples = prepare_fused_samples(&stage2.head, dataset, priors)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let (train_idx, val_idx, split_warning) = stratified_split(&labels, config.val_fraction, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5747_4533));

    // gate initialized to reproduce the stage-2 scalar weight everywhere
    let mut base = GateParameters::seeded(gate_config.hidden, gate_config.dropout_rate, config.seed)?;
    base.temp_raw = stage2.temp_raw;
    base.eps_raw = stage2.eps_raw;
    let omega2 = stage2.scalar_omega().expect("validated stage-2 checkpoint");
    let eps = base.epsilon();
    let mut target = omega2;
    if target >= base.omega_max() + eps {
        // widen omega_max so the stage-2 solution stays representable
        let desired = (1.5 * target).min(OMEGA_MAX_HI - 1e-6);
        base.omega_max_raw =
            crate::gate::logit((desired - OMEGA_MAX_LO) / (OMEGA_MAX_HI - OMEGA_MAX_LO));
        if target >= base.omega_max() + eps {
            target = base.omega_max() + eps - 1e-9;
        }
    }
    if target <= eps {
        target = eps + 1e-6;
    }
    let gate0 = init_constant_gate(&base, target, config.seed.wrapping_add(0x5747_4534))?;

    let mut flat = gate_to_flat(&gate0);
    let mut opt = AdamW::new(flat.len(), config.weight_decay, gate_decay_mask(gate_config.hidden))?;

    let steps_per_epoch = train_idx.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut global_step = 0usize;
    let mut order = train_idx.clone();
    let mut logs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Vec<f64>)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        let mut epoch_omegas: Vec<f64> = Vec::with_capacity(train_idx.len());
        for batch in batches(&order, config.batch_size) {
            let refs: Vec<&FusedSample> = batch.iter().map(|&i| &samples[i]).collect();
            let gate = gate_from_flat(&gate0, &flat)?;
            let (loss, grads, omegas) =
                stage3_batch(&refs, &gate, config.lambda_var, GateMode::Train, &mut rng)?;
            epoch_loss += loss * refs.len() as f64;
            epoch_omegas.extend(omegas);
            global_step += 1;
            last_lr = cosine_warmup_lr(global_step, total_steps, config.lr, config.warmup_fraction);
            opt.step(&mut flat, &grads, last_lr);
        }
        let gate = gate_from_flat(&gate0, &flat)?;
        let eval_idx = if val_idx.is_empty() { &train_idx } else { &val_idx };
        let mut correct = 0usize;
        for &i in eval_idx {
            let (omega, _) = gate_forward(&gate, &samples[i].features, GateMode::Eval, &mut rng)?;
            let p = fused_prediction(&samples[i], omega, gate.temperature(), gate.epsilon())?;
            if p.argmax() == samples[i].label {
                correct += 1;
            }
        }
        let val_acc = correct as f64 / eval_idx.len() as f64;
        if best.as_ref().map_or(true, |(acc, _)| val_acc > *acc) {
            best = Some((val_acc, flat.clone()));
        }
        let mean_omega = epoch_omegas.iter().sum::<f64>() / epoch_omegas.len() as f64;
        let var_omega = epoch_omegas
            .iter()
            .map(|&w| (w - mean_omega).powi(2))
            .sum::<f64>()
            / epoch_omegas.len() as f64;
        logs.push(EpochLog {
            epoch,
            train_loss: epoch_loss / train_idx.len() as f64,
            val_acc,
            lr: last_lr,
            mean_omega,
            var_omega,
        });
    }

    let (best_val_accuracy, best_flat) = best.expect("at least one epoch ran");
    let gate = gate_from_flat(&gate0, &best_flat)?;
    Ok((
        StageCheckpoint {
            stage: 3,
            head: stage2.head.clone(), // frozen, bit-identical
            omega_raw: None,
            gate: Some(gate.clone()),
            temp_raw: gate.temp_raw,
            eps_raw: gate.eps_raw,
            config: config.clone(),
            best_val_accuracy,
            seed: config.seed,
            split_warning,
        },
        logs,
    ))
}

// ---------------------------------------------------------------------------
// Metadata-only context MLP (learned prior)
// ---------------------------------------------------------------------------

const MLP_HIDDEN: usize = 128;
const MLP_INPUT: usize = 6;

/// Small metadata-only predictor `6 -> 128 -> 128 -> C` with ReLU, trained
/// to predict labels from the encoded context alone. Frozen after training
/// and typically materialized into a [`PriorTable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextMlp {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
    pub n_classes: usize,
}

struct MlpCache {
    x: [f64; MLP_INPUT],
    a1: Vec<f64>,
    a2: Vec<f64>,
    logp: Vec<f64>,
}

impl ContextMlp {
    fn seeded(n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let he = |fan_in: usize, n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let scale = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| scale * standard_normal(rng)).collect()
        };
        Self {
            w1: he(MLP_INPUT, MLP_HIDDEN * MLP_INPUT, rng),
            b1: vec![0.0; MLP_HIDDEN],
            w2: he(MLP_HIDDEN, MLP_HIDDEN * MLP_HIDDEN, rng),
            b2: vec![0.0; MLP_HIDDEN],
            w3: he(MLP_HIDDEN, n_classes * MLP_HIDDEN, rng),
            b3: vec![0.0; n_classes],
            n_classes,
        }
    }

    fn forward(&self, x: &[f64; MLP_INPUT]) -> MlpCache {
        let mut a1 = vec![0.0; MLP_HIDDEN];
        for i in 0..MLP_HIDDEN {
            let mut acc = self.b1[i];
            for j in 0..MLP_INPUT {
                acc += self.w1[i * MLP_INPUT + j] * x[j];
            }
            a1[i] = acc.max(0.0);
        }
        let mut a2 = vec![0.0; MLP_HIDDEN];
        for i in 0..MLP_HIDDEN {
            let mut acc = self.b2[i];
            for j in 0..MLP_HIDDEN {
                acc += self.w2[i * MLP_HIDDEN + j] * a1[j];
            }
            a2[i] = acc.max(0.0);
        }
        let mut logits = vec![0.0; self.n_classes];
        for c in 0..self.n_classes {
            let mut acc = self.b3[c];
            for j in 0..MLP_HIDDEN {
                acc += self.w3[c * MLP_HIDDEN + j] * a2[j];
            }
            logits[c] = acc;
        }
        MlpCache {
            x: *x,
            a1,
            a2,
            logp: log_softmax(&logits),
        }
    }

    pub fn predict(&self, ctx: &crate::features::SpatioTemporalContext) -> Result<CategoricalDistribution> {
        let x = crate::features::encode_metadata(ctx);
        let cache = self.forward(&x);
        CategoricalDistribution::new(cache.logp.iter().map(|&l| l.exp()).collect())
    }

    fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + self.b3.len()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut v = self.w1.clone();
        v.extend(&self.b1);
        v.extend(&self.w2);
        v.extend(&self.b2);
        v.extend(&self.w3);
        v.extend(&self.b3);
        v
    }

    fn from_flat(&self, flat: &[f64]) -> Self {
        let mut out = self.clone();
        let mut at = 0;
        for field in [
            &mut out.w1,
            &mut out.b1,
            &mut out.w2,
            &mut out.b2,
            &mut out.w3,
            &mut out.b3,
        ] {
            let len = field.len();
            field.copy_from_slice(&flat[at..at + len]);
            at += len;
        }
        out
    }

    fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.w1.len()];
        mask.extend(vec![false; self.b1.len()]);
        mask.extend(vec![true; self.w2.len()]);
        mask.extend(vec![false; self.b2.len()]);
        mask.extend(vec![true; self.w3.len()]);
        mask.extend(vec![false; self.b3.len()]);
        mask
    }

    /// Accumulates gradients for one sample into `grads`, scaled by `scale`.
    fn backward_into(&self, cache: &MlpCache, label: usize, scale: f64, grads: &mut [f64]) {
        let c = self.n_classes;
        let (n_w1, n_b1, n_w2, n_b2, n_w3) = (
            self.w1.len(),
            self.b1.len(),
            self.w2.len(),
            self.b2.len(),
            self.w3.len(),
        );
        let off_b1 = n_w1;
        let off_w2 = off_b1 + n_b1;
        let off_b2 = off_w2 + n_w2;
        let off_w3 = off_b2 + n_b2;
        let off_b3 = off_w3 + n_w3;

        let mut d_logits = vec![0.0; c];
        for y in 0..c {
            d_logits[y] = (cache.logp[y].exp() - if y == label { 1.0 } else { 0.0 }) * scale;
        }
        let mut d_a2 = vec![0.0; MLP_HIDDEN];
        for y in 0..c {
            grads[off_b3 + y] += d_logits[y];
            for j in 0..MLP_HIDDEN {
                grads[off_w3 + y * MLP_HIDDEN + j] += d_logits[y] * cache.a2[j];
                d_a2[j] += d_logits[y] * self.w3[y * MLP_HIDDEN + j];
            }
        }
        let mut d_a1 = vec![0.0; MLP_HIDDEN];
        for i in 0..MLP_HIDDEN {
            let dh = if cache.a2[i] > 0.0 { d_a2[i] } else { 0.0 };
            grads[off_b2 + i] += dh;
            for j in 0..MLP_HIDDEN {
                grads[off_w2 + i * MLP_HIDDEN + j] += dh * cache.a1[j];
                d_a1[j] += dh * self.w2[i * MLP_HIDDEN + j];
            }
        }
        for i in 0..MLP_HIDDEN {
            let dh = if cache.a1[i] > 0.0 { d_a1[i] } else { 0.0 };
            grads[off_b1 + i] += dh;
            for j in 0..MLP_INPUT {
                grads[i * MLP_INPUT + j] += dh * cache.x[j];
            }
        }
    }
}

/// Trains the metadata-only prior with the shared optimizer/schedule and
/// best-validation selection.
pub fn train_context_mlp(dataset: &Dataset, config: &TrainConfig) -> Result<(ContextMlp, Vec<EpochLog>)> {
    config.validate()?;
    let labels: Vec<usize> = dataset.records.iter().map(|r| r.label as usize).collect();
    let (train_idx, val_idx, _) = stratified_split(&labels, config.val_fraction, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5747_4535));

    let template = ContextMlp::seeded(dataset.n_classes, &mut rng);
    let inputs: Vec<[f64; MLP_INPUT]> = dataset
        .records
        .iter()
        .map(|r| crate::features::encode_metadata(&r.context))
        .collect();

    let mut flat = template.to_flat();
    let mut opt = AdamW::new(template.n_params(), config.weight_decay, template.decay_mask())?;
    let steps_per_epoch = train_idx.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut global_step = 0usize;
    let mut order = train_idx.clone();
    let mut logs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Vec<f64>)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for batch in batches(&order, config.batch_size) {
            let mlp = template.from_flat(&flat);
            let mut grads = vec![0.0; flat.len()];
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let cache = mlp.forward(&inputs[i]);
                epoch_loss += -cache.logp[labels[i]];
                mlp.backward_into(&cache, labels[i], scale, &mut grads);
            }
            global_step += 1;
            last_lr = cosine_warmup_lr(global_step, total_steps, config.lr, config.warmup_fraction);
            opt.step(&mut flat, &grads, last_lr);
        }
        let mlp = template.from_flat(&flat);
        let eval_idx = if val_idx.is_empty() { &train_idx } else { &val_idx };
        let mut correct = 0usize;
        for &i in eval_idx {
            let cache = mlp.forward(&inputs[i]);
            if argmax(&cache.logp) == labels[i] {
                correct += 1;
            }
        }
        let val_acc = correct as f64 / eval_idx.len() as f64;
        if best.as_ref().map_or(true, |(acc, _)| val_acc > *acc) {
            best = Some((val_acc, flat.clone()));
        }
        logs.push(EpochLog {
            epoch,
            train_loss: epoch_loss / train_idx.len() as f64,
            val_acc,
            lr: last_lr,
            mean_omega: 0.0,
            var_omega: 0.0,
        });
    }

    let (_, best_flat) = best.expect("at least one epoch ran");
    Ok((template.from_flat(&best_flat), logs))
}

/// Materializes the frozen context predictor into a prior lookup table over
/// the dataset's sample ids.
pub fn context_prior_table(mlp: &ContextMlp, dataset: &Dataset) -> Result<PriorTable> {
    let mut ids = Vec::with_capacity(dataset.len());
    let mut rows = Vec::with_capacity(dataset.len());
    for rec in &dataset.records {
        let p = mlp.predict(&rec.context)?;
        ids.push(rec.sample_id);
        rows.push(p.probs().iter().map(|&v| v as f32).collect());
    }
    PriorTable::new(ids, rows)
}
