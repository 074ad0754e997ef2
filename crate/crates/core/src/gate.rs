//! Two-layer gating network producing the bounded per-sample fusion weight.
//!
//! The raw scalars `omega_max_raw`, `temp_raw`, and `eps_raw` are
//! unconstrained; the constrained values are exposed through sigmoid/exp
//! reparameterizations so no clipping is needed during optimization.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{GatingFeatures, GATE_INPUT_DIM};

/// Lower edge of the `omega_max` range.
pub const OMEGA_MAX_LO: f64 = 1e-6;
/// Hard upper bound on the gate scale.
pub const OMEGA_MAX_HI: f64 = 10.0;
/// Bounds of the learnable smoothing constant.
pub const EPS_LO: f64 = 1e-8;
pub const EPS_HI: f64 = 1e-2;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Bounded smoothing constant from its unconstrained raw value.
pub fn epsilon_from_raw(raw: f64) -> f64 {
    EPS_LO + (EPS_HI - EPS_LO) * sigmoid(raw)
}

/// d epsilon / d raw.
pub fn epsilon_raw_grad(raw: f64) -> f64 {
    let s = sigmoid(raw);
    (EPS_HI - EPS_LO) * s * (1.0 - s)
}

/// Forward-pass mode: training applies inverted dropout, evaluation is
/// deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Train,
    Eval,
}

/// Gating-network weights plus the learnable scale, temperature, and
/// smoothing constant (all stored raw/unconstrained).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParameters {
    /// hidden x 12, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub omega_max_raw: f64,
    pub temp_raw: f64,
    pub eps_raw: f64,
    pub hidden: usize,
    pub dropout_rate: f64,
}

impl GateParameters {
    /// Small-random initialization (scale 0.01, seeded). Raw scalars start
    /// at zero: `omega_max ~ 5`, `T = 1`, `eps ~ 5e-3`.
    pub fn seeded(hidden: usize, dropout_rate: f64, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidInput("hidden width must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidInput(format!(
                "dropout rate {dropout_rate} out of [0, 1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || 0.01 * standard_normal(&mut rng);
        let w1 = (0..hidden * GATE_INPUT_DIM).map(|_| normal()).collect();
        let b1 = (0..hidden).map(|_| normal()).collect();
        Ok(Self {
            w1,
            b1,
            w2: vec![0.0; hidden],
            b2: 0.0,
            omega_max_raw: 0.0,
            temp_raw: 0.0,
            eps_raw: 0.0,
            hidden,
            dropout_rate,
        })
    }

    /// `omega_max = lo + (10 - lo) * sigmoid(raw)`, strictly inside `(lo, 10)`.
    pub fn omega_max(&self) -> f64 {
        OMEGA_MAX_LO + (OMEGA_MAX_HI - OMEGA_MAX_LO) * sigmoid(self.omega_max_raw)
    }

    /// `T = exp(temp_raw)`, always positive.
    pub fn temperature(&self) -> f64 {
        self.temp_raw.exp()
    }

    /// Learnable smoothing constant, bounded in `(1e-8, 1e-2)`.
    pub fn epsilon(&self) -> f64 {
        epsilon_from_raw(self.eps_raw)
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self.w1.iter().chain(&self.b1).chain(&self.w2).all(|v| v.is_finite())
            && self.b2.is_finite()
            && self.omega_max_raw.is_finite()
            && self.temp_raw.is_finite()
            && self.eps_raw.is_finite();
        if finite {
            Ok(())
        } else {
            Err(Error::Numeric("non-finite gate parameter".into()))
        }
    }
}

pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Intermediate values stored by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct GateForwardCache {
    pub u: Vec<f64>,
    pub h1: Vec<f64>,
    /// post-ReLU, post-dropout activations
    pub a1: Vec<f64>,
    /// entries in {0, 1/(1-dropout_rate)} in train mode, all ones in eval
    pub mask: Vec<f64>,
    pub z: f64,
    pub omega: f64,
}

/// Gradients of a scalar loss with respect to the gate parameters. The
/// `eps_raw` entry covers only the additive floor on omega; the smoothing
/// term inside the fusion log is chained separately by the caller.
#[derive(Debug, Clone)]
pub struct GateGradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub omega_max_raw: f64,
    pub eps_raw: f64,
}

/// `omega = omega_max * sigmoid(w2 . dropout(relu(w1 u + b1)) + b2) + eps`.
pub fn gate_forward(
    params: &GateParameters,
    u: &GatingFeatures,
    mode: GateMode,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, GateForwardCache)> {
    params.check_finite()?;
    let input = u.as_slice();
    let h = params.hidden;
    let mut h1 = vec![0.0; h];
    for i in 0..h {
        let row = &params.w1[i * GATE_INPUT_DIM..(i + 1) * GATE_INPUT_DIM];
        let mut acc = params.b1[i];
        for (w, x) in row.iter().zip(input) {
            acc += w * x;
        }
        h1[i] = acc;
    }
    let keep = 1.0 - params.dropout_rate;
    let mask: Vec<f64> = match mode {
        GateMode::Eval => vec![1.0; h],
        GateMode::Train => (0..h)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect(),
    };
    let a1: Vec<f64> = (0..h).map(|i| h1[i].max(0.0) * mask[i]).collect();
    let mut z = params.b2;
    for (w, a) in params.w2.iter().zip(&a1) {
        z += w * a;
    }
    let omega = params.omega_max() * sigmoid(z) + params.epsilon();
    let cache = GateForwardCache {
        u: input.to_vec(),
        h1,
        a1,
        mask,
        z,
        omega,
    };
    Ok((omega, cache))
}

/// Exact analytic gradients through the forward pass, reusing the cached
/// dropout mask.
pub fn gate_backward(
    params: &GateParameters,
    cache: &GateForwardCache,
    dl_domega: f64,
) -> Result<GateGradients> {
    if cache.h1.len() != params.hidden || cache.mask.len() != params.hidden {
        return Err(Error::Contract(
            "forward cache does not match gate parameters".into(),
        ));
    }
    let h = params.hidden;
    let sz = sigmoid(cache.z);
    // d omega / d z
    let dz = dl_domega * params.omega_max() * sz * (1.0 - sz);
    // d omega / d omega_max_raw through the bounded reparameterization
    let sr = sigmoid(params.omega_max_raw);
    let d_omega_max_raw = dl_domega * sz * (OMEGA_MAX_HI - OMEGA_MAX_LO) * sr * (1.0 - sr);
    // d omega / d eps_raw through the additive floor
    let se = sigmoid(params.eps_raw);
    let d_eps_raw = dl_domega * (EPS_HI - EPS_LO) * se * (1.0 - se);

    let mut g_w2 = vec![0.0; h];
    let mut g_w1 = vec![0.0; h * GATE_INPUT_DIM];
    let mut g_b1 = vec![0.0; h];
    for i in 0..h {
        g_w2[i] = dz * cache.a1[i];
        // back through dropout and ReLU
        let da = dz * params.w2[i] * cache.mask[i];
        let dh = if cache.h1[i] > 0.0 { da } else { 0.0 };
        g_b1[i] = dh;
        for j in 0..GATE_INPUT_DIM {
            g_w1[i * GATE_INPUT_DIM + j] = dh * cache.u[j];
        }
    }
    Ok(GateGradients {
        w1: g_w1,
        b1: g_b1,
        w2: g_w2,
        b2: dz,
        omega_max_raw: d_omega_max_raw,
        eps_raw: d_eps_raw,
    })
}

/// Returns a copy of `params` whose gate outputs `omega_target` for every
/// input: `w2 = 0`, `b2 = logit((target - eps) / omega_max)`, and `w1`, `b1`
/// re-drawn small-random (scale 0.01, seeded) so gradients can break the
/// constancy.
pub fn init_constant_gate(
    params: &GateParameters,
    omega_target: f64,
    seed: u64,
) -> Result<GateParameters> {
    let eps = params.epsilon();
    let omega_max = params.omega_max();
    if !(omega_target > eps && omega_target < omega_max + eps) {
        return Err(Error::InvalidInput(format!(
            "omega target {omega_target} outside representable range ({eps}, {})",
            omega_max + eps
        )));
    }
    let mut out = GateParameters::seeded(params.hidden, params.dropout_rate, seed)?;
    out.omega_max_raw = params.omega_max_raw;
    out.temp_raw = params.temp_raw;
    out.eps_raw = params.eps_raw;
    out.w2 = vec![0.0; params.hidden];
    out.b2 = logit((omega_target - eps) / omega_max);
    Ok(out)
}
