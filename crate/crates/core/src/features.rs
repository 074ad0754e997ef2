//! Gating-network input features: per-expert uncertainty statistics plus
//! periodic/scaled metadata encodings.

use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::dist::{entropy, top2_stats, CategoricalDistribution};
use crate::error::{Error, Result};

/// Number of gating features: 3 audio stats, 3 prior stats, 6 metadata.
pub const GATE_INPUT_DIM: usize = 12;

/// Latitude/longitude in degrees, day-of-year in `[0, 365)`, hour-of-day in
/// `[0, 24)`. Stored as f32 to match the on-disk dataset format exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatioTemporalContext {
    pub lat: f32,
    pub lon: f32,
    pub day: f32,
    pub hour: f32,
}

impl SpatioTemporalContext {
    pub fn new(lat: f32, lon: f32, day: f32, hour: f32) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !lat.is_finite() {
            return Err(Error::InvalidInput(format!("latitude {lat} out of [-90, 90]")));
        }
        if !(-180.0..=180.0).contains(&lon) || !lon.is_finite() {
            return Err(Error::InvalidInput(format!("longitude {lon} out of [-180, 180]")));
        }
        if !(0.0..365.0).contains(&day) {
            return Err(Error::InvalidInput(format!("day-of-year {day} out of [0, 365)")));
        }
        if !(0.0..24.0).contains(&hour) {
            return Err(Error::InvalidInput(format!("hour-of-day {hour} out of [0, 24)")));
        }
        Ok(Self { lat, lon, day, hour })
    }
}

/// `[sin(2πd/365), cos(2πd/365), sin(2πh/24), cos(2πh/24), lat/90, lon/180]`.
/// The day denominator stays 365 in leap years.
pub fn encode_metadata(ctx: &SpatioTemporalContext) -> [f64; 6] {
    let d = ctx.day as f64;
    let h = ctx.hour as f64;
    [
        (TAU * d / 365.0).sin(),
        (TAU * d / 365.0).cos(),
        (TAU * h / 24.0).sin(),
        (TAU * h / 24.0).cos(),
        ctx.lat as f64 / 90.0,
        ctx.lon as f64 / 180.0,
    ]
}

/// The 12-dimensional gating input, frozen order:
/// `[audio max, audio entropy, audio margin, prior max, prior entropy,
/// prior margin, 6 metadata encodings]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingFeatures {
    u: [f64; GATE_INPUT_DIM],
}

impl GatingFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.u
    }
}

/// Concatenates `[max, entropy, margin]` of the audio posterior, the same
/// statistics of the context prior, and the metadata encodings. Entropy
/// features are fed raw, not rescaled by `ln C`.
pub fn build_gating_features(
    audio: &CategoricalDistribution,
    prior: &CategoricalDistribution,
    ctx: &SpatioTemporalContext,
) -> Result<GatingFeatures> {
    if audio.n_classes() != prior.n_classes() {
        return Err(Error::Dimension(format!(
            "audio has {} classes, prior has {}",
            audio.n_classes(),
            prior.n_classes()
        )));
    }
    let (a_max, a_margin) = top2_stats(audio);
    let (p_max, p_margin) = top2_stats(prior);
    let meta = encode_metadata(ctx);
    let u = [
        a_max,
        entropy(audio),
        a_margin,
        p_max,
        entropy(prior),
        p_margin,
        meta[0],
        meta[1],
        meta[2],
        meta[3],
        meta[4],
        meta[5],
    ];
    Ok(GatingFeatures { u })
}
