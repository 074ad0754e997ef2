//! Adaptive log-linear fusion of a frozen audio classifier with a
//! spatiotemporal context prior.
//!
//! The fused posterior is `softmax(log p_audio(y|x) / T + omega(x, s) *
//! ln(p_context(y|s) + eps))` where the per-sample weight `omega` comes
//! from a small gating network over confidence and metadata features.
//! Setting `omega = 0`, `T = 1` recovers the audio-only classifier exactly;
//! `omega = 1`, `T = 1`, `eps = 0` is the exact Bayes posterior when audio
//! and context are conditionally independent given the class.
//!
//! Modules:
//! - [`dist`]: probability vectors and log-score softmax primitives
//! - [`features`]: the 12-dimensional gating input
//! - [`gate`]: the bounded gating network and its analytic gradients
//! - [`fusion`]: the fusion rule and its gradients
//! - [`training`]: three-stage training (head, scalar weight, gate) plus
//!   the metadata-only prior network
//! - [`metrics`]: top-1, class-mean AP, macro AUROC, log-loss
//! - [`synthetic`]: seeded generative benchmark with closed-form posteriors
//! - [`diagnostics`]: embedding-to-prior dependence probe
//! - [`store`]: bit-exact dataset / prior-table / checkpoint persistence
//! - [`pipeline`]: checkpoint inference, evaluation, weight sweeps

pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod features;
pub mod fusion;
pub mod gate;
pub mod metrics;
pub mod pipeline;
pub mod store;
pub mod synthetic;
pub mod training;

pub use dist::{CategoricalDistribution, LogScoreVector};
pub use error::{Error, Result};
pub use features::{GatingFeatures, SpatioTemporalContext, GATE_INPUT_DIM};
pub use fusion::{fuse, FusionInputs};
pub use gate::{GateMode, GateParameters};
pub use metrics::EvalReport;
pub use store::{Dataset, PriorTable, SampleRecord};
pub use training::{AudioHead, StageCheckpoint, TrainConfig};
