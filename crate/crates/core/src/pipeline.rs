//! Inference over persisted artifacts: per-sample fused predictions from a
//! stage checkpoint, evaluation reports, and the fixed-vs-adaptive weight
//! sweep.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{CategoricalDistribution, LogScoreVector};
use crate::error::{Error, Result};
use crate::features::build_gating_features;
use crate::fusion::{fuse, FusionInputs};
use crate::gate::{gate_forward, GateMode};
use crate::metrics::{evaluate, EvalReport};
use crate::store::{Dataset, PriorTable};
use crate::training::StageCheckpoint;

/// Per-sample fused predictions and the per-sample fusion weights used.
/// `audio_only` forces omega = 0 regardless of stage (the recoverability
/// fallback); stage-1 checkpoints are always audio-only.
pub fn predict(
    ckpt: &StageCheckpoint,
    dataset: &Dataset,
    priors: Option<&PriorTable>,
    audio_only: bool,
) -> Result<(Vec<CategoricalDistribution>, Vec<f64>)> {
    ckpt.validate()?;
    if ckpt.head.embed_dim != dataset.embed_dim() || ckpt.head.n_classes != dataset.n_classes {
        return Err(Error::Dimension(format!(
            "checkpoint expects {} classes x {} dims, dataset has {} x {}",
            ckpt.head.n_classes,
            ckpt.head.embed_dim,
            dataset.n_classes,
            dataset.embed_dim()
        )));
    }
    let fusing = !audio_only && ckpt.stage > 1;
    if fusing && priors.is_none() {
        return Err(Error::InvalidInput(
            "fused prediction requires a prior table".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0); // eval mode: never consulted
    let mut preds = Vec::with_capacity(dataset.len());
    let mut omegas = Vec::with_capacity(dataset.len());
    for rec in &dataset.records {
        let audio_log = ckpt.head.log_posterior(&rec.embedding);
        if !fusing {
            preds.push(crate::dist::normalize_log_scores(&LogScoreVector::new(
                audio_log,
            )?)?);
            omegas.push(0.0);
            continue;
        }
        let prior = priors.unwrap().lookup(rec.sample_id)?;
        let omega = match (&ckpt.gate, ckpt.scalar_omega()) {
            (Some(gate), _) => {
                let audio = crate::dist::normalize_log_scores(&LogScoreVector::new(
                    audio_log.clone(),
                )?)?;
                let features = build_gating_features(&audio, &prior, &rec.context)?;
                gate_forward(gate, &features, GateMode::Eval, &mut rng)?.0
            }
            (None, Some(omega)) => omega,
            (None, None) => unreachable!("validated checkpoint"),
        };
        preds.push(fuse(&FusionInputs {
            audio_log_probs: LogScoreVector::new(audio_log)?,
            prior,
            omega,
            temperature: ckpt.temperature(),
            epsilon: ckpt.epsilon(),
        })?);
        omegas.push(omega);
    }
    Ok((preds, omegas))
}

pub fn evaluate_checkpoint(
    ckpt: &StageCheckpoint,
    dataset: &Dataset,
    priors: Option<&PriorTable>,
    audio_only: bool,
) -> Result<EvalReport> {
    let (preds, _) = predict(ckpt, dataset, priors, audio_only)?;
    let labels: Vec<usize> = dataset.records.iter().map(|r| r.label as usize).collect();
    evaluate(&preds, &labels)
}

/// One row of the weight sweep: a fixed weight, or the adaptive gate when
/// `omega` is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub omega: Option<f64>,
    pub accuracy: f64,
    pub map: f64,
}

/// Evaluates fixed-weight fusion (T = 1, checkpoint epsilon) for each grid
/// value, plus one adaptive row when the checkpoint carries a gate. The
/// omega = 0 row equals the audio-only evaluation by construction.
pub fn sweep_omega(
    ckpt: &StageCheckpoint,
    dataset: &Dataset,
    priors: &PriorTable,
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    ckpt.validate()?;
    let labels: Vec<usize> = dataset.records.iter().map(|r| r.label as usize).collect();
    let audio_logs: Vec<Vec<f64>> = dataset
        .records
        .iter()
        .map(|r| ckpt.head.log_posterior(&r.embedding))
        .collect();
    let epsilon = ckpt.epsilon();

    let mut rows = Vec::with_capacity(grid.len() + 1);
    for &omega in grid {
        let preds: Vec<CategoricalDistribution> = dataset
            .records
            .iter()
            .zip(&audio_logs)
            .map(|(rec, audio_log)| {
                fuse(&FusionInputs {
                    audio_log_probs: LogScoreVector::new(audio_log.clone())?,
                    prior: priors.lookup(rec.sample_id)?,
                    omega,
                    temperature: 1.0,
                    epsilon,
                })
            })
            .collect::<Result<_>>()?;
        let report = evaluate(&preds, &labels)?;
        rows.push(SweepRow {
            omega: Some(omega),
            accuracy: report.top1,
            map: report.cmap,
        });
    }
    if ckpt.gate.is_some() {
        let report = evaluate_checkpoint(ckpt, dataset, Some(priors), false)?;
        rows.push(SweepRow {
            omega: None,
            accuracy: report.top1,
            map: report.cmap,
        });
    }
    Ok(rows)
}
