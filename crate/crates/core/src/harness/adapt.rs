//! Fine-tuning on a few utterances of a new style.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DddmError, Result};
use crate::harness::config::RunConfig;
use crate::harness::model::{Model, StepLosses};
use crate::tensor::AdamW;
use crate::toy::{ToyDataset, ToySample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub steps: usize,
    pub lr: f64,
    pub freeze_encoders: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 2e-5,
            freeze_encoders: false,
        }
    }
}

/// Pitch statistics of `train`, with styles it lacks taken from `extra`.
pub fn merged_stats(train: &ToyDataset, extra: &ToyDataset) -> ToyDataset {
    let n = train.pitch_stats.len().max(extra.pitch_stats.len());
    let pitch_stats = (0..n)
        .map(|s| {
            train
                .pitch_stats
                .get(s)
                .copied()
                .flatten()
                .or_else(|| extra.pitch_stats.get(s).copied().flatten())
        })
        .collect();
    ToyDataset {
        samples: Vec::new(),
        pitch_stats,
        global_pitch: train.global_pitch,
    }
}

/// Full-batch optimisation of the training objective on `data` with a fresh
/// optimiser. Returns the pre-step losses of every step and the optimiser.
pub fn adapt<R: Rng + ?Sized>(
    model: &mut Model,
    cfg: &RunConfig,
    acfg: &AdaptConfig,
    data: &ToyDataset,
    stats: &ToyDataset,
    rng: &mut R,
) -> Result<(Vec<StepLosses>, AdamW)> {
    if data.is_empty() {
        return Err(DddmError::Contract("empty adaptation set".into()));
    }
    if !(acfg.lr.is_finite() && acfg.lr >= 0.0) {
        return Err(DddmError::Config(format!(
            "adaptation lr {} must be finite and non-negative",
            acfg.lr
        )));
    }
    let mut ocfg = cfg.optimizer();
    ocfg.lr = acfg.lr;
    let mut opt = AdamW::new(ocfg, &model.store);
    model.ensemble.apply_lr_scales(&mut opt);
    if acfg.freeze_encoders {
        for id in model.codec.param_ids() {
            opt.lr_scale[id.index()] = 0.0;
        }
    }
    let samples: Vec<&ToySample> = data.samples.iter().collect();
    let mode = model.training_pitch_mode();
    let mut losses = Vec::with_capacity(acfg.steps);
    for _ in 0..acfg.steps {
        let batch = model.prepare(&samples, stats, mode, Some(&mut *rng))?;
        losses.push(model.train_step(&mut opt, &batch, rng)?);
    }
    Ok((losses, opt))
}
