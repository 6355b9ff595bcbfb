//! Epoch loop over a fixed dataset.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{DddmError, Result};
use crate::harness::config::RunConfig;
use crate::harness::model::Model;
use crate::seeded_rng;
use crate::tensor::AdamW;
use crate::toy::{ToyDataset, ToySample};

pub const STREAM_TRAIN: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub l_diff: f64,
    pub l_rec: f64,
    pub l_total: f64,
    pub lr: f64,
    pub wall_time: f64,
}

/// Everything a checkpoint must restore to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub epoch: u64,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let model = Model::new(cfg)?;
        let opt = model.optimizer(cfg);
        Ok(Self {
            model,
            opt,
            rng: seeded_rng(cfg.seed, STREAM_TRAIN),
            epoch: 0,
        })
    }

    /// One pass over `data` in shuffled batches; returns epoch-mean losses.
    pub fn run_epoch(&mut self, data: &ToyDataset, batch_size: usize) -> Result<MetricsRow> {
        if data.is_empty() || batch_size == 0 {
            return Err(DddmError::Contract("empty dataset or batch".into()));
        }
        let lr = self.opt.current_lr();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mode = self.model.training_pitch_mode();
        let (mut diff, mut rec, mut total, mut n) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(batch_size) {
            let samples: Vec<&ToySample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let batch = self.model.prepare(&samples, data, mode, Some(&mut self.rng))?;
            let l = self.model.train_step(&mut self.opt, &batch, &mut self.rng)?;
            let w = chunk.len();
            diff += l.diff * w as f64;
            rec += l.rec * w as f64;
            total += l.total * w as f64;
            n += w;
        }
        self.opt.end_epoch();
        self.epoch += 1;
        self.model.trained = true;
        let n = n as f64;
        Ok(MetricsRow {
            epoch: self.epoch,
            l_diff: diff / n,
            l_rec: rec / n,
            l_total: total / n,
            lr,
            wall_time: 0.0,
        })
    }

    /// Train for `epochs` epochs, calling `on_epoch` after each one.
    pub fn train(
        &mut self,
        cfg: &RunConfig,
        data: &ToyDataset,
        epochs: usize,
        mut on_epoch: impl FnMut(&TrainState, &MetricsRow) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        let start = Instant::now();
        let mut rows = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let mut row = self.run_epoch(data, cfg.batch_size)?;
            if cfg.record_wall_time {
                row.wall_time = start.elapsed().as_secs_f64();
            }
            on_epoch(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }
}
