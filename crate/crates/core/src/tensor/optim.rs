//! AdamW with decoupled weight decay and an epoch-wise exponential
//! learning-rate decay.

use super::{ParamStore, Tensor};
use crate::error::{DddmError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiplier applied to the learning rate once per epoch.
    pub lr_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
            lr_decay: 0.999f64.powf(1.0 / 8.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step_count: u64,
    pub epoch: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    /// Per-block multiplier on the learning rate.
    pub lr_scale: Vec<f64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| s.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            config,
            step_count: 0,
            epoch: 0,
            first_moment: zeros(params),
            second_moment: zeros(params),
            lr_scale: vec![1.0; params.len()],
        }
    }

    /// Learning rate after `epoch` completed epochs.
    pub fn current_lr(&self) -> f64 {
        self.config.lr * self.config.lr_decay.powi(self.epoch as i32)
    }

    pub fn end_epoch(&mut self) {
        self.epoch += 1;
    }

    /// Zero the moments and counters, keeping the configuration.
    pub fn reset(&mut self) {
        self.step_count = 0;
        self.epoch = 0;
        for m in self.first_moment.iter_mut().chain(self.second_moment.iter_mut()) {
            m.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        self.step_tensors(params.tensors_mut(), grads)
    }

    pub fn step_tensors(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() || params.len() != self.lr_scale.len()
        {
            return Err(DddmError::shape(
                "adamw_step",
                format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(DddmError::shape(
                    "adamw_step",
                    format!("block {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step_count += 1;
        let c = self.config;
        let lr = self.current_lr();
        let bc1 = 1.0 - c.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step_count as i32);
        for (((p, g), (m, v)), &k) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
            .zip(&self.lr_scale)
        {
            let lr = lr * k;
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for j in 0..pd.len() {
                let gj = g.data()[j];
                md[j] = c.beta1 * md[j] + (1.0 - c.beta1) * gj;
                vd[j] = c.beta2 * vd[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = md[j] / bc1;
                let v_hat = vd[j] / bc2;
                // decay uses the pre-update value and the current lr
                pd[j] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * pd[j]);
            }
        }
        if params.iter().all(Tensor::is_finite) {
            Ok(())
        } else {
            Err(DddmError::Numeric("adamw_step".into()))
        }
    }
}
