//! Variance-preserving forward process with a data-driven prior.
//!
//! Each attribute `n` diffuses as
//!
//! ```text
//! dX_{n,t} = ½ β(t) (Z_n − X_{n,t}) dt + √β(t) dW_t,    β(t) = β_min + (β_max − β_min) t
//! ```
//!
//! so the transition from `X_0` is Gaussian with mean `α X_0 + (1 − α) Z_n`,
//! `α = exp(−½ ∫₀ᵗ β)`, and isotropic variance `1 − α²`.

use crate::error::{DddmError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Lower clamp for training times and the sampler's last grid point.
    pub t_min: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.05,
            beta_max: 20.0,
            t_min: 1e-5,
        }
    }
}

/// Coefficients of the Gaussian transition kernel at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionParams {
    pub alpha: f64,
    pub data_coef: f64,
    pub prior_coef: f64,
    pub variance: f64,
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64, t_min: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_min < beta_max && beta_max.is_finite()) {
            return Err(DddmError::Domain(format!(
                "schedule needs 0 < beta_min < beta_max, got {beta_min} and {beta_max}"
            )));
        }
        if !(t_min > 0.0 && t_min < 1.0) {
            return Err(DddmError::Domain(format!("t_min must lie in (0,1), got {t_min}")));
        }
        Ok(Self {
            beta_min,
            beta_max,
            t_min,
        })
    }

    fn check_time(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(DddmError::Domain(format!("time {t} outside [0, 1]")))
        }
    }

    pub fn beta_at(&self, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        Ok(self.beta_unchecked(t))
    }

    #[inline]
    pub(crate) fn beta_unchecked(&self, t: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * t
    }

    /// `∫₀ᵗ β(s) ds`.
    pub fn beta_integral(&self, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        Ok(self.integral_unchecked(t))
    }

    #[inline]
    pub(crate) fn integral_unchecked(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    /// `∫ₛᵗ β(u) du`, used by the maximum-likelihood reverse step.
    pub(crate) fn integral_between(&self, s: f64, t: f64) -> f64 {
        self.integral_unchecked(t) - self.integral_unchecked(s)
    }

    pub fn transition(&self, t: f64) -> Result<TransitionParams> {
        Self::check_time(t)?;
        Ok(self.transition_unchecked(t))
    }

    pub(crate) fn transition_unchecked(&self, t: f64) -> TransitionParams {
        let integral = self.integral_unchecked(t);
        let alpha = (-0.5 * integral).exp();
        TransitionParams {
            alpha,
            data_coef: alpha,
            prior_coef: 1.0 - alpha,
            // -expm1 keeps precision when the integral is tiny.
            variance: -(-integral).exp_m1(),
        }
    }

    /// Loss weight; identical to the transition variance.
    pub fn lambda_weight(&self, t: f64) -> Result<f64> {
        Ok(self.transition(t)?.variance)
    }

    pub fn forward_sample(&self, x0: &[f64], z: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
        if x0.len() != z.len() || x0.len() != eps.len() {
            return Err(DddmError::shape(
                "forward_sample",
                format!("x0 {}, z {}, eps {}", x0.len(), z.len(), eps.len()),
            ));
        }
        let tp = self.transition(t)?;
        let sd = tp.variance.sqrt();
        Ok(x0
            .iter()
            .zip(z)
            .zip(eps)
            .map(|((&x, &zi), &e)| tp.data_coef * x + tp.prior_coef * zi + sd * e)
            .collect())
    }

    /// Gradient of the transition log-density with respect to `x_t`.
    pub fn score_target(&self, x_t: &[f64], x0: &[f64], z: &[f64], t: f64) -> Result<Vec<f64>> {
        if x_t.len() != x0.len() || x_t.len() != z.len() {
            return Err(DddmError::shape(
                "score_target",
                format!("x_t {}, x0 {}, z {}", x_t.len(), x0.len(), z.len()),
            ));
        }
        let tp = self.transition(t)?;
        if tp.variance <= 0.0 {
            return Err(DddmError::Singular(t));
        }
        Ok(x_t
            .iter()
            .zip(x0)
            .zip(z)
            .map(|((&xt, &x), &zi)| -(xt - tp.data_coef * x - tp.prior_coef * zi) / tp.variance)
            .collect())
    }
}
