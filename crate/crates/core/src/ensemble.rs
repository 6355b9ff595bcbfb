//! Decoupled denoiser: one score network per attribute, summed.
//!
//! Network `n` sees its own noisy state `X_{n,t}` and prior `Z_n` plus the
//! shared style, time and optional blend scalar. Its score is
//!
//! ```text
//! s_n = ( g(t) mlp(X_n, Z_n, s, emb(t), b)
//!       + Σ_k c_k(t) (R_n ⊙ wr_k + α Z_n ⊙ wα_k) ) / σ_t,    R_n = X_n − (1 − α_t) Z_n
//! c_k(t) = σ_t / (σ_t² + α_t² r_k²),   g(t) = σ_t / √(σ_t² + α_t² ρ²)
//! ```
//!
//! The skip branches are Wiener-filter gains for a residual scale `r_k`, so
//! the exact score of Gaussian data is linear in the inputs with constant
//! weights. The gate `g` silences the MLP as `t → 0`, where the noise target
//! is unpredictable and would otherwise flood its gradients. Heads and skip
//! weights start at zero.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DddmError, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{time_embedding, Activation, AdamW, Graph, Mlp, ParamId, ParamStore, Tensor, Var};

pub const TIME_EMBED_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttributeId {
    Source,
    Filter,
    /// The single attribute of a one-network model.
    Total,
    Other(usize),
}

impl AttributeId {
    pub fn name(self) -> String {
        match self {
            AttributeId::Source => "src".into(),
            AttributeId::Filter => "ftr".into(),
            AttributeId::Total => "total".into(),
            AttributeId::Other(n) => format!("attr{n}"),
        }
    }

    /// Canonical ids for an `n`-attribute ensemble.
    pub fn for_count(n: usize) -> Vec<AttributeId> {
        match n {
            1 => vec![AttributeId::Total],
            2 => vec![AttributeId::Source, AttributeId::Filter],
            _ => (0..n).map(AttributeId::Other).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_attributes: usize,
    pub share_noise: bool,
    /// Networks take one extra blend input.
    pub blend_condition: bool,
    pub data_dim: usize,
    pub style_dim: usize,
    pub hidden: Vec<usize>,
    /// Residual scales `r_k` of the linear skip branches.
    pub skip_scales: Vec<f64>,
    /// Residual scale `ρ` of the MLP gate `σ / √(σ² + α² ρ²)`.
    pub mlp_scale: f64,
    /// Learning-rate multiplier for MLP blocks relative to skip weights.
    /// A slow MLP lets the skip path settle first instead of co-adapting.
    pub mlp_lr_scale: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_attributes: 2,
            share_noise: true,
            blend_condition: false,
            data_dim: 16,
            style_dim: 8,
            hidden: vec![96, 96],
            skip_scales: vec![0.05, 0.2, 1.0],
            mlp_scale: 0.05,
            mlp_lr_scale: 0.03,
        }
    }
}

/// Style conditioning with its provenance. Styles produced by prior mixup
/// are tagged `Mixed` and refused as denoiser conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StyleOrigin {
    Original,
    Mixed,
}

#[derive(Debug, Clone, Copy)]
pub struct StyleVar {
    pub var: Var,
    pub origin: StyleOrigin,
}

impl StyleVar {
    pub fn original(var: Var) -> Self {
        Self {
            var,
            origin: StyleOrigin::Original,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SkipBranch {
    wr: ParamId,
    wa: ParamId,
}

/// One attribute's score network.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeBundle {
    pub attribute: AttributeId,
    mlp: Mlp,
    skips: Vec<SkipBranch>,
}

impl AttributeBundle {
    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub config: EnsembleConfig,
    pub bundles: Vec<AttributeBundle>,
}

/// Per-row schedule quantities as `[B, 1]` columns.
struct RowCoefs {
    alpha: Tensor,
    one_minus_alpha: Tensor,
    sigma: Tensor,
    inv_sigma: Tensor,
    sqrt_lambda: Tensor,
    mlp_gate: Tensor,
    skip_gain: Vec<(Tensor, Tensor)>,
}

fn row_coefs(sched: &NoiseSchedule, times: &[f64], skip_scales: &[f64], mlp_scale: f64) -> Result<RowCoefs> {
    let mut a = Vec::with_capacity(times.len());
    let mut oma = Vec::with_capacity(times.len());
    let mut sd = Vec::with_capacity(times.len());
    let mut inv = Vec::with_capacity(times.len());
    let mut sl = Vec::with_capacity(times.len());
    let mut mg = Vec::with_capacity(times.len());
    let mut gains: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); skip_scales.len()];
    for &t in times {
        if !(sched.t_min..=1.0).contains(&t) {
            return Err(DddmError::Domain(format!("time {t} outside [{}, 1]", sched.t_min)));
        }
        let tp = sched.transition(t)?;
        let sigma = tp.variance.sqrt();
        a.push(tp.alpha);
        oma.push(tp.prior_coef);
        sd.push(sigma);
        inv.push(1.0 / sigma);
        sl.push(sigma);
        mg.push(sigma / (tp.variance + tp.alpha * tp.alpha * mlp_scale * mlp_scale).sqrt());
        for (k, &r) in skip_scales.iter().enumerate() {
            let c = sigma / (tp.variance + tp.alpha * tp.alpha * r * r);
            gains[k].0.push(c);
            gains[k].1.push(c * tp.alpha);
        }
    }
    Ok(RowCoefs {
        alpha: Tensor::column(&a),
        one_minus_alpha: Tensor::column(&oma),
        sigma: Tensor::column(&sd),
        inv_sigma: Tensor::column(&inv),
        sqrt_lambda: Tensor::column(&sl),
        mlp_gate: Tensor::column(&mg),
        skip_gain: gains
            .into_iter()
            .map(|(c, ca)| (Tensor::column(&c), Tensor::column(&ca)))
            .collect(),
    })
}

/// Noise for one batch: a single shared draw, or one per attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw(pub Vec<Tensor>);

impl NoiseDraw {
    pub fn sample<R: Rng + ?Sized>(rows: usize, dim: usize, n_attributes: usize, share: bool, rng: &mut R) -> Self {
        let draws = if share { 1 } else { n_attributes };
        NoiseDraw(
            (0..draws)
                .map(|_| {
                    let data = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
                    Tensor::new(vec![rows, dim], data).expect("noise shape")
                })
                .collect(),
        )
    }

    fn for_attribute(&self, n: usize) -> &Tensor {
        if self.0.len() == 1 {
            &self.0[0]
        } else {
            &self.0[n]
        }
    }
}

/// Batched training example for the ensemble alone.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub x0: Tensor,
    pub priors: Vec<Tensor>,
    pub style: Tensor,
    pub blend: Option<f64>,
}

impl Ensemble {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: EnsembleConfig, rng: &mut R) -> Result<Self> {
        if config.n_attributes == 0 {
            return Err(DddmError::Config("ensemble needs at least one attribute".into()));
        }
        if config.blend_condition && config.n_attributes != 2 {
            return Err(DddmError::Config(
                "blend conditioning needs exactly two attributes".into(),
            ));
        }
        let d = config.data_dim;
        let in_dim = 2 * d + config.style_dim + TIME_EMBED_DIM + usize::from(config.blend_condition);
        let mut dims = vec![in_dim];
        dims.extend(&config.hidden);
        dims.push(d);
        let mut bundles = Vec::with_capacity(config.n_attributes);
        for attribute in AttributeId::for_count(config.n_attributes) {
            let prefix = format!("score.{}", attribute.name());
            let mlp = Mlp::new(store, &prefix, &dims, Activation::Silu, true, rng)?;
            let mut skips = Vec::with_capacity(config.skip_scales.len());
            for k in 0..config.skip_scales.len() {
                let mut w = |tag: &str| store.add(format!("{prefix}.skip{k}.{tag}"), Tensor::zeros(vec![1, d]));
                skips.push(SkipBranch {
                    wr: w("r")?,
                    wa: w("az")?,
                });
            }
            bundles.push(AttributeBundle { attribute, mlp, skips });
        }
        Ok(Self { config, bundles })
    }

    /// Set the optimiser's per-block multipliers for this ensemble's MLPs.
    pub fn apply_lr_scales(&self, opt: &mut AdamW) {
        for bundle in &self.bundles {
            for layer in bundle.mlp.layers() {
                opt.lr_scale[layer.weight.index()] = self.config.mlp_lr_scale;
                opt.lr_scale[layer.bias.index()] = self.config.mlp_lr_scale;
            }
        }
    }

    pub fn n_attributes(&self) -> usize {
        self.bundles.len()
    }

    /// Blend input seen by attribute `n`: `2 w_n − 1` with weights
    /// `(1 − blend, blend)`; absent blend reads as zero.
    fn blend_input(&self, n: usize, blend: Option<f64>) -> Result<Option<f64>> {
        if !self.config.blend_condition {
            return match blend {
                None => Ok(None),
                Some(_) => Err(DddmError::Contract(
                    "ensemble was built without blend conditioning".into(),
                )),
            };
        }
        match blend {
            None => Ok(Some(0.0)),
            Some(b) if (0.0..=1.0).contains(&b) => {
                let w = if n == 0 { 1.0 - b } else { b };
                Ok(Some(2.0 * w - 1.0))
            }
            Some(b) => Err(DddmError::Domain(format!("blend {b} outside [0, 1]"))),
        }
    }

    fn check_inputs(&self, g: &Graph, x: Var, z: Var, style: StyleVar, rows: usize) -> Result<()> {
        if style.origin == StyleOrigin::Mixed {
            return Err(DddmError::Contract("mixed style reached denoiser conditioning".into()));
        }
        let d = self.config.data_dim;
        let (xs, zs, ss) = (g.value(x).shape(), g.value(z).shape(), g.value(style.var).shape());
        if xs != [rows, d] || zs != [rows, d] || ss != [rows, self.config.style_dim] {
            return Err(DddmError::shape(
                "attribute_score",
                format!("x {xs:?}, z {zs:?}, style {ss:?} for {rows} rows of width {d}"),
            ));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn attribute_score(
        &self,
        g: &mut Graph,
        sched: &NoiseSchedule,
        n: usize,
        x: Var,
        z: Var,
        style: StyleVar,
        times: &[f64],
        blend: Option<f64>,
    ) -> Result<Var> {
        let coefs = row_coefs(sched, times, &self.config.skip_scales, self.config.mlp_scale)?;
        self.attribute_score_with(g, &coefs, n, x, z, style, times, blend)
    }

    #[allow(clippy::too_many_arguments)]
    fn attribute_score_with(
        &self,
        g: &mut Graph,
        coefs: &RowCoefs,
        n: usize,
        x: Var,
        z: Var,
        style: StyleVar,
        times: &[f64],
        blend: Option<f64>,
    ) -> Result<Var> {
        let bundle = self
            .bundles
            .get(n)
            .ok_or_else(|| DddmError::Contract(format!("no attribute {n}")))?;
        self.check_inputs(g, x, z, style, times.len())?;
        let temb = g.input(time_embedding(times, TIME_EMBED_DIM))?;
        let mut parts = vec![x, z, style.var, temb];
        if let Some(b) = self.blend_input(n, blend)? {
            parts.push(g.input(Tensor::filled(vec![times.len(), 1], b))?);
        }
        let inp = g.tape.concat(&parts)?;
        let mlp = bundle.mlp.forward(g, inp)?;
        let gain = g.input(coefs.mlp_gate.clone())?;
        let mut out = g.tape.mul(mlp, gain)?;
        let oma = g.input(coefs.one_minus_alpha.clone())?;
        let pz = g.tape.mul(z, oma)?;
        let centred = g.tape.sub(x, pz)?;
        for (branch, (c, ca)) in bundle.skips.iter().zip(&coefs.skip_gain) {
            let (wr, wa) = (g.param(branch.wr)?, g.param(branch.wa)?);
            let h = g.tape.mul(centred, wr)?;
            let c = g.input(c.clone())?;
            let h = g.tape.mul(h, c)?;
            let ha = g.tape.mul(z, wa)?;
            let ca = g.input(ca.clone())?;
            let ha = g.tape.mul(ha, ca)?;
            out = g.tape.add(out, h)?;
            out = g.tape.add(out, ha)?;
        }
        let inv = g.input(coefs.inv_sigma.clone())?;
        g.tape.mul(out, inv)
    }

    /// `Σₙ s_n(X_n, Z_n, s, t)`.
    #[allow(clippy::too_many_arguments)]
    pub fn combined_score(
        &self,
        g: &mut Graph,
        sched: &NoiseSchedule,
        xs: &[Var],
        zs: &[Var],
        style: StyleVar,
        times: &[f64],
        blend: Option<f64>,
    ) -> Result<Var> {
        let coefs = row_coefs(sched, times, &self.config.skip_scales, self.config.mlp_scale)?;
        self.combined_with(g, &coefs, xs, zs, style, times, blend)
    }

    #[allow(clippy::too_many_arguments)]
    fn combined_with(
        &self,
        g: &mut Graph,
        coefs: &RowCoefs,
        xs: &[Var],
        zs: &[Var],
        style: StyleVar,
        times: &[f64],
        blend: Option<f64>,
    ) -> Result<Var> {
        let n = self.n_attributes();
        if xs.len() != n || zs.len() != n {
            return Err(DddmError::Contract(format!(
                "{n} attributes but {} states and {} priors",
                xs.len(),
                zs.len()
            )));
        }
        let mut total = self.attribute_score_with(g, coefs, 0, xs[0], zs[0], style, times, blend)?;
        for i in 1..n {
            let s = self.attribute_score_with(g, coefs, i, xs[i], zs[i], style, times, blend)?;
            total = g.tape.add(total, s)?;
        }
        Ok(total)
    }

    /// Batch mean of `λ_t ‖Σₙ s_n − (−ε/σ_t)‖²` with every `X_n` diffused
    /// from `x0` toward its own prior.
    #[allow(clippy::too_many_arguments)]
    pub fn diffusion_loss(
        &self,
        g: &mut Graph,
        sched: &NoiseSchedule,
        x0: Var,
        priors: &[Var],
        style: StyleVar,
        times: &[f64],
        noise: &NoiseDraw,
        blend: Option<f64>,
    ) -> Result<Var> {
        let n = self.n_attributes();
        if priors.len() != n {
            return Err(DddmError::Contract(format!(
                "{n} attributes but {} priors",
                priors.len()
            )));
        }
        if noise.0.len() != 1 && noise.0.len() != n {
            return Err(DddmError::Contract(format!(
                "{} noise draws for {n} attributes",
                noise.0.len()
            )));
        }
        let coefs = row_coefs(sched, times, &self.config.skip_scales, self.config.mlp_scale)?;
        let a = g.input(coefs.alpha.clone())?;
        let oma = g.input(coefs.one_minus_alpha.clone())?;
        let sd = g.input(coefs.sigma.clone())?;
        let inv = g.input(coefs.inv_sigma.clone())?;
        let ax0 = g.tape.mul(x0, a)?;
        let mut xs = Vec::with_capacity(n);
        let mut target: Option<Var> = None;
        for (i, &z) in priors.iter().enumerate() {
            let eps = g.input(noise.for_attribute(i).clone())?;
            let pz = g.tape.mul(z, oma)?;
            let se = g.tape.mul(eps, sd)?;
            let xt = g.tape.add(ax0, pz)?;
            xs.push(g.tape.add(xt, se)?);
            if i < noise.0.len() {
                let t_i = g.tape.mul(eps, inv)?;
                target = Some(match target {
                    None => t_i,
                    Some(acc) => g.tape.add(acc, t_i)?,
                });
            }
        }
        // −ε/σ, averaged over draws when noise is independent
        let target = g
            .tape
            .scale(target.expect("at least one draw"), -1.0 / noise.0.len() as f64)?;
        let score = self.combined_with(g, &coefs, &xs, priors, style, times, blend)?;
        let diff = g.tape.sub(score, target)?;
        let w = g.input(coefs.sqrt_lambda.clone())?;
        let weighted = g.tape.mul(diff, w)?;
        let zero = g.input(Tensor::zeros(g.value(weighted).shape().to_vec()))?;
        let mse = g.tape.mse_loss(weighted, zero)?;
        g.tape.scale(mse, self.config.data_dim as f64)
    }

    /// One optimiser step on the diffusion loss with `t ~ U[t_min, 1]` per
    /// row; returns the loss before the step.
    pub fn train_step<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        opt: &mut AdamW,
        sched: &NoiseSchedule,
        batch: &TrainBatch,
        rng: &mut R,
    ) -> Result<f64> {
        let rows = batch.x0.rows();
        if rows == 0 {
            return Err(DddmError::Contract("empty batch".into()));
        }
        let times: Vec<f64> = (0..rows).map(|_| rng.random_range(sched.t_min..=1.0)).collect();
        let noise = NoiseDraw::sample(
            rows,
            self.config.data_dim,
            self.n_attributes(),
            self.config.share_noise,
            rng,
        );
        let (loss, grads) = {
            let mut g = Graph::new(store);
            let x0 = g.input(batch.x0.clone())?;
            let priors = batch
                .priors
                .iter()
                .map(|p| g.input(p.clone()))
                .collect::<Result<Vec<_>>>()?;
            let style = StyleVar::original(g.input(batch.style.clone())?);
            let loss = self.diffusion_loss(&mut g, sched, x0, &priors, style, &times, &noise, batch.blend)?;
            let grads = g.tape.backward(loss)?;
            (g.value(loss).item(), g.param_grads(&grads))
        };
        opt.step(store, &grads)?;
        Ok(loss)
    }

    /// Score of every attribute chain evaluated without recording gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn eval_combined(
        &self,
        store: &ParamStore,
        sched: &NoiseSchedule,
        xs: &[Tensor],
        zs: &[Tensor],
        style: &Tensor,
        times: &[f64],
        blend: Option<f64>,
    ) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let xs = xs.iter().map(|x| g.input(x.clone())).collect::<Result<Vec<_>>>()?;
        let zs = zs.iter().map(|z| g.input(z.clone())).collect::<Result<Vec<_>>>()?;
        let style = StyleVar::original(g.input(style.clone())?);
        let s = self.combined_score(&mut g, sched, &xs, &zs, style, times, blend)?;
        Ok(g.value(s).clone())
    }
}
