//! Forward simulation and reverse-time solvers.
//!
//! Every attribute chain `n` follows
//!
//! ```text
//! X_{n,t−h} = X_{n,t} − hβ_t [½(Z_n − X_{n,t}) − Σ_m s_m(X_{m,t}, Z_m, s, t)] + √(β_t h) ξ
//! ```
//!
//! in Euler–Maruyama mode, or the maximum-likelihood step in `Ml` mode. With
//! shared ξ and a shared total score the gap between two chains obeys
//! `ΔZ − D ← (1 + c_k)(ΔZ − D)`, so [`InitMode::Consistent`] starts the
//! chains with the gap that closes exactly at the last step.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{DddmError, Result};
use crate::schedule::NoiseSchedule;
use crate::seeded_rng;
use crate::tensor::{ParamStore, Tensor};

/// Stream offset for per-chain sampling generators.
pub const STREAM_SAMPLER: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    Em,
    Ml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `X_{n,1} = Z_n + ξ` with ξ shared when noise is shared.
    Prior,
    /// Prior initialisation shifted so that the chains meet at `t_min`.
    Consistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub mode: SolverMode,
    pub stochastic: bool,
    pub seed: u64,
    pub share_noise: bool,
    pub init: InitMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 30,
            mode: SolverMode::Em,
            stochastic: true,
            seed: 0,
            share_noise: true,
            init: InitMode::Consistent,
        }
    }
}

impl SamplerConfig {
    pub fn fast() -> Self {
        Self {
            n_steps: 6,
            ..Self::default()
        }
    }

    /// Uniform grid `1 = t_0 > … > t_n = t_min`.
    pub fn grid(&self, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        if self.n_steps == 0 {
            return Err(DddmError::Contract("sampler needs at least one step".into()));
        }
        let h = (1.0 - sched.t_min) / self.n_steps as f64;
        Ok((0..=self.n_steps)
            .map(|k| {
                if k == self.n_steps {
                    sched.t_min
                } else {
                    1.0 - k as f64 * h
                }
            })
            .collect())
    }
}

/// Total score `Σₙ s_n` for a batch of states at a common time.
pub trait ScoreModel {
    fn n_attributes(&self) -> usize;
    fn total_score(&self, xs: &[Tensor], zs: &[Tensor], t: f64) -> Result<Tensor>;
}

pub struct LearnedScore<'a> {
    pub store: &'a ParamStore,
    pub ensemble: &'a Ensemble,
    pub sched: &'a NoiseSchedule,
    pub style: &'a Tensor,
    pub blend: Option<f64>,
}

impl ScoreModel for LearnedScore<'_> {
    fn n_attributes(&self) -> usize {
        self.ensemble.n_attributes()
    }

    fn total_score(&self, xs: &[Tensor], zs: &[Tensor], t: f64) -> Result<Tensor> {
        let times = vec![t; xs.first().map_or(0, Tensor::rows)];
        self.ensemble
            .eval_combined(self.store, self.sched, xs, zs, self.style, &times, self.blend)
    }
}

/// Score given by a closure, e.g. a closed-form oracle.
pub struct FnScore<F> {
    pub n_attributes: usize,
    pub f: F,
}

impl<F> ScoreModel for FnScore<F>
where
    F: Fn(&[Tensor], &[Tensor], f64) -> Result<Tensor>,
{
    fn n_attributes(&self) -> usize {
        self.n_attributes
    }

    fn total_score(&self, xs: &[Tensor], zs: &[Tensor], t: f64) -> Result<Tensor> {
        (self.f)(xs, zs, t)
    }
}

/// Coefficients of `X − Z ← a (X − Z) + b S + σ ξ` for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefs {
    pub a: f64,
    pub b: f64,
    pub noise: f64,
}

pub fn step_coefs(sched: &NoiseSchedule, mode: SolverMode, t: f64, h: f64) -> Result<StepCoefs> {
    if !(h > 0.0 && t <= 1.0 + 1e-12) {
        return Err(DddmError::Domain(format!("step of {h} from t = {t}")));
    }
    let s = t - h;
    if s < sched.t_min - 1e-12 {
        return Err(DddmError::Domain(format!(
            "step from {t} by {h} overshoots t_min = {}",
            sched.t_min
        )));
    }
    let beta = sched.beta_unchecked(t);
    Ok(match mode {
        SolverMode::Em => StepCoefs {
            a: 1.0 + 0.5 * beta * h,
            b: beta * h,
            noise: (beta * h).sqrt(),
        },
        SolverMode::Ml => {
            // Gaussian-bridge posterior of X_s given X_t with x0 estimated
            // from the score (Tweedie)
            let g0t = (-sched.integral_unchecked(t)).exp();
            let g0s = (-sched.integral_unchecked(s)).exp();
            let gst = (-sched.integral_between(s, t)).exp();
            let var_t = -(-sched.integral_unchecked(t)).exp_m1();
            let var_s = -(-sched.integral_unchecked(s)).exp_m1();
            let one_m_gst = -(-sched.integral_between(s, t)).exp_m1();
            let mu = gst.sqrt() * var_s / var_t;
            let nu_over_alpha = (g0s / g0t).sqrt() * one_m_gst / var_t;
            StepCoefs {
                a: mu + nu_over_alpha,
                b: nu_over_alpha * var_t,
                noise: (var_s * one_m_gst / var_t).max(0.0).sqrt(),
            }
        }
    })
}

fn noise_rows(rows: usize, dim: usize, rngs: &mut [ChaCha8Rng]) -> Tensor {
    let mut t = Tensor::zeros(vec![rows, dim]);
    for (r, rng) in rngs.iter_mut().enumerate().take(rows) {
        for v in t.row_mut(r) {
            *v = rng.sample(StandardNormal);
        }
    }
    t
}

/// One reverse step for every attribute chain. `rngs` holds one generator
/// per row.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step(
    score: &impl ScoreModel,
    sched: &NoiseSchedule,
    xs: &[Tensor],
    zs: &[Tensor],
    t: f64,
    h: f64,
    cfg: &SamplerConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Tensor>> {
    let c = step_coefs(sched, cfg.mode, t, h)?;
    check_states(score, xs, zs, rngs.len())?;
    let s = score.total_score(xs, zs, t)?;
    let (rows, dim) = (xs[0].rows(), xs[0].cols());
    let shared = if cfg.stochastic && cfg.share_noise {
        Some(noise_rows(rows, dim, rngs))
    } else {
        None
    };
    let mut out = Vec::with_capacity(xs.len());
    for (x, z) in xs.iter().zip(zs) {
        let fresh;
        let xi = match (&shared, cfg.stochastic) {
            (Some(n), _) => Some(n),
            (None, true) => {
                fresh = noise_rows(rows, dim, rngs);
                Some(&fresh)
            }
            (None, false) => None,
        };
        let mut next = x.clone();
        for (i, v) in next.data_mut().iter_mut().enumerate() {
            let zi = z.data()[i];
            *v = zi + c.a * (*v - zi) + c.b * s.data()[i] + xi.map_or(0.0, |n| c.noise * n.data()[i]);
        }
        out.push(next);
    }
    Ok(out)
}

fn check_states(score: &impl ScoreModel, xs: &[Tensor], zs: &[Tensor], n_rngs: usize) -> Result<()> {
    if xs.len() != score.n_attributes() || zs.len() != xs.len() {
        return Err(DddmError::Contract(format!(
            "{} attributes but {} states and {} priors",
            score.n_attributes(),
            xs.len(),
            zs.len()
        )));
    }
    let shape = xs[0].shape();
    if xs.iter().chain(zs).any(|t| t.shape() != shape) || shape.len() != 2 || shape[0] != n_rngs {
        return Err(DddmError::shape(
            "reverse_step",
            format!("states {shape:?} with {n_rngs} generators"),
        ));
    }
    Ok(())
}

/// Terminal states and their average.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub output: Tensor,
    pub chains: Vec<Tensor>,
    /// Per row, the largest L2 distance between a chain and the average.
    pub discrepancy: Vec<f64>,
}

/// Generator for chain `index`; each output row owns one.
pub fn chain_rng(seed: u64, index: u64) -> ChaCha8Rng {
    seeded_rng(seed, STREAM_SAMPLER + index)
}

/// Run the reverse process from `t = 1` to `t_min`. Rows use generators
/// `first_chain, first_chain + 1, …` so results do not depend on batching.
pub fn sample(
    score: &impl ScoreModel,
    sched: &NoiseSchedule,
    priors: &[Tensor],
    cfg: &SamplerConfig,
    first_chain: u64,
) -> Result<SampleOutput> {
    let grid = cfg.grid(sched)?;
    if priors.is_empty() {
        return Err(DddmError::Contract("no priors".into()));
    }
    let rows = priors[0].rows();
    let dim = priors[0].cols();
    let mut rngs: Vec<ChaCha8Rng> = (0..rows as u64).map(|r| chain_rng(cfg.seed, first_chain + r)).collect();

    // fraction of the initial gap left after every step
    let r = match cfg.init {
        InitMode::Prior => 0.0,
        InitMode::Consistent => {
            let mut prod = 1.0;
            for w in grid.windows(2) {
                prod *= step_coefs(sched, cfg.mode, w[0], w[0] - w[1])?.a;
            }
            1.0 / prod
        }
    };
    let n = priors.len();
    let total: Vec<f64> = (0..rows * dim)
        .map(|i| priors.iter().map(|p| p.data()[i]).sum())
        .collect();
    let shared = cfg.share_noise.then(|| noise_rows(rows, dim, &mut rngs));
    let mut xs = Vec::with_capacity(n);
    for z in priors {
        let fresh;
        let xi = match &shared {
            Some(s) => s,
            None => {
                fresh = noise_rows(rows, dim, &mut rngs);
                &fresh
            }
        };
        let mut x = z.clone();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = (1.0 - r) * *v + r * total[i] + xi.data()[i];
        }
        xs.push(x);
    }
    for w in grid.windows(2) {
        xs = reverse_step(score, sched, &xs, priors, w[0], w[0] - w[1], cfg, &mut rngs)?;
    }
    let mut output = Tensor::zeros(vec![rows, dim]);
    for x in &xs {
        for (o, v) in output.data_mut().iter_mut().zip(x.data()) {
            *o += v / n as f64;
        }
    }
    let discrepancy = (0..rows)
        .map(|row| {
            xs.iter()
                .map(|x| {
                    x.row(row)
                        .iter()
                        .zip(output.row(row))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    if !output.is_finite() {
        return Err(DddmError::Numeric("non-finite sample".into()));
    }
    Ok(SampleOutput {
        output,
        chains: xs,
        discrepancy,
    })
}

/// Euler–Maruyama integration of the forward process from 0 to `t_end`.
pub fn simulate_forward_to<R: Rng + ?Sized>(
    sched: &NoiseSchedule,
    x0: &[f64],
    z: &[f64],
    t_end: f64,
    n_steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if x0.len() != z.len() {
        return Err(DddmError::shape(
            "simulate_forward",
            format!("{} vs {}", x0.len(), z.len()),
        ));
    }
    if n_steps == 0 || !(0.0..=1.0).contains(&t_end) {
        return Err(DddmError::Domain(format!("{n_steps} steps to t = {t_end}")));
    }
    let dt = t_end / n_steps as f64;
    let mut x = x0.to_vec();
    for k in 0..n_steps {
        let beta = sched.beta_unchecked(k as f64 * dt);
        let sd = (beta * dt).sqrt();
        for (xi, zi) in x.iter_mut().zip(z) {
            let e: f64 = rng.sample(StandardNormal);
            *xi += 0.5 * beta * (zi - *xi) * dt + sd * e;
        }
    }
    Ok(x)
}

pub fn simulate_forward<R: Rng + ?Sized>(
    sched: &NoiseSchedule,
    x0: &[f64],
    z: &[f64],
    n_steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    simulate_forward_to(sched, x0, z, 1.0, n_steps, rng)
}

/// Reverse sampling with priors from two sources and the blend condition.
/// `blend = 0` weights source A fully, `blend = 1` source B.
#[allow(clippy::too_many_arguments)]
pub fn mixer_demo(
    store: &ParamStore,
    ensemble: &Ensemble,
    sched: &NoiseSchedule,
    priors_a: &Tensor,
    priors_b: &Tensor,
    style: &Tensor,
    blend: f64,
    cfg: &SamplerConfig,
    first_chain: u64,
) -> Result<SampleOutput> {
    if !(0.0..=1.0).contains(&blend) {
        return Err(DddmError::Domain(format!("blend {blend} outside [0, 1]")));
    }
    if !ensemble.config.blend_condition {
        return Err(DddmError::Contract(
            "mixer needs an ensemble trained with blend conditioning".into(),
        ));
    }
    let score = LearnedScore {
        store,
        ensemble,
        sched,
        style,
        blend: Some(blend),
    };
    sample(&score, sched, &[priors_a.clone(), priors_b.clone()], cfg, first_chain)
}

/// Samples as CSV: a `# seed=… config=…` line, then columns `x0..x{d-1}`
/// followed by integer label columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDump {
    pub seed: u64,
    pub config_hash: String,
    pub samples: Tensor,
    pub labels: Vec<(String, Vec<usize>)>,
}

impl SampleDump {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let rows = self.samples.rows();
        if let Some((name, l)) = self.labels.iter().find(|(_, l)| l.len() != rows) {
            return Err(DddmError::shape(
                "SampleDump::write",
                format!("label {name} has {} rows, samples {rows}", l.len()),
            ));
        }
        writeln!(w, "# seed={} config={}", self.seed, self.config_hash)?;
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.samples.cols()).map(|j| format!("x{j}")).collect();
        header.extend(self.labels.iter().map(|(n, _)| n.clone()));
        out.write_record(&header)?;
        for r in 0..rows {
            let mut rec: Vec<String> = self.samples.row(r).iter().map(f64::to_string).collect();
            rec.extend(self.labels.iter().map(|(_, l)| l[r].to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let (meta, body) = match text.split_once('\n') {
            Some((first, rest)) if first.starts_with('#') => (first, rest),
            _ => return Err(DddmError::Format("line 1: expected '# seed=… config=…'".into())),
        };
        let (mut seed, mut config_hash) = (None, None);
        for kv in meta.trim_start_matches('#').split_whitespace() {
            match kv.split_once('=') {
                Some(("seed", v)) => seed = v.parse::<u64>().ok(),
                Some(("config", v)) => config_hash = Some(v.to_string()),
                _ => {}
            }
        }
        let (Some(seed), Some(config_hash)) = (seed, config_hash) else {
            return Err(DddmError::Format("line 1: missing seed or config".into()));
        };
        let mut rd = csv::ReaderBuilder::new().from_reader(body.as_bytes());
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        let dim = header.iter().take_while(|h| h.starts_with('x')).count();
        for (j, h) in header[..dim].iter().enumerate() {
            if *h != format!("x{j}") {
                return Err(DddmError::Format(format!(
                    "line 2: column {j} is '{h}', expected 'x{j}'"
                )));
            }
        }
        if dim == 0 {
            return Err(DddmError::Format("line 2: no sample columns".into()));
        }
        let mut data = Vec::new();
        let mut labels: Vec<(String, Vec<usize>)> = header[dim..].iter().map(|h| (h.clone(), Vec::new())).collect();
        for (i, rec) in rd.records().enumerate() {
            let line = i + 3;
            let rec = rec.map_err(|e| DddmError::Format(format!("line {line}: {e}")))?;
            for (j, field) in rec.iter().enumerate() {
                if j < dim {
                    let v: f64 = field.trim().parse().map_err(|_| {
                        DddmError::Format(format!("line {line}: column {} is not a number: '{field}'", header[j]))
                    })?;
                    data.push(v);
                } else {
                    let v: usize = field.trim().parse().map_err(|_| {
                        DddmError::Format(format!("line {line}: label {} is not an index: '{field}'", header[j]))
                    })?;
                    labels[j - dim].1.push(v);
                }
            }
        }
        let rows = data.len() / dim;
        Ok(Self {
            seed,
            config_hash,
            samples: Tensor::new(vec![rows, dim], data)?,
            labels,
        })
    }

    pub fn label(&self, name: &str) -> Option<&[usize]> {
        self.labels.iter().find(|(n, _)| n == name).map(|(_, l)| l.as_slice())
    }
}
