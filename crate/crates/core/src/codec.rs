//! Source/filter representations and the prior-producing encoders.
//!
//! A sample is summarised by three observations: per-frame style features
//! (pooled into a style vector), a scalar pitch (z-scored, then quantised
//! into one of [`PITCH_UNITS`] units) and content features (perturbed before
//! entering the filter encoder). The source encoder maps pitch and style to
//! `Z_src`, the filter encoder maps content and style to `Z_ftr`, and
//! `Z_src + Z_ftr` is regressed onto the clean target with an L1 loss.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Ensemble, NoiseDraw, StyleOrigin, StyleVar};
use crate::error::{DddmError, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Activation, Graph, Init, Linear, Mlp, ParamId, ParamStore, Tensor, Var};
use crate::toy::{PitchStats, ToyDataset, ToySample};

pub const PITCH_UNITS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    /// Width of one style frame.
    pub frame_dim: usize,
    pub style_dim: usize,
    pub content_dim: usize,
    pub data_dim: usize,
    pub pitch_embed_dim: usize,
    pub hidden: Vec<usize>,
    pub perturb_noise: f64,
    pub perturb_drop: f64,
    pub mixup_rate: f64,
    pub lambda_rec: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            frame_dim: 8,
            style_dim: 8,
            content_dim: 12,
            data_dim: 16,
            pitch_embed_dim: 8,
            hidden: vec![64, 64],
            perturb_noise: 0.1,
            perturb_drop: 0.25,
            mixup_rate: 0.5,
            lambda_rec: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleVector(pub Vec<f64>);

impl StyleVector {
    pub fn cosine(&self, other: &StyleVector) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        let na = self.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = other.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchRep {
    pub raw: f64,
    pub normalized: f64,
    pub unit: usize,
}

/// Which statistics z-score the pitch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitchNormMode {
    /// Training-set statistics of the sample's style.
    PerStyle,
    /// Statistics of the utterance group being encoded.
    PerSentence,
    /// One set of statistics pooled over every style.
    Global,
}

pub fn quantize_pitch(normalized: f64) -> usize {
    let bin = ((normalized + 3.0) / 6.0 * PITCH_UNITS as f64).floor();
    bin.clamp(0.0, (PITCH_UNITS - 1) as f64) as usize
}

pub fn normalize_pitch(p: f64, stats: &PitchStats) -> Result<PitchRep> {
    if !(stats.std.is_finite() && stats.std > 0.0) {
        return Err(DddmError::DegenerateStats(format!("pitch std {}", stats.std)));
    }
    let normalized = (p - stats.mean) / stats.std;
    Ok(PitchRep {
        raw: p,
        normalized,
        unit: quantize_pitch(normalized),
    })
}

/// Pitch representations for a group of samples. `train` supplies the
/// per-style and global statistics; per-sentence mode uses the statistics
/// of each style's samples within `samples` itself.
pub fn pitch_reps(samples: &[&ToySample], mode: PitchNormMode, train: &ToyDataset) -> Result<Vec<PitchRep>> {
    let local: Vec<Option<PitchStats>> = match mode {
        PitchNormMode::PerSentence => {
            let n = train
                .pitch_stats
                .len()
                .max(samples.iter().map(|s| s.style_id + 1).max().unwrap_or(0));
            let mut groups = vec![Vec::new(); n];
            for s in samples {
                groups[s.style_id].push(s.pitch);
            }
            groups.iter().map(|g| PitchStats::from_values(g)).collect()
        }
        _ => Vec::new(),
    };
    samples
        .iter()
        .map(|s| {
            let stats = match mode {
                PitchNormMode::Global => Some(train.global_pitch),
                PitchNormMode::PerStyle => train.pitch_stats.get(s.style_id).copied().flatten(),
                PitchNormMode::PerSentence => local[s.style_id],
            };
            let stats = stats
                .ok_or_else(|| DddmError::DegenerateStats(format!("no pitch statistics for style {}", s.style_id)))?;
            normalize_pitch(s.pitch, &stats)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContentRep {
    pub features: Vec<f64>,
    pub perturbed: bool,
}

impl ContentRep {
    pub fn clean(features: Vec<f64>) -> Self {
        Self {
            features,
            perturbed: false,
        }
    }
}

/// Additive `N(0, noise²)` plus an independent `drop`-probability zero mask
/// per coordinate.
pub fn perturb_content<R: Rng + ?Sized>(c: &ContentRep, noise: f64, drop: f64, rng: &mut R) -> ContentRep {
    let features = c
        .features
        .iter()
        .map(|&v| {
            let e: f64 = rng.sample(StandardNormal);
            let keep = !rng.random_bool(drop.clamp(0.0, 1.0));
            if keep {
                v + noise * e
            } else {
                0.0
            }
        })
        .collect();
    ContentRep {
        features,
        perturbed: true,
    }
}

/// Reconstruction target built from clean observations only.
#[derive(Debug, Clone, Copy)]
pub struct CleanTarget(Var);

impl CleanTarget {
    pub fn new(g: &mut Graph, x: Tensor) -> Result<Self> {
        Ok(Self(g.input(x)?))
    }

    pub fn var(self) -> Var {
        self.0
    }
}

/// One permutation of the batch and a Bernoulli mask; element `i` takes
/// style `perm[i]` where the mask is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixupDraw {
    pub perm: Vec<usize>,
    pub mask: Vec<bool>,
}

impl MixupDraw {
    pub fn sample<R: Rng + ?Sized>(batch: usize, rate: f64, rng: &mut R) -> Self {
        let mut perm: Vec<usize> = (0..batch).collect();
        perm.shuffle(rng);
        let mask = (0..batch).map(|_| rng.random_bool(rate.clamp(0.0, 1.0))).collect();
        Self { perm, mask }
    }

    pub fn identity(batch: usize) -> Self {
        Self {
            perm: (0..batch).collect(),
            mask: vec![false; batch],
        }
    }

    pub fn source_of(&self, i: usize) -> usize {
        if self.mask[i] {
            self.perm[i]
        } else {
            i
        }
    }

    /// `[B, B]` row-selection matrix.
    pub fn selection(&self) -> Tensor {
        let b = self.perm.len();
        let mut m = Tensor::zeros(vec![b, b]);
        for i in 0..b {
            m.row_mut(i)[self.source_of(i)] = 1.0;
        }
        m
    }
}

/// Styles of a batch reassigned by a mixup draw; the result is tagged mixed.
pub fn prior_mixup(g: &mut Graph, style: StyleVar, draw: &MixupDraw) -> Result<StyleVar> {
    let rows = g.value(style.var).rows();
    if rows == 0 || draw.perm.len() != rows {
        return Err(DddmError::shape(
            "prior_mixup",
            format!("draw for {} rows on a batch of {rows}", draw.perm.len()),
        ));
    }
    let sel = g.input(draw.selection())?;
    Ok(StyleVar {
        var: g.tape.matmul(sel, style.var)?,
        origin: StyleOrigin::Mixed,
    })
}

/// Inputs of a batch, prepared outside the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecBatch {
    /// `[B · n_frames, frame_dim]`, grouped by sample.
    pub frames: Tensor,
    pub n_frames: usize,
    pub units: Vec<usize>,
    /// `[B, content_dim]`.
    pub content: Tensor,
    /// `[B, data_dim]`.
    pub x: Tensor,
}

impl CodecBatch {
    pub fn rows(&self) -> usize {
        self.units.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    pub config: CodecConfig,
    pub style_dense: Linear,
    pub pitch_embed: ParamId,
    pub source: Mlp,
    pub filter: Mlp,
}

#[derive(Debug, Clone, Copy)]
pub struct Priors {
    pub z_src: Var,
    pub z_ftr: Var,
}

impl Codec {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: CodecConfig, rng: &mut R) -> Result<Self> {
        let c = &config;
        let style_dense = Linear::new(store, "codec.style", c.frame_dim, c.style_dim, Init::XavierUniform, rng)?;
        let limit = 1.0;
        let embed = (0..PITCH_UNITS * c.pitch_embed_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        let pitch_embed = store.add(
            "codec.pitch_embed",
            Tensor::new(vec![PITCH_UNITS, c.pitch_embed_dim], embed)?,
        )?;
        let dims = |input: usize| {
            let mut d = vec![input];
            d.extend(&c.hidden);
            d.push(c.data_dim);
            d
        };
        let source = Mlp::new(
            store,
            "codec.source",
            &dims(c.pitch_embed_dim + c.style_dim),
            Activation::Tanh,
            true,
            rng,
        )?;
        let filter = Mlp::new(
            store,
            "codec.filter",
            &dims(c.content_dim + c.style_dim),
            Activation::Tanh,
            true,
            rng,
        )?;
        Ok(Self {
            config,
            style_dense,
            pitch_embed,
            source,
            filter,
        })
    }

    /// Every parameter owned by the encoders.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.style_dense.weight, self.style_dense.bias, self.pitch_embed];
        for l in self.source.layers().iter().chain(self.filter.layers()) {
            ids.push(l.weight);
            ids.push(l.bias);
        }
        ids
    }

    /// Mean over each sample's frames, one dense layer, tanh.
    pub fn encode_style(&self, g: &mut Graph, frames: Var, n_frames: usize) -> Result<StyleVar> {
        if n_frames == 0 || g.value(frames).rows() == 0 {
            return Err(DddmError::Contract("style encoder needs at least one frame".into()));
        }
        let pooled = g.tape.mean_pool(frames, n_frames)?;
        let h = self.style_dense.forward(g, pooled)?;
        Ok(StyleVar::original(g.tape.tanh(h)?))
    }

    pub fn eval_style(&self, store: &ParamStore, frames: &[Vec<f64>]) -> Result<StyleVector> {
        if frames.is_empty() {
            return Err(DddmError::Contract("style encoder needs at least one frame".into()));
        }
        let mut g = Graph::new(store);
        let f = g.input(Tensor::from_rows(frames)?)?;
        let s = self.encode_style(&mut g, f, frames.len())?;
        Ok(StyleVector(g.value(s.var).data().to_vec()))
    }

    pub fn one_hot(units: &[usize]) -> Result<Tensor> {
        let mut t = Tensor::zeros(vec![units.len(), PITCH_UNITS]);
        for (i, &u) in units.iter().enumerate() {
            if u >= PITCH_UNITS {
                return Err(DddmError::Domain(format!("pitch unit {u} outside [0, {PITCH_UNITS})")));
            }
            t.row_mut(i)[u] = 1.0;
        }
        Ok(t)
    }

    pub fn encode_source(&self, g: &mut Graph, units: &[usize], style: StyleVar) -> Result<Var> {
        let rows = g.value(style.var).rows();
        if units.len() != rows {
            return Err(DddmError::shape(
                "encode_source",
                format!("{} units for {rows} styles", units.len()),
            ));
        }
        let oh = g.input(Self::one_hot(units)?)?;
        let table = g.param(self.pitch_embed)?;
        let e = g.tape.matmul(oh, table)?;
        let inp = g.tape.concat(&[e, style.var])?;
        self.source.forward(g, inp)
    }

    pub fn encode_filter(&self, g: &mut Graph, content: Var, style: StyleVar) -> Result<Var> {
        let (c, s) = (g.value(content).shape(), g.value(style.var).shape());
        if c.len() != 2 || c[1] != self.config.content_dim || c[0] != s[0] {
            return Err(DddmError::shape("encode_filter", format!("content {c:?}, style {s:?}")));
        }
        let inp = g.tape.concat(&[content, style.var])?;
        self.filter.forward(g, inp)
    }

    pub fn priors(&self, g: &mut Graph, units: &[usize], content: Var, style: StyleVar) -> Result<Priors> {
        Ok(Priors {
            z_src: self.encode_source(g, units, style)?,
            z_ftr: self.encode_filter(g, content, style)?,
        })
    }
}

/// Mean absolute error between the target and `Z_src + Z_ftr`.
pub fn recon_loss(g: &mut Graph, target: CleanTarget, priors: Priors) -> Result<Var> {
    let sum = g.tape.add(priors.z_src, priors.z_ftr)?;
    g.tape.l1_loss(target.var(), sum)
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub diff: Var,
    pub rec: Var,
}

/// `L_diff(mixed priors, original style) + λ_rec L_rec(original priors)`.
/// The diffusion branch sees detached priors, so the encoders learn from
/// reconstruction alone.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    sched: &NoiseSchedule,
    ensemble: &Ensemble,
    target: CleanTarget,
    priors_mixed: &[Var],
    priors_original: Priors,
    style: StyleVar,
    times: &[f64],
    noise: &NoiseDraw,
    lambda_rec: f64,
) -> Result<LossParts> {
    let detached = priors_mixed
        .iter()
        .map(|&p| g.tape.detach(p))
        .collect::<Result<Vec<_>>>()?;
    let x0 = g.tape.detach(target.var())?;
    let diff = ensemble.diffusion_loss(g, sched, x0, &detached, style, times, noise, None)?;
    let rec = recon_loss(g, target, priors_original)?;
    let weighted = g.tape.scale(rec, lambda_rec)?;
    let total = g.tape.add(diff, weighted)?;
    Ok(LossParts { total, diff, rec })
}
