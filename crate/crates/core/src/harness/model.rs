//! Encoders and denoisers bundled with their training and conversion paths.

use rand::Rng;

use crate::codec::{
    perturb_content, pitch_reps, prior_mixup, total_loss, CleanTarget, Codec, CodecBatch, ContentRep, MixupDraw,
    PitchNormMode, Priors,
};
use crate::ensemble::{Ensemble, NoiseDraw, StyleVar};
use crate::error::{DddmError, Result};
use crate::harness::config::{Ablation, RunConfig};
use crate::sampler::{sample, LearnedScore, SampleOutput, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::seeded_rng;
use crate::tensor::{AdamW, Graph, ParamStore, Tensor, Var};
use crate::toy::{ToyDataset, ToySample};

pub const STREAM_INIT: u64 = 11;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub diff: f64,
    pub rec: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub store: ParamStore,
    pub codec: Codec,
    pub ensemble: Ensemble,
    pub ablation: Ablation,
    pub sched: NoiseSchedule,
    pub lambda_rec: f64,
    pub trained: bool,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let mut rng = seeded_rng(cfg.seed, STREAM_INIT);
        let mut store = ParamStore::new();
        let codec = Codec::new(&mut store, cfg.codec_config(), &mut rng)?;
        let ensemble = Ensemble::new(&mut store, cfg.ensemble_config(), &mut rng)?;
        Ok(Self {
            store,
            codec,
            ensemble,
            ablation: cfg.ablation,
            sched: cfg.schedule()?,
            lambda_rec: cfg.lambda_rec,
            trained: false,
        })
    }

    pub fn optimizer(&self, cfg: &RunConfig) -> AdamW {
        let mut opt = AdamW::new(cfg.optimizer(), &self.store);
        self.ensemble.apply_lr_scales(&mut opt);
        opt
    }

    pub fn training_pitch_mode(&self) -> PitchNormMode {
        if self.ablation.no_pitch_norm {
            PitchNormMode::Global
        } else {
            PitchNormMode::PerStyle
        }
    }

    /// Tensors for a batch. Content is perturbed when `perturb` is given.
    pub fn prepare<R: Rng + ?Sized>(
        &self,
        samples: &[&ToySample],
        stats: &ToyDataset,
        mode: PitchNormMode,
        perturb: Option<&mut R>,
    ) -> Result<CodecBatch> {
        if samples.is_empty() {
            return Err(DddmError::Contract("empty batch".into()));
        }
        let c = &self.codec.config;
        let n_frames = samples[0].style_frames.len();
        let mut frames = Vec::with_capacity(samples.len() * n_frames);
        for s in samples {
            if s.style_frames.len() != n_frames {
                return Err(DddmError::shape("prepare", "samples with different frame counts"));
            }
            frames.extend(s.style_frames.iter().map(Vec::as_slice));
        }
        let units = pitch_reps(samples, mode, stats)?.iter().map(|p| p.unit).collect();
        let content: Vec<Vec<f64>> = match perturb {
            Some(rng) => samples
                .iter()
                .map(|s| {
                    perturb_content(
                        &ContentRep::clean(s.content.clone()),
                        c.perturb_noise,
                        c.perturb_drop,
                        rng,
                    )
                    .features
                })
                .collect(),
            None => samples.iter().map(|s| s.content.clone()).collect(),
        };
        Ok(CodecBatch {
            frames: Tensor::from_rows(&frames)?,
            n_frames,
            units,
            content: Tensor::from_rows(&content)?,
            x: Tensor::from_rows(&samples.iter().map(|s| s.x.as_slice()).collect::<Vec<_>>())?,
        })
    }

    fn zero_priors(&self, g: &mut Graph, rows: usize) -> Result<Priors> {
        let d = self.codec.config.data_dim;
        Ok(Priors {
            z_src: g.input(Tensor::zeros(vec![rows, d]))?,
            z_ftr: g.input(Tensor::zeros(vec![rows, d]))?,
        })
    }

    fn priors(&self, g: &mut Graph, batch: &CodecBatch, content: Var, style: StyleVar) -> Result<Priors> {
        if self.ablation.zero_prior {
            self.zero_priors(g, batch.rows())
        } else {
            self.codec.priors(g, &batch.units, content, style)
        }
    }

    /// Priors in the layout the ensemble expects.
    fn ensemble_priors(&self, g: &mut Graph, p: Priors) -> Result<Vec<Var>> {
        if self.ensemble.n_attributes() == 1 {
            Ok(vec![g.tape.add(p.z_src, p.z_ftr)?])
        } else {
            Ok(vec![p.z_src, p.z_ftr])
        }
    }

    /// One optimiser step on `L_diff + λ_rec L_rec`; losses are pre-step.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        opt: &mut AdamW,
        batch: &CodecBatch,
        rng: &mut R,
    ) -> Result<StepLosses> {
        let rows = batch.rows();
        let draw = if self.codec.config.mixup_rate > 0.0 {
            MixupDraw::sample(rows, self.codec.config.mixup_rate, rng)
        } else {
            MixupDraw::identity(rows)
        };
        let times: Vec<f64> = (0..rows).map(|_| rng.random_range(self.sched.t_min..=1.0)).collect();
        let noise = NoiseDraw::sample(
            rows,
            self.codec.config.data_dim,
            self.ensemble.n_attributes(),
            self.ensemble.config.share_noise,
            rng,
        );
        let (losses, grads) = {
            let mut g = Graph::new(&self.store);
            let frames = g.input(batch.frames.clone())?;
            let content = g.input(batch.content.clone())?;
            let target = CleanTarget::new(&mut g, batch.x.clone())?;
            let style = self.codec.encode_style(&mut g, frames, batch.n_frames)?;
            let original = self.priors(&mut g, batch, content, style)?;
            let mixed = if self.codec.config.mixup_rate > 0.0 {
                let s_r = prior_mixup(&mut g, style, &draw)?;
                self.priors(&mut g, batch, content, s_r)?
            } else {
                original
            };
            let mixed = self.ensemble_priors(&mut g, mixed)?;
            let parts = total_loss(
                &mut g,
                &self.sched,
                &self.ensemble,
                target,
                &mixed,
                original,
                style,
                &times,
                &noise,
                self.lambda_rec,
            )?;
            let grads = g.tape.backward(parts.total)?;
            let losses = StepLosses {
                diff: g.value(parts.diff).item(),
                rec: g.value(parts.rec).item(),
                total: g.value(parts.total).item(),
            };
            (losses, g.param_grads(&grads))
        };
        if !losses.total.is_finite() {
            return Err(DddmError::Numeric(format!("loss {}", losses.total)));
        }
        opt.step(&mut self.store, &grads)?;
        Ok(losses)
    }

    /// Style vectors `[rows, style_dim]`, one per frame group.
    pub fn styles(&self, frame_groups: &[&[Vec<f64>]]) -> Result<Tensor> {
        let rows = frame_groups
            .iter()
            .map(|f| self.codec.eval_style(&self.store, f).map(|s| s.0))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }

    /// Priors for `sources` rendered in the given styles.
    pub fn eval_priors(&self, batch: &CodecBatch, style: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new(&self.store);
        let content = g.input(batch.content.clone())?;
        let s = StyleVar::original(g.input(style.clone())?);
        let p = self.priors(&mut g, batch, content, s)?;
        let p = self.ensemble_priors(&mut g, p)?;
        Ok(p.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Convert every source to the style pooled from the matching entry of
    /// `targets`.
    pub fn convert(
        &self,
        sources: &[&ToySample],
        targets: &[&[Vec<f64>]],
        stats: &ToyDataset,
        mode: PitchNormMode,
        sampler: &SamplerConfig,
        first_chain: u64,
    ) -> Result<SampleOutput> {
        if !self.trained {
            return Err(DddmError::Contract("model has not been trained".into()));
        }
        if sources.len() != targets.len() {
            return Err(DddmError::shape(
                "convert",
                format!("{} sources, {} targets", sources.len(), targets.len()),
            ));
        }
        let mode = if self.ablation.no_pitch_norm {
            PitchNormMode::Global
        } else {
            mode
        };
        let batch = self.prepare::<rand_chacha::ChaCha8Rng>(sources, stats, mode, None)?;
        let style = self.styles(targets)?;
        let priors = self.eval_priors(&batch, &style)?;
        let score = LearnedScore {
            store: &self.store,
            ensemble: &self.ensemble,
            sched: &self.sched,
            style: &style,
            blend: None,
        };
        sample(&score, &self.sched, &priors, sampler, first_chain)
    }

    /// Mean L1 between `Z_src + Z_ftr` and the clean targets.
    pub fn recon_l1(&self, samples: &[&ToySample], stats: &ToyDataset) -> Result<f64> {
        let batch = self.prepare::<rand_chacha::ChaCha8Rng>(samples, stats, self.training_pitch_mode(), None)?;
        let frames: Vec<&[Vec<f64>]> = samples.iter().map(|s| s.style_frames.as_slice()).collect();
        let style = self.styles(&frames)?;
        let priors = self.eval_priors(&batch, &style)?;
        let mut total = 0.0;
        for (i, v) in batch.x.data().iter().enumerate() {
            let z: f64 = priors.iter().map(|p| p.data()[i]).sum();
            total += (v - z).abs();
        }
        Ok(total / batch.x.len() as f64)
    }
}
