//! Flat `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::codec::{CodecConfig, PitchNormMode};
use crate::ensemble::EnsembleConfig;
use crate::error::{DddmError, Result};
use crate::sampler::{InitMode, SamplerConfig, SolverMode};
use crate::schedule::NoiseSchedule;
use crate::tensor::AdamWConfig;
use crate::toy::ToyConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablation {
    pub no_mixup: bool,
    pub single_denoiser: bool,
    pub no_pitch_norm: bool,
    pub zero_prior: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 4] = ["no_mixup", "single_denoiser", "no_pitch_norm", "zero_prior"];

    pub fn only(name: &str) -> Result<Self> {
        let mut a = Self::default();
        match name {
            "no_mixup" => a.no_mixup = true,
            "single_denoiser" => a.single_denoiser = true,
            "no_pitch_norm" => a.no_pitch_norm = true,
            "zero_prior" => a.zero_prior = true,
            "baseline" => {}
            other => return Err(DddmError::Config(format!("unknown ablation {other}"))),
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub toy: ToyConfig,
    pub n_train_per_style: usize,
    pub n_test_per_style: usize,
    /// Utterances of the held-out style available for adaptation.
    pub n_adapt: usize,
    /// Style kept out of training for adaptation; `None` trains on all.
    pub held_out_style: Option<usize>,
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_min: f64,
    pub hidden: Vec<usize>,
    pub mlp_lr_scale: f64,
    pub share_noise: bool,
    pub codec_hidden: Vec<usize>,
    pub pitch_embed_dim: usize,
    pub perturb_noise: f64,
    pub perturb_drop: f64,
    pub mixup_rate: f64,
    pub lambda_rec: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ablation: Ablation,
    pub sampler_steps: usize,
    pub sampler_mode: SolverMode,
    pub sampler_init: InitMode,
    pub inference_pitch_norm: PitchNormMode,
    pub record_wall_time: bool,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        let sched = NoiseSchedule::default();
        let codec = CodecConfig::default();
        let ens = EnsembleConfig::default();
        Self {
            seed: 17,
            toy: ToyConfig::default(),
            n_train_per_style: 64,
            n_test_per_style: 16,
            n_adapt: 4,
            held_out_style: Some(7),
            beta_min: sched.beta_min,
            beta_max: sched.beta_max,
            t_min: sched.t_min,
            hidden: ens.hidden,
            mlp_lr_scale: ens.mlp_lr_scale,
            share_noise: ens.share_noise,
            codec_hidden: codec.hidden,
            pitch_embed_dim: codec.pitch_embed_dim,
            perturb_noise: codec.perturb_noise,
            perturb_drop: codec.perturb_drop,
            mixup_rate: codec.mixup_rate,
            lambda_rec: codec.lambda_rec,
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            lr_decay: opt.lr_decay,
            batch_size: 64,
            epochs: 200,
            ablation: Ablation::default(),
            sampler_steps: 30,
            sampler_mode: SolverMode::Em,
            sampler_init: InitMode::Consistent,
            inference_pitch_norm: PitchNormMode::PerStyle,
            record_wall_time: false,
            checkpoint_every: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DddmError::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(DddmError::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn mode_name(m: SolverMode) -> &'static str {
    match m {
        SolverMode::Em => "em",
        SolverMode::Ml => "ml",
    }
}

pub fn parse_mode(key: &str, v: &str) -> Result<SolverMode> {
    match v {
        "em" => Ok(SolverMode::Em),
        "ml" => Ok(SolverMode::Ml),
        _ => Err(DddmError::Config(format!("bad solver {v:?} for {key}"))),
    }
}

fn pitch_mode_name(m: PitchNormMode) -> &'static str {
    match m {
        PitchNormMode::PerStyle => "per_style",
        PitchNormMode::PerSentence => "per_sentence",
        PitchNormMode::Global => "global",
    }
}

impl RunConfig {
    /// Canonical `(key, value)` pairs in file order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let t = &self.toy;
        vec![
            ("seed", self.seed.to_string()),
            ("toy.n_styles", t.n_styles.to_string()),
            ("toy.n_tokens", t.n_tokens.to_string()),
            ("toy.data_dim", t.data_dim.to_string()),
            ("toy.style_dim", t.style_dim.to_string()),
            ("toy.token_dim", t.token_dim.to_string()),
            ("toy.content_dim", t.content_dim.to_string()),
            ("toy.n_frames", t.n_frames.to_string()),
            ("toy.noise_std", t.noise_std.to_string()),
            ("toy.frame_noise", t.frame_noise.to_string()),
            ("toy.style_jitter", t.style_jitter.to_string()),
            ("toy.content_leak", t.content_leak.to_string()),
            ("toy.content_noise", t.content_noise.to_string()),
            ("toy.content_gain", t.content_gain.to_string()),
            ("toy.style_gain", t.style_gain.to_string()),
            ("toy.pitch_gain", t.pitch_gain.to_string()),
            ("n_train_per_style", self.n_train_per_style.to_string()),
            ("n_test_per_style", self.n_test_per_style.to_string()),
            ("n_adapt", self.n_adapt.to_string()),
            (
                "held_out_style",
                self.held_out_style.map_or("none".into(), |s| s.to_string()),
            ),
            ("beta_min", self.beta_min.to_string()),
            ("beta_max", self.beta_max.to_string()),
            ("t_min", self.t_min.to_string()),
            ("hidden", list(&self.hidden)),
            ("mlp_lr_scale", self.mlp_lr_scale.to_string()),
            ("share_noise", self.share_noise.to_string()),
            ("codec_hidden", list(&self.codec_hidden)),
            ("pitch_embed_dim", self.pitch_embed_dim.to_string()),
            ("perturb_noise", self.perturb_noise.to_string()),
            ("perturb_drop", self.perturb_drop.to_string()),
            ("mixup_rate", self.mixup_rate.to_string()),
            ("lambda_rec", self.lambda_rec.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("no_mixup", self.ablation.no_mixup.to_string()),
            ("single_denoiser", self.ablation.single_denoiser.to_string()),
            ("no_pitch_norm", self.ablation.no_pitch_norm.to_string()),
            ("zero_prior", self.ablation.zero_prior.to_string()),
            ("sampler_steps", self.sampler_steps.to_string()),
            ("sampler_mode", mode_name(self.sampler_mode).into()),
            (
                "sampler_init",
                match self.sampler_init {
                    InitMode::Prior => "prior",
                    InitMode::Consistent => "consistent",
                }
                .into(),
            ),
            (
                "inference_pitch_norm",
                pitch_mode_name(self.inference_pitch_norm).into(),
            ),
            ("record_wall_time", self.record_wall_time.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.toy;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "toy.n_styles" => t.n_styles = parse(key, v)?,
            "toy.n_tokens" => t.n_tokens = parse(key, v)?,
            "toy.data_dim" => t.data_dim = parse(key, v)?,
            "toy.style_dim" => t.style_dim = parse(key, v)?,
            "toy.token_dim" => t.token_dim = parse(key, v)?,
            "toy.content_dim" => t.content_dim = parse(key, v)?,
            "toy.n_frames" => t.n_frames = parse(key, v)?,
            "toy.noise_std" => t.noise_std = parse(key, v)?,
            "toy.frame_noise" => t.frame_noise = parse(key, v)?,
            "toy.style_jitter" => t.style_jitter = parse(key, v)?,
            "toy.content_leak" => t.content_leak = parse(key, v)?,
            "toy.content_noise" => t.content_noise = parse(key, v)?,
            "toy.content_gain" => t.content_gain = parse(key, v)?,
            "toy.style_gain" => t.style_gain = parse(key, v)?,
            "toy.pitch_gain" => t.pitch_gain = parse(key, v)?,
            "n_train_per_style" => self.n_train_per_style = parse(key, v)?,
            "n_test_per_style" => self.n_test_per_style = parse(key, v)?,
            "n_adapt" => self.n_adapt = parse(key, v)?,
            "held_out_style" => {
                self.held_out_style = match v {
                    "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "beta_min" => self.beta_min = parse(key, v)?,
            "beta_max" => self.beta_max = parse(key, v)?,
            "t_min" => self.t_min = parse(key, v)?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "mlp_lr_scale" => self.mlp_lr_scale = parse(key, v)?,
            "share_noise" => self.share_noise = parse_bool(key, v)?,
            "codec_hidden" => self.codec_hidden = parse_list(key, v)?,
            "pitch_embed_dim" => self.pitch_embed_dim = parse(key, v)?,
            "perturb_noise" => self.perturb_noise = parse(key, v)?,
            "perturb_drop" => self.perturb_drop = parse(key, v)?,
            "mixup_rate" => self.mixup_rate = parse(key, v)?,
            "lambda_rec" => self.lambda_rec = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "no_mixup" => self.ablation.no_mixup = parse_bool(key, v)?,
            "single_denoiser" => self.ablation.single_denoiser = parse_bool(key, v)?,
            "no_pitch_norm" => self.ablation.no_pitch_norm = parse_bool(key, v)?,
            "zero_prior" => self.ablation.zero_prior = parse_bool(key, v)?,
            "sampler_steps" => self.sampler_steps = parse(key, v)?,
            "sampler_mode" => self.sampler_mode = parse_mode(key, v)?,
            "sampler_init" => {
                self.sampler_init = match v {
                    "prior" => InitMode::Prior,
                    "consistent" => InitMode::Consistent,
                    _ => return Err(DddmError::Config(format!("bad sampler_init {v:?}"))),
                }
            }
            "inference_pitch_norm" => {
                self.inference_pitch_norm = match v {
                    "per_style" => PitchNormMode::PerStyle,
                    "per_sentence" => PitchNormMode::PerSentence,
                    "global" => PitchNormMode::Global,
                    _ => return Err(DddmError::Config(format!("bad inference_pitch_norm {v:?}"))),
                }
            }
            "record_wall_time" => self.record_wall_time = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            _ => return Err(DddmError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DddmError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| DddmError::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DddmError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.n_train_per_style == 0 || self.n_test_per_style == 0 || self.n_adapt == 0 {
            return bad("dataset sizes must be positive");
        }
        if !(0.0..=1.0).contains(&self.mixup_rate) || !(0.0..=1.0).contains(&self.perturb_drop) {
            return bad("rates must lie in [0, 1]");
        }
        if self.lambda_rec < 0.0 || self.lr < 0.0 || self.perturb_noise < 0.0 {
            return bad("weights and learning rate must be non-negative");
        }
        if self.sampler_steps == 0 {
            return bad("sampler_steps must be positive");
        }
        if let Some(h) = self.held_out_style {
            if h >= self.toy.n_styles {
                return bad("held_out_style out of range");
            }
            if self.toy.n_styles < 2 {
                return bad("holding out a style needs at least two styles");
            }
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.beta_min, self.beta_max, self.t_min).map_err(|e| DddmError::Config(e.to_string()))
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            lr_decay: self.lr_decay,
        }
    }

    pub fn toy_config(&self) -> ToyConfig {
        ToyConfig {
            seed: self.seed,
            ..self.toy.clone()
        }
    }

    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            frame_dim: self.toy.style_dim,
            style_dim: self.toy.style_dim,
            content_dim: self.toy.content_dim,
            data_dim: self.toy.data_dim,
            pitch_embed_dim: self.pitch_embed_dim,
            hidden: self.codec_hidden.clone(),
            perturb_noise: self.perturb_noise,
            perturb_drop: self.perturb_drop,
            mixup_rate: if self.ablation.no_mixup { 0.0 } else { self.mixup_rate },
            lambda_rec: self.lambda_rec,
        }
    }

    pub fn ensemble_config(&self) -> EnsembleConfig {
        EnsembleConfig {
            n_attributes: if self.ablation.single_denoiser { 1 } else { 2 },
            share_noise: self.share_noise,
            data_dim: self.toy.data_dim,
            style_dim: self.toy.style_dim,
            hidden: self.hidden.clone(),
            mlp_lr_scale: self.mlp_lr_scale,
            ..EnsembleConfig::default()
        }
    }

    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            n_steps: self.sampler_steps,
            mode: self.sampler_mode,
            seed,
            share_noise: self.share_noise,
            init: self.sampler_init,
            ..SamplerConfig::default()
        }
    }

    pub fn training_styles(&self) -> Vec<usize> {
        (0..self.toy.n_styles)
            .filter(|&s| Some(s) != self.held_out_style)
            .collect()
    }
}
