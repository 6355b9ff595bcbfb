//! Synthetic source/filter world.
//!
//! Every observation is linear in known factors,
//!
//! ```text
//! x = A_ftr (e_token ⊕ g) + A_src (φ(v) ⊕ g) + η,   η ~ N(0, σ² I)
//! ```
//!
//! where `g` is the utterance's style latent (the style's latent plus a
//! per-utterance offset), `v` is the pitch on a fixed reference scale shared
//! by all styles and `φ` are the first four normalised Hermite polynomials.
//! Given the factors the data is Gaussian, which makes the forward marginal
//! and its score exact.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DddmError, Result};
use crate::schedule::NoiseSchedule;
use crate::seeded_rng;

const STREAM_GENERATOR: u64 = 0;
const STREAM_DEFAULT_DATASET: u64 = 1;
const STREAM_PROJECTIONS: u64 = 7;

pub const PITCH_FEATURES: usize = 4;
/// Pitch is measured as `(p − PITCH_REFERENCE.0) / PITCH_REFERENCE.1`.
pub const PITCH_REFERENCE: (f64, f64) = (175.0, 50.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub n_styles: usize,
    pub n_tokens: usize,
    pub data_dim: usize,
    pub style_dim: usize,
    /// Width of the latent token embedding.
    pub token_dim: usize,
    /// Width of the observable content features.
    pub content_dim: usize,
    pub n_frames: usize,
    pub noise_std: f64,
    pub frame_noise: f64,
    /// Per-coordinate std of an utterance's offset from its style latent.
    pub style_jitter: f64,
    /// Fraction of the style latent that bleeds into content features.
    pub content_leak: f64,
    pub content_noise: f64,
    pub content_gain: f64,
    pub style_gain: f64,
    pub pitch_gain: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            n_styles: 8,
            n_tokens: 12,
            data_dim: 16,
            style_dim: 8,
            token_dim: 4,
            content_dim: 12,
            n_frames: 8,
            noise_std: 0.05,
            frame_noise: 0.3,
            style_jitter: 0.35,
            content_leak: 0.3,
            content_noise: 0.02,
            content_gain: 0.7,
            style_gain: 0.5,
            pitch_gain: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchStats {
    pub mean: f64,
    pub std: f64,
}

impl PitchStats {
    /// Population statistics; `None` for an empty slice.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

/// Ground-truth factors of one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub token: usize,
    pub pitch: f64,
    pub style: usize,
    /// The utterance's style latent.
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub x: Vec<f64>,
    pub content_token: usize,
    pub pitch: f64,
    pub style_id: usize,
    pub latent: Vec<f64>,
    /// Observable content features (the self-supervised feature analog).
    pub content: Vec<f64>,
    pub style_frames: Vec<Vec<f64>>,
}

impl ToySample {
    pub fn condition(&self) -> Condition {
        Condition {
            token: self.content_token,
            pitch: self.pitch,
            style: self.style_id,
            latent: self.latent.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub samples: Vec<ToySample>,
    /// Indexed by style id; `None` for styles absent from the set.
    pub pitch_stats: Vec<Option<PitchStats>>,
    pub global_pitch: PitchStats,
}

impl ToyDataset {
    pub fn from_samples(samples: Vec<ToySample>, n_styles: usize) -> Result<Self> {
        let mut per_style: Vec<Vec<f64>> = vec![Vec::new(); n_styles];
        for s in &samples {
            if s.style_id >= n_styles {
                return Err(DddmError::Contract(format!("style {} out of range", s.style_id)));
            }
            per_style[s.style_id].push(s.pitch);
        }
        let all: Vec<f64> = samples.iter().map(|s| s.pitch).collect();
        let global_pitch = PitchStats::from_values(&all).ok_or_else(|| DddmError::Contract("empty dataset".into()))?;
        Ok(Self {
            pitch_stats: per_style.iter().map(|v| PitchStats::from_values(v)).collect(),
            samples,
            global_pitch,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn styles(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.samples.iter().map(|s| s.style_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Fixed generator parameters, all drawn from `config.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGenerator {
    pub config: ToyConfig,
    pub token_embed: Vec<Vec<f64>>,
    pub style_latent: Vec<Vec<f64>>,
    pub pitch_mean: Vec<f64>,
    pub pitch_std: Vec<f64>,
    /// `data_dim × (token_dim + style_dim)`
    pub a_ftr: Vec<Vec<f64>>,
    /// `data_dim × (4 + style_dim)`
    pub a_src: Vec<Vec<f64>>,
    pub content_map: Vec<Vec<f64>>,
    pub leak_map: Vec<Vec<f64>>,
}

fn gaussian_block<R: Rng>(rng: &mut R, rows: usize, cols: usize, gain: f64) -> Vec<Vec<f64>> {
    let sd = gain / (cols as f64).sqrt();
    (0..rows)
        .map(|_| (0..cols).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// Rows form an orthonormal basis (Gram–Schmidt on a Gaussian matrix).
fn random_orthonormal<R: Rng>(rng: &mut R, n: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let dot: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(vi, ri)| *vi -= dot * ri);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows
}

fn matvec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Normalised probabilists' Hermite polynomials He₁..He₄; zero mean and
/// identity covariance under a standard normal argument.
pub fn pitch_features(u: f64) -> [f64; PITCH_FEATURES] {
    let u2 = u * u;
    [
        u,
        (u2 - 1.0) / 2f64.sqrt(),
        (u2 * u - 3.0 * u) / 6f64.sqrt(),
        (u2 * u2 - 6.0 * u2 + 3.0) / 24f64.sqrt(),
    ]
}

/// Pitch on the shared reference scale.
pub fn pitch_level(pitch: f64) -> f64 {
    (pitch - PITCH_REFERENCE.0) / PITCH_REFERENCE.1
}

/// `E[pitch_features(v)]` for `v ~ N(mu, sd²)`.
pub fn hermite_means(mu: f64, sd: f64) -> [f64; PITCH_FEATURES] {
    let (m2, s2) = (mu * mu, sd * sd);
    let e2 = m2 + s2;
    let e3 = m2 * mu + 3.0 * mu * s2;
    let e4 = m2 * m2 + 6.0 * m2 * s2 + 3.0 * s2 * s2;
    [
        mu,
        (e2 - 1.0) / 2f64.sqrt(),
        (e3 - 3.0 * mu) / 6f64.sqrt(),
        (e4 - 6.0 * e2 + 3.0) / 24f64.sqrt(),
    ]
}

impl ToyGenerator {
    pub fn new(config: ToyConfig) -> Result<Self> {
        let c = &config;
        if c.n_styles < 2 || c.n_tokens < 2 || c.data_dim == 0 || c.style_dim == 0 || c.n_frames == 0 {
            return Err(DddmError::Config(
                "toy generator needs ≥2 styles/tokens and non-zero widths".into(),
            ));
        }
        if c.token_dim + PITCH_FEATURES + c.style_dim > c.data_dim {
            return Err(DddmError::Config(format!(
                "data_dim {} cannot hold token_dim + {PITCH_FEATURES} + style_dim",
                c.data_dim
            )));
        }
        if c.noise_std < 0.0 || c.frame_noise < 0.0 || c.content_noise < 0.0 || c.style_jitter < 0.0 {
            return Err(DddmError::Config("noise scales must be non-negative".into()));
        }
        let mut rng = seeded_rng(c.seed, STREAM_GENERATOR);

        // Tokens: greedy rejection keeps embeddings apart.
        let min_token_sep = (c.token_dim as f64).sqrt();
        let mut token_embed: Vec<Vec<f64>> = Vec::with_capacity(c.n_tokens);
        while token_embed.len() < c.n_tokens {
            let mut best: Option<(f64, Vec<f64>)> = None;
            for _ in 0..256 {
                let cand: Vec<f64> = (0..c.token_dim).map(|_| rng.sample(StandardNormal)).collect();
                let sep = token_embed.iter().map(|e| dist(e, &cand)).fold(f64::INFINITY, f64::min);
                if sep >= min_token_sep {
                    best = Some((sep, cand));
                    break;
                }
                if best.as_ref().is_none_or(|(b, _)| sep > *b) {
                    best = Some((sep, cand));
                }
            }
            token_embed.push(best.expect("at least one candidate").1);
        }

        // Styles: orthogonal directions when they fit, scaled to unit-size entries.
        let scale = (c.style_dim as f64).sqrt();
        let mut style_latent: Vec<Vec<f64>> = Vec::with_capacity(c.n_styles);
        for s in 0..c.n_styles {
            let mut v: Vec<f64> = (0..c.style_dim).map(|_| rng.sample(StandardNormal)).collect();
            if s < c.style_dim {
                for prev in &style_latent {
                    let dot: f64 = prev.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / (scale * scale);
                    for (vi, pi) in v.iter_mut().zip(prev) {
                        *vi -= dot * pi;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            style_latent.push(v.iter().map(|x| x * scale / norm).collect());
        }

        let mut pitch_mean: Vec<f64> = (0..c.n_styles)
            .map(|i| 100.0 + 150.0 * i as f64 / (c.n_styles - 1) as f64)
            .collect();
        pitch_mean.shuffle(&mut rng);
        let pitch_std: Vec<f64> = (0..c.n_styles).map(|_| rng.random_range(10.0..25.0)).collect();

        // Token, style and pitch each own a random subspace of observation
        // space; the maps are random within their subspace.
        let basis = random_orthonormal(&mut rng, c.data_dim);
        let (tok_dims, pitch_dims) = (0..c.token_dim, c.token_dim..c.token_dim + PITCH_FEATURES);
        let style_dims = c.token_dim + PITCH_FEATURES..c.token_dim + PITCH_FEATURES + c.style_dim;
        let mut block = |dims: std::ops::Range<usize>, cols: usize, gain: f64| {
            let inner = gaussian_block(&mut rng, dims.len(), cols, gain);
            (0..c.data_dim)
                .map(|r| {
                    (0..cols)
                        .map(|k| dims.clone().zip(&inner).map(|(d, row)| basis[d][r] * row[k]).sum())
                        .collect::<Vec<f64>>()
                })
                .collect::<Vec<_>>()
        };
        let join = |a: Vec<Vec<f64>>, b: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            a.into_iter()
                .zip(b)
                .map(|(mut r, s)| {
                    r.extend(s);
                    r
                })
                .collect()
        };
        let a_ftr_tok = block(tok_dims, c.token_dim, c.content_gain);
        let a_ftr_sty = block(style_dims.clone(), c.style_dim, c.style_gain);
        let a_src_pitch = block(pitch_dims, PITCH_FEATURES, c.pitch_gain);
        let a_src_sty = block(style_dims, c.style_dim, c.style_gain);
        let a_ftr = join(a_ftr_tok, a_ftr_sty);
        let a_src = join(a_src_pitch, a_src_sty);
        let content_map = gaussian_block(&mut rng, c.content_dim, c.token_dim, 1.0);
        let leak_map = gaussian_block(&mut rng, c.content_dim, c.style_dim, 1.0);

        let gen = Self {
            config,
            token_embed,
            style_latent,
            pitch_mean,
            pitch_std,
            a_ftr,
            a_src,
            content_map,
            leak_map,
        };
        let sep = gen.min_style_separation();
        if sep < 1.0 {
            return Err(DddmError::Config(format!(
                "style centroids only {sep:.3} apart; raise style_gain"
            )));
        }
        Ok(gen)
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    pub fn n_styles(&self) -> usize {
        self.config.n_styles
    }

    pub fn n_tokens(&self) -> usize {
        self.config.n_tokens
    }

    /// Pitch z-scored with the generator's (true) style statistics.
    pub fn true_normalized_pitch(&self, pitch: f64, style: usize) -> f64 {
        (pitch - self.pitch_mean[style]) / self.pitch_std[style]
    }

    /// Factors with the style's own latent (no utterance offset).
    pub fn nominal_condition(&self, token: usize, pitch: f64, style: usize) -> Condition {
        Condition {
            token,
            pitch,
            style,
            latent: self.style_latent[style].clone(),
        }
    }

    /// `(source part, filter part)` of the conditional mean.
    pub fn factor_means(&self, cond: &Condition) -> (Vec<f64>, Vec<f64>) {
        let g = &cond.latent;
        let mut ftr_in = self.token_embed[cond.token].clone();
        ftr_in.extend_from_slice(g);
        let mut src_in = pitch_features(pitch_level(cond.pitch)).to_vec();
        src_in.extend_from_slice(g);
        (matvec(&self.a_src, &src_in), matvec(&self.a_ftr, &ftr_in))
    }

    pub fn conditional_mean(&self, cond: &Condition) -> Vec<f64> {
        let (src, ftr) = self.factor_means(cond);
        src.iter().zip(&ftr).map(|(a, b)| a + b).collect()
    }

    pub fn content_features<R: Rng>(&self, token: usize, latent: &[f64], rng: &mut R) -> Vec<f64> {
        let c = &self.config;
        let base = matvec(&self.content_map, &self.token_embed[token]);
        let leak = matvec(&self.leak_map, latent);
        base.iter()
            .zip(&leak)
            .map(|(b, l)| b + c.content_leak * l + c.content_noise * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn style_frames<R: Rng>(&self, latent: &[f64], rng: &mut R) -> Vec<Vec<f64>> {
        let g = latent;
        (0..self.config.n_frames)
            .map(|_| {
                g.iter()
                    .map(|v| v + self.config.frame_noise * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    /// Draw one observation with the given style and token.
    pub fn sample<R: Rng>(&self, style: usize, token: usize, rng: &mut R) -> ToySample {
        let u: f64 = rng.sample(StandardNormal);
        let pitch = self.pitch_mean[style] + self.pitch_std[style] * u;
        let latent: Vec<f64> = self.style_latent[style]
            .iter()
            .map(|g| g + self.config.style_jitter * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let cond = Condition {
            token,
            pitch,
            style,
            latent,
        };
        let mean = self.conditional_mean(&cond);
        let x = mean
            .iter()
            .map(|m| m + self.config.noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let content = self.content_features(token, &cond.latent, rng);
        let style_frames = self.style_frames(&cond.latent, rng);
        ToySample {
            x,
            content_token: token,
            pitch,
            style_id: style,
            latent: cond.latent,
            content,
            style_frames,
        }
    }

    /// `n_per_style` samples for each listed style from the given stream.
    pub fn generate_split(&self, styles: &[usize], n_per_style: usize, stream: u64) -> Result<ToyDataset> {
        if n_per_style == 0 {
            return Err(DddmError::Contract("n_per_style must be at least 1".into()));
        }
        if let Some(&bad) = styles.iter().find(|&&s| s >= self.n_styles()) {
            return Err(DddmError::Contract(format!("style {bad} out of range")));
        }
        let mut rng = seeded_rng(self.config.seed, 1000 + stream);
        let mut samples = Vec::with_capacity(styles.len() * n_per_style);
        for &s in styles {
            for _ in 0..n_per_style {
                let token = rng.random_range(0..self.n_tokens());
                samples.push(self.sample(s, token, &mut rng));
            }
        }
        ToyDataset::from_samples(samples, self.n_styles())
    }

    pub fn generate_dataset(&self, n_per_style: usize) -> Result<ToyDataset> {
        let all: Vec<usize> = (0..self.n_styles()).collect();
        self.generate_split(&all, n_per_style, STREAM_DEFAULT_DATASET)
    }

    /// Expected pitch features of a style.
    pub fn style_pitch_features(&self, style: usize) -> [f64; PITCH_FEATURES] {
        let (m, s) = PITCH_REFERENCE;
        hermite_means((self.pitch_mean[style] - m) / s, self.pitch_std[style] / s)
    }

    pub fn style_centroid(&self, style: usize) -> Vec<f64> {
        let mean_token = mean_rows(&self.token_embed);
        let g = &self.style_latent[style];
        let mut ftr_in = mean_token;
        ftr_in.extend_from_slice(g);
        let mut src_in = self.style_pitch_features(style).to_vec();
        src_in.extend_from_slice(g);
        add(&matvec(&self.a_ftr, &ftr_in), &matvec(&self.a_src, &src_in))
    }

    pub fn token_centroid(&self, token: usize) -> Vec<f64> {
        let mean_style = mean_rows(&self.style_latent);
        let mut ftr_in = self.token_embed[token].clone();
        ftr_in.extend_from_slice(&mean_style);
        let pitch: Vec<Vec<f64>> = (0..self.n_styles())
            .map(|s| self.style_pitch_features(s).to_vec())
            .collect();
        let mut src_in = mean_rows(&pitch);
        src_in.extend_from_slice(&mean_style);
        add(&matvec(&self.a_ftr, &ftr_in), &matvec(&self.a_src, &src_in))
    }

    pub fn min_style_separation(&self) -> f64 {
        let cents: Vec<Vec<f64>> = (0..self.n_styles()).map(|s| self.style_centroid(s)).collect();
        let mut best = f64::INFINITY;
        for i in 0..cents.len() {
            for j in i + 1..cents.len() {
                best = best.min(dist(&cents[i], &cents[j]));
            }
        }
        best
    }

    /// Exact score of the forward marginal of one attribute chain whose
    /// state is `x_t` and prior `z`, with `x₀ ~ N(μ_c, σ² I)`.
    pub fn oracle_total_score(
        &self,
        sched: &NoiseSchedule,
        x_t: &[f64],
        cond: &Condition,
        z: &[f64],
        t: f64,
    ) -> Result<Vec<f64>> {
        let mu = self.conditional_mean(cond);
        oracle_gaussian_score(sched, x_t, &mu, self.config.noise_std, z, t)
    }

    /// Nearest-centroid classifiers for style and token, each centroid
    /// averaging the other factors out.
    pub fn oracle_classifiers(&self) -> (NearestCentroid, NearestCentroid) {
        let style = NearestCentroid {
            labels: (0..self.n_styles()).collect(),
            centroids: (0..self.n_styles()).map(|s| self.style_centroid(s)).collect(),
        };
        let content = NearestCentroid {
            labels: (0..self.n_tokens()).collect(),
            centroids: (0..self.n_tokens()).map(|k| self.token_centroid(k)).collect(),
        };
        (style, content)
    }
}

/// Marginal score of `X_t` when `x₀ ~ N(mu, data_std² I)`:
/// `−(x_t − α μ − (1 − α) z) / (α² σ² + 1 − α²)`.
pub fn oracle_gaussian_score(
    sched: &NoiseSchedule,
    x_t: &[f64],
    mu: &[f64],
    data_std: f64,
    z: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    if x_t.len() != mu.len() || z.len() != mu.len() {
        return Err(DddmError::shape(
            "oracle_total_score",
            format!("{} / {} / {}", x_t.len(), mu.len(), z.len()),
        ));
    }
    let tp = sched.transition(t)?;
    let var = tp.alpha * tp.alpha * data_std * data_std + tp.variance;
    if var <= 0.0 {
        return Err(DddmError::Singular(t));
    }
    Ok(x_t
        .iter()
        .zip(mu)
        .zip(z)
        .map(|((&x, &m), &zi)| -(x - tp.alpha * m - (1.0 - tp.alpha) * zi) / var)
        .collect())
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v / n;
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NearestCentroid {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

impl NearestCentroid {
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, self.labels[0]);
        for (label, c) in self.labels.iter().zip(&self.centroids) {
            let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, *label);
            }
        }
        best.1
    }

    /// Fraction of rows whose prediction equals the label; 0 for no rows.
    pub fn accuracy<X: AsRef<[f64]>>(&self, xs: &[X], labels: &[usize]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let hits = xs
            .iter()
            .zip(labels)
            .filter(|(x, &l)| self.predict(x.as_ref()) == l)
            .count();
        hits as f64 / xs.len() as f64
    }
}

/// Sliced 1-Wasserstein distance over `n_projections` seeded random unit
/// directions.
pub fn distribution_distance<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    samples_a: &[A],
    samples_b: &[B],
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(DddmError::Contract("distribution_distance needs non-empty sets".into()));
    }
    if n_projections == 0 {
        return Err(DddmError::Contract("need at least one projection".into()));
    }
    let dim = samples_a[0].as_ref().len();
    if samples_a.iter().any(|s| s.as_ref().len() != dim) || samples_b.iter().any(|s| s.as_ref().len() != dim) {
        return Err(DddmError::shape("distribution_distance", "ragged sample dimensions"));
    }
    let mut rng = seeded_rng(seed, STREAM_PROJECTIONS);
    let mut total = 0.0;
    for _ in 0..n_projections {
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let project = |s: &[f64]| -> f64 { s.iter().zip(&dir).map(|(a, b)| a * b).sum() };
        let mut pa: Vec<f64> = samples_a.iter().map(|s| project(s.as_ref())).collect();
        let mut pb: Vec<f64> = samples_b.iter().map(|s| project(s.as_ref())).collect();
        total += wasserstein_1d(&mut pa, &mut pb);
    }
    Ok(total / n_projections as f64)
}

/// W₁ between two empirical measures on the line, by integrating the gap
/// between their quantile functions.
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut q = 0.0f64;
    let mut acc = 0.0;
    while i < na && j < nb {
        let next_a = (i + 1) as f64 / na as f64;
        let next_b = (j + 1) as f64 / nb as f64;
        let next = next_a.min(next_b);
        acc += (next - q) * (a[i] - b[j]).abs();
        q = next;
        // Advance whichever quantile block ended (both on ties).
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen() -> ToyGenerator {
        ToyGenerator::new(ToyConfig::default()).unwrap()
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = gen().generate_dataset(5).unwrap();
        let b = gen().generate_dataset(5).unwrap();
        assert_eq!(a, b);
        let bits =
            |d: &ToyDataset| -> Vec<u64> { d.samples.iter().flat_map(|s| s.x.iter().map(|v| v.to_bits())).collect() };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn noiseless_samples_with_equal_factors_coincide() {
        let cfg = ToyConfig {
            noise_std: 0.0,
            style_jitter: 0.0,
            ..ToyConfig::default()
        };
        let g = ToyGenerator::new(cfg).unwrap();
        let cond = g.nominal_condition(3, g.pitch_mean[2] + 5.0, 2);
        assert_eq!(g.conditional_mean(&cond), g.conditional_mean(&cond));
        let d = g.generate_dataset(40).unwrap();
        // Same token and style; the pitch quantiser bin is the only other factor.
        for a in &d.samples {
            for b in &d.samples {
                if a.style_id == b.style_id && a.content_token == b.content_token && a.pitch == b.pitch {
                    assert_eq!(a.x, b.x);
                }
            }
        }
    }

    #[test]
    fn style_centroids_are_separated() {
        let g = gen();
        assert!(g.min_style_separation() >= 1.0);
        let d = g.generate_dataset(200).unwrap();
        for s in 0..g.n_styles() {
            for r in s + 1..g.n_styles() {
                let cs: Vec<&ToySample> = d.samples.iter().filter(|x| x.style_id == s).collect();
                let cr: Vec<&ToySample> = d.samples.iter().filter(|x| x.style_id == r).collect();
                let ms = mean_rows(&cs.iter().map(|x| x.x.clone()).collect::<Vec<_>>());
                let mr = mean_rows(&cr.iter().map(|x| x.x.clone()).collect::<Vec<_>>());
                assert!(dist(&ms, &mr) >= 1.0);
            }
        }
    }

    #[test]
    fn per_style_pitch_stats_match_samples() {
        let d = gen().generate_dataset(50).unwrap();
        for (s, st) in d.pitch_stats.iter().enumerate() {
            let st = st.unwrap();
            let normed: Vec<f64> = d
                .samples
                .iter()
                .filter(|x| x.style_id == s)
                .map(|x| (x.pitch - st.mean) / st.std)
                .collect();
            let chk = PitchStats::from_values(&normed).unwrap();
            assert!(chk.mean.abs() < 1e-6);
            assert!((chk.std - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn oracle_score_cases() {
        let g = gen();
        let s = NoiseSchedule::default();
        let cond = g.nominal_condition(1, g.pitch_mean[0], 0);
        let cond = &cond;
        let mu = g.conditional_mean(cond);
        let z: Vec<f64> = mu.iter().map(|v| v * 0.3 - 0.1).collect();
        let tp = s.transition(0.4).unwrap();
        let mean: Vec<f64> = mu
            .iter()
            .zip(&z)
            .map(|(m, zi)| tp.alpha * m + (1.0 - tp.alpha) * zi)
            .collect();
        assert!(g
            .oracle_total_score(&s, &mean, cond, &z, 0.4)
            .unwrap()
            .iter()
            .all(|v| v.abs() < 1e-12));

        // Point-mass data reduces to the transition score.
        let g0 = ToyGenerator::new(ToyConfig {
            noise_std: 0.0,
            ..ToyConfig::default()
        })
        .unwrap();
        let mu0 = g0.conditional_mean(cond);
        let xt: Vec<f64> = mu0.iter().map(|v| v + 0.2).collect();
        let a = g0.oracle_total_score(&s, &xt, cond, &z, 0.3).unwrap();
        let b = s.score_target(&xt, &mu0, &z, 0.3).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(matches!(
            g0.oracle_total_score(&s, &xt, cond, &z, 0.0),
            Err(DddmError::Singular(_))
        ));

        // Prior-dominated limit.
        let near_one = g.oracle_total_score(&s, &xt, cond, &z, 1.0).unwrap();
        for ((v, x), zi) in near_one.iter().zip(&xt).zip(&z) {
            assert!((v + (x - zi)).abs() < 1e-2);
        }
    }

    #[test]
    fn oracle_score_matches_finite_differences() {
        let g = gen();
        let s = NoiseSchedule::default();
        let mut rng = seeded_rng(5, 0);
        for _ in 0..10 {
            let t: f64 = rng.random_range(0.01..1.0);
            let cond = Condition {
                token: rng.random_range(0..g.n_tokens()),
                pitch: 150.0 + rng.random_range(-20.0..20.0),
                style: rng.random_range(0..g.n_styles()),
                latent: (0..g.config.style_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let cond = &cond;
            let mu = g.conditional_mean(cond);
            let z: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let xt: Vec<f64> = (0..16).map(|_| rng.random_range(-1.5..1.5)).collect();
            let tp = s.transition(t).unwrap();
            let var = tp.alpha.powi(2) * 0.05f64.powi(2) + tp.variance;
            let logp = |x: &[f64]| -> f64 {
                x.iter()
                    .zip(&mu)
                    .zip(&z)
                    .map(|((&xi, &m), &zi)| -0.5 * (xi - tp.alpha * m - (1.0 - tp.alpha) * zi).powi(2) / var)
                    .sum()
            };
            let an = g.oracle_total_score(&s, &xt, cond, &z, t).unwrap();
            let h = 1e-4;
            for i in 0..16 {
                let mut p = xt.clone();
                let mut m = xt.clone();
                p[i] += h;
                m[i] -= h;
                let fd = (logp(&p) - logp(&m)) / (2.0 * h);
                assert!((fd - an[i]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn oracle_classifiers_on_ground_truth() {
        let g = gen();
        let (style, content) = g.oracle_classifiers();
        let d = g.generate_dataset(250).unwrap();
        let xs: Vec<&[f64]> = d.samples.iter().map(|s| s.x.as_slice()).collect();
        let sl: Vec<usize> = d.samples.iter().map(|s| s.style_id).collect();
        let cl: Vec<usize> = d.samples.iter().map(|s| s.content_token).collect();
        let sa = style.accuracy(&xs, &sl);
        let ca = content.accuracy(&xs, &cl);
        assert!(sa >= 0.99, "style accuracy {sa}");
        assert!(ca >= 0.98, "content accuracy {ca}");
    }

    #[test]
    fn noiseless_classification_is_exact_on_centroids() {
        let g = gen();
        let (style, content) = g.oracle_classifiers();
        for s in 0..g.n_styles() {
            assert_eq!(style.predict(&g.style_centroid(s)), s);
        }
        for k in 0..g.n_tokens() {
            assert_eq!(content.predict(&g.token_centroid(k)), k);
        }
    }

    #[test]
    fn permuted_labels_permute_predictions() {
        let g = gen();
        let (style, _) = g.oracle_classifiers();
        let perm: Vec<usize> = (0..g.n_styles()).map(|i| (i * 3 + 1) % g.n_styles()).collect();
        let permuted = NearestCentroid {
            labels: perm.clone(),
            centroids: style.centroids.clone(),
        };
        let d = g.generate_dataset(10).unwrap();
        for s in &d.samples {
            assert_eq!(permuted.predict(&s.x), perm[style.predict(&s.x)]);
        }
    }

    #[test]
    fn distance_cases() {
        let mut rng = seeded_rng(3, 0);
        let a: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let b: Vec<Vec<f64>> = (0..150)
            .map(|_| (0..3).map(|_| rng.sample::<f64, _>(StandardNormal) + 0.5).collect())
            .collect();
        assert_eq!(distribution_distance(&a, &a, 16, 1).unwrap(), 0.0);
        let ab = distribution_distance(&a, &b, 16, 1).unwrap();
        let ba = distribution_distance(&b, &a, 16, 1).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-12);
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(distribution_distance(&a, &empty, 4, 1).is_err());
    }

    #[test]
    fn shifted_gaussians_in_one_dimension() {
        let mut rng = seeded_rng(4, 0);
        let a: Vec<[f64; 1]> = (0..10_000).map(|_| [rng.sample::<f64, _>(StandardNormal)]).collect();
        let b: Vec<[f64; 1]> = (0..10_000)
            .map(|_| [rng.sample::<f64, _>(StandardNormal) + 1.0])
            .collect();
        let d = distribution_distance(&a, &b, 8, 2).unwrap();
        assert!((d - 1.0).abs() < 0.05, "{d}");
    }

    #[test]
    fn wasserstein_unequal_sizes() {
        // Uniform two-point vs one point at the midpoint: W1 = 0.5.
        let w = wasserstein_1d(&mut [0.0, 1.0], &mut [0.5]);
        assert!((w - 0.5).abs() < 1e-12);
    }

    #[test]
    fn factors_explain_the_variance() {
        let g = gen();
        let d = g.generate_dataset(200).unwrap();
        let xs: Vec<Vec<f64>> = d.samples.iter().map(|s| s.x.clone()).collect();
        let mean = mean_rows(&xs);
        let (mut resid, mut total) = (0.0, 0.0);
        for s in &d.samples {
            let mu = g.conditional_mean(&s.condition());
            resid += dist(&s.x, &mu).powi(2);
            total += dist(&s.x, &mean).powi(2);
        }
        let r2 = 1.0 - resid / total;
        assert!(r2 >= 0.99, "{r2}");
    }

    #[test]
    fn hermite_features_moments() {
        let mut rng = seeded_rng(8, 0);
        let n = 200_000;
        let mut mean = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let f = pitch_features(rng.sample(StandardNormal));
            for k in 0..4 {
                mean[k] += f[k] / n as f64;
                sq[k] += f[k] * f[k] / n as f64;
            }
        }
        for k in 0..4 {
            assert!(mean[k].abs() < 0.03);
            assert!((sq[k] - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn hermite_means_match_monte_carlo() {
        let mut rng = seeded_rng(9, 0);
        let n = 400_000;
        for &(mu, sd) in &[(0.0, 1.0), (-0.5, 0.3), (0.8, 0.2)] {
            let mut mean = [0.0; 4];
            for _ in 0..n {
                let f = pitch_features(mu + sd * rng.sample::<f64, _>(StandardNormal));
                for k in 0..4 {
                    mean[k] += f[k] / n as f64;
                }
            }
            let exact = hermite_means(mu, sd);
            for k in 0..4 {
                assert!(
                    (mean[k] - exact[k]).abs() < 0.01,
                    "{mu} {sd} {k}: {} vs {}",
                    mean[k],
                    exact[k]
                );
            }
        }
        assert_eq!(hermite_means(0.0, 1.0), [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn jitter_spreads_latents_around_the_style() {
        let g = gen();
        let d = g.generate_dataset(400).unwrap();
        let tau = g.config.style_jitter;
        for s in 0..g.n_styles() {
            let offs: Vec<f64> = d
                .samples
                .iter()
                .filter(|x| x.style_id == s)
                .flat_map(|x| {
                    x.latent
                        .iter()
                        .zip(&g.style_latent[s])
                        .map(|(a, b)| a - b)
                        .collect::<Vec<_>>()
                })
                .collect();
            let m = offs.iter().sum::<f64>() / offs.len() as f64;
            let v = offs.iter().map(|o| (o - m).powi(2)).sum::<f64>() / offs.len() as f64;
            assert!(m.abs() < 0.1, "{m}");
            assert!((v.sqrt() - tau).abs() < 0.1 * tau, "{}", v.sqrt());
        }
    }
}
