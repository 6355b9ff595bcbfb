//! Conversion protocol and oracle metrics.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::PitchNormMode;
use crate::error::{DddmError, Result};
use crate::harness::model::Model;
use crate::sampler::SamplerConfig;
use crate::seeded_rng;
use crate::tensor::Tensor;
use crate::toy::{distribution_distance, Condition, ToyDataset, ToyGenerator, ToySample};

pub const STREAM_REFERENCE: u64 = 21;
pub const DISTANCE_PROJECTIONS: usize = 64;

/// One conversion request: source utterance and the utterance whose frames
/// give the target style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Swap {
    pub source: usize,
    pub target: usize,
}

/// Every source in `sources` sent to each other style in `styles` in turn,
/// using target utterances from `targets` round-robin.
pub fn swap_plan(sources: &ToyDataset, targets: &ToyDataset, styles: &[usize]) -> Result<Vec<Swap>> {
    let by_style: Vec<Vec<usize>> = styles
        .iter()
        .map(|&s| {
            (0..targets.len())
                .filter(|&i| targets.samples[i].style_id == s)
                .collect()
        })
        .collect();
    if styles.len() < 2 || by_style.iter().any(Vec::is_empty) {
        return Err(DddmError::Contract(
            "swap plan needs two or more styles with target utterances".into(),
        ));
    }
    let mut cursor = vec![0usize; styles.len()];
    let mut plan = Vec::new();
    for (i, s) in sources.samples.iter().enumerate() {
        let Some(pos) = styles.iter().position(|&st| st == s.style_id) else {
            continue;
        };
        let k = (pos + 1 + i % (styles.len() - 1)) % styles.len();
        let pool = &by_style[k];
        plan.push(Swap {
            source: i,
            target: pool[cursor[k] % pool.len()],
        });
        cursor[k] += 1;
    }
    Ok(plan)
}

/// Every source converted toward `style`, cycling through its target
/// utterances.
pub fn plan_to_style(sources: &ToyDataset, targets: &ToyDataset, style: usize) -> Result<Vec<Swap>> {
    let pool: Vec<usize> = (0..targets.len())
        .filter(|&i| targets.samples[i].style_id == style)
        .collect();
    if pool.is_empty() {
        return Err(DddmError::Contract(format!("no target utterances of style {style}")));
    }
    Ok((0..sources.len())
        .map(|i| Swap {
            source: i,
            target: pool[i % pool.len()],
        })
        .collect())
}

/// What a perfect converter would output: the source's token and relative
/// pitch rendered in the target utterance's style, plus observation noise.
pub fn ideal_conversion<R: Rng + ?Sized>(
    gen: &ToyGenerator,
    source: &ToySample,
    target: &ToySample,
    rng: &mut R,
) -> Vec<f64> {
    let u = gen.true_normalized_pitch(source.pitch, source.style_id);
    let style = target.style_id;
    let cond = Condition {
        token: source.content_token,
        pitch: gen.pitch_mean[style] + gen.pitch_std[style] * u,
        style,
        latent: target.latent.clone(),
    };
    gen.conditional_mean(&cond)
        .into_iter()
        .map(|m| m + gen.config.noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub style_accuracy: f64,
    pub content_accuracy: f64,
    pub distance: f64,
    pub recon_l1: Option<f64>,
    /// Mean largest chain-to-output distance, when the chains are known.
    pub mean_discrepancy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversions {
    pub outputs: Tensor,
    pub target_styles: Vec<usize>,
    pub source_tokens: Vec<usize>,
    pub discrepancy: Vec<f64>,
}

pub const EVAL_CHUNK: usize = 256;

#[allow(clippy::too_many_arguments)]
pub fn run_conversions(
    model: &Model,
    plan: &[Swap],
    sources: &ToyDataset,
    targets: &ToyDataset,
    stats: &ToyDataset,
    mode: PitchNormMode,
    sampler: &SamplerConfig,
) -> Result<Conversions> {
    if plan.is_empty() {
        return Err(DddmError::Contract("nothing to convert".into()));
    }
    let mut rows = Vec::with_capacity(plan.len());
    let mut discrepancy = Vec::with_capacity(plan.len());
    for (c, chunk) in plan.chunks(EVAL_CHUNK).enumerate() {
        let src: Vec<&ToySample> = chunk.iter().map(|s| &sources.samples[s.source]).collect();
        let tgt: Vec<&[Vec<f64>]> = chunk
            .iter()
            .map(|s| targets.samples[s.target].style_frames.as_slice())
            .collect();
        let out = model.convert(&src, &tgt, stats, mode, sampler, (c * EVAL_CHUNK) as u64)?;
        for r in 0..out.output.rows() {
            rows.push(out.output.row(r).to_vec());
        }
        discrepancy.extend(out.discrepancy);
    }
    Ok(Conversions {
        outputs: Tensor::from_rows(&rows)?,
        target_styles: plan.iter().map(|s| targets.samples[s.target].style_id).collect(),
        source_tokens: plan.iter().map(|s| sources.samples[s.source].content_token).collect(),
        discrepancy,
    })
}

/// Oracle accuracies and the sliced distance to ideal conversions. A swap
/// whose target is the source utterance itself is scored against the source.
pub fn score_conversions(
    gen: &ToyGenerator,
    conv: &Conversions,
    plan: &[Swap],
    sources: &ToyDataset,
    targets: &ToyDataset,
    seed: u64,
) -> Result<EvalReport> {
    let (style_clf, content_clf) = gen.oracle_classifiers();
    let outputs: Vec<Vec<f64>> = (0..conv.outputs.rows()).map(|r| conv.outputs.row(r).to_vec()).collect();
    let style_accuracy = style_clf.accuracy(&outputs, &conv.target_styles);
    let content_accuracy = content_clf.accuracy(&outputs, &conv.source_tokens);
    let mut rng = seeded_rng(seed, STREAM_REFERENCE);
    let reference: Vec<Vec<f64>> = plan
        .iter()
        .map(|s| {
            let src = &sources.samples[s.source];
            if std::ptr::eq(sources, targets) && s.source == s.target {
                src.x.clone()
            } else {
                ideal_conversion(gen, src, &targets.samples[s.target], &mut rng)
            }
        })
        .collect();
    let distance = distribution_distance(&outputs, &reference, DISTANCE_PROJECTIONS, seed)?;
    let n = outputs.len();
    Ok(EvalReport {
        n,
        style_accuracy,
        content_accuracy,
        distance,
        recon_l1: None,
        mean_discrepancy: (conv.discrepancy.len() == n).then(|| conv.discrepancy.iter().sum::<f64>() / n as f64),
    })
}

/// Convert along `plan` and score the result.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    gen: &ToyGenerator,
    plan: &[Swap],
    sources: &ToyDataset,
    targets: &ToyDataset,
    stats: &ToyDataset,
    sampler: &SamplerConfig,
    mode: PitchNormMode,
) -> Result<EvalReport> {
    let conv = run_conversions(model, plan, sources, targets, stats, mode, sampler)?;
    score_conversions(gen, &conv, plan, sources, targets, sampler.seed)
}
