//! The `dddm` subcommands. Each writes its artifacts under an output
//! directory and returns what it wrote.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{DddmError, Result};
use crate::harness::adapt::{adapt, merged_stats, AdaptConfig};
use crate::harness::checkpoint::{self, write_atomic};
use crate::harness::config::{Ablation, RunConfig};
use crate::harness::data::{load_dataset, write_dataset, Sidecar, SplitInfo};
use crate::harness::eval::{
    evaluate, plan_to_style, run_conversions, score_conversions, swap_plan, Conversions, EvalReport, Swap,
};
use crate::harness::train::{MetricsRow, TrainState};
use crate::sampler::{SampleDump, SamplerConfig, SolverMode};
use crate::seeded_rng;
use crate::toy::{ToyDataset, ToyGenerator};

pub const STREAM_ADAPT: u64 = 13;
pub const SPLIT_TRAIN: u64 = 0;
pub const SPLIT_TEST: u64 = 1;
pub const SPLIT_HELDOUT: u64 = 2;
pub const SPLIT_ADAPT: u64 = 3;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.cfg";

/// The generated splits of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: ToyDataset,
    pub test: ToyDataset,
    /// Test utterances of the held-out style.
    pub heldout: Option<ToyDataset>,
    /// Adaptation utterances of the held-out style.
    pub adapt: Option<ToyDataset>,
}

impl Splits {
    pub fn generate(cfg: &RunConfig) -> Result<(ToyGenerator, Self)> {
        let gen = ToyGenerator::new(cfg.toy_config())?;
        let styles = cfg.training_styles();
        let train = gen.generate_split(&styles, cfg.n_train_per_style, SPLIT_TRAIN)?;
        let test = gen.generate_split(&styles, cfg.n_test_per_style, SPLIT_TEST)?;
        let (heldout, adapt) = match cfg.held_out_style {
            Some(h) => (
                Some(gen.generate_split(&[h], cfg.n_test_per_style, SPLIT_HELDOUT)?),
                Some(gen.generate_split(&[h], cfg.n_adapt, SPLIT_ADAPT)?),
            ),
            None => (None, None),
        };
        Ok((
            gen,
            Self {
                train,
                test,
                heldout,
                adapt,
            },
        ))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Sidecar> {
    ensure_dir(out)?;
    let (gen, splits) = Splits::generate(cfg)?;
    let hash = cfg.hash();
    let styles = cfg.training_styles();
    let mut files = vec![
        (
            "train.csv",
            &splits.train,
            styles.clone(),
            cfg.n_train_per_style,
            SPLIT_TRAIN,
        ),
        ("test.csv", &splits.test, styles, cfg.n_test_per_style, SPLIT_TEST),
    ];
    if let (Some(h), Some(held), Some(ad)) = (cfg.held_out_style, &splits.heldout, &splits.adapt) {
        files.push(("heldout.csv", held, vec![h], cfg.n_test_per_style, SPLIT_HELDOUT));
        files.push(("adapt.csv", ad, vec![h], cfg.n_adapt, SPLIT_ADAPT));
    }
    let mut infos = Vec::new();
    for (name, data, styles, n, stream) in files {
        let mut buf = Vec::new();
        write_dataset(&mut buf, cfg.seed, &hash, data)?;
        write_atomic(&out.join(name), &buf)?;
        infos.push(SplitInfo {
            file: name.into(),
            styles,
            n_per_style: n,
            stream,
        });
    }
    let sidecar = Sidecar {
        config_hash: hash,
        toy: gen.config.clone(),
        splits: infos,
    };
    write_json(&out.join("toy.json"), &sidecar)?;
    Ok(sidecar)
}

pub fn metrics_text(cfg: &RunConfig, rows: &[MetricsRow]) -> String {
    let mut s = format!(
        "# seed={} config={}\nepoch,l_diff,l_rec,l_total,lr,wall_time\n",
        cfg.seed,
        cfg.hash()
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.l_diff, r.l_rec, r.l_total, r.lr, r.wall_time
        ));
    }
    s
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub rows: Vec<MetricsRow>,
}

/// Train on the generated training split. On a non-finite loss the state
/// from the start of the failing epoch is saved and the error returned.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure_dir(out)?;
    let (_, splits) = Splits::generate(cfg)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let metrics = out.join(METRICS_FILE);
    write_atomic(&out.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let mut state = TrainState::new(cfg)?;
    let mut rows = Vec::with_capacity(cfg.epochs);
    write_atomic(&metrics, metrics_text(cfg, &rows).as_bytes())?;
    checkpoint::save(&ckpt, cfg, &state)?;
    let start = Instant::now();
    for _ in 0..cfg.epochs {
        let good = state.clone();
        match state.run_epoch(&splits.train, cfg.batch_size) {
            Ok(mut row) => {
                if cfg.record_wall_time {
                    row.wall_time = start.elapsed().as_secs_f64();
                }
                rows.push(row);
                write_atomic(&metrics, metrics_text(cfg, &rows).as_bytes())?;
                if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every as u64 == 0 {
                    checkpoint::save(&ckpt, cfg, &state)?;
                }
            }
            Err(e @ DddmError::Numeric(_)) => {
                checkpoint::save(&ckpt, cfg, &good)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
    checkpoint::save(&ckpt, cfg, &state)?;
    Ok(TrainOutcome { state, rows })
}

#[derive(Debug, Clone, Default)]
pub struct ConvertArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// Utterances supplying target styles; defaults to `data`.
    pub targets: Option<PathBuf>,
    /// Convert everything to this style; otherwise rotate through styles.
    pub target_style: Option<usize>,
    pub steps: Option<usize>,
    pub mode: Option<SolverMode>,
    pub seed: Option<u64>,
}

pub fn sampler_for(
    cfg: &RunConfig,
    seed: Option<u64>,
    steps: Option<usize>,
    mode: Option<SolverMode>,
) -> Result<SamplerConfig> {
    let mut s = cfg.sampler(seed.unwrap_or(cfg.seed));
    if let Some(n) = steps {
        if n == 0 {
            return Err(DddmError::Config("--steps must be positive".into()));
        }
        s.n_steps = n;
    }
    if let Some(m) = mode {
        s.mode = m;
    }
    Ok(s)
}

fn dump(cfg: &RunConfig, seed: u64, conv: &Conversions, plan: &[Swap]) -> SampleDump {
    SampleDump {
        seed,
        config_hash: cfg.hash(),
        samples: conv.outputs.clone(),
        labels: vec![
            ("source".into(), plan.iter().map(|s| s.source).collect()),
            ("target".into(), plan.iter().map(|s| s.target).collect()),
            ("target_style".into(), conv.target_styles.clone()),
            ("source_token".into(), conv.source_tokens.clone()),
        ],
    }
}

/// Writes `converted.csv` under `out`.
pub fn cmd_convert(args: &ConvertArgs, out: &Path) -> Result<SampleDump> {
    ensure_dir(out)?;
    let (cfg, state) = checkpoint::load(&args.checkpoint).map_err(|e| match e {
        DddmError::Io(io) => DddmError::Config(format!("cannot read checkpoint {}: {io}", args.checkpoint.display())),
        other => other,
    })?;
    let toy = cfg.toy_config();
    let data = load_dataset(&args.data, &toy)?;
    let targets = match &args.targets {
        Some(p) => Some(load_dataset(p, &toy)?),
        None => None,
    };
    let tgt = targets.as_ref().unwrap_or(&data);
    let plan = match args.target_style {
        Some(s) => plan_to_style(&data, tgt, s)?,
        None => swap_plan(&data, tgt, &tgt.styles())?,
    };
    let (_, splits) = Splits::generate(&cfg)?;
    let stats = merged_stats(&splits.train, &data);
    let sampler = sampler_for(&cfg, args.seed, args.steps, args.mode)?;
    let conv = run_conversions(
        &state.model,
        &plan,
        &data,
        tgt,
        &stats,
        cfg.inference_pitch_norm,
        &sampler,
    )?;
    let d = dump(&cfg, sampler.seed, &conv, &plan);
    let mut buf = Vec::new();
    d.write(&mut buf)?;
    write_atomic(&out.join("converted.csv"), &buf)?;
    Ok(d)
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub converted: PathBuf,
    pub data: PathBuf,
    pub targets: Option<PathBuf>,
    pub sidecar: PathBuf,
    /// Adds reconstruction L1 of `data` under this model.
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
}

fn label<'a>(d: &'a SampleDump, name: &str) -> Result<&'a [usize]> {
    d.label(name)
        .ok_or_else(|| DddmError::Format(format!("converted file lacks a {name} column")))
}

/// Writes `eval.json` under `out`.
pub fn cmd_eval(args: &EvalArgs, out: &Path) -> Result<EvalReport> {
    ensure_dir(out)?;
    let sidecar = Sidecar::load(&args.sidecar)?;
    let gen = ToyGenerator::new(sidecar.toy.clone())?;
    let data = load_dataset(&args.data, &gen.config)?;
    let targets = match &args.targets {
        Some(p) => Some(load_dataset(p, &gen.config)?),
        None => None,
    };
    let tgt = targets.as_ref().unwrap_or(&data);
    let d = SampleDump::read(fs::File::open(&args.converted)?)?;
    if d.samples.cols() != gen.config.data_dim {
        return Err(DddmError::shape(
            "eval",
            format!(
                "converted samples have {} dims, the generator {}",
                d.samples.cols(),
                gen.config.data_dim
            ),
        ));
    }
    let (src, tg) = (label(&d, "source")?, label(&d, "target")?);
    let plan = src
        .iter()
        .zip(tg)
        .enumerate()
        .map(|(i, (&source, &target))| {
            if source >= data.len() || target >= tgt.len() {
                Err(DddmError::Format(format!(
                    "row {}: source {source} or target {target} out of range",
                    i + 1
                )))
            } else {
                Ok(Swap { source, target })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if plan.is_empty() {
        return Err(DddmError::Format("converted file has no rows".into()));
    }
    let conv = Conversions {
        outputs: d.samples.clone(),
        target_styles: label(&d, "target_style")?.to_vec(),
        source_tokens: label(&d, "source_token")?.to_vec(),
        discrepancy: Vec::new(),
    };
    let mut report = score_conversions(&gen, &conv, &plan, &data, tgt, args.seed)?;
    if let Some(p) = &args.checkpoint {
        let (cfg, state) = checkpoint::load(p)?;
        let (_, splits) = Splits::generate(&cfg)?;
        let stats = merged_stats(&splits.train, &data);
        let refs: Vec<_> = data.samples.iter().collect();
        report.recon_l1 = Some(state.model.recon_l1(&refs, &stats)?);
    }
    write_json(&out.join("eval.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub n_params: usize,
    pub final_l_rec: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
    pub violations: Vec<String>,
}

/// Failures of: baseline above each ablation, each of the other three
/// above zero_prior, all in style accuracy. NaN counts as a failure.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn ordering_violations(rows: &[AblationRow]) -> Vec<String> {
    let acc = |name: &str| rows.iter().find(|r| r.variant == name).map(|r| r.report.style_accuracy);
    let mut v = Vec::new();
    let (Some(base), Some(zero)) = (acc("baseline"), acc("zero_prior")) else {
        return vec!["baseline or zero_prior missing".into()];
    };
    for name in ["no_mixup", "single_denoiser", "no_pitch_norm"] {
        let Some(a) = acc(name) else {
            v.push(format!("{name} missing"));
            continue;
        };
        if !(base > a) {
            v.push(format!("baseline {base:.4} is not above {name} {a:.4}"));
        }
        if !(a > zero) {
            v.push(format!("{name} {a:.4} is not above zero_prior {zero:.4}"));
        }
    }
    if !(base > zero) {
        v.push(format!("baseline {base:.4} is not above zero_prior {zero:.4}"));
    }
    v
}

/// Train baseline and each single ablation, evaluate on test swaps, and
/// write `ablation.csv` and `ablation.json` under `out`.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path, mut progress: impl FnMut(&AblationRow)) -> Result<AblationReport> {
    cfg.validate()?;
    ensure_dir(out)?;
    let (gen, splits) = Splits::generate(cfg)?;
    let styles = cfg.training_styles();
    let plan = swap_plan(&splits.test, &splits.test, &styles)?;
    let sampler = cfg.sampler(cfg.seed);
    let mut rows = Vec::new();
    for name in std::iter::once("baseline").chain(Ablation::NAMES) {
        let mut c = cfg.clone();
        c.ablation = Ablation::only(name)?;
        let mut state = TrainState::new(&c)?;
        let metrics = state.train(&c, &splits.train, c.epochs, |_, _| Ok(()))?;
        let report = evaluate(
            &state.model,
            &gen,
            &plan,
            &splits.test,
            &splits.test,
            &splits.train,
            &sampler,
            c.inference_pitch_norm,
        )?;
        let row = AblationRow {
            variant: name.into(),
            n_params: state.model.store.scalar_count(),
            final_l_rec: metrics.last().map_or(f64::NAN, |m| m.l_rec),
            report,
        };
        progress(&row);
        rows.push(row);
    }
    let violations = ordering_violations(&rows);
    let mut table = format!(
        "# seed={} config={}\nvariant,style_accuracy,content_accuracy,distance,n_params\n",
        cfg.seed,
        cfg.hash()
    );
    for r in &rows {
        table.push_str(&format!(
            "{},{},{},{},{}\n",
            r.variant, r.report.style_accuracy, r.report.content_accuracy, r.report.distance, r.n_params
        ));
    }
    write_atomic(&out.join("ablation.csv"), table.as_bytes())?;
    let report = AblationReport {
        config_hash: cfg.hash(),
        rows,
        violations,
    };
    write_json(&out.join("ablation.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct AdaptArgs {
    pub checkpoint: PathBuf,
    /// Utterances of one style absent from training.
    pub data: PathBuf,
    pub adapt: AdaptConfig,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub config_hash: String,
    pub style: usize,
    pub steps: usize,
    pub lr: f64,
    pub freeze_encoders: bool,
    pub before: EvalReport,
    pub after: EvalReport,
}

/// Fine-tune on the adaptation set and evaluate conversions of the test
/// split toward its style before and after. Writes `adapted.bin` and
/// `adapt.json` under `out`.
pub fn cmd_adapt(args: &AdaptArgs, out: &Path) -> Result<(AdaptReport, TrainState)> {
    ensure_dir(out)?;
    let (cfg, mut state) = checkpoint::load(&args.checkpoint)?;
    let data = load_dataset(&args.data, &cfg.toy_config())?;
    let style = match data.styles()[..] {
        [s] => s,
        _ => return Err(DddmError::Config("adaptation set must hold exactly one style".into())),
    };
    if cfg.training_styles().contains(&style) {
        return Err(DddmError::Config(format!("style {style} was seen in training")));
    }
    let (gen, splits) = Splits::generate(&cfg)?;
    let stats = merged_stats(&splits.train, &data);
    let plan = plan_to_style(&splits.test, &data, style)?;
    let sampler = cfg.sampler(args.seed.unwrap_or(cfg.seed));
    let mode = cfg.inference_pitch_norm;
    let before = evaluate(&state.model, &gen, &plan, &splits.test, &data, &stats, &sampler, mode)?;
    let mut rng = seeded_rng(args.seed.unwrap_or(cfg.seed), STREAM_ADAPT);
    let (_, opt) = adapt(&mut state.model, &cfg, &args.adapt, &data, &stats, &mut rng)?;
    state.opt = opt;
    let after = evaluate(&state.model, &gen, &plan, &splits.test, &data, &stats, &sampler, mode)?;
    checkpoint::save(&out.join("adapted.bin"), &cfg, &state)?;
    let report = AdaptReport {
        config_hash: cfg.hash(),
        style,
        steps: args.adapt.steps,
        lr: args.adapt.lr,
        freeze_encoders: args.adapt.freeze_encoders,
        before,
        after,
    };
    write_json(&out.join("adapt.json"), &report)?;
    Ok((report, state))
}
