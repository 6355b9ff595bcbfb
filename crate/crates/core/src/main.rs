use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dddm::error::{DddmError, Result};
use dddm::harness::adapt::AdaptConfig;
use dddm::harness::commands::{
    cmd_ablate, cmd_adapt, cmd_convert, cmd_eval, cmd_gen_data, cmd_train, AdaptArgs, ConvertArgs, EvalArgs,
};
use dddm::harness::config::parse_mode;
use dddm::harness::RunConfig;

#[derive(Parser)]
#[command(
    name = "dddm",
    version,
    about = "Decoupled denoising diffusion on a synthetic source-filter world"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on the generated training split.
    Train,
    /// Convert dataset samples with a trained checkpoint.
    Convert {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source utterances (dataset CSV).
        #[arg(long)]
        data: PathBuf,
        /// Utterances supplying target styles; defaults to --data.
        #[arg(long)]
        targets: Option<PathBuf>,
        /// Convert every source to this style.
        #[arg(long)]
        target_style: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// em or ml.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Score converted samples with the oracle classifiers.
    Eval {
        #[arg(long)]
        converted: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        targets: Option<PathBuf>,
        /// Generator sidecar written by gen-data.
        #[arg(long)]
        sidecar: PathBuf,
        /// Also report reconstruction L1 under this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the baseline and the four ablations and compare them.
    Ablate,
    /// Fine-tune a checkpoint on utterances of an unseen style.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 2e-5)]
        lr: f64,
        #[arg(long)]
        freeze_encoders: bool,
    },
    /// Write the generated splits and the generator sidecar.
    GenData,
}

fn config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            DddmError::Io(io) => DddmError::Config(format!("{}: {io}", p.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let c = &cli.common;
    match cli.cmd {
        Cmd::Train => {
            let cfg = config(c)?;
            let o = cmd_train(&cfg, &c.out)?;
            match o.rows.last() {
                Some(r) => println!(
                    "trained {} epochs: L_diff {:.5} L_rec {:.5}",
                    r.epoch, r.l_diff, r.l_rec
                ),
                None => println!("wrote initial checkpoint"),
            }
        }
        Cmd::Convert {
            checkpoint,
            data,
            targets,
            target_style,
            steps,
            mode,
        } => {
            let args = ConvertArgs {
                checkpoint,
                data,
                targets,
                target_style,
                steps,
                mode: mode.map(|m| parse_mode("--mode", &m)).transpose()?,
                seed: c.seed,
            };
            let d = cmd_convert(&args, &c.out)?;
            println!("converted {} samples", d.samples.rows());
        }
        Cmd::Eval {
            converted,
            data,
            targets,
            sidecar,
            checkpoint,
        } => {
            let args = EvalArgs {
                converted,
                data,
                targets,
                sidecar,
                checkpoint,
                seed: c.seed.unwrap_or(0),
            };
            let r = cmd_eval(&args, &c.out)?;
            println!("{}", serde_json::to_string(&r)?);
        }
        Cmd::Ablate => {
            let cfg = config(c)?;
            let report = cmd_ablate(&cfg, &c.out, |r| {
                println!(
                    "{:16} style {:.4} content {:.4} distance {:.4} params {}",
                    r.variant, r.report.style_accuracy, r.report.content_accuracy, r.report.distance, r.n_params
                );
            })?;
            if !report.violations.is_empty() {
                for v in &report.violations {
                    eprintln!("ordering violated: {v}");
                }
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Adapt {
            checkpoint,
            data,
            steps,
            lr,
            freeze_encoders,
        } => {
            let args = AdaptArgs {
                checkpoint,
                data,
                adapt: AdaptConfig {
                    steps,
                    lr,
                    freeze_encoders,
                },
                seed: c.seed,
            };
            let (r, _) = cmd_adapt(&args, &c.out)?;
            println!(
                "style {}: transfer {:.4} -> {:.4}, content {:.4} -> {:.4}",
                r.style,
                r.before.style_accuracy,
                r.after.style_accuracy,
                r.before.content_accuracy,
                r.after.content_accuracy
            );
        }
        Cmd::GenData => {
            let cfg = config(c)?;
            let s = cmd_gen_data(&cfg, &c.out)?;
            println!("wrote {} splits (config {})", s.splits.len(), s.config_hash);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                DddmError::Numeric(_) | DddmError::Singular(_) => 3,
                _ => 2,
            })
        }
    }
}
