//! End-to-end acceptance checks, one test per criterion. Each prints a
//! PASS/FAIL line; run with `--nocapture` to see them all.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

use dddm::ensemble::{Ensemble, EnsembleConfig, TrainBatch};
use dddm::harness::adapt::AdaptConfig;
use dddm::harness::commands::{
    cmd_ablate, cmd_adapt, cmd_convert, cmd_eval, cmd_gen_data, cmd_train, AdaptArgs, AdaptReport, ConvertArgs,
    EvalArgs,
};
use dddm::harness::eval::EvalReport;
use dddm::harness::RunConfig;
use dddm::sampler::{sample, simulate_forward_to, FnScore, InitMode, SamplerConfig, SolverMode};
use dddm::tensor::{AdamW, AdamWConfig, ParamStore, Tape, Var};
use dddm::toy::{oracle_gaussian_score, Condition, ToyConfig, ToyGenerator};
use dddm::{seeded_rng, NoiseSchedule, Result, Tensor};

fn verdict(n: u32, name: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} [{tag}] {name}: {detail}");
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

/// `(α_t, 1 − α_t²)` from the closed-form integral of the linear β.
fn kernel(t: f64) -> (f64, f64) {
    let (b0, b1) = (0.05, 20.0);
    let integral = b0 * t + 0.5 * (b1 - b0) * t * t;
    let alpha = (-0.5 * integral).exp();
    (alpha, 1.0 - alpha * alpha)
}

#[test]
fn c01_transition_kernel() {
    let start = Instant::now();
    let sched = NoiseSchedule::default();
    let (x0, z) = ([2.0, 1.5], [1.0, 2.0]);
    let n_paths = 100_000;
    let mut worst: f64 = 0.0;
    let mut rng = seeded_rng(1, 0);
    for t in [0.25, 0.5, 1.0] {
        let steps = (t / 1e-3_f64).round() as usize;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n_paths {
            let x = simulate_forward_to(&sched, &x0, &z, t, steps, &mut rng).unwrap();
            for j in 0..2 {
                sum[j] += x[j];
                sq[j] += x[j] * x[j];
            }
        }
        let (alpha, var) = kernel(t);
        for j in 0..2 {
            let m = sum[j] / n_paths as f64;
            let v = sq[j] / n_paths as f64 - m * m;
            let m_ref = alpha * x0[j] + (1.0 - alpha) * z[j];
            worst = worst.max(((m - m_ref) / m_ref).abs()).max(((v - var) / var).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "transition kernel",
        worst < 0.02 && secs < 60.0,
        format!("max relative error {worst:.4} (< 0.02), {secs:.1}s (< 60s)"),
    );
}

fn gaussian_log_density(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let d = x.len() as f64;
    let q: f64 = x.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum();
    -0.5 * q / var - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
}

fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = 1e-3;
    (0..x.len())
        .map(|j| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[j] += h;
            m[j] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

#[test]
fn c02_score_correctness() {
    let sched = NoiseSchedule::default();
    let gen = ToyGenerator::new(ToyConfig::default()).unwrap();
    let sigma = gen.config.noise_std;
    let mut rng = seeded_rng(2, 0);
    let mut worst_target: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    for _ in 0..10 {
        let t = rng.random_range(0.05..1.0);
        let (alpha, var) = kernel(t);
        let x0 = normal_vec(&mut rng, 16, 1.0);
        let z = normal_vec(&mut rng, 16, 1.0);
        let xt = normal_vec(&mut rng, 16, 1.0);
        let mean: Vec<f64> = x0.iter().zip(&z).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let fd = fd_gradient(|x| gaussian_log_density(x, &mean, var), &xt);
        worst_target = worst_target.max(max_abs_diff(&fd, &sched.score_target(&xt, &x0, &z, t).unwrap()));

        let s = rng.random_range(0..gen.n_styles());
        let sample = gen.sample(s, rng.random_range(0..gen.n_tokens()), &mut rng);
        let cond: Condition = sample.condition();
        let mu = gen.conditional_mean(&cond);
        let mean: Vec<f64> = mu.iter().zip(&z).map(|(m, b)| alpha * m + (1.0 - alpha) * b).collect();
        let marginal_var = alpha * alpha * sigma * sigma + var;
        let fd = fd_gradient(|x| gaussian_log_density(x, &mean, marginal_var), &xt);
        let an = gen.oracle_total_score(&sched, &xt, &cond, &z, t).unwrap();
        worst_oracle = worst_oracle.max(max_abs_diff(&fd, &an));
    }
    verdict(
        2,
        "score correctness",
        worst_target < 1e-5 && worst_oracle < 1e-5,
        format!("max abs error {worst_target:.2e} (score_target), {worst_oracle:.2e} (oracle_total_score), bound 1e-5"),
    );
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

fn random_matrix(rng: &mut impl Rng, shape: (usize, usize)) -> Tensor {
    Tensor::new(
        vec![shape.0, shape.1],
        (0..shape.0 * shape.1).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

/// Largest relative error between the tape gradient of `Σ w ⊙ f(inputs)`
/// and central differences of the forward pass.
fn gradcheck(build: Build, shapes: &[(usize, usize)], seed: u64) -> f64 {
    let mut rng = seeded_rng(3, seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|&s| random_matrix(&mut rng, s)).collect();
    let forward = |inputs: &[Tensor], w: Option<&Tensor>| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
        let out = build(&mut tape, &vars).unwrap();
        let shape = tape.value(out).shape().to_vec();
        let w = w
            .cloned()
            .unwrap_or_else(|| random_matrix(&mut seeded_rng(4, seed), (shape[0], shape[1])));
        let wv = tape.leaf(w.clone()).unwrap();
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod).unwrap();
        (tape, loss, vars, w)
    };
    let (tape, loss, vars, w) = forward(&inputs, None);
    let grads = tape.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let g = grads.wrt(vars[k]);
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= h;
            let (tp, lp, _, _) = forward(&plus, Some(&w));
            let (tm, lm, _, _) = forward(&minus, Some(&w));
            let fd = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
            let an = g.data()[j];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1.0));
        }
    }
    worst
}

#[test]
fn c03_autodiff_soundness() {
    // (name, op, shapes from random dims (r, c, k))
    type Shapes = fn(usize, usize, usize) -> Vec<(usize, usize)>;
    let cases: Vec<(&str, Build, Shapes)> = vec![
        ("matmul", |t, v| t.matmul(v[0], v[1]), |r, c, k| vec![(r, k), (k, c)]),
        ("add", |t, v| t.add(v[0], v[1]), |r, c, _| vec![(r, c), (r, c)]),
        (
            "add row broadcast",
            |t, v| t.add(v[0], v[1]),
            |r, c, _| vec![(r, c), (1, c)],
        ),
        (
            "add column broadcast",
            |t, v| t.add(v[0], v[1]),
            |r, c, _| vec![(r, c), (r, 1)],
        ),
        ("sub", |t, v| t.sub(v[0], v[1]), |r, c, _| vec![(r, c), (r, c)]),
        ("mul", |t, v| t.mul(v[0], v[1]), |r, c, _| vec![(r, c), (r, c)]),
        (
            "mul broadcast",
            |t, v| t.mul(v[0], v[1]),
            |r, c, _| vec![(r, c), (r, 1)],
        ),
        ("scale", |t, v| t.scale(v[0], -1.7), |r, c, _| vec![(r, c)]),
        ("tanh", |t, v| t.tanh(v[0]), |r, c, _| vec![(r, c)]),
        ("sigmoid", |t, v| t.sigmoid(v[0]), |r, c, _| vec![(r, c)]),
        (
            "concat",
            |t, v| t.concat(&[v[0], v[1], v[2]]),
            |r, c, k| vec![(r, c), (r, k), (r, 1)],
        ),
        ("mean_pool", |t, v| t.mean_pool(v[0], 3), |r, c, _| vec![(3 * r, c)]),
        ("sum", |t, v| t.sum(v[0]), |r, c, _| vec![(r, c)]),
        ("l1_loss", |t, v| t.l1_loss(v[0], v[1]), |r, c, _| vec![(r, c), (r, c)]),
        (
            "mse_loss",
            |t, v| t.mse_loss(v[0], v[1]),
            |r, c, _| vec![(r, c), (r, c)],
        ),
    ];
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, build, shapes) in &cases {
        for seed in 0..20u64 {
            let mut rng = seeded_rng(5, seed);
            let (r, c, k) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            let err = gradcheck(*build, &shapes(r, c, k), seed);
            worst = worst.max(err);
            if err >= 1e-5 {
                failures.push(format!("{name} seed {seed}: {err:.2e}"));
            }
        }
    }
    verdict(
        3,
        "autodiff soundness",
        failures.is_empty(),
        format!(
            "{} primitives x 20 instances, worst relative error {worst:.2e} (< 1e-5) {failures:?}",
            cases.len()
        ),
    );
}

#[test]
fn c04_oracle_sampling() {
    let start = Instant::now();
    let sched = NoiseSchedule::default();
    let gen = ToyGenerator::new(ToyConfig::default()).unwrap();
    let cond = gen.nominal_condition(5, gen.pitch_mean[2], 2);
    let mu = gen.conditional_mean(&cond);
    let (src, ftr) = gen.factor_means(&cond);
    let sigma = gen.config.noise_std;
    let (n, d) = (10_000, mu.len());
    let priors = [
        Tensor::from_rows(&vec![src; n]).unwrap(),
        Tensor::from_rows(&vec![ftr; n]).unwrap(),
    ];
    let oracle = FnScore {
        n_attributes: 2,
        f: |xs: &[Tensor], zs: &[Tensor], t: f64| -> Result<Tensor> {
            let mut out = Tensor::zeros(xs[0].shape().to_vec());
            for r in 0..xs[0].rows() {
                let s = oracle_gaussian_score(&sched, xs[0].row(r), &mu, sigma, zs[0].row(r), t)?;
                out.row_mut(r).copy_from_slice(&s);
            }
            Ok(out)
        },
    };
    let cfg = SamplerConfig {
        n_steps: 1000,
        mode: SolverMode::Em,
        stochastic: true,
        seed: 4,
        share_noise: true,
        init: InitMode::Consistent,
    };
    let out = sample(&oracle, &sched, &priors, &cfg, 0).unwrap().output;
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(out.row(r)) {
            *m += v / n as f64;
        }
    }
    let mean_err = max_abs_diff(&mean, &mu);
    let mut cov = vec![vec![0.0; d]; d];
    for r in 0..n {
        let row = out.row(r);
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (row[i] - mean[i]) * (row[j] - mean[j]) / (n - 1) as f64;
            }
        }
    }
    let var = sigma * sigma;
    let mut num = 0.0;
    for (i, row) in cov.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            let target = if i == j { var } else { 0.0 };
            num += (c - target) * (c - target);
        }
    }
    let cov_err = num.sqrt() / (var * (d as f64).sqrt());
    let secs = start.elapsed().as_secs_f64();
    verdict(
        4,
        "oracle sampling",
        mean_err <= 0.05 && cov_err <= 0.10 && secs < 300.0,
        format!(
            "mean L-inf error {mean_err:.4} (<= 0.05), covariance Frobenius error {cov_err:.4} (<= 0.10), {secs:.1}s"
        ),
    );
}

/// Fresh generator samples with the true factor means as priors and the
/// utterance latent as style.
fn toy_batch(gen: &ToyGenerator, rows: usize, rng: &mut impl Rng) -> (TrainBatch, Vec<Condition>) {
    let mut x0 = Vec::with_capacity(rows);
    let (mut src, mut ftr, mut style, mut conds) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..rows {
        let s = gen.sample(
            rng.random_range(0..gen.n_styles()),
            rng.random_range(0..gen.n_tokens()),
            rng,
        );
        let cond = s.condition();
        let (a, b) = gen.factor_means(&cond);
        x0.push(s.x);
        src.push(a);
        ftr.push(b);
        style.push(s.latent);
        conds.push(cond);
    }
    let batch = TrainBatch {
        x0: Tensor::from_rows(&x0).unwrap(),
        priors: vec![Tensor::from_rows(&src).unwrap(), Tensor::from_rows(&ftr).unwrap()],
        style: Tensor::from_rows(&style).unwrap(),
        blend: None,
    };
    (batch, conds)
}

#[test]
fn c05_learned_score_convergence() {
    let start = Instant::now();
    let sched = NoiseSchedule::default();
    let gen = ToyGenerator::new(ToyConfig::default()).unwrap();
    let mut store = ParamStore::new();
    let ens = Ensemble::new(&mut store, EnsembleConfig::default(), &mut seeded_rng(6, 0)).unwrap();
    let peak = 1e-2;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: peak,
            lr_decay: 1.0,
            ..AdamWConfig::default()
        },
        &store,
    );
    ens.apply_lr_scales(&mut opt);
    let mut rng = seeded_rng(6, 1);
    let steps = 2000;
    for k in 0..steps {
        opt.config.lr = peak * (1.0 - k as f64 / steps as f64);
        let (batch, _) = toy_batch(&gen, 512, &mut rng);
        ens.train_step(&mut store, &mut opt, &sched, &batch, &mut rng).unwrap();
    }

    let mut rng = seeded_rng(6, 2);
    let (test, conds) = toy_batch(&gen, 500, &mut rng);
    let mut rms = Vec::new();
    for t in [0.1, 0.5, 0.9] {
        let tp = sched.transition(t).unwrap();
        let eps = Tensor::from_rows(&(0..500).map(|_| normal_vec(&mut rng, 16, 1.0)).collect::<Vec<_>>()).unwrap();
        let xs: Vec<Tensor> = test
            .priors
            .iter()
            .map(|z| {
                let mut x = test.x0.clone();
                for (i, v) in x.data_mut().iter_mut().enumerate() {
                    *v = tp.alpha * *v + (1.0 - tp.alpha) * z.data()[i] + tp.variance.sqrt() * eps.data()[i];
                }
                x
            })
            .collect();
        let learned = ens
            .eval_combined(&store, &sched, &xs, &test.priors, &test.style, &[t; 500], None)
            .unwrap();
        let mut sq = 0.0;
        for (r, cond) in conds.iter().enumerate() {
            let oracle = gen
                .oracle_total_score(&sched, xs[0].row(r), cond, test.priors[0].row(r), t)
                .unwrap();
            sq += oracle
                .iter()
                .zip(learned.row(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        rms.push((sq / learned.len() as f64).sqrt());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        5,
        "learned-score convergence",
        rms.iter().all(|&e| e <= 0.05) && secs < 600.0,
        format!(
            "RMS at t = 0.1, 0.5, 0.9: {:.4}, {:.4}, {:.4} (<= 0.05), {secs:.1}s",
            rms[0], rms[1], rms[2]
        ),
    );
}

fn canonical() -> RunConfig {
    RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.cfg")).unwrap()
}

/// The canonical run trained once and shared by criteria 6, 7, 9 and 10.
struct Run {
    dir: TempDir,
    train_secs: f64,
}

impl Run {
    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn convert(&self, checkpoint: &str, steps: usize, out: &str) -> PathBuf {
        let args = ConvertArgs {
            checkpoint: self.path(checkpoint),
            data: self.path("data/test.csv"),
            steps: Some(steps),
            ..ConvertArgs::default()
        };
        cmd_convert(&args, &self.path(out)).unwrap();
        self.path(out).join("converted.csv")
    }

    fn eval(&self, converted: PathBuf, out: &str) -> EvalReport {
        let args = EvalArgs {
            converted,
            data: self.path("data/test.csv"),
            sidecar: self.path("data/toy.json"),
            ..EvalArgs::default()
        };
        cmd_eval(&args, &self.path(out)).unwrap()
    }

    fn adapt(&self, steps: usize) -> AdaptReport {
        let args = AdaptArgs {
            checkpoint: self.path("train/checkpoint.bin"),
            data: self.path("data/adapt.csv"),
            adapt: AdaptConfig {
                steps,
                ..AdaptConfig::default()
            },
            seed: None,
        };
        cmd_adapt(&args, &self.path(&format!("adapt{steps}"))).unwrap().0
    }
}

fn trained() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = canonical();
        let dir = tempfile::tempdir().unwrap();
        cmd_gen_data(&cfg, &dir.path().join("data")).unwrap();
        let start = Instant::now();
        cmd_train(&cfg, &dir.path().join("train")).unwrap();
        Run {
            dir,
            train_secs: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn c06_end_to_end_conversion() {
    let run = trained();
    let start = Instant::now();
    let r = run.eval(run.convert("train/checkpoint.bin", 30, "conv30"), "eval30");
    let secs = run.train_secs + start.elapsed().as_secs_f64();
    verdict(
        6,
        "end-to-end conversion",
        r.style_accuracy >= 0.90 && r.content_accuracy >= 0.90 && secs < 1200.0,
        format!(
            "{} test swaps: style {:.4}, content {:.4} (>= 0.90), train+eval {secs:.1}s",
            r.n, r.style_accuracy, r.content_accuracy
        ),
    );
}

#[test]
fn c07_iteration_study() {
    let run = trained();
    let d30 = run
        .eval(run.convert("train/checkpoint.bin", 30, "it30"), "it30")
        .distance;
    let d6 = run.eval(run.convert("train/checkpoint.bin", 6, "it6"), "it6").distance;
    verdict(
        7,
        "iteration study",
        d30 <= d6 + 0.02,
        format!("sliced W1 at 30 steps {d30:.4}, at 6 steps {d6:.4} (30 <= 6 + 0.02)"),
    );
}

#[test]
fn c08_ablation_orderings() {
    let dir = tempfile::tempdir().unwrap();
    let report = cmd_ablate(&canonical(), dir.path(), |_| {}).unwrap();
    let table: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{} {:.4}", r.variant, r.report.style_accuracy))
        .collect();
    verdict(
        8,
        "ablation orderings",
        report.violations.is_empty(),
        format!(
            "style accuracy [{}]; violations {:?}",
            table.join(", "),
            report.violations
        ),
    );
}

#[test]
fn c09_adaptation() {
    let run = trained();
    let short = run.adapt(500);
    let long = run.adapt(5000);
    let improves = short.after.style_accuracy > short.before.style_accuracy;
    let overfits = long.after.content_accuracy < short.after.content_accuracy;
    verdict(
        9,
        "adaptation",
        improves && overfits,
        format!(
            "style {}: transfer {:.4} zero-shot -> {:.4} at 500 steps; content {:.4} at 500 -> {:.4} at 5000 steps",
            short.style,
            short.before.style_accuracy,
            short.after.style_accuracy,
            short.after.content_accuracy,
            long.after.content_accuracy
        ),
    );
}

#[test]
fn c10_reproducibility() {
    let run = trained();
    cmd_train(&canonical(), &run.path("train_again")).unwrap();
    let same = |a: &str, b: &str| fs::read(run.path(a)).unwrap() == fs::read(run.path(b)).unwrap();
    let metrics = same("train/metrics.csv", "train_again/metrics.csv");
    let ckpt = same("train/checkpoint.bin", "train_again/checkpoint.bin");
    run.convert("train/checkpoint.bin", 6, "repro_a");
    run.convert("train_again/checkpoint.bin", 6, "repro_b");
    let dumps = same("repro_a/converted.csv", "repro_b/converted.csv");
    verdict(
        10,
        "reproducibility",
        metrics && ckpt && dumps,
        format!("identical bytes: metrics {metrics}, checkpoint {ckpt}, sample dump {dumps}"),
    );
}
