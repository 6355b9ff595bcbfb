//! A blend-conditioned ensemble trained on mixtures of two toy styles.

use rand::Rng;

use dddm::ensemble::{Ensemble, EnsembleConfig, TrainBatch};
use dddm::sampler::{mixer_demo, SamplerConfig};
use dddm::tensor::{AdamW, AdamWConfig, ParamStore};
use dddm::toy::{ToyConfig, ToyGenerator};
use dddm::{seeded_rng, NoiseSchedule, Tensor};

const STYLE_A: usize = 1;
const STYLE_B: usize = 4;

/// Observations of both styles with random tokens and their conditional
/// means, which serve as the two attribute priors.
fn draw(gen: &ToyGenerator, rows: usize, rng: &mut impl Rng) -> [(Tensor, Tensor); 2] {
    [STYLE_A, STYLE_B].map(|style| {
        let (mut xs, mut zs) = (Vec::new(), Vec::new());
        for _ in 0..rows {
            let s = gen.sample(style, rng.random_range(0..gen.n_tokens()), rng);
            zs.push(gen.conditional_mean(&s.condition()));
            xs.push(s.x);
        }
        (Tensor::from_rows(&xs).unwrap(), Tensor::from_rows(&zs).unwrap())
    })
}

fn column_means(t: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (acc, v) in m.iter_mut().zip(t.row(r)) {
            *acc += v / t.rows() as f64;
        }
    }
    m
}

#[test]
fn mixer_interpolates_between_sources() {
    let gen = ToyGenerator::new(ToyConfig::default()).unwrap();
    let sched = NoiseSchedule::default();
    let mut store = ParamStore::new();
    let cfg = EnsembleConfig {
        blend_condition: true,
        mlp_lr_scale: 1.0,
        ..EnsembleConfig::default()
    };
    let ens = Ensemble::new(&mut store, cfg, &mut seeded_rng(8, 0)).unwrap();
    let peak = 3e-3;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: peak,
            lr_decay: 1.0,
            ..AdamWConfig::default()
        },
        &store,
    );
    ens.apply_lr_scales(&mut opt);
    let mut rng = seeded_rng(8, 1);
    let (steps, rows) = (1500, 256);
    for k in 0..steps {
        opt.config.lr = peak * (1.0 - k as f64 / steps as f64);
        let b: f64 = rng.random_range(0.0..=1.0);
        let [(xa, za), (xb, zb)] = draw(&gen, rows, &mut rng);
        let mut x0 = xa.clone();
        for (v, w) in x0.data_mut().iter_mut().zip(xb.data()) {
            *v = (1.0 - b) * *v + b * w;
        }
        let batch = TrainBatch {
            x0,
            priors: vec![za, zb],
            style: Tensor::zeros(vec![rows, 8]),
            blend: Some(b),
        };
        ens.train_step(&mut store, &mut opt, &sched, &batch, &mut rng).unwrap();
    }

    let n = 1000;
    let [(xa, za), (xb, zb)] = draw(&gen, n, &mut seeded_rng(8, 2));
    let (ref_a, ref_b) = (column_means(&xa), column_means(&xb));
    let axis: Vec<f64> = ref_b.iter().zip(&ref_a).map(|(b, a)| b - a).collect();
    let span: f64 = axis.iter().map(|v| v * v).sum();
    let style = Tensor::zeros(vec![n, 8]);
    let sampler = SamplerConfig::default();
    let mut positions = Vec::new();
    let mut endpoint_err = Vec::new();
    for blend in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let out = mixer_demo(&store, &ens, &sched, &za, &zb, &style, blend, &sampler, 0)
            .unwrap()
            .output;
        let m = column_means(&out);
        let pos = m
            .iter()
            .zip(&ref_a)
            .zip(&axis)
            .map(|((m, a), d)| (m - a) * d)
            .sum::<f64>()
            / span;
        positions.push(pos);
        let reference = if blend == 0.0 {
            Some(&ref_a)
        } else if blend == 1.0 {
            Some(&ref_b)
        } else {
            None
        };
        if let Some(r) = reference {
            endpoint_err.push(m.iter().zip(r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    assert!(
        endpoint_err.iter().all(|&e| e <= 0.1),
        "endpoint mean errors {endpoint_err:?}"
    );
    assert!(
        positions.windows(2).all(|w| w[1] > w[0]),
        "positions along A->B {positions:?}"
    );
}
