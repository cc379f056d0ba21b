mod common;

use common::formula_oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ssmix::data::{DataConfig, KpiTable, WindowDataset};
use ssmix::eval::{
    bootstrap_errors_ci, latency_bench, metrics, permutation_importance, persistence_forecast, skill, BenchOptions,
    MetricsReport, Statistic,
};
use ssmix::model::ModelConfig;
use ssmix::train::{fit, TrainConfig};

#[test]
fn metrics_match_formula_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = rng.random_range(2..500);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-90.0..-70.0)).collect();
        let p: Vec<f64> = y.iter().map(|v| v + rng.random_range(-2.0..2.0)).collect();
        let q: Vec<f64> = y.iter().map(|v| v + rng.random_range(-3.0..3.0)).collect();
        let r = MetricsReport::from_predictions(&p, &y, &q, None).unwrap();
        let want = formula_oracle(&p, &y, &q);
        let got = [r.mse, r.rmse, r.mae, r.r2.unwrap(), r.skill_rmse.unwrap(), r.skill_mae.unwrap()];
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
        }
        assert!(r.rmse >= r.mae);
        assert!(r.intervals.is_empty());
    }
}

#[test]
fn persistence_against_itself_has_exactly_zero_skill() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
    let at: Vec<usize> = (1..50).collect();
    let q = persistence_forecast(&y, &at).unwrap();
    let m = metrics(&q, &y[1..]).unwrap();
    let s = skill(&m, &m).unwrap();
    assert_eq!((s.rmse, s.mae), (0.0, 0.0));
}

#[test]
fn unit_step_random_walk_has_unit_persistence_mae() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut y = vec![0.0];
    for _ in 0..10_000 {
        let step = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        y.push(y.last().unwrap() + step);
    }
    let at: Vec<usize> = (1..y.len()).collect();
    let m = metrics(&persistence_forecast(&y, &at).unwrap(), &y[1..]).unwrap();
    assert_eq!(m.mae, 1.0);
    assert_eq!(m.rmse, 1.0);
    let constant = vec![4.2; 20];
    let m = metrics(&persistence_forecast(&constant, &(1..20).collect::<Vec<_>>()).unwrap(), &constant[1..]).unwrap();
    assert_eq!((m.mae, m.rmse), (0.0, 0.0));
}

#[test]
fn physical_units_survive_a_standardization_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y: Vec<f64> = (0..200).map(|_| rng.random_range(-90.0..-70.0)).collect();
    let p: Vec<f64> = y.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
    let (mu, sd) = (-80.3, 4.7);
    let back: Vec<f64> = p.iter().map(|v| (v - mu) / sd).map(|s| mu + sd * s).collect();
    let a = metrics(&p, &y).unwrap();
    let b = metrics(&back, &y).unwrap();
    assert!((a.rmse - b.rmse).abs() <= 1e-10 && (a.mae - b.mae).abs() <= 1e-10);
}

#[test]
fn bootstrap_interval_covers_the_true_rmse() {
    let mut hits = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let e: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ci = bootstrap_errors_ci(&e, Statistic::Rmse, 0.95, 2000, seed).unwrap();
        assert!(ci.low <= ci.high);
        if ci.low <= 1.0 && 1.0 <= ci.high {
            hits += 1;
        }
    }
    assert!(hits >= 19, "{hits}/20");
}

#[test]
fn repeated_latency_runs_agree() {
    let cfg = ModelConfig { window: 32, width: 16, n_state: 8, n_layers: 1, kernel_len: 32, ..ModelConfig::default() };
    let opts = BenchOptions { warmup: 10, repetitions: 100, seed: 0 };
    let a = latency_bench::<f64>(&cfg, &opts).unwrap();
    let b = latency_bench::<f64>(&cfg, &opts).unwrap();
    assert!(a.median <= a.p95 && b.median <= b.p95);
    let spread = (a.median - b.median).abs() / a.median.max(b.median);
    assert!(spread <= 0.25, "medians {} and {}", a.median, b.median);
}

/// `y` at step `t + 1` copies `x0` at step `t`; `x1`, `x2` are noise.
fn lagged_copy_dataset() -> WindowDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 3000;
    let x: Vec<[f64; 3]> = (0..n).map(|_| [0; 3].map(|_| StandardNormal.sample(&mut rng))).collect();
    let mut values = Vec::with_capacity(n * 4);
    for t in 0..n {
        let y = if t == 0 { 0.0 } else { x[t - 1][0] };
        values.extend([x[t][0], x[t][1], x[t][2], y]);
    }
    let table = KpiTable {
        columns: ["x0", "x1", "x2", "y"].map(String::from).to_vec(),
        t0: 0.0,
        stride: 1.0,
        steps: (0..n as u64).collect(),
        values,
        imputed: vec![false; n],
    };
    WindowDataset::from_table(table, &DataConfig { window: 8, targets: vec!["y".into()], prune: false, ..Default::default() })
        .unwrap()
}

#[test]
fn importance_singles_out_the_informative_feature() {
    let ds = lagged_copy_dataset();
    let cfg = ModelConfig { n_features: 4, window: 8, kernel_len: 8, width: 8, n_state: 4, n_layers: 1, ..Default::default() };
    let sw = ds.standardized::<f64>().unwrap();
    let tc = TrainConfig { batch_size: 64, max_epochs: 6, seed: 1, ..Default::default() };
    let (params, _) = fit(&sw.samples(ds.split.train()), &sw.samples(ds.split.val()), &cfg, &tc, &mut |_| {}).unwrap();
    let deltas: Vec<f64> =
        (0..4).map(|f| permutation_importance(&params, &cfg, &ds, ds.split.test(), f, 7).unwrap()).collect();
    for (f, &d) in deltas.iter().enumerate().skip(1) {
        assert!(deltas[0] > d, "feature 0 {} vs feature {f} {d}", deltas[0]);
    }
}
