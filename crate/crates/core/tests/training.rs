mod common;

use common::{grad_config, random_params, random_vec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssmix::data::{DataConfig, WindowDataset};
use ssmix::eval::synth;
use ssmix::model::{forward, KernelBank, Mode, ModelConfig, ModelParams, Squeeze};
use ssmix::train::{
    backward, fit, loss, mean_squared_error, OptimizerKind, Sample, TrainConfig, TrainReport,
};

fn toy_samples(cfg: &ModelConfig, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_vec(&mut rng, n * cfg.window * cfg.n_features, 1.0);
    // target: a fixed linear read of the last row plus noise
    let per = cfg.window * cfg.n_features;
    let noise = random_vec(&mut rng, n, 0.1);
    let y = (0..n).map(|i| x[i * per + per - 1] * 0.8 - x[i * per + per - 2] * 0.3 + noise[i]).collect();
    (x, y)
}

fn as_samples<'a>(cfg: &ModelConfig, x: &'a [f64], y: &'a [f64]) -> Vec<Sample<'a, f64>> {
    let per = cfg.window * cfg.n_features;
    (0..y.len()).map(|i| Sample { x: &x[i * per..(i + 1) * per], y: &y[i..i + 1] }).collect()
}

#[test]
fn loss_examples() {
    let cfg = grad_config(Squeeze::Causal);
    let mut params = random_params(&cfg, 1);
    params.w_head = ssmix::linalg::Mat::zeros(cfg.width, 1);
    params.b_head = vec![0.25];
    let (x, _) = toy_samples(&cfg, 3, 2);
    let exact = vec![0.25; 3];
    let no_decay = TrainConfig { weight_decay: 0.0, optimizer: OptimizerKind::Sgdwd, ..Default::default() };
    assert_eq!(loss(&params, &cfg, &as_samples(&cfg, &x, &exact), &no_decay).unwrap(), 0.0);
    // prediction 0.25 against target -1.75
    let one = &as_samples(&cfg, &x, &[-1.75])[..1];
    assert_eq!(loss(&params, &cfg, one, &no_decay).unwrap(), 4.0);

    let params = random_params(&cfg, 3);
    let (x, y) = toy_samples(&cfg, 5, 4);
    let batch = as_samples(&cfg, &x, &y);
    let lam = 0.01;
    let plain = loss(&params, &cfg, &batch, &no_decay).unwrap();
    let decayed = loss(&params, &cfg, &batch, &TrainConfig { weight_decay: lam, ..no_decay.clone() }).unwrap();
    let norm2: f64 = params.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum();
    assert!((decayed - plain - lam * norm2).abs() <= 1e-12 * decayed.abs().max(1.0));
    // adamw applies decay in the update, not the objective
    let adamw = TrainConfig { weight_decay: lam, ..Default::default() };
    assert_eq!(loss(&params, &cfg, &batch, &adamw).unwrap(), plain);
}

#[test]
fn tau_path_is_isolated_from_other_gradients() {
    let cfg = grad_config(Squeeze::Causal);
    let params = random_params(&cfg, 6);
    let x = random_vec(&mut ChaCha8Rng::seed_from_u64(7), cfg.window * cfg.n_features, 1.0);
    let mode = Mode::Train { seed: 3 };
    let (out, trace) = forward(&params, &cfg, &x, mode).unwrap();
    let grads = backward(&trace.unwrap(), &params, &cfg, &[2.0 * (out[0] - 0.3)]).unwrap();
    let objective = |p: &ModelParams<f64>| (forward(p, &cfg, &x, mode).unwrap().0[0] - 0.3).powi(2);
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(<[f64]>::to_vec).collect();
    // with every tau frozen at its value, the remaining gradients still match
    // central differences, and the tau gradients match their own differences
    let mut probe = params.clone();
    for (ti, name) in names.iter().enumerate() {
        for k in 0..analytic[ti].len() {
            let orig = probe.tensors_mut()[ti][k];
            let h = 1e-5 * orig.abs().max(1.0);
            probe.tensors_mut()[ti][k] = orig + h;
            let fp = objective(&probe);
            probe.tensors_mut()[ti][k] = orig - h;
            let fm = objective(&probe);
            probe.tensors_mut()[ti][k] = orig;
            let num = (fp - fm) / (2.0 * h);
            let a = analytic[ti][k];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            assert!(rel <= 1e-4, "{name}[{k}]: {a} vs {num}");
        }
        if name.ends_with("tau_raw") {
            assert!(analytic[ti][0] != 0.0, "{name} carries no gradient");
        }
    }
}

fn toy_fit(train_cfg: &TrainConfig, model_seed_cfg: &ModelConfig) -> (ModelParams<f64>, TrainReport) {
    let (x, y) = toy_samples(model_seed_cfg, 96, 11);
    let all = as_samples(model_seed_cfg, &x, &y);
    let (train, val) = all.split_at(64);
    fit(train, val, model_seed_cfg, train_cfg, &mut |_| {}).unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig { n_features: 3, window: 8, width: 6, n_state: 4, n_components: 2, n_layers: 1, kernel_len: 8, ..Default::default() }
}

#[test]
fn patience_one_with_infinite_tolerance_stops_after_two_epochs() {
    let cfg = small_model();
    let tc = TrainConfig { patience: 1, tol: f64::INFINITY, batch_size: 16, max_epochs: 10, seed: 5, ..Default::default() };
    let (best, report) = toy_fit(&tc, &cfg);
    assert_eq!(report.epochs.len(), 2);
    assert!(report.early_stopped);
    assert_eq!(report.best_epoch, 1);
    let (first, _) = toy_fit(&TrainConfig { max_epochs: 1, ..tc }, &cfg);
    assert_eq!(best, first);
}

#[test]
fn improving_every_epoch_runs_to_the_limit() {
    let cfg = ModelConfig { dropout: 0.0, ..small_model() };
    let (x, y) = toy_samples(&cfg, 64, 12);
    let all = as_samples(&cfg, &x, &y);
    // full-batch steps with a small rate, validated on the training windows
    let tc = TrainConfig { lr: 1e-4, tol: 0.0, batch_size: 64, max_epochs: 6, seed: 1, ..Default::default() };
    let (best, report) = fit(&all, &all, &cfg, &tc, &mut |_| {}).unwrap();
    assert!(report.epochs.iter().all(|e| e.improved), "{:?}", report.epochs);
    assert_eq!(report.epochs.len(), 6);
    assert_eq!(report.best_epoch, 6);
    assert!(!report.early_stopped);
    let bank = KernelBank::build(&best, &cfg).unwrap();
    assert_eq!(mean_squared_error(&best, &cfg, &bank, &all).unwrap(), report.best_val_loss);
}

#[test]
fn fit_is_seed_deterministic_and_thread_count_free() {
    let cfg = small_model();
    let tc = TrainConfig { batch_size: 20, max_epochs: 3, seed: 9, ..Default::default() };
    let (pa, ra) = toy_fit(&tc, &cfg);
    let (pb, rb) = toy_fit(&tc, &cfg);
    let (pc, rc) = toy_fit(&TrainConfig { threads: 2, ..tc.clone() }, &cfg);
    let losses = |r: &TrainReport| -> Vec<(u64, u64)> {
        r.epochs.iter().map(|e| (e.train_loss.to_bits(), e.val_loss.to_bits())).collect()
    };
    assert_eq!(losses(&ra), losses(&rb));
    assert_eq!(losses(&ra), losses(&rc));
    assert_eq!(pa, pb);
    assert_eq!(pa, pc);
    let (_, rd) = toy_fit(&TrainConfig { seed: 10, ..tc }, &cfg);
    assert_ne!(losses(&ra), losses(&rd));
}

#[test]
fn report_contracts_hold() {
    let cfg = small_model();
    let tc = TrainConfig { patience: 2, batch_size: 16, max_epochs: 12, lr: 2e-2, seed: 4, ..Default::default() };
    let (x, y) = toy_samples(&cfg, 96, 11);
    let all = as_samples(&cfg, &x, &y);
    let (train, val) = all.split_at(64);
    let mut logged = Vec::new();
    let (best, report) = fit(train, val, &cfg, &tc, &mut |e| logged.push(e.clone())).unwrap();
    assert_eq!(logged, report.epochs);
    let min = report.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_val_loss, min);
    assert_eq!(report.epochs[report.best_epoch - 1].val_loss, min);
    let bank = KernelBank::build(&best, &cfg).unwrap();
    assert_eq!(mean_squared_error(&best, &cfg, &bank, val).unwrap(), min);
    assert!(report.epochs.windows(2).all(|w| w[1].lr <= w[0].lr));
}

#[test]
fn synthetic_training_beats_persistence_on_validation() {
    let log = synth::generate(&synth::SynthConfig { steps: 3000, seed: 2, ..Default::default() }).unwrap();
    let ds = WindowDataset::prepare(&log.to_raw_series(), &DataConfig { window: 16, ..Default::default() }).unwrap();
    let cfg = ModelConfig { window: 16, kernel_len: 16, width: 12, n_state: 8, n_layers: 1, ..Default::default() };
    let sw = ds.standardized::<f64>().unwrap();
    let (train, val) = (sw.samples(ds.split.train()), sw.samples(ds.split.val()));
    let tc = TrainConfig { batch_size: 64, max_epochs: 8, seed: 3, ..Default::default() };
    let (_, report) = fit(&train, &val, &cfg, &tc, &mut |_| {}).unwrap();
    let first = report.epochs.first().unwrap().train_loss;
    let last = report.epochs.last().unwrap().train_loss;
    assert!(first > last, "train loss {first} -> {last}");
    // persistence error in the same standardized target units
    let sy = ds.scaler.y_std[0];
    let pers: f64 = ds
        .split
        .val()
        .map(|i| ((ds.persistence(i)[0] - ds.target(i)[0]) / sy).powi(2))
        .sum::<f64>()
        / ds.split.val().len() as f64;
    assert!(report.best_val_loss < pers, "val {} vs persistence {pers}", report.best_val_loss);
}
