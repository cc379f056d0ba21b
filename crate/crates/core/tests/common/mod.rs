#![allow(dead_code)]

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssmix::linalg::Mat;
use ssmix::model::{forward, ops, Mode, ModelConfig, ModelParams, Squeeze};
use ssmix::sskernel::{build_legs, discretize, impulse_response, SsmComponent};
use ssmix::train::backward;

/// The small configuration used for gradient checks.
pub fn grad_config(squeeze: Squeeze) -> ModelConfig {
    ModelConfig {
        n_features: 3,
        window: 8,
        output_dim: 1,
        width: 4,
        n_state: 2,
        n_components: 2,
        n_layers: 1,
        kernel_len: 4,
        se_reduction: 2,
        glu_ratio: 1.0,
        dropout: 0.1,
        ln_epsilon: 1e-5,
        squeeze,
    }
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Random parameters with nonzero skip terms and perturbed norms so every
/// tensor carries a nontrivial gradient.
pub fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    for layer in &mut p.layers {
        for comp in &mut layer.components {
            for d in &mut comp.d_skip {
                *d = rng.random_range(-0.5..0.5);
            }
        }
        for v in layer.ln1_gamma.iter_mut().chain(layer.ln2_gamma.iter_mut()) {
            *v = rng.random_range(0.5..1.5);
        }
        for v in layer.ln1_beta.iter_mut().chain(layer.ln2_beta.iter_mut()) {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    p.b_head[0] = 0.1;
    p
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compares the analytic gradient of `(f(x) − y)²` (dropout on, fixed seed)
/// against central differences over every scalar parameter.
pub fn gradient_check(params: &ModelParams<f64>, cfg: &ModelConfig, x: &[f64], y: f64, seed: u64) -> GradCheck {
    let mode = Mode::Train { seed };
    let objective = |p: &ModelParams<f64>| {
        let (out, _) = forward(p, cfg, x, mode).unwrap();
        (out[0] - y).powi(2)
    };
    let (out, trace) = forward(params, cfg, x, mode).unwrap();
    let mut grad_out = vec![0.0; out.len()];
    grad_out[0] = 2.0 * (out[0] - y);
    let grads = backward(&trace.unwrap(), params, cfg, &grad_out).unwrap();

    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|t| t.to_vec()).collect();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
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
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}] analytic {a:e} numeric {num:e}"));
            }
            checked += 1;
        }
    }
    GradCheck { max_rel_err: worst.0, worst: worst.1, checked }
}

/// The configuration checked against the straight-line oracle.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_features: 2,
        window: 4,
        output_dim: 1,
        width: 4,
        n_state: 2,
        n_components: 1,
        n_layers: 1,
        kernel_len: 4,
        se_reduction: 2,
        glu_ratio: 1.0,
        dropout: 0.1,
        ln_epsilon: 1e-5,
        squeeze: Squeeze::Causal,
    }
}

/// `|a − b| / max(1, |b|)` maximized over the pairs.
pub fn max_scaled_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

/// Eval-mode forward of the tiny model against the oracle.
pub fn forward_oracle_err(seed: u64) -> f64 {
    let cfg = tiny_config();
    let params = random_params(&cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
    let x = random_vec(&mut rng, cfg.window * cfg.n_features, 2.0);
    let (got, _) = forward(&params, &cfg, &x, Mode::Eval).unwrap();
    max_scaled_err(&got, &oracle::forward(&params, &cfg, &x))
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat<f64> {
    Mat::from_vec(r, c, random_vec(rng, r * c, scale)).unwrap()
}

/// Worst scaled error of each building block against its oracle on one
/// random instance.
pub fn block_oracle_errs(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (l, f, d) = (4 + rng.random_range(0..5), 1 + rng.random_range(0..4), 2 + rng.random_range(0..5));
    let x = rand_mat(&mut rng, l, f, 2.0);
    let w = rand_mat(&mut rng, f, d, 1.0);
    let got = ops::embed(&x, &w).unwrap();
    out.push(("embed", max_scaled_err(got.as_slice(), &oracle::matmul(x.as_slice(), w.as_slice(), l, f, d))));

    let l_k = 1 + rng.random_range(0..l);
    let h = rand_mat(&mut rng, l, d, 2.0);
    let tp = ssmix::sskernel::Taps::from_vec(d, l_k, random_vec(&mut rng, d * l_k, 1.0)).unwrap();
    let got = ops::depthwise_causal_conv(&h, &tp).unwrap();
    out.push(("depthwise_conv", max_scaled_err(got.as_slice(), &oracle::conv(h.as_slice(), tp.as_slice(), l, d, l_k))));

    let r = 1 + rng.random_range(0..d);
    let (w1, w2) = (rand_mat(&mut rng, d, r, 1.0), rand_mat(&mut rng, r, d, 1.0));
    let u = rand_mat(&mut rng, l, d, 2.0);
    for (mode, causal) in [(Squeeze::Causal, true), (Squeeze::Window, false)] {
        let se = ops::se_gate(&h, &w1, &w2, mode).unwrap();
        let gated = ops::apply_gate(&u, &se.gate).unwrap();
        let gate = oracle::se_gate(h.as_slice(), w1.as_slice(), w2.as_slice(), l, d, r, causal);
        let want: Vec<f64> = (0..l * d).map(|k| u.as_slice()[k] * gate[if causal { k } else { k % d }]).collect();
        out.push(("se_gate", max_scaled_err(se.gate.as_slice(), &gate).max(max_scaled_err(gated.as_slice(), &want))));
    }

    let hw = 1 + rng.random_range(0..2 * d);
    let (wa, wg, wd) = (rand_mat(&mut rng, d, hw, 1.0), rand_mat(&mut rng, d, hw, 1.0), rand_mat(&mut rng, hw, d, 1.0));
    let got = ops::glu_mix(&h, &wa, &wg, &wd).unwrap();
    let want = oracle::glu(h.as_slice(), wa.as_slice(), wg.as_slice(), wd.as_slice(), l, d, hw);
    out.push(("glu", max_scaled_err(got.as_slice(), &want)));

    let z = random_vec(&mut rng, d, 3.0);
    let (g, b) = (random_vec(&mut rng, d, 1.5), random_vec(&mut rng, d, 1.0));
    let got = ops::layer_norm(&z, &g, &b, 1e-5);
    out.push(("layer_norm", max_scaled_err(&got, &oracle::layer_norm(&z, &g, &b, 1e-5))));

    let n = 1 + rng.random_range(0..8);
    let legs = build_legs::<f64>(n).unwrap();
    let dt = 10f64.powf(rng.random_range(-2.0..0.5));
    let mut comp = SsmComponent::init(&legs, d, dt, &mut rng);
    comp.d_skip = random_vec(&mut rng, d, 1.0);
    let trans = discretize(&legs, comp.dt()).unwrap();
    let got = impulse_response(&comp, &trans, l_k).unwrap();
    let (a_ct, _) = oracle::legs(n);
    let ad = oracle::tustin(&a_ct, n, oracle::softplus(comp.tau_raw));
    let want = oracle::taps(&ad, n, &comp.b, &comp.c, &comp.d_skip, l_k);
    out.push(("taps", max_scaled_err(got.as_slice(), &want)));
    out
}

/// Perturbs row `t` of a random input and reports the first activation
/// that changed at a time before `t`, if any. Dropout masks are shared
/// between the pair (same seed).
pub fn causality_probe(cfg: &ModelConfig, params: &ModelParams<f64>, seed: u64) -> Option<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, f) = (cfg.window, cfg.n_features);
    let x = random_vec(&mut rng, l * f, 2.0);
    let t = rng.random_range(0..l);
    let mut y = x.clone();
    for v in &mut y[t * f..(t + 1) * f] {
        *v += rng.random_range(-3.0..3.0);
    }
    let mode = Mode::Train { seed };
    let (_, ta) = forward(params, cfg, &x, mode).unwrap();
    let (_, tb) = forward(params, cfg, &y, mode).unwrap();
    let (ta, tb) = (ta.unwrap(), tb.unwrap());
    for ((name, a), (_, b)) in ta.time_indexed().into_iter().zip(tb.time_indexed()) {
        for s in 0..t {
            if a.row(s).iter().zip(b.row(s)).any(|(p, q)| p.to_bits() != q.to_bits()) {
                return Some(format!("{name} row {s} changed after perturbing row {t}"));
            }
        }
    }
    None
}

/// Irregular KPI log with logging gaps, missing `Delay` samples and a few
/// gross outliers. Columns `a`, `b`, `y`, `Delay`; stride 0.02 s.
pub fn random_log(seed: u64, rows: usize) -> Vec<ssmix::data::RawSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ["a", "b", "y", "Delay"];
    let mut series: Vec<ssmix::data::RawSeries> =
        names.iter().map(|n| ssmix::data::RawSeries { name: n.to_string(), samples: Vec::new() }).collect();
    let gap_rate = rng.random_range(0.0..0.05);
    let mut level = 0.0;
    for m in 0..rows {
        if rng.random_bool(gap_rate) {
            continue;
        }
        let t = (m as f64 + rng.random_range(0.1..0.9)) * 0.02;
        level = 0.9 * level + rng.random_range(-1.0..1.0);
        let outlier = if rng.random_bool(0.01) { 1e3 } else { 0.0 };
        let vals = [rng.random_range(-5.0..5.0) + outlier, level * 2.0 + 10.0, -80.0 + level, rng.random_range(5.0..40.0)];
        for (j, v) in vals.into_iter().enumerate() {
            if j == 3 && rng.random_bool(0.05) {
                continue;
            }
            series[j].samples.push((t, v));
        }
    }
    series
}

pub fn random_data_config(rng: &mut ChaCha8Rng) -> ssmix::data::DataConfig {
    ssmix::data::DataConfig {
        window: rng.random_range(2..12),
        targets: vec!["y".into()],
        grid_start: Some(0.0),
        ..Default::default()
    }
}

/// The three leakage checks on one randomized table: scaler unaffected by
/// arbitrary data after the training boundary, windows strictly in the past
/// of their target, and contiguous ordered split tails.
pub fn leakage_check(seed: u64, appended: usize) -> Result<(), String> {
    use ssmix::data::{make_windows, SplitBounds, WindowDataset};
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1ea4);
    let rows = rng.random_range(300..1500);
    let cfg = random_data_config(&mut rng);
    let ds = WindowDataset::prepare(&random_log(seed, rows), &cfg).map_err(|e| e.to_string())?;
    let l = cfg.window;
    let tau = ds.table.stride;

    for i in 0..ds.len() {
        let origin = ds.table.timestamp(ds.starts[i] + l - 1);
        for r in ds.rows(i) {
            if ds.table.timestamp(r) > origin {
                return Err(format!("window {i}: covariate row {r} after its origin"));
            }
            if r + 1 < ds.starts[i] + l {
                let gap = ds.table.timestamp(r + 1) - ds.table.timestamp(r);
                if (gap - tau).abs() > 1e-9 * tau {
                    return Err(format!("window {i}: within-window gap {gap}"));
                }
            }
        }
        let ahead = ds.table.timestamp(ds.starts[i] + l) - origin;
        if (ahead - tau).abs() > 1e-9 * tau {
            return Err(format!("window {i}: target {ahead} s after its origin"));
        }
    }

    let (tr, va, te) = (ds.split.train(), ds.split.val(), ds.split.test());
    if tr.start != 0 || tr.end != va.start || va.end != te.start || te.end != ds.len() {
        return Err("split ranges are not contiguous tails".into());
    }
    if !(ds.origin_step(tr.end - 1) < ds.origin_step(va.start) && ds.origin_step(va.end - 1) < ds.origin_step(te.start)) {
        return Err("split origins interleave".into());
    }

    // everything after the last training target row is overwritten, and
    // `appended` consecutive rows of arbitrary values follow
    let boundary = ds.starts[tr.end - 1] + l;
    let mut table = ds.table.clone();
    let f = table.n_features();
    for v in &mut table.values[(boundary + 1) * f..] {
        *v = rng.random_range(-1e6..1e6);
    }
    let last = *table.steps.last().unwrap();
    for k in 0..appended {
        table.steps.push(last + 1 + k as u64);
        table.imputed.push(false);
        for _ in 0..f {
            table.values.push(rng.random_range(-1e6..1e6));
        }
    }
    let starts = make_windows(&table, l).map_err(|e| e.to_string())?;
    if starts[..tr.end] != ds.starts[..tr.end] {
        return Err("training windows moved".into());
    }
    let split = SplitBounds::new(tr.end, tr.end + 1, starts.len()).map_err(|e| e.to_string())?;
    let refit = WindowDataset::with_split(table, &cfg, starts, split).map_err(|e| e.to_string())?;
    let bits = |s: &ssmix::data::Scaler| -> Vec<u64> {
        s.x_mean.iter().chain(&s.x_std).chain(&s.y_mean).chain(&s.y_std).map(|v| v.to_bits()).collect()
    };
    if bits(&refit.scaler) != bits(&ds.scaler) {
        return Err("scaler changed after appending post-boundary rows".into());
    }
    Ok(())
}

/// Independent formulas: `(mse, rmse, mae, r2, skill_rmse, skill_mae)`.
pub fn formula_oracle(p: &[f64], y: &[f64], q: &[f64]) -> [f64; 6] {
    let n = p.len() as f64;
    let mse = p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let mae = p.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let ybar = y.iter().sum::<f64>() / n;
    let r2 = 1.0 - p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.iter().map(|b| (b - ybar).powi(2)).sum::<f64>();
    let pmse = q.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let pmae = q.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    [mse, mse.sqrt(), mae, r2, 1.0 - mse.sqrt() / pmse.sqrt(), 1.0 - mae / pmae]
}
