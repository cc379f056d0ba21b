//! Forecast accuracy, persistence skill, bootstrap intervals, permutation
//! importance, latency benchmarks and the synthetic benchmark series.

mod bench;
mod metrics;
pub mod synth;

pub use bench::{doubling_ratios, latency_bench, latency_sweep, BenchOptions, LatencyStats, ScalingRatio};
pub use metrics::{
    bootstrap_ci, bootstrap_errors_ci, metrics, persistence_forecast, skill, Interval, Metrics, Skill, Statistic,
};

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{StandardizedWindows, WindowDataset};
use crate::error::{Error, Result};
use crate::model::{forward_batch, KernelBank, ModelConfig, ModelParams};
use crate::scalar::Scalar;

/// Errors unless the model and dataset agree on `F`, `L` and `O`.
pub fn check_compatible(cfg: &ModelConfig, ds: &WindowDataset) -> Result<()> {
    if cfg.n_features != ds.n_features() || cfg.window != ds.window() || cfg.output_dim != ds.n_outputs() {
        return Err(Error::InvalidArgument(format!(
            "model expects F={}, L={}, O={} but the dataset has F={}, L={}, O={}",
            cfg.n_features,
            cfg.window,
            cfg.output_dim,
            ds.n_features(),
            ds.window(),
            ds.n_outputs()
        )));
    }
    Ok(())
}

/// Physical-unit forecasts for windows in `range`, flattened `n × O`.
pub fn predict<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    ds: &WindowDataset,
    range: Range<usize>,
) -> Result<Vec<f64>> {
    check_compatible(cfg, ds)?;
    let sw = ds.standardized::<T>()?;
    let bank = KernelBank::build(params, cfg)?;
    predict_standardized(params, cfg, &bank, &sw, ds, range)
}

fn predict_standardized<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    bank: &KernelBank<T>,
    sw: &StandardizedWindows<T>,
    ds: &WindowDataset,
    range: Range<usize>,
) -> Result<Vec<f64>> {
    let xs: Vec<&[T]> = range.map(|i| sw.sample(i).x).collect();
    destandardize(forward_batch(params, cfg, bank, &xs)?, ds)
}

fn destandardize<T: Scalar>(preds: Vec<Vec<T>>, ds: &WindowDataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(preds.len() * ds.n_outputs());
    for y in preds {
        let y: Vec<f64> = y.into_iter().map(|v| v.f64()).collect();
        out.extend(ds.scaler.destandardize_target(&y)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self { level: 0.95, resamples: 2000, seed: 0 }
    }
}

/// Accuracy of the model on a window range next to the persistence forecast.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub rmse: f64,
    pub mae: f64,
    pub mse: f64,
    pub r2: Option<f64>,
    pub persistence: Metrics,
    /// `None` when the persistence error is zero.
    pub skill_rmse: Option<f64>,
    pub skill_mae: Option<f64>,
    pub intervals: Vec<Interval>,
}

impl MetricsReport {
    pub fn from_predictions(pred: &[f64], truth: &[f64], persistence: &[f64], ci: Option<&BootstrapOptions>) -> Result<Self> {
        let m = metrics(pred, truth)?;
        let p = metrics(persistence, truth)?;
        let sk = match skill(&m, &p) {
            Ok(s) => Some(s),
            Err(e) => {
                log::warn!("{e}");
                None
            }
        };
        let mut intervals = Vec::new();
        if let Some(o) = ci {
            for stat in [Statistic::Rmse, Statistic::Mae, Statistic::R2] {
                match bootstrap_ci(pred, truth, stat, o.level, o.resamples, o.seed) {
                    Ok(iv) => intervals.push(iv),
                    Err(e) => log::warn!("no {stat:?} interval: {e}"),
                }
            }
        }
        Ok(Self {
            n: m.n,
            rmse: m.rmse,
            mae: m.mae,
            mse: m.mse,
            r2: m.r2,
            persistence: p,
            skill_rmse: sk.map(|s| s.rmse),
            skill_mae: sk.map(|s| s.mae),
            intervals,
        })
    }
}

/// Forecasts, targets and persistence forecasts over a window range.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    ds: &WindowDataset,
    range: Range<usize>,
    ci: Option<&BootstrapOptions>,
) -> Result<MetricsReport> {
    if range.is_empty() {
        return Err(Error::InvalidArgument("evaluate over an empty window range".into()));
    }
    let pred = predict(params, cfg, ds, range.clone())?;
    let truth: Vec<f64> = range.clone().flat_map(|i| ds.target(i)).collect();
    let pers: Vec<f64> = range.flat_map(|i| ds.persistence(i)).collect();
    MetricsReport::from_predictions(&pred, &truth, &pers, ci)
}

fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    (pred.iter().zip(truth).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / pred.len() as f64).sqrt()
}

/// Test RMSE increase when feature `feature` of window `k` is replaced by the
/// same feature of window `perm[k]` (all `L` rows at once).
pub fn permutation_importance_with<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    ds: &WindowDataset,
    range: Range<usize>,
    feature: usize,
    perm: &[usize],
) -> Result<f64> {
    check_compatible(cfg, ds)?;
    if feature >= ds.n_features() {
        return Err(Error::InvalidArgument(format!("feature {feature} out of range")));
    }
    let n = range.len();
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidArgument("perm must be a permutation of the window range".into()));
    }
    let sw = ds.standardized::<T>()?;
    let bank = KernelBank::build(params, cfg)?;
    let truth: Vec<f64> = range.clone().flat_map(|i| ds.target(i)).collect();
    let base = predict_standardized(params, cfg, &bank, &sw, ds, range.clone())?;
    let f = ds.n_features();
    let permuted: Vec<Vec<T>> = range
        .clone()
        .enumerate()
        .map(|(k, i)| {
            let mut x = sw.sample(i).x.to_vec();
            let donor = sw.sample(range.start + perm[k]).x;
            for r in 0..ds.window() {
                x[r * f + feature] = donor[r * f + feature];
            }
            x
        })
        .collect();
    let xs: Vec<&[T]> = permuted.iter().map(Vec::as_slice).collect();
    let shuffled = destandardize(forward_batch(params, cfg, &bank, &xs)?, ds)?;
    Ok(rmse(&shuffled, &truth) - rmse(&base, &truth))
}

/// [`permutation_importance_with`] under a seeded random permutation.
pub fn permutation_importance<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    ds: &WindowDataset,
    range: Range<usize>,
    feature: usize,
    seed: u64,
) -> Result<f64> {
    if range.len() < 2 {
        return Err(Error::InvalidArgument("permutation importance needs at least two windows".into()));
    }
    let mut perm: Vec<usize> = (0..range.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    permutation_importance_with(params, cfg, ds, range, feature, &perm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataConfig;

    fn setup() -> (WindowDataset, ModelConfig, ModelParams<f64>) {
        let log = synth::generate(&synth::SynthConfig { steps: 300, ..Default::default() }).unwrap();
        let ds = WindowDataset::prepare(&log.to_raw_series(), &DataConfig { window: 8, ..Default::default() }).unwrap();
        let cfg = ModelConfig {
            n_features: 13,
            window: 8,
            width: 4,
            n_state: 2,
            n_components: 1,
            n_layers: 1,
            kernel_len: 4,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg, 3).unwrap();
        (ds, cfg, params)
    }

    #[test]
    fn dead_feature_has_zero_importance() {
        let (ds, cfg, mut params) = setup();
        for j in 0..cfg.width {
            params.w_in[(2, j)] = 0.0;
        }
        let d = permutation_importance(&params, &cfg, &ds, ds.split.test(), 2, 7).unwrap();
        assert!(d.abs() <= 1e-10, "{d}");
        let live = permutation_importance(&params, &cfg, &ds, ds.split.test(), 6, 7).unwrap();
        assert!(live != 0.0);
    }

    #[test]
    fn identity_permutation_is_a_noop() {
        let (ds, cfg, params) = setup();
        let n = ds.split.test().len();
        let id: Vec<usize> = (0..n).collect();
        assert_eq!(permutation_importance_with(&params, &cfg, &ds, ds.split.test(), 6, &id).unwrap(), 0.0);
        assert!(permutation_importance_with(&params, &cfg, &ds, ds.split.test(), 6, &vec![0; n]).is_err());
    }

    #[test]
    fn evaluate_counts_test_windows() {
        let (ds, cfg, params) = setup();
        let r = evaluate(&params, &cfg, &ds, ds.split.test(), Some(&BootstrapOptions { resamples: 1000, ..Default::default() }))
            .unwrap();
        assert_eq!(r.n, ds.split.test().len());
        assert!(r.rmse >= r.mae);
        assert_eq!(r.intervals.len(), 3);
        let bad = ModelConfig { window: 9, ..cfg.clone() };
        assert!(evaluate(&ModelParams::<f64>::init(&bad, 0).unwrap(), &bad, &ds, ds.split.test(), None).is_err());
    }

    #[test]
    fn persistence_report_has_zero_skill() {
        let (ds, _, _) = setup();
        let range = ds.split.test();
        let truth: Vec<f64> = range.clone().flat_map(|i| ds.target(i)).collect();
        let pers: Vec<f64> = range.flat_map(|i| ds.persistence(i)).collect();
        let r = MetricsReport::from_predictions(&pers, &truth, &pers, None).unwrap();
        assert_eq!((r.skill_rmse, r.skill_mae), (Some(0.0), Some(0.0)));
    }
}
