use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::quantile;
use crate::error::{Error, Result};

/// Point accuracy of a forecast in physical units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    /// `None` when the truth is constant and R² is undefined.
    pub r2: Option<f64>,
}

fn check_pair(pred: &[f64], truth: &[f64], op: &'static str) -> Result<()> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::shape(op, format!("{} predictions vs {} targets", pred.len(), truth.len())));
    }
    Ok(())
}

pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
    check_pair(pred, truth, "metrics")?;
    let n = pred.len();
    let nf = n as f64;
    let (mut sse, mut sae) = (0.0, 0.0);
    for (p, y) in pred.iter().zip(truth) {
        let e = p - y;
        sse += e * e;
        sae += e.abs();
    }
    let mean = truth.iter().sum::<f64>() / nf;
    let sst: f64 = truth.iter().map(|y| (y - mean) * (y - mean)).sum();
    let r2 = if sst > 0.0 {
        Some(1.0 - sse / sst)
    } else if n == 1 && sse == 0.0 {
        Some(1.0)
    } else {
        None
    };
    let mse = sse / nf;
    Ok(Metrics { n, mse, rmse: mse.sqrt(), mae: sae / nf, r2 })
}

/// `ŷ_i = y[t_i − 1]` for each index `t_i` into the full series.
pub fn persistence_forecast(series: &[f64], at: &[usize]) -> Result<Vec<f64>> {
    at.iter()
        .map(|&t| {
            if t == 0 || t > series.len() {
                Err(Error::data("persistence_forecast", format!("index {t} has no predecessor in a series of {}", series.len())))
            } else {
                Ok(series[t - 1])
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skill {
    pub rmse: f64,
    pub mae: f64,
}

/// `1 − model/persistence` for RMSE and MAE. Zero persistence error makes the
/// ratio meaningless and is reported as an error.
pub fn skill(model: &Metrics, persistence: &Metrics) -> Result<Skill> {
    if !(persistence.rmse > 0.0 && persistence.mae > 0.0) {
        return Err(Error::numeric("skill", "persistence error is zero; skill undefined on a perfectly persistent series"));
    }
    Ok(Skill { rmse: 1.0 - model.rmse / persistence.rmse, mae: 1.0 - model.mae / persistence.mae })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Rmse,
    Mae,
    Mse,
    R2,
}

impl Statistic {
    /// Value on an index subset; `None` for an undefined R².
    fn eval(self, pred: &[f64], truth: &[f64], idx: &[usize]) -> Option<f64> {
        let n = idx.len() as f64;
        match self {
            Statistic::Mse | Statistic::Rmse => {
                let mse = idx.iter().map(|&i| (pred[i] - truth[i]).powi(2)).sum::<f64>() / n;
                Some(if self == Statistic::Rmse { mse.sqrt() } else { mse })
            }
            Statistic::Mae => Some(idx.iter().map(|&i| (pred[i] - truth[i]).abs()).sum::<f64>() / n),
            Statistic::R2 => {
                let mean = idx.iter().map(|&i| truth[i]).sum::<f64>() / n;
                let sst: f64 = idx.iter().map(|&i| (truth[i] - mean).powi(2)).sum();
                let sse: f64 = idx.iter().map(|&i| (pred[i] - truth[i]).powi(2)).sum();
                (sst > 0.0).then(|| 1.0 - sse / sst)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub statistic: Statistic,
    pub point: f64,
    pub low: f64,
    pub high: f64,
    pub level: f64,
    pub resamples: usize,
    /// Resamples on which the statistic was undefined (R² only).
    pub undefined: usize,
}

/// Percentile bootstrap over resampled index sets of `(pred, truth)` pairs.
pub fn bootstrap_ci(
    pred: &[f64],
    truth: &[f64],
    statistic: Statistic,
    level: f64,
    resamples: usize,
    seed: u64,
) -> Result<Interval> {
    check_pair(pred, truth, "bootstrap_ci")?;
    let n = pred.len();
    if n < 2 {
        return Err(Error::InvalidArgument("bootstrap_ci needs at least two samples".into()));
    }
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(Error::InvalidArgument("bootstrap_ci: level must lie in (0, 1) and resamples be positive".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = statistic
        .eval(pred, truth, &all)
        .ok_or_else(|| Error::numeric("bootstrap_ci", "statistic undefined on the full sample"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n];
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
        if let Some(s) = statistic.eval(pred, truth, &idx) {
            stats.push(s);
        }
    }
    if stats.is_empty() {
        return Err(Error::numeric("bootstrap_ci", "statistic undefined on every resample"));
    }
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let low = quantile(&stats, alpha);
    let high = quantile(&stats, 1.0 - alpha);
    debug_assert!(low <= high);
    Ok(Interval { statistic, point, low, high, level, resamples, undefined: resamples - stats.len() })
}

/// [`bootstrap_ci`] on raw errors (prediction minus truth).
pub fn bootstrap_errors_ci(errors: &[f64], statistic: Statistic, level: f64, resamples: usize, seed: u64) -> Result<Interval> {
    if statistic == Statistic::R2 {
        return Err(Error::InvalidArgument("R² needs predictions and targets, not errors".into()));
    }
    bootstrap_ci(errors, &vec![0.0; errors.len()], statistic, level, resamples, seed)
}
