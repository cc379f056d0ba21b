use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::quantile;
use crate::error::{Error, Result};
use crate::model::{forward_with, KernelBank, Mode, ModelConfig, ModelParams};
use crate::scalar::Scalar;

/// Timed work per repetition is stretched to at least this long by repeating
/// the call, so the clock resolution never dominates.
const MIN_REP: Duration = Duration::from_micros(200);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub warmup: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { warmup: 10, repetitions: 100, seed: 0 }
    }
}

/// Wall-clock statistics of a single eval-mode forward pass, in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub window: usize,
    pub width: usize,
    pub n_state: usize,
    pub n_components: usize,
    pub n_layers: usize,
    pub kernel_len: usize,
    pub n_features: usize,
    pub warmup: usize,
    pub repetitions: usize,
    /// forward calls per timed repetition
    pub calls_per_rep: usize,
    pub median: f64,
    pub p95: f64,
    pub mean: f64,
    pub min: f64,
}

/// A model, its kernels and one input window, ready to be timed.
struct Bench<T: Scalar> {
    cfg: ModelConfig,
    params: ModelParams<T>,
    bank: KernelBank<T>,
    x: Vec<T>,
    calls: usize,
    times: Vec<f64>,
}

impl<T: Scalar> Bench<T> {
    fn new(cfg: &ModelConfig, opts: &BenchOptions) -> Result<Self> {
        let params = ModelParams::<T>::init(cfg, opts.seed)?;
        let bank = KernelBank::build(&params, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
        let x: Vec<T> = (0..cfg.window * cfg.n_features)
            .map(|_| T::of(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)))
            .collect();
        let mut b = Self { cfg: cfg.clone(), params, bank, x, calls: 1, times: Vec::with_capacity(opts.repetitions) };
        for _ in 0..opts.warmup {
            b.call()?;
        }
        let probe = Instant::now();
        b.call()?;
        let single = probe.elapsed();
        if single < MIN_REP {
            b.calls = (MIN_REP.as_nanos() / single.as_nanos().max(1)) as usize + 1;
        }
        Ok(b)
    }

    fn call(&self) -> Result<()> {
        let (y, _) = forward_with(&self.params, &self.cfg, &self.bank, black_box(&self.x), Mode::Eval)?;
        black_box(y);
        Ok(())
    }

    fn rep(&mut self) -> Result<()> {
        let start = Instant::now();
        for _ in 0..self.calls {
            self.call()?;
        }
        self.times.push(start.elapsed().as_secs_f64() / self.calls as f64);
        Ok(())
    }

    fn stats(mut self, opts: &BenchOptions) -> LatencyStats {
        let cfg = &self.cfg;
        let mean = self.times.iter().sum::<f64>() / self.times.len() as f64;
        self.times.sort_by(f64::total_cmp);
        LatencyStats {
            window: cfg.window,
            width: cfg.width,
            n_state: cfg.n_state,
            n_components: cfg.n_components,
            n_layers: cfg.n_layers,
            kernel_len: cfg.kernel_len,
            n_features: cfg.n_features,
            warmup: opts.warmup,
            repetitions: opts.repetitions,
            calls_per_rep: self.calls,
            median: quantile(&self.times, 0.5),
            p95: quantile(&self.times, 0.95),
            mean,
            min: self.times[0],
        }
    }
}

/// Times forward passes of a randomly initialized model on a pre-generated
/// window. Kernels are built once up front, as in deployment.
pub fn latency_bench<T: Scalar>(cfg: &ModelConfig, opts: &BenchOptions) -> Result<LatencyStats> {
    Ok(latency_sweep::<T>(cfg, &[cfg.window], opts)?.remove(0))
}

/// One benchmark per window length, all other settings from `base`.
///
/// Repetitions run round-robin over the windows, so drift in machine speed
/// lands on every length alike instead of skewing their ratios.
pub fn latency_sweep<T: Scalar>(base: &ModelConfig, windows: &[usize], opts: &BenchOptions) -> Result<Vec<LatencyStats>> {
    if opts.repetitions < 20 {
        return Err(Error::InvalidArgument("latency_bench needs at least 20 repetitions".into()));
    }
    let mut benches = windows
        .iter()
        .map(|&window| Bench::<T>::new(&ModelConfig { window, ..base.clone() }, opts))
        .collect::<Result<Vec<_>>>()?;
    for _ in 0..opts.repetitions {
        for b in &mut benches {
            b.rep()?;
        }
    }
    Ok(benches
        .into_iter()
        .map(|b| {
            let stats = b.stats(opts);
            log::info!("L = {}: median {:.3e} s, p95 {:.3e} s", stats.window, stats.median, stats.p95);
            stats
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRatio {
    pub from_window: usize,
    pub to_window: usize,
    /// `median(to) / median(from)`
    pub ratio: f64,
}

/// Median ratios between every pair of consecutive entries whose windows
/// differ by a factor of two.
pub fn doubling_ratios(stats: &[LatencyStats]) -> Vec<ScalingRatio> {
    stats
        .windows(2)
        .filter(|w| w[1].window == 2 * w[0].window)
        .map(|w| ScalingRatio { from_window: w[0].window, to_window: w[1].window, ratio: w[1].median / w[0].median })
        .collect()
}
