//! Synthetic KPI log with a two-timescale target.
//!
//! The target channel `RSRP` is `−87.6 + s_t + f_t + e_t` where `s` is a slow
//! AR(1) (decay 0.98), `f` a fast AR(1) (decay 0.60) and `e` observation noise
//! with standard deviation 0.05. The fast component is driven by the previous
//! step's value of an observed exogenous channel (`SINR`), so a model that
//! reads the covariates can beat persistence. The remaining channels are
//! independent AR(1) distractors around typical levels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{RawSeries, KPI_COLUMNS, SENTINEL_COLUMN};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub steps: usize,
    pub seed: u64,
    /// Sampling period in seconds.
    pub period: f64,
    pub slow_decay: f64,
    pub fast_decay: f64,
    /// Innovation std of the slow component.
    pub slow_noise: f64,
    /// Unobserved innovation std of the fast component.
    pub fast_noise: f64,
    /// Std of the observed driver.
    pub driver_std: f64,
    pub obs_noise: f64,
    /// Probability that a row lacks its `Delay` sample.
    pub delay_missing: f64,
    /// Probability that a row lacks every KPI (a logging gap).
    pub gap_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            seed: 0,
            period: 0.02,
            slow_decay: 0.98,
            fast_decay: 0.60,
            slow_noise: 0.05,
            fast_noise: 0.02,
            driver_std: 0.3,
            obs_noise: 0.05,
            delay_missing: 0.01,
            gap_rate: 0.0005,
        }
    }
}

/// Row-major log with `None` for absent samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthLog {
    pub columns: Vec<String>,
    pub timestamps: Vec<f64>,
    pub cells: Vec<Option<f64>>,
}

impl SynthLog {
    pub fn to_raw_series(&self) -> Vec<RawSeries> {
        let f = self.columns.len();
        self.columns
            .iter()
            .enumerate()
            .map(|(j, name)| RawSeries {
                name: name.clone(),
                samples: self
                    .timestamps
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &t)| self.cells[i * f + j].map(|v| (t, v)))
                    .collect(),
            })
            .collect()
    }

    pub fn write_csv(&self, w: impl std::io::Write) -> Result<()> {
        crate::data::write_raw_csv(w, &self.columns, &self.timestamps, &self.cells)
    }
}

/// `(mean, std)` of each distractor channel, in column order.
const LEVELS: [(f64, f64); 13] = [
    (20.0, 3.0),     // MCS
    (11.0, 1.5),     // CQI
    (1.8, 0.3),      // RI
    (4.0, 1.0),      // PMI
    (5.0e4, 1.0e4),  // Buffer
    (-11.0, 1.0),    // RSRQ
    (-87.6, 0.0),    // RSRP (target, generated separately)
    (-60.0, 2.0),    // RSSI
    (18.3, 0.0),     // SINR (driver)
    (40.0, 8.0),     // PRBs
    (4.0, 0.8),      // SE
    (0.05, 0.01),    // BLER
    (25.0, 4.0),     // Delay
];

pub fn generate(cfg: &SynthConfig) -> Result<SynthLog> {
    let unit = |v: f64| (0.0..1.0).contains(&v);
    if cfg.steps < 2
        || !unit(cfg.slow_decay.abs())
        || !unit(cfg.fast_decay.abs())
        || !(cfg.period > 0.0)
        || !(0.0..=1.0).contains(&cfg.delay_missing)
        || !(0.0..=1.0).contains(&cfg.gap_rate)
    {
        return Err(Error::InvalidArgument("synth: invalid configuration".into()));
    }
    let normal = |s: f64| Normal::new(0.0, s).map_err(|e| Error::InvalidArgument(format!("synth: {e}")));
    let (slow_n, fast_n, drv_n, obs_n, std_n) =
        (normal(cfg.slow_noise)?, normal(cfg.fast_noise)?, normal(cfg.driver_std)?, normal(cfg.obs_noise)?, normal(1.0)?);
    let delay_miss = Bernoulli::new(cfg.delay_missing).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let gap = Bernoulli::new(cfg.gap_rate).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let f = KPI_COLUMNS.len();
    let target = KPI_COLUMNS.iter().position(|&c| c == "RSRP").expect("RSRP column");
    let driver = KPI_COLUMNS.iter().position(|&c| c == "SINR").expect("SINR column");
    let delay = KPI_COLUMNS.iter().position(|&c| c == SENTINEL_COLUMN).expect("Delay column");
    const DISTRACTOR_DECAY: f64 = 0.9;
    let distractor_noise = (1.0 - DISTRACTOR_DECAY * DISTRACTOR_DECAY).sqrt();

    let mut slow = cfg.slow_noise / (1.0 - cfg.slow_decay * cfg.slow_decay).sqrt() * std_n.sample(&mut rng);
    let mut fast = 0.0;
    let mut u_prev = 0.0;
    let mut z: Vec<f64> = (0..f).map(|_| std_n.sample(&mut rng)).collect();

    let mut timestamps = Vec::with_capacity(cfg.steps);
    let mut cells = Vec::with_capacity(cfg.steps * f);
    for m in 0..cfg.steps {
        slow = cfg.slow_decay * slow + slow_n.sample(&mut rng);
        fast = cfg.fast_decay * fast + u_prev + fast_n.sample(&mut rng);
        let u = drv_n.sample(&mut rng);
        u_prev = u;
        let y = LEVELS[target].0 + slow + fast + obs_n.sample(&mut rng);
        let mut row: Vec<Option<f64>> = Vec::with_capacity(f);
        for (j, &(mean, sd)) in LEVELS.iter().enumerate() {
            z[j] = DISTRACTOR_DECAY * z[j] + distractor_noise * std_n.sample(&mut rng);
            row.push(Some(match j {
                _ if j == target => y,
                _ if j == driver => mean + 5.0 * u,
                _ => mean + sd * z[j],
            }));
        }
        if delay_miss.sample(&mut rng) {
            row[delay] = None;
        }
        if gap.sample(&mut rng) {
            row.iter_mut().for_each(|c| *c = None);
        }
        // mid-bin timestamps keep samples away from bin edges
        timestamps.push((m as f64 + 0.5) * cfg.period);
        cells.extend(row);
    }
    Ok(SynthLog { columns: KPI_COLUMNS.iter().map(|s| s.to_string()).collect(), timestamps, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        let cfg = SynthConfig { steps: 500, ..SynthConfig::default() };
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        assert_ne!(a, generate(&SynthConfig { seed: 1, ..cfg.clone() }).unwrap());
        assert_eq!(a.cells.len(), 500 * 13);
        let raw = a.to_raw_series();
        assert_eq!(raw.len(), 13);
        assert!(raw.iter().all(|s| s.samples.len() <= 500 && s.samples.len() > 400));
    }

    #[test]
    fn fast_component_follows_the_driver() {
        let cfg = SynthConfig { steps: 20_000, delay_missing: 0.0, gap_rate: 0.0, ..SynthConfig::default() };
        let log = generate(&cfg).unwrap();
        let col = |j: usize| -> Vec<f64> { (0..cfg.steps).map(|i| log.cells[i * 13 + j].unwrap()).collect() };
        let (y, u) = (col(6), col(8));
        // corr(Δy_{t+1}, u_t) should be strongly positive
        let dy: Vec<f64> = y.windows(2).map(|w| w[1] - w[0]).collect();
        let uu = &u[..dy.len()];
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mdy, mu) = (mean(&dy), mean(uu));
        let cov: f64 = dy.iter().zip(uu).map(|(a, b)| (a - mdy) * (b - mu)).sum();
        let vdy: f64 = dy.iter().map(|a| (a - mdy).powi(2)).sum();
        let vu: f64 = uu.iter().map(|b| (b - mu).powi(2)).sum();
        assert!(cov / (vdy * vu).sqrt() > 0.5);
    }
}
