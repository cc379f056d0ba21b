use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    aggregate_to_grid, chrono_split, iqr_prune, make_windows, resolve_missing, KpiTable, RawSeries, Scaler,
    SplitBounds, SENTINEL_COLUMN,
};
use crate::container::{Container, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::train::Sample;

pub const DATASET_KIND: &str = "window-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Averaging window Δ in seconds.
    pub bin_width: f64,
    /// Grid stride τ in seconds.
    pub stride: f64,
    /// Grid origin; the earliest sample when absent.
    pub grid_start: Option<f64>,
    /// Window length L in rows.
    pub window: usize,
    /// Forecast target columns; their count is the model's output dimension.
    pub targets: Vec<String>,
    pub val_frac: f64,
    pub test_frac: f64,
    pub prune: bool,
    pub q_low: f64,
    pub q_high: f64,
    pub iqr_k: f64,
    pub sentinel_column: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            bin_width: 0.02,
            stride: 0.02,
            grid_start: None,
            window: 32,
            targets: vec!["RSRP".into()],
            val_frac: 0.15,
            test_frac: 0.15,
            prune: true,
            q_low: 0.10,
            q_high: 0.90,
            iqr_k: 1.5,
            sentinel_column: SENTINEL_COLUMN.into(),
        }
    }
}

/// Windows over a cleaned table with their chronological split and the scaler
/// fitted on the training part. Window data stays in the table; windows are
/// identified by their first row.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowDataset {
    pub config: DataConfig,
    pub table: KpiTable,
    pub targets: Vec<usize>,
    pub starts: Vec<usize>,
    pub split: SplitBounds,
    pub scaler: Scaler,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: DataConfig,
    columns: Vec<String>,
    t0: f64,
    stride: f64,
    targets: Vec<usize>,
    split: SplitBounds,
    scaler: Scaler,
}

impl WindowDataset {
    /// aggregate → resolve missing → prune → window → split → fit scaler.
    pub fn prepare(series: &[RawSeries], config: &DataConfig) -> Result<Self> {
        let grid = aggregate_to_grid(series, config.bin_width, config.stride, config.grid_start)?;
        let mut table = resolve_missing(&grid, &config.sentinel_column);
        log::info!("grid: {} rows with samples, {} complete after missingness", grid.rows(), table.rows());
        if table.rows() == 0 {
            return Err(Error::data("resolve_missing", "no row has every KPI present"));
        }
        if config.prune {
            let before = table.rows();
            table = iqr_prune(&table, config.q_low, config.q_high, config.iqr_k)?;
            log::info!("iqr prune removed {} of {before} rows", before - table.rows());
        }
        Self::from_table(table, config)
    }

    /// Windows and fractional split over an already cleaned table.
    pub fn from_table(table: KpiTable, config: &DataConfig) -> Result<Self> {
        let starts = make_windows(&table, config.window)?;
        let split = chrono_split(starts.len(), config.val_frac, config.test_frac)?;
        Self::with_split(table, config, starts, split)
    }

    /// Explicit window set and split boundaries.
    pub fn with_split(table: KpiTable, config: &DataConfig, starts: Vec<usize>, split: SplitBounds) -> Result<Self> {
        table.validate()?;
        if split.total != starts.len() {
            return Err(Error::data("chrono_split", "split does not cover the window set"));
        }
        let targets = config.targets.iter().map(|t| table.column_index(t)).collect::<Result<Vec<_>>>()?;
        if targets.is_empty() {
            return Err(Error::InvalidArgument("at least one target column is required".into()));
        }
        let scaler = Scaler::fit(&table, &starts[split.train()], config.window, &targets)?;
        let ds = Self { config: config.clone(), table, targets, starts, split, scaler };
        ds.check_windows()?;
        Ok(ds)
    }

    fn check_windows(&self) -> Result<()> {
        let l = self.config.window;
        for (k, &s) in self.starts.iter().enumerate() {
            if s + l >= self.table.rows() || self.table.steps[s + l] - self.table.steps[s] != l as u64 {
                return Err(Error::data("make_windows", format!("window {k} is not {l} + 1 consecutive grid steps")));
            }
            if k > 0 && s <= self.starts[k - 1] {
                return Err(Error::data("make_windows", "windows are not in origin order"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn window(&self) -> usize {
        self.config.window
    }

    pub fn n_features(&self) -> usize {
        self.table.n_features()
    }

    pub fn n_outputs(&self) -> usize {
        self.targets.len()
    }

    /// Table rows of window `i`'s covariates.
    pub fn rows(&self, i: usize) -> Range<usize> {
        self.starts[i]..self.starts[i] + self.config.window
    }

    /// Grid step `t` of the last covariate row.
    pub fn origin_step(&self, i: usize) -> u64 {
        self.table.steps[self.starts[i] + self.config.window - 1]
    }

    /// Grid step of the target row (always `origin_step + 1`).
    pub fn target_step(&self, i: usize) -> u64 {
        self.table.steps[self.starts[i] + self.config.window]
    }

    /// Physical covariates, row-major `L × F`.
    pub fn features(&self, i: usize) -> &[f64] {
        let f = self.n_features();
        let r = self.rows(i);
        &self.table.values[r.start * f..r.end * f]
    }

    /// Physical target values of window `i`.
    pub fn target(&self, i: usize) -> Vec<f64> {
        let row = self.table.row(self.starts[i] + self.config.window);
        self.targets.iter().map(|&t| row[t]).collect()
    }

    /// Target columns at the origin row, the one-step-lag forecast.
    pub fn persistence(&self, i: usize) -> Vec<f64> {
        let row = self.table.row(self.starts[i] + self.config.window - 1);
        self.targets.iter().map(|&t| row[t]).collect()
    }

    /// Standardized copy of the table and targets in precision `T`.
    pub fn standardized<T: Scalar>(&self) -> Result<StandardizedWindows<T>> {
        self.scaler.validate()?;
        let mut x = self.table.values.clone();
        self.scaler.standardize_rows(&mut x)?;
        let mut y = Vec::with_capacity(self.len() * self.n_outputs());
        for i in 0..self.len() {
            y.extend(self.scaler.standardize_target(&self.target(i))?);
        }
        Ok(StandardizedWindows {
            x: x.into_iter().map(T::of).collect(),
            y: y.into_iter().map(T::of).collect(),
            starts: self.starts.clone(),
            window: self.config.window,
            n_features: self.n_features(),
            n_outputs: self.n_outputs(),
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let header = Header {
            config: self.config.clone(),
            columns: self.table.columns.clone(),
            t0: self.table.t0,
            stride: self.table.stride,
            targets: self.targets.clone(),
            split: self.split,
            scaler: self.scaler.clone(),
        };
        let mut c = Container::new(DATASET_KIND, &header)?;
        let rows = self.table.rows();
        c.push(Tensor::new("steps", vec![rows], self.table.steps.iter().map(|&s| s as f64).collect())?);
        c.push(Tensor::new("values", vec![rows, self.n_features()], self.table.values.clone())?);
        c.push(Tensor::new("imputed", vec![rows], self.table.imputed.iter().map(|&b| f64::from(u8::from(b))).collect())?);
        c.push(Tensor::new("starts", vec![self.len()], self.starts.iter().map(|&s| s as f64).collect())?);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != DATASET_KIND {
            return Err(Error::Format(format!("expected a {DATASET_KIND} artifact, found {}", c.kind)));
        }
        let h: Header = c.header_as()?;
        let as_index = |name: &str| -> Result<Vec<u64>> {
            c.tensor(name)?
                .data
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
                        Ok(v as u64)
                    } else {
                        Err(Error::Format(format!("{name}: {v} is not an index")))
                    }
                })
                .collect()
        };
        let table = KpiTable {
            columns: h.columns,
            t0: h.t0,
            stride: h.stride,
            steps: as_index("steps")?,
            values: c.tensor("values")?.data.clone(),
            imputed: c.tensor("imputed")?.data.iter().map(|&v| v != 0.0).collect(),
        };
        table.validate()?;
        let starts: Vec<usize> = as_index("starts")?.into_iter().map(|s| s as usize).collect();
        let ds = Self { config: h.config, table, targets: h.targets, starts, split: h.split, scaler: h.scaler };
        if ds.split.total != ds.len() || ds.targets.iter().any(|&t| t >= ds.n_features()) {
            return Err(Error::Format("dataset split or targets inconsistent with its windows".into()));
        }
        ds.scaler.validate()?;
        ds.check_windows()?;
        Ok(ds)
    }

    /// Hex SHA-256 of the serialized dataset.
    pub fn digest(&self) -> Result<String> {
        self.to_container()?.digest_hex()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let c = self.to_container()?;
        c.save(path)?;
        c.digest_hex()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load_kind(path, DATASET_KIND)?)
    }
}

/// Standardized rows and targets; window inputs are borrowed slices of `x`.
#[derive(Clone, Debug)]
pub struct StandardizedWindows<T> {
    /// every table row, row-major
    pub x: Vec<T>,
    /// `n_windows × n_outputs`
    pub y: Vec<T>,
    pub starts: Vec<usize>,
    pub window: usize,
    pub n_features: usize,
    pub n_outputs: usize,
}

impl<T: Scalar> StandardizedWindows<T> {
    pub fn sample(&self, i: usize) -> Sample<'_, T> {
        let f = self.n_features;
        let s = self.starts[i];
        Sample {
            x: &self.x[s * f..(s + self.window) * f],
            y: &self.y[i * self.n_outputs..(i + 1) * self.n_outputs],
        }
    }

    pub fn samples(&self, range: Range<usize>) -> Vec<Sample<'_, T>> {
        range.map(|i| self.sample(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SENTINEL;

    fn raw(n: usize) -> Vec<RawSeries> {
        let t = |m: usize| m as f64 * 0.02 + 0.01;
        vec![
            RawSeries {
                name: "RSRP".into(),
                samples: (0..n).filter(|&m| m != 40).map(|m| (t(m), -80.0 + (m as f64 * 0.3).sin())).collect(),
            },
            RawSeries { name: "SINR".into(), samples: (0..n).map(|m| (t(m), 10.0 + (m as f64 * 0.7).cos())).collect() },
            RawSeries {
                name: "Delay".into(),
                samples: (0..n).filter(|&m| m % 17 != 3).map(|m| (t(m), 20.0 + (m % 5) as f64)).collect(),
            },
        ]
    }

    fn cfg() -> DataConfig {
        DataConfig { window: 8, ..DataConfig::default() }
    }

    #[test]
    fn prepare_pipeline() {
        let ds = WindowDataset::prepare(&raw(200), &cfg()).unwrap();
        assert_eq!(ds.table.rows(), 199);
        assert!(ds.table.imputed.iter().filter(|&&b| b).count() > 5);
        let delay = ds.table.column_index("Delay").unwrap();
        for i in 0..ds.table.rows() {
            assert_eq!(ds.table.row(i)[delay] == SENTINEL, ds.table.imputed[i]);
        }
        // segments of 40 and 159 rows with L = 8
        assert_eq!(ds.len(), 32 + 151);
        for i in 0..ds.len() {
            assert_eq!(ds.target_step(i), ds.origin_step(i) + 1);
        }
        let (tr, va, te) = (ds.split.train(), ds.split.val(), ds.split.test());
        assert_eq!((va.len(), te.len()), (27, 27));
        assert!(ds.origin_step(tr.end - 1) < ds.origin_step(va.start));
        assert!(ds.origin_step(va.end - 1) < ds.origin_step(te.start));
    }

    #[test]
    fn standardized_samples_borrow_rows() {
        let ds = WindowDataset::prepare(&raw(120), &cfg()).unwrap();
        let sw = ds.standardized::<f64>().unwrap();
        let s = sw.sample(5);
        assert_eq!(s.x.len(), 8 * 3);
        let phys = ds.features(5);
        for (k, (&v, &p)) in s.x.iter().zip(phys).enumerate() {
            let j = k % 3;
            assert!((v - (p - ds.scaler.x_mean[j]) / ds.scaler.x_std[j]).abs() < 1e-12);
        }
        let back = ds.scaler.destandardize_target(s.y).unwrap();
        assert!((back[0] - ds.target(5)[0]).abs() < 1e-12);
        assert_eq!(sw.samples(ds.split.test()).len(), ds.split.test().len());
    }

    #[test]
    fn file_roundtrip_is_byte_stable() {
        let ds = WindowDataset::prepare(&raw(150), &cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        ds.save(&p).unwrap();
        let back = WindowDataset::load(&p).unwrap();
        assert_eq!(back, ds);
        let p2 = dir.path().join("e.bin");
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn short_input_names_make_windows() {
        let err = WindowDataset::prepare(&raw(6), &cfg()).unwrap_err();
        assert!(err.to_string().contains("make_windows"), "{err}");
    }

    #[test]
    fn unknown_target_is_rejected() {
        let c = DataConfig { targets: vec!["nope".into()], ..cfg() };
        assert!(WindowDataset::prepare(&raw(100), &c).is_err());
    }
}
