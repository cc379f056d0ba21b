//! KPI log ingestion: grid aggregation, missingness, outlier pruning, gap-checked
//! windows, chronological splits and train-only standardization.

mod clean;
mod dataset;
mod window;

pub use clean::{aggregate_to_grid, iqr_bounds, iqr_prune, prune_with_bounds, quantile, resolve_missing, Bounds};
pub use dataset::{DataConfig, StandardizedWindows, WindowDataset, DATASET_KIND};
pub use window::{chrono_split, make_windows, Scaler, SplitBounds, SplitLabel, STD_FLOOR};

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// KPI columns of the radio logs, in file order.
pub const KPI_COLUMNS: [&str; 13] =
    ["MCS", "CQI", "RI", "PMI", "Buffer", "RSRQ", "RSRP", "RSSI", "SINR", "PRBs", "SE", "BLER", "Delay"];

/// Column whose missing cells are imputed instead of dropping the row.
pub const SENTINEL_COLUMN: &str = "Delay";
pub const SENTINEL: f64 = -1.0;
pub const TIMESTAMP_COLUMN: &str = "timestamp";

/// Irregular `(t, x)` samples of one KPI.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub name: String,
    pub samples: Vec<(f64, f64)>,
}

/// Grid-aligned table before missingness is resolved. `cells` is row-major
/// `rows × columns`, `None` where a bin held no sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GridTable {
    pub columns: Vec<String>,
    pub t0: f64,
    pub stride: f64,
    pub steps: Vec<u64>,
    pub cells: Vec<Option<f64>>,
}

impl GridTable {
    pub fn rows(&self) -> usize {
        self.steps.len()
    }

    pub fn row(&self, i: usize) -> &[Option<f64>] {
        let f = self.columns.len();
        &self.cells[i * f..(i + 1) * f]
    }
}

/// Gap-free-per-row KPI table on a uniform grid. Row `i` sits at
/// `t0 + steps[i]·stride`; `steps` is strictly increasing and a step
/// difference above one marks a gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KpiTable {
    pub columns: Vec<String>,
    pub t0: f64,
    pub stride: f64,
    pub steps: Vec<u64>,
    /// row-major `rows × columns`
    pub values: Vec<f64>,
    /// rows whose sentinel-column value was imputed
    pub imputed: Vec<bool>,
}

impl KpiTable {
    pub fn rows(&self) -> usize {
        self.steps.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.columns.len();
        &self.values[i * f..(i + 1) * f]
    }

    pub fn timestamp(&self, i: usize) -> f64 {
        self.t0 + self.steps[i] as f64 * self.stride
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.rows()).map(|i| self.timestamp(i)).collect()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::data("columns", format!("no column named {name:?} (have {})", self.columns.join(", "))))
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        let f = self.columns.len();
        self.values.iter().skip(j).step_by(f).copied()
    }

    /// Structural checks: shapes agree, steps strictly increase, values are
    /// finite and the sentinel only appears where it was imputed.
    pub fn validate(&self) -> Result<()> {
        let f = self.columns.len();
        if f == 0 || self.values.len() != self.rows() * f || self.imputed.len() != self.rows() {
            return Err(Error::data("table", "inconsistent table shape"));
        }
        if !(self.stride > 0.0 && self.stride.is_finite() && self.t0.is_finite()) {
            return Err(Error::data("table", "grid origin and stride must be finite, stride positive"));
        }
        if self.steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::data("table", "grid steps must be strictly increasing"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("table", "non-finite value"));
        }
        if self.imputed.iter().any(|&b| b) && !self.columns.iter().any(|c| c == SENTINEL_COLUMN) {
            return Err(Error::data("table", "imputed rows without a sentinel column"));
        }
        Ok(())
    }

    /// Keeps the rows for which `keep` is true.
    pub fn filter_rows(&self, keep: impl Fn(usize) -> bool) -> KpiTable {
        let f = self.columns.len();
        let mut out = KpiTable { values: Vec::new(), steps: Vec::new(), imputed: Vec::new(), ..self.clone() };
        for i in (0..self.rows()).filter(|&i| keep(i)) {
            out.steps.push(self.steps[i]);
            out.values.extend_from_slice(&self.values[i * f..(i + 1) * f]);
            out.imputed.push(self.imputed[i]);
        }
        out
    }
}

/// Reads a header-bearing comma-separated log: a `timestamp` column plus one
/// column per KPI, empty cells meaning "no sample".
pub fn read_raw_csv(reader: impl Read) -> Result<Vec<RawSeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let ts = headers
        .iter()
        .position(|h| h == TIMESTAMP_COLUMN)
        .ok_or_else(|| Error::data("read", format!("missing {TIMESTAMP_COLUMN:?} column")))?;
    let mut series: Vec<RawSeries> = headers
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != ts)
        .map(|(_, h)| RawSeries { name: h.to_string(), samples: Vec::new() })
        .collect();
    if series.is_empty() {
        return Err(Error::data("read", "no KPI columns"));
    }
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |j: usize| -> Result<Option<f64>> {
            let s = rec.get(j).unwrap_or("");
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(|| Error::data("read", format!("row {}: bad number {s:?}", line + 2)))
        };
        let t = parse(ts)?.ok_or_else(|| Error::data("read", format!("row {}: empty timestamp", line + 2)))?;
        let mut k = 0;
        for j in 0..headers.len() {
            if j == ts {
                continue;
            }
            if let Some(v) = parse(j)? {
                series[k].samples.push((t, v));
            }
            k += 1;
        }
    }
    Ok(series)
}

pub fn read_raw_csv_path(path: impl AsRef<Path>) -> Result<Vec<RawSeries>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data("read", format!("{}: {e}", path.display())))?;
    read_raw_csv(std::io::BufReader::new(file))
}

/// Writes one row per timestamp; `None` cells are left empty.
pub fn write_raw_csv(
    writer: impl Write,
    columns: &[String],
    timestamps: &[f64],
    cells: &[Option<f64>],
) -> Result<()> {
    let f = columns.len();
    if cells.len() != timestamps.len() * f {
        return Err(Error::shape("write_raw_csv", "cells do not match rows × columns"));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(std::iter::once(TIMESTAMP_COLUMN).chain(columns.iter().map(String::as_str)))?;
    for (i, t) in timestamps.iter().enumerate() {
        let mut rec = Vec::with_capacity(f + 1);
        rec.push(t.to_string());
        rec.extend(cells[i * f..(i + 1) * f].iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
