use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GridTable, KpiTable, RawSeries, SENTINEL};
use crate::error::{Error, Result};

/// Bin edges closer than this fraction of a stride snap to the edge, so that
/// timestamps written as `t0 + m·τ` land in bin `m` despite rounding.
const EDGE_SNAP: f64 = 1e-9;

/// Averages each series into bins `[t0 + mτ, t0 + mτ + Δ)`. `t0` defaults to
/// the earliest sample. Only grid rows holding at least one sample of some KPI
/// are emitted; cells without samples are `None`.
pub fn aggregate_to_grid(series: &[RawSeries], window: f64, stride: f64, t0: Option<f64>) -> Result<GridTable> {
    if !(window > 0.0 && window.is_finite() && stride > 0.0 && stride.is_finite()) {
        return Err(Error::InvalidArgument("aggregate_to_grid: window and stride must be positive".into()));
    }
    if series.is_empty() {
        return Err(Error::data("aggregate_to_grid", "no series given"));
    }
    if let Some(s) = series.iter().find(|s| s.samples.is_empty()) {
        return Err(Error::data("aggregate_to_grid", format!("series {:?} is empty", s.name)));
    }
    if series.iter().flat_map(|s| &s.samples).any(|&(t, x)| !t.is_finite() || !x.is_finite()) {
        return Err(Error::data("aggregate_to_grid", "non-finite sample"));
    }
    let t0 = match t0 {
        Some(t) if t.is_finite() => t,
        Some(_) => return Err(Error::InvalidArgument("aggregate_to_grid: non-finite grid start".into())),
        None => series.iter().flat_map(|s| &s.samples).map(|p| p.0).fold(f64::INFINITY, f64::min),
    };
    let f = series.len();
    let mut bins: BTreeMap<u64, Vec<(f64, u32)>> = BTreeMap::new();
    for (j, s) in series.iter().enumerate() {
        for &(t, x) in &s.samples {
            let hi = ((t - t0) / stride + EDGE_SNAP).floor();
            if hi < 0.0 {
                continue;
            }
            let lo = (((t - t0 - window) / stride + EDGE_SNAP).floor() + 1.0).max(0.0);
            let mut m = lo;
            while m <= hi {
                let cell = &mut bins.entry(m as u64).or_insert_with(|| vec![(0.0, 0); f])[j];
                cell.0 += x;
                cell.1 += 1;
                m += 1.0;
            }
        }
    }
    let mut steps = Vec::with_capacity(bins.len());
    let mut cells = Vec::with_capacity(bins.len() * f);
    for (m, row) in bins {
        steps.push(m);
        cells.extend(row.into_iter().map(|(sum, n)| (n > 0).then(|| sum / n as f64)));
    }
    Ok(GridTable { columns: series.iter().map(|s| s.name.clone()).collect(), t0, stride, steps, cells })
}

/// Rows missing only the sentinel column get [`SENTINEL`] there and are kept;
/// rows missing any other KPI are dropped.
pub fn resolve_missing(grid: &GridTable, sentinel_column: &str) -> KpiTable {
    let f = grid.columns.len();
    let sentinel = grid.columns.iter().position(|c| c == sentinel_column);
    let mut out = KpiTable {
        columns: grid.columns.clone(),
        t0: grid.t0,
        stride: grid.stride,
        steps: Vec::new(),
        values: Vec::new(),
        imputed: Vec::new(),
    };
    for i in 0..grid.rows() {
        let row = grid.row(i);
        let other_missing = row.iter().enumerate().any(|(j, c)| c.is_none() && Some(j) != sentinel);
        if other_missing {
            continue;
        }
        out.steps.push(grid.steps[i]);
        out.values.extend(row.iter().map(|c| c.unwrap_or(SENTINEL)));
        out.imputed.push(sentinel.is_some_and(|s| row[s].is_none()));
    }
    debug_assert_eq!(out.values.len(), out.steps.len() * f);
    out
}

/// Linear interpolation between order statistics (type 7) of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty() && (0.0..=1.0).contains(&q));
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Closed acceptance interval of one column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub low: f64,
    pub high: f64,
}

impl Bounds {
    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }
}

/// `[Q_lo − k·IQR, Q_hi + k·IQR]` per column, quantiles taken over
/// non-imputed cells. A column with no such cells gets an unbounded interval.
pub fn iqr_bounds(table: &KpiTable, q_low: f64, q_high: f64, k: f64) -> Result<Vec<Bounds>> {
    if !(0.0..=1.0).contains(&q_low) || !(0.0..=1.0).contains(&q_high) || q_low > q_high || !(k >= 0.0) {
        return Err(Error::InvalidArgument(format!("iqr_prune: bad quantile levels {q_low}/{q_high} or k {k}")));
    }
    let sentinel = table.columns.iter().position(|c| c == super::SENTINEL_COLUMN);
    let mut out = Vec::with_capacity(table.n_features());
    for j in 0..table.n_features() {
        let mut col: Vec<f64> = table
            .column(j)
            .enumerate()
            .filter(|&(i, _)| !(Some(j) == sentinel && table.imputed[i]))
            .map(|(_, v)| v)
            .collect();
        if col.is_empty() {
            out.push(Bounds { low: f64::NEG_INFINITY, high: f64::INFINITY });
            continue;
        }
        col.sort_by(f64::total_cmp);
        let q1 = quantile(&col, q_low);
        let q3 = quantile(&col, q_high);
        let iqr = q3 - q1;
        out.push(Bounds { low: q1 - k * iqr, high: q3 + k * iqr });
    }
    Ok(out)
}

/// Drops every row holding a value outside its column's bounds. Imputed
/// sentinel cells are never tested.
pub fn prune_with_bounds(table: &KpiTable, bounds: &[Bounds]) -> Result<KpiTable> {
    if bounds.len() != table.n_features() {
        return Err(Error::shape("iqr_prune", "one bound per column expected"));
    }
    let sentinel = table.columns.iter().position(|c| c == super::SENTINEL_COLUMN);
    let out = table.filter_rows(|i| {
        table
            .row(i)
            .iter()
            .zip(bounds)
            .enumerate()
            .all(|(j, (&v, b))| (Some(j) == sentinel && table.imputed[i]) || b.contains(v))
    });
    if out.rows() == 0 {
        return Err(Error::data("iqr_prune", "every row was pruned"));
    }
    Ok(out)
}

/// Single-pass IQR outlier removal with bounds from the unpruned table.
pub fn iqr_prune(table: &KpiTable, q_low: f64, q_high: f64, k: f64) -> Result<KpiTable> {
    if table.rows() == 0 {
        return Err(Error::data("iqr_prune", "empty table"));
    }
    let bounds = iqr_bounds(table, q_low, q_high, k)?;
    prune_with_bounds(table, &bounds)
}
