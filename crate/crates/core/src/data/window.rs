use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::KpiTable;
use crate::error::{Error, Result};

/// Lower bound applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// Start rows of every window of `window` consecutive grid steps whose
/// following row is also the next grid step. Window `i` covers rows
/// `starts[i]..starts[i] + window` and its target is row `starts[i] + window`.
pub fn make_windows(table: &KpiTable, window: usize) -> Result<Vec<usize>> {
    if window == 0 {
        return Err(Error::InvalidArgument("make_windows: window length must be at least 1".into()));
    }
    if table.rows() < window + 1 {
        return Err(Error::data(
            "make_windows",
            format!("{} rows cannot hold a window of {window} plus its target", table.rows()),
        ));
    }
    let mut starts = Vec::new();
    // length of the gap-free run ending at row i
    let mut run = 1usize;
    for i in 1..table.rows() {
        run = if table.steps[i] == table.steps[i - 1] + 1 { run + 1 } else { 1 };
        if run > window {
            starts.push(i - window);
        }
    }
    Ok(starts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Val,
    Test,
}

/// Contiguous index ranges `[0, train_end)`, `[train_end, val_end)`,
/// `[val_end, total)` over windows in origin order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub total: usize,
}

impl SplitBounds {
    /// Explicit boundaries; every part must be nonempty.
    pub fn new(train_end: usize, val_end: usize, total: usize) -> Result<Self> {
        if !(0 < train_end && train_end < val_end && val_end < total) {
            return Err(Error::data(
                "chrono_split",
                format!("empty split (train {train_end}, val {}, test {})", val_end.saturating_sub(train_end), total.saturating_sub(val_end)),
            ));
        }
        Ok(Self { train_end, val_end, total })
    }

    pub fn train(&self) -> Range<usize> {
        0..self.train_end
    }

    pub fn val(&self) -> Range<usize> {
        self.train_end..self.val_end
    }

    pub fn test(&self) -> Range<usize> {
        self.val_end..self.total
    }

    pub fn label(&self, i: usize) -> SplitLabel {
        if i < self.train_end {
            SplitLabel::Train
        } else if i < self.val_end {
            SplitLabel::Val
        } else {
            SplitLabel::Test
        }
    }

    pub fn range(&self, label: SplitLabel) -> Range<usize> {
        match label {
            SplitLabel::Train => self.train(),
            SplitLabel::Val => self.val(),
            SplitLabel::Test => self.test(),
        }
    }
}

/// Last `⌊test_frac·M⌋` windows to test, the `⌊val_frac·M⌋` before them to
/// validation, the rest to training.
pub fn chrono_split(n_windows: usize, val_frac: f64, test_frac: f64) -> Result<SplitBounds> {
    if !(val_frac > 0.0 && test_frac > 0.0 && val_frac + test_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "chrono_split: fractions must be positive with sum below 1 (val {val_frac}, test {test_frac})"
        )));
    }
    let m = n_windows as f64;
    let n_test = (test_frac * m).floor() as usize;
    let n_val = (val_frac * m).floor() as usize;
    let val_end = n_windows - n_test;
    SplitBounds::new(val_end.saturating_sub(n_val), val_end, n_windows)
}

/// Per-feature and per-target affine standardization fitted on training
/// windows. Constructed only by [`Scaler::fit`] or deserialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone, what: &str) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut std = var.sqrt();
    if !(std >= STD_FLOOR) {
        log::warn!("{what} has standard deviation {std:e} on the training split; floored at {STD_FLOOR:e}");
        std = STD_FLOOR;
    }
    (mean, std)
}

impl Scaler {
    /// Fits on the rows covered by the given training windows (each row once)
    /// and on their target rows. Nothing outside those rows is read.
    pub fn fit(table: &KpiTable, train_starts: &[usize], window: usize, targets: &[usize]) -> Result<Self> {
        if train_starts.is_empty() {
            return Err(Error::data("fit_scaler", "no training windows"));
        }
        let f = table.n_features();
        if targets.is_empty() || targets.iter().any(|&t| t >= f) {
            return Err(Error::InvalidArgument("fit_scaler: target columns out of range".into()));
        }
        let last = train_starts.iter().max().expect("nonempty") + window;
        if last >= table.rows() {
            return Err(Error::data("fit_scaler", "training window runs past the table"));
        }
        let mut covered = vec![false; last];
        for &s in train_starts {
            covered[s..s + window].iter_mut().for_each(|c| *c = true);
        }
        let rows: Vec<usize> = (0..last).filter(|&i| covered[i]).collect();
        let (mut x_mean, mut x_std) = (Vec::with_capacity(f), Vec::with_capacity(f));
        for j in 0..f {
            let (m, s) = mean_std(rows.iter().map(|&i| table.values[i * f + j]), &format!("feature {:?}", table.columns[j]));
            x_mean.push(m);
            x_std.push(s);
        }
        let (mut y_mean, mut y_std) = (Vec::new(), Vec::new());
        for &t in targets {
            let (m, s) = mean_std(
                train_starts.iter().map(|&s| table.values[(s + window) * f + t]),
                &format!("target {:?}", table.columns[t]),
            );
            y_mean.push(m);
            y_std.push(s);
        }
        Ok(Self { x_mean, x_std, y_mean, y_std })
    }

    pub fn n_features(&self) -> usize {
        self.x_mean.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.y_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.x_mean.len() == self.x_std.len()
            && self.y_mean.len() == self.y_std.len()
            && !self.x_mean.is_empty()
            && !self.y_mean.is_empty()
            && self.x_mean.iter().chain(&self.y_mean).all(|v| v.is_finite())
            && self.x_std.iter().chain(&self.y_std).all(|&s| s.is_finite() && s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::data("scaler", "scaler is not a valid fitted scaler"))
        }
    }

    /// Standardizes a row-major block of feature rows in place.
    pub fn standardize_rows(&self, rows: &mut [f64]) -> Result<()> {
        let f = self.n_features();
        if rows.len() % f != 0 {
            return Err(Error::shape("standardize", format!("{} values are not whole rows of {f}", rows.len())));
        }
        for row in rows.chunks_exact_mut(f) {
            for ((v, m), s) in row.iter_mut().zip(&self.x_mean).zip(&self.x_std) {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }

    pub fn standardize_target(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.n_outputs() {
            return Err(Error::shape("standardize_target", "length differs from the number of outputs"));
        }
        Ok(y.iter().zip(&self.y_mean).zip(&self.y_std).map(|((v, m), s)| (v - m) / s).collect())
    }

    /// `μ_y + σ_y·ŷ`.
    pub fn destandardize_target(&self, y_std: &[f64]) -> Result<Vec<f64>> {
        if y_std.len() != self.n_outputs() {
            return Err(Error::shape("destandardize_target", "length differs from the number of outputs"));
        }
        Ok(y_std.iter().zip(&self.y_mean).zip(&self.y_std).map(|((v, m), s)| m + s * v).collect())
    }
}
