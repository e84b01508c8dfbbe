//! CSV ingest, min-max scaling, train/test splits and mask files.
//!
//! CSV files are comma separated with an optional single header row. An
//! empty field is a missing value. Lines starting with `#` are comments and
//! are skipped on read.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::missingness::MaskPattern;
use crate::numcore::Tensor;

/// A numeric table. Missing cells hold `NaN` in `values` and `false` in
/// `observed`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub columns: Vec<String>,
    pub values: Tensor,
    pub observed: MaskPattern,
}

impl Dataset {
    /// A fully observed dataset.
    pub fn from_values(columns: Vec<String>, values: Tensor) -> Result<Self> {
        if columns.len() != values.cols() {
            return Err(Error::Dimension(format!(
                "{} column names for {} columns",
                columns.len(),
                values.cols()
            )));
        }
        let observed = MaskPattern::from_fn(values.rows(), values.cols(), |i, j| !values.get(i, j).is_nan());
        Ok(Self {
            columns,
            values,
            observed,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            columns: self.columns.clone(),
            values: self.values.select_rows(idx),
            observed: self.observed.select_rows(idx),
        }
    }

    /// Copy with every cell outside `mask` (or already missing) set to `NaN`.
    pub fn with_mask(&self, mask: &MaskPattern) -> Result<Dataset> {
        mask.check_shape(self.rows(), self.cols(), "with_mask")?;
        let observed = MaskPattern::from_fn(self.rows(), self.cols(), |i, j| {
            mask.get(i, j) && self.observed.get(i, j)
        });
        let mut values = self.values.clone();
        for i in 0..self.rows() {
            for j in 0..self.cols() {
                if !observed.get(i, j) {
                    values.set(i, j, f64::NAN);
                }
            }
        }
        Ok(Dataset {
            columns: self.columns.clone(),
            values,
            observed,
        })
    }

    pub fn to_csv_string(&self, header: bool) -> String {
        let mut out = String::new();
        if header {
            out.push_str(&self.columns.join(","));
            out.push('\n');
        }
        push_rows(&mut out, &self.values, |i, j| self.observed.get(i, j));
        out
    }
}

fn push_rows(out: &mut String, values: &Tensor, keep: impl Fn(usize, usize) -> bool) {
    for i in 0..values.rows() {
        for j in 0..values.cols() {
            if j > 0 {
                out.push(',');
            }
            if keep(i, j) {
                let _ = write!(out, "{}", values.get(i, j));
            }
        }
        out.push('\n');
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty())
}

pub fn load_csv(path: impl AsRef<Path>, header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    parse_csv(&read_text(path)?, header, &path.display().to_string())
}

/// Parses CSV text; `source` labels errors.
pub fn parse_csv(text: &str, header: bool, source: &str) -> Result<Dataset> {
    let mut lines = data_lines(text).peekable();
    let columns: Option<Vec<String>> = if header {
        let (_, h) = lines
            .next()
            .ok_or_else(|| Error::parse(source, "empty file"))?;
        Some(h.split(',').map(|s| s.trim().to_string()).collect())
    } else {
        None
    };
    let mut width = columns.as_ref().map(Vec::len);
    let mut data = Vec::new();
    let mut rows = 0;
    for (line_no, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let w = *width.get_or_insert(cells.len());
        if cells.len() != w {
            return Err(Error::parse(
                source,
                format!("row {rows} (line {line_no}) has {} fields, expected {w}", cells.len()),
            ));
        }
        for (col, cell) in cells.iter().enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                data.push(f64::NAN);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::parse(source, format!("non-numeric cell {cell:?} at row {rows}, column {col}"))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(
                    source,
                    format!("non-finite cell {cell:?} at row {rows}, column {col}"),
                ));
            }
            data.push(v);
        }
        rows += 1;
    }
    let cols = width.unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err(Error::parse(source, "no data rows"));
    }
    let columns = columns.unwrap_or_else(|| (0..cols).map(|j| format!("c{j}")).collect());
    Dataset::from_values(columns, Tensor::from_vec(rows, cols, data)?)
}

pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>, header: bool, comment: Option<&str>) -> Result<()> {
    let mut text = comment_block(comment);
    text.push_str(&ds.to_csv_string(header));
    write_text(path.as_ref(), &text)
}

fn comment_block(comment: Option<&str>) -> String {
    let mut s = String::new();
    if let Some(c) = comment {
        for line in c.lines() {
            s.push_str("# ");
            s.push_str(line);
            s.push('\n');
        }
    }
    s
}

/// Per-column min/max in raw units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleInfo {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Columns with fewer than two distinct fitted values; they scale to 0.5.
    pub constant: Vec<bool>,
}

impl ScaleInfo {
    /// Statistics over the cells `fit_mask` marks (and that are present).
    pub fn fit(ds: &Dataset, fit_mask: &MaskPattern, names: &[String]) -> Result<Self> {
        fit_mask.check_shape(ds.rows(), ds.cols(), "minmax_scale")?;
        let d = ds.cols();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for i in 0..ds.rows() {
            for j in 0..d {
                if fit_mask.get(i, j) && ds.observed.get(i, j) {
                    let v = ds.values.get(i, j);
                    min[j] = min[j].min(v);
                    max[j] = max[j].max(v);
                }
            }
        }
        for j in 0..d {
            if !min[j].is_finite() {
                return Err(Error::Data(format!(
                    "column `{}` has no observed cells to fit scaling",
                    names.get(j).map_or("?", String::as_str)
                )));
            }
        }
        let constant = min.iter().zip(&max).map(|(a, b)| b <= a).collect();
        Ok(Self { min, max, constant })
    }

    pub fn cols(&self) -> usize {
        self.min.len()
    }

    /// Into `[0, 1]`, clamping values outside the fitted range.
    pub fn scale(&self, j: usize, v: f64) -> f64 {
        if self.constant[j] {
            return 0.5;
        }
        ((v - self.min[j]) / (self.max[j] - self.min[j])).clamp(0.0, 1.0)
    }

    pub fn unscale(&self, j: usize, s: f64) -> f64 {
        if self.constant[j] {
            return self.min[j];
        }
        self.min[j] + s * (self.max[j] - self.min[j])
    }

    pub fn apply(&self, values: &Tensor) -> Tensor {
        let mut out = values.clone();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                let v = out.get(i, j);
                if !v.is_nan() {
                    out.set(i, j, self.scale(j, v));
                }
            }
        }
        out
    }

    pub fn invert(&self, values: &Tensor) -> Tensor {
        let mut out = values.clone();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                let v = out.get(i, j);
                if !v.is_nan() {
                    out.set(i, j, self.unscale(j, v));
                }
            }
        }
        out
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::parse(path.display(), e.to_string()))?;
        write_text(path, &text)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        serde_json::from_str(&read_text(path)?).map_err(|e| Error::parse(path.display(), e.to_string()))
    }
}

/// Min-max scaling fitted on the cells `fit_mask` marks.
pub fn minmax_scale(ds: &Dataset, fit_mask: &MaskPattern) -> Result<(Dataset, ScaleInfo)> {
    let info = ScaleInfo::fit(ds, fit_mask, &ds.columns)?;
    let scaled = Dataset {
        columns: ds.columns.clone(),
        values: info.apply(&ds.values),
        observed: ds.observed.clone(),
    };
    Ok((scaled, info))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded random partition of `0..n`; the test part has `round(n * fraction)` rows.
pub fn split(n: usize, test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} of {n} rows leaves an empty side"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, test })
}

pub fn matrix_to_csv(m: &Tensor) -> String {
    let mut out = String::new();
    push_rows(&mut out, m, |i, j| !m.get(i, j).is_nan());
    out
}

pub fn write_matrix_csv(m: &Tensor, path: impl AsRef<Path>, comment: Option<&str>) -> Result<()> {
    let mut text = comment_block(comment);
    text.push_str(&matrix_to_csv(m));
    write_text(path.as_ref(), &text)
}

pub fn mask_to_csv(mask: &MaskPattern) -> String {
    let mut out = String::with_capacity(mask.rows() * mask.cols() * 2);
    for i in 0..mask.rows() {
        for (j, &b) in mask.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push(if b { '1' } else { '0' });
        }
        out.push('\n');
    }
    out
}

pub fn write_mask_csv(mask: &MaskPattern, path: impl AsRef<Path>, comment: Option<&str>) -> Result<()> {
    let mut text = comment_block(comment);
    text.push_str(&mask_to_csv(mask));
    write_text(path.as_ref(), &text)
}

pub fn read_mask_csv(path: impl AsRef<Path>) -> Result<MaskPattern> {
    let path = path.as_ref();
    parse_mask_csv(&read_text(path)?, &path.display().to_string())
}

pub fn parse_mask_csv(text: &str, source: &str) -> Result<MaskPattern> {
    let mut bits = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (line_no, line) in data_lines(text) {
        let cells: Vec<&str> = line.split(',').collect();
        let w = *width.get_or_insert(cells.len());
        if cells.len() != w {
            return Err(Error::parse(
                source,
                format!("mask row {rows} (line {line_no}) has {} fields, expected {w}", cells.len()),
            ));
        }
        for (col, c) in cells.iter().enumerate() {
            match c.trim() {
                "1" => bits.push(true),
                "0" => bits.push(false),
                other => {
                    return Err(Error::parse(
                        source,
                        format!("mask cell {other:?} at row {rows}, column {col} is not 0 or 1"),
                    ))
                }
            }
        }
        rows += 1;
    }
    MaskPattern::from_vec(rows, width.unwrap_or(0), bits)
}
