//! Sampled input/output data: CSV I/O, per-channel normalisation, subsection
//! index bookkeeping, batch sampling and synthetic systems with known truth.

mod batch;
mod norm;
mod synthetic;

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2};

pub use batch::{valid_start_indices, BatchSampler};
pub use norm::{fit_normalizer, NormStats};
pub use synthetic::{
    generate_synthetic, InputConfig, InputKind, SyntheticConfig, SyntheticSystem, SystemKind, TruthTrace,
};

use crate::{Error, Result};

/// `N` samples of inputs `u` (`N × n_u`) and outputs `y` (`N × n_y`) at period `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub u: Array2<f64>,
    pub y: Array2<f64>,
    pub dt: f64,
    pub name: String,
}

impl Dataset {
    pub fn new(u: Array2<f64>, y: Array2<f64>, dt: f64, name: impl Into<String>) -> Result<Self> {
        if u.nrows() != y.nrows() {
            return Err(Error::invalid(format!(
                "u has {} rows but y has {}",
                u.nrows(),
                y.nrows()
            )));
        }
        if u.nrows() == 0 {
            return Err(Error::invalid("a dataset needs at least one sample"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("sample period must be positive, got {dt}")));
        }
        if u.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset contains NaN or infinite samples".into()));
        }
        Ok(Self {
            u,
            y,
            dt,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_u(&self) -> usize {
        self.u.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.y.ncols()
    }

    /// Samples `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::invalid(format!(
                "slice {start}..{end} out of range for {} samples",
                self.len()
            )));
        }
        Self::new(
            self.u.slice(s![start..end, ..]).to_owned(),
            self.y.slice(s![start..end, ..]).to_owned(),
            self.dt,
            format!("{}[{start}..{end}]", self.name),
        )
    }

    /// Output standard deviation over all channels and samples (population).
    pub fn output_std(&self) -> f64 {
        let n = self.y.len() as f64;
        let mean = self.y.sum() / n;
        (self.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    pub fn load_csv(path: impl AsRef<Path>, n_u: usize, n_y: usize, dt: f64) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::read_csv(file, n_u, n_y, dt, name)
    }

    /// Reads the `u0..,y0..` columns from CSV; other columns are ignored,
    /// `#` lines are comments.
    pub fn read_csv<R: Read>(reader: R, n_u: usize, n_y: usize, dt: f64, name: impl Into<String>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header_line = rdr.position().line().max(1);
        let headers = rdr.headers()?.clone();
        let wanted: Vec<String> = (0..n_u)
            .map(|i| format!("u{i}"))
            .chain((0..n_y).map(|i| format!("y{i}")))
            .collect();
        let columns = wanted
            .iter()
            .map(|w| {
                headers.iter().position(|h| h == w).ok_or_else(|| Error::Parse {
                    line: header_line,
                    column: 0,
                    message: format!("missing column `{w}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut u = Vec::new();
        let mut y = Vec::new();
        let mut rows = 0;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                Error::Parse {
                    line,
                    column: 0,
                    message: e.to_string(),
                }
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            for (k, &col) in columns.iter().enumerate() {
                let cell = rec.get(col).ok_or_else(|| Error::Parse {
                    line,
                    column: col + 1,
                    message: "missing cell".into(),
                })?;
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    line,
                    column: col + 1,
                    message: format!("`{cell}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        column: col + 1,
                        message: format!("`{cell}` is not finite"),
                    });
                }
                if k < n_u { u.push(v) } else { y.push(v) }
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::Parse {
                line: header_line,
                column: 0,
                message: "no data rows".into(),
            });
        }
        let u = Array2::from_shape_vec((rows, n_u), u).expect("row-major u");
        let y = Array2::from_shape_vec((rows, n_y), y).expect("row-major y");
        Self::new(u, y, dt, name)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(file, &[])
    }

    /// Writes `u0..,y0..` followed by `extra` named columns (each of length `N`).
    /// Values use the shortest representation that parses back to the same `f64`.
    pub fn write_csv<W: Write>(&self, writer: W, extra: &[(String, Vec<f64>)]) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.n_u()).map(|i| format!("u{i}")).collect();
        header.extend((0..self.n_y()).map(|i| format!("y{i}")));
        header.extend(extra.iter().map(|(n, _)| n.clone()));
        w.write_record(&header)?;
        for k in 0..self.len() {
            let (u_row, y_row) = (self.u.row(k), self.y.row(k));
            let row = u_row
                .iter()
                .chain(y_row.iter())
                .copied()
                .chain(extra.iter().map(|(_, col)| col[k]))
                .map(|v| v.to_string());
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}
