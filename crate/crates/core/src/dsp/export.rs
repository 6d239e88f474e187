use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Linear map used when quantizing a matrix to 8-bit grey levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgmScaling {
    pub min: f64,
    pub max: f64,
}

impl PgmScaling {
    pub fn of(m: &Array2<f64>) -> Self {
        let (min, max) = m
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        Self { min, max }
    }

    fn level(&self, v: f64) -> u8 {
        let span = self.max - self.min;
        if !(span > 0.0) {
            return 0;
        }
        (((v - self.min) / span).clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

/// Row-major CSV, nine significant digits.
pub fn matrix_to_csv(m: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

/// Binary PGM (P5), row 0 at the top.
pub fn matrix_to_pgm(m: &Array2<f64>, scaling: PgmScaling) -> Vec<u8> {
    let (rows, cols) = m.dim();
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(m.iter().map(|&v| scaling.level(v)));
    out
}

pub fn write_matrix_csv(m: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, matrix_to_csv(m)).map_err(|e| Error::io(path, e))
}

/// Reads a matrix written by [`write_matrix_csv`].
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("{}: row {}: {e}", path.display(), rows + 1)))?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return Err(Error::shape(format!("{} columns", cols.unwrap_or(0)), row.len()));
        }
        values.extend(row);
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols.unwrap_or(0)), values).map_err(|e| Error::Config(e.to_string()))
}

/// Writes a min-max scaled PGM and returns the scaling applied.
pub fn write_matrix_pgm(
    m: &Array2<f64>,
    scaling: Option<PgmScaling>,
    path: impl AsRef<Path>,
) -> Result<PgmScaling> {
    let path = path.as_ref();
    let scaling = scaling.unwrap_or_else(|| PgmScaling::of(m));
    std::fs::write(path, matrix_to_pgm(m, scaling)).map_err(|e| Error::io(path, e))?;
    Ok(scaling)
}
