//! CSV data interchange: a header row, '.' decimals, LF line endings.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sim::output::fmt_f64;

fn parse_cell(s: &str, row: usize, col: usize, path: &Path) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| {
        Error::InvalidInput(format!("{}: row {row}, column {col}: '{s}' is not a number", path.display()))
    })?;
    if !v.is_finite() {
        return Err(Error::InvalidInput(format!("{}: row {row}, column {col}: non-finite value", path.display())));
    }
    Ok(v)
}

/// Reads a numeric table with a header row.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let cols = rdr.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (j, cell) in rec.iter().enumerate() {
            data.push(parse_cell(cell, i + 2, j + 1, path)?);
        }
        rows += 1;
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidInput(format!("{}: no data rows", path.display())));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

/// Reads a single-column table with a header row.
pub fn read_vector(path: &Path) -> Result<DVector<f64>> {
    let m = read_matrix(path)?;
    if m.ncols() != 1 {
        return Err(Error::Dimension(format!("{}: expected one column, found {}", path.display(), m.ncols())));
    }
    Ok(m.column(0).into_owned())
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?)
}

/// Writes `X` with header x1..xp.
pub fn write_matrix(path: &Path, x: &DMatrix<f64>, prefix: &str) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record((1..=x.ncols()).map(|j| format!("{prefix}{j}")))?;
    for i in 0..x.nrows() {
        w.write_record(x.row(i).iter().map(|&v| fmt_f64(v)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_vector(path: &Path, v: &DVector<f64>, header: &str) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([header])?;
    for &x in v.iter() {
        w.write_record([fmt_f64(x)])?;
    }
    w.flush()?;
    Ok(())
}
