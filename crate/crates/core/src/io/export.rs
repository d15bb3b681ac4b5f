// SPDX-License-Identifier: MIT OR Apache-2.0

//! Grayscale heatmaps (binary PGM) and full-precision CSV tables.

use std::path::Path;

use crate::error::{Error, Result};
use crate::explain::minmax_normalize;
use crate::numerics::Matrix;

/// Binary PGM of `|m|`, min-max scaled to `0..=255`; row `i` is image row `i`.
pub fn encode_pgm(m: &Matrix) -> Result<Vec<u8>> {
    if !m.all_finite() {
        return Err(Error::NonFinite("heatmap matrix".into()));
    }
    let mut out = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    out.extend(
        minmax_normalize(m.data())
            .iter()
            .map(|v| (255.0 * v).round() as u8),
    );
    Ok(out)
}

pub fn export_heatmap(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(m)?).map_err(|e| Error::io(path, e))
}

/// Formats a float with 17 significant digits in scientific notation.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV text with a header row; every value is written with [`format_float`].
pub fn format_csv(header: &[&str], rows: &[Vec<f64>]) -> Result<String> {
    let mut out = header.join(",");
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::Shape(format!(
                "CSV row {i} has {} fields for {} columns",
                row.len(),
                header.len()
            )));
        }
        let fields: Vec<String> = row.iter().map(|v| format_float(*v)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_csv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_csv(header, rows)?).map_err(|e| Error::io(path, e))
}

/// Inverse of [`format_csv`]: header names and numeric rows.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty CSV".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::InvalidArgument(format!("CSV field '{f}': {e}")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, rows))
}

/// Matrix as CSV with columns `c0, c1, …`.
pub fn matrix_csv(m: &Matrix) -> Result<String> {
    let names: Vec<String> = (0..m.cols()).map(|c| format!("c{c}")).collect();
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    let rows: Vec<Vec<f64>> = (0..m.rows()).map(|r| m.row(r).to_vec()).collect();
    format_csv(&header, &rows)
}
