// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};

/// Trapezoidal area under `ys(xs)`, divided by the covered x-range.
///
/// A constant curve therefore integrates to its own value.
pub fn trapezoid_auc(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!(
            "{} fractions for {} metric values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument(
            "AUC needs at least two points".into(),
        ));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "fractions must be strictly increasing".into(),
        ));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("AUC input".into()));
    }
    let area: f64 = xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum();
    Ok(area / (xs[xs.len() - 1] - xs[0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_ramp() {
        let auc = trapezoid_auc(&[0.0, 0.5, 1.0], &[1.0, 0.5, 0.0]).unwrap();
        assert!((auc - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_curve() {
        let xs: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
        let auc = trapezoid_auc(&xs, &[0.7; 9]).unwrap();
        assert!((auc - 0.7).abs() < 1e-15);
    }

    #[test]
    fn fixture_grid() {
        let xs: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
        let ys = [0.95, 0.9, 0.8, 0.72, 0.6, 0.55, 0.5, 0.42, 0.3];
        // Hand formula: h/2 (y0 + 2(y1..y7) + y8) / 0.8 with h = 0.1.
        let interior: f64 = ys[1..8].iter().sum();
        let expected = 0.05 * (ys[0] + 2.0 * interior + ys[8]) / 0.8;
        assert!((expected - 0.639375).abs() < 1e-12);
        let auc = trapezoid_auc(&xs, &ys).unwrap();
        assert!((auc - 0.639375).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(trapezoid_auc(&[0.0, 1.0], &[1.0]).is_err());
        assert!(trapezoid_auc(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(trapezoid_auc(&[0.5, 0.2], &[1.0, 1.0]).is_err());
    }
}
