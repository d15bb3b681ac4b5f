// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense arrays and the numeric kernels shared by every other module.

mod activation;
mod auc;
mod matrix;
mod prefix;
mod rng;

pub use activation::*;
pub use auc::trapezoid_auc;
pub use matrix::{relative, Matrix};
pub use prefix::{logspace_prefix, LogPrefix};
pub use rng::Rng;

/// Causal depthwise convolution of one channel.
///
/// `out_t = Σ_{τ=0}^{K-1} filter[K-1-τ] · x_{t-τ}` with zero left padding, so
/// the last tap multiplies the current token.
pub fn causal_conv(x: &[f64], filter: &[f64]) -> Vec<f64> {
    let k = filter.len();
    (0..x.len())
        .map(|t| {
            (0..k.min(t + 1))
                .map(|tau| filter[k - 1 - tau] * x[t - tau])
                .sum()
        })
        .collect()
}

/// Row-wise RMS normalization without a learnable scale.
pub fn rms_norm_rows(x: &Matrix, eps: f64) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len().max(1) as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Group statistic `ε + sqrt(mean((v - mean(v))²))` used by the grouped norms.
pub fn group_sigma(values: &[f64], eps: f64) -> f64 {
    let n = values.len().max(1) as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    eps + var.sqrt()
}
