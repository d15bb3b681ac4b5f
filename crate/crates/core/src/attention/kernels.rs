// SPDX-License-Identifier: MIT OR Apache-2.0

//! Core mixing matrices: each returns lower-triangular `L×L` operators whose
//! product with the input stream reproduces the corresponding recurrence.

use crate::error::{Error, Result};
use crate::layers::griffin::RgLruGates;
use crate::layers::hgrn::HgrnGates;
use crate::layers::mamba::{check_s6_shapes, S6Inputs};
use crate::layers::{GriffinBlockWeights, S6Weights};
use crate::numerics::{sqrt_one_minus_exp2, LogPrefix, Matrix};

/// Causal convolution matrix: `M[t][j] = f[K-1-(t-j)]` for `0 <= t-j < K`.
pub fn build_conv_matrix(filter: &[f64], len: usize) -> Result<Matrix> {
    let k = filter.len();
    if k == 0 {
        return Err(Error::InvalidArgument(
            "conv filter must have K >= 1".into(),
        ));
    }
    Ok(Matrix::from_fn(len, len, |t, j| {
        if t >= j && t - j < k {
            filter[k - 1 - (t - j)]
        } else {
            0.0
        }
    }))
}

/// `α[i][j] = exp(Σ_{k=j+1}^{i} log_decay_k) · inject_j` for `j <= i`.
///
/// This is the unrolled form of `h_t = exp(log_decay_t) h_{t-1} + inject_t x_t`.
pub fn decay_matrix(log_decay: &[f64], inject: &[f64]) -> Result<Matrix> {
    if log_decay.len() != inject.len() {
        return Err(Error::Shape(format!(
            "{} decays for {} injections",
            log_decay.len(),
            inject.len()
        )));
    }
    let len = log_decay.len();
    let prefix = LogPrefix::new(log_decay);
    let mut out = Matrix::zeros(len, len);
    for i in 0..len {
        let row = out.row_mut(i);
        for j in 0..=i {
            row[j] = prefix.decay(j, i) * inject[j];
        }
    }
    Ok(out)
}

/// Per-channel S6 matrices for `x̂` under the projections of `w`.
pub fn build_s6_matrix(xhat: &Matrix, w: &S6Weights) -> Result<Vec<Matrix>> {
    let inputs = w.project(xhat)?;
    build_s6_matrix_raw(xhat, &inputs, &w.a())
}

/// `α^{(d)}[i][j] = Σ_n C_i[n] · exp(A[d][n] Σ_{k=j+1}^{i} Δ_k^{(d)}) · Δ_j^{(d)} B_j[n]`.
pub fn build_s6_matrix_raw(xhat: &Matrix, inputs: &S6Inputs, a: &Matrix) -> Result<Vec<Matrix>> {
    check_s6_shapes(xhat, inputs, a)?;
    let (len, channels) = xhat.shape();
    let n = a.cols();
    Ok((0..channels)
        .map(|d| {
            let delta = inputs.delta.col(d);
            let prefix = LogPrefix::new(&delta);
            let mut alpha = Matrix::zeros(len, len);
            for i in 0..len {
                for j in 0..=i {
                    let span = prefix.span(j, i);
                    let mut acc = 0.0;
                    for s in 0..n {
                        acc += inputs.c[(i, s)] * inputs.b[(j, s)] * (a[(d, s)] * span).exp();
                    }
                    alpha[(i, j)] = acc * delta[j];
                }
            }
            alpha
        })
        .collect())
}

/// `C_i · B_j` for all pairs (`L×L`, full square).
fn cross_products(c: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(c.rows(), b.rows(), |i, j| {
        c.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum()
    })
}

/// Shared-head SSM matrix with scalar decay `a`:
/// `α[i][j] = (C_i · B_j) · exp(a Σ_{k=j+1}^{i} Δ_k) · Δ_j`.
pub fn build_scalar_ssm_matrix(delta: &[f64], b: &Matrix, c: &Matrix, a: f64) -> Result<Matrix> {
    let len = delta.len();
    if b.rows() != len || c.rows() != len || b.cols() != c.cols() {
        return Err(Error::Shape(
            "SSM projections do not match step sizes".into(),
        ));
    }
    let cb = cross_products(c, b);
    let prefix = LogPrefix::new(delta);
    let mut alpha = Matrix::zeros(len, len);
    for i in 0..len {
        for j in 0..=i {
            alpha[(i, j)] = cb[(i, j)] * (a * prefix.span(j, i)).exp() * delta[j];
        }
    }
    Ok(alpha)
}

/// Per-channel RG-LRU matrices for the conv output `u`.
pub fn build_rg_lru_matrix(u: &Matrix, w: &GriffinBlockWeights) -> Result<Vec<Matrix>> {
    build_rg_lru_matrix_raw(&w.gates(u)?)
}

/// `α̃[t][j] = (Π_{k=j+1}^{t} a_k) · sqrt(1 - a_j²) · i_j`.
pub fn build_rg_lru_matrix_raw(gates: &RgLruGates) -> Result<Vec<Matrix>> {
    (0..gates.log_a.cols())
        .map(|d| {
            let log_a = gates.log_a.col(d);
            let inject: Vec<f64> = log_a
                .iter()
                .zip(gates.input_gate.col(d))
                .map(|(la, i)| sqrt_one_minus_exp2(*la) * i)
                .collect();
            decay_matrix(&log_a, &inject)
        })
        .collect()
}

/// Per-channel HGRN matrices `α_r[t][j] = (Π_{k=j+1}^{t} f_k) · i_j`.
pub fn build_hgrn_matrix(gates: &HgrnGates) -> Result<Vec<Matrix>> {
    (0..gates.log_forget.cols())
        .map(|d| decay_matrix(&gates.log_forget.col(d), &gates.input_gate.col(d)))
        .collect()
}

/// Row-normalized WKV weights of one channel.
///
/// Logits are `k_j - (i-1-j) w` below the diagonal and `u + k_i` on it; each
/// row is shifted by its maximum before exponentiation.
pub fn build_rwkv_alpha_channel(keys: &[f64], decay: f64, bonus: f64) -> Matrix {
    let len = keys.len();
    let mut alpha = Matrix::zeros(len, len);
    let mut logits = Vec::with_capacity(len);
    for i in 0..len {
        logits.clear();
        logits.extend((0..i).map(|j| keys[j] - (i - 1 - j) as f64 * decay));
        logits.push(bonus + keys[i]);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let row = alpha.row_mut(i);
        let mut z = 0.0;
        for (j, l) in logits.iter().enumerate() {
            row[j] = (l - max).exp();
            z += row[j];
        }
        row[..=i].iter_mut().for_each(|v| *v /= z);
    }
    alpha
}

/// Row-wise causal softmax of a square score matrix; entries above the
/// diagonal are exactly zero.
pub fn causal_softmax(scores: &Matrix) -> Matrix {
    let len = scores.rows();
    let mut out = Matrix::zeros(len, len);
    for i in 0..len {
        let src = &scores.row(i)[..=i];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let row = out.row_mut(i);
        let mut z = 0.0;
        for (j, s) in src.iter().enumerate() {
            row[j] = (s - max).exp();
            z += row[j];
        }
        row[..=i].iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Retention decay mask `Γ[i][j] = γ^{i-j}` for `i >= j`.
pub fn retention_decay_mask(gamma: f64, len: usize) -> Matrix {
    Matrix::from_fn(len, len, |i, j| {
        if i >= j {
            gamma.powi((i - j) as i32)
        } else {
            0.0
        }
    })
}

/// `R = (QKᵀ/√d) ⊙ Γ`.
pub fn retention_matrix(q: &Matrix, k: &Matrix, gamma: f64) -> Result<Matrix> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let qk = q.matmul(&k.transpose())?.scale(scale);
    qk.hadamard(&retention_decay_mask(gamma, q.rows()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::mamba::s6_scan_raw;
    use crate::numerics::{causal_conv, Rng};
    use std::f64::consts::LN_2;

    #[test]
    fn unit_current_tap_is_identity() {
        assert_eq!(
            build_conv_matrix(&[0.0, 1.0], 3).unwrap(),
            Matrix::identity(3)
        );
    }

    #[test]
    fn two_tap_ones() {
        let m = build_conv_matrix(&[1.0, 1.0], 3).unwrap();
        let expected = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0],
            vec![0.0, 1.0, 1.0],
        ])
        .unwrap();
        assert_eq!(m, expected);
        assert!(build_conv_matrix(&[], 3).is_err());
    }

    #[test]
    fn conv_matrix_matches_direct_convolution() {
        let mut rng = Rng::new(8);
        let f: Vec<f64> = (0..4).map(|_| rng.normal(1.0)).collect();
        let x: Vec<f64> = (0..16).map(|_| rng.normal(1.0)).collect();
        // Brute-force oracle straight from the sum definition.
        let direct: Vec<f64> = (0..16)
            .map(|t| {
                let mut acc = 0.0;
                for tau in 0..4usize {
                    if t >= tau {
                        acc += f[3 - tau] * x[t - tau];
                    }
                }
                acc
            })
            .collect();
        let via_matrix = build_conv_matrix(&f, 16).unwrap().matvec(&x).unwrap();
        for ((a, b), c) in direct.iter().zip(&via_matrix).zip(causal_conv(&x, &f)) {
            assert!((a - b).abs() < 1e-14 && (a - c).abs() < 1e-14);
        }
    }

    #[test]
    fn s6_hand_values() {
        let ln2 = std::f64::consts::LN_2;
        let inputs = S6Inputs {
            delta: Matrix::filled(2, 1, ln2),
            b: Matrix::filled(2, 1, 1.0),
            c: Matrix::filled(2, 1, 1.0),
        };
        let a = Matrix::filled(1, 1, -1.0);
        let alpha = &build_s6_matrix_raw(&Matrix::filled(2, 1, 1.0), &inputs, &a).unwrap()[0];
        assert!((alpha[(0, 0)] - LN_2).abs() < 1e-15);
        assert!((alpha[(1, 0)] - LN_2 / 2.0).abs() < 1e-15);
        assert!((alpha[(1, 1)] - LN_2).abs() < 1e-15);
        assert_eq!(alpha[(0, 1)], 0.0);
    }

    #[test]
    fn s6_matrix_reproduces_scan() {
        let mut rng = Rng::new(21);
        let w = S6Weights::init(3, 4, &mut rng);
        let xhat = Matrix::from_fn(10, 3, |_, _| rng.normal(1.0));
        let p = w.project(&xhat).unwrap();
        let scan = s6_scan_raw(&xhat, &p, &w.a()).unwrap();
        let alphas = build_s6_matrix(&xhat, &w).unwrap();
        for (d, alpha) in alphas.iter().enumerate() {
            let y = alpha.matvec(&xhat.col(d)).unwrap();
            let err = Matrix::column(&y)
                .max_rel_diff(&Matrix::column(&scan.col(d)))
                .unwrap();
            assert!(err < 1e-12, "channel {d}: {err}");
        }
    }

    #[test]
    fn rg_lru_hand_values() {
        let gates = RgLruGates {
            log_a: Matrix::filled(2, 1, 0.5f64.ln()),
            input_gate: Matrix::filled(2, 1, 1.0),
        };
        let a = &build_rg_lru_matrix_raw(&gates).unwrap()[0];
        assert!((a[(0, 0)] - 0.8660254037844386).abs() < 1e-15);
        assert!((a[(1, 0)] - 0.4330127018922193).abs() < 1e-15);
        assert!((a[(1, 1)] - 0.8660254037844386).abs() < 1e-15);
    }

    #[test]
    fn rg_lru_zero_decay_is_diagonal() {
        let gates = RgLruGates {
            log_a: Matrix::filled(3, 1, -800.0),
            input_gate: Matrix::column(&[0.2, 0.5, 0.7]),
        };
        let a = &build_rg_lru_matrix_raw(&gates).unwrap()[0];
        assert_eq!(a, &Matrix::diag(&[0.2, 0.5, 0.7]));
    }

    #[test]
    fn hgrn_no_forget_is_diagonal() {
        let gates = HgrnGates {
            log_forget: Matrix::filled(3, 1, -800.0),
            input_gate: Matrix::column(&[0.1, 0.2, 0.3]),
        };
        assert_eq!(
            build_hgrn_matrix(&gates).unwrap()[0],
            Matrix::diag(&[0.1, 0.2, 0.3])
        );
    }

    #[test]
    fn rwkv_rows_are_distributions() {
        let alpha = build_rwkv_alpha_channel(&[0.3, -1.2, 2.0, 0.1], 0.7, 0.4);
        for i in 0..4 {
            assert!((alpha.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let uniform = build_rwkv_alpha_channel(&[0.0; 4], 0.0, 0.0);
        for i in 0..4 {
            for j in 0..=i {
                assert!((uniform[(i, j)] - 1.0 / (i + 1) as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn retention_mask_rows() {
        let g = retention_decay_mask(0.5, 3);
        assert_eq!(g.row(2), &[0.25, 0.5, 1.0]);
        assert_eq!(g.col(0), vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn retention_with_unit_scores_is_the_mask() {
        // Q = K = ones with d = 1: every score is exactly 1.
        let q = Matrix::filled(3, 1, 1.0);
        let r = retention_matrix(&q, &q, 0.5).unwrap();
        assert_eq!(r, retention_decay_mask(0.5, 3));
    }

    #[test]
    fn retention_tiny_gamma_keeps_diagonal() {
        let q = Matrix::column(&[1.0, 2.0, -1.0]);
        let k = Matrix::column(&[0.5, 1.5, 3.0]);
        let r = retention_matrix(&q, &k, 1e-12).unwrap();
        for i in 0..3 {
            assert!((r[(i, i)] - q[(i, 0)] * k[(i, 0)]).abs() < 1e-15);
            for j in 0..i {
                assert!(r[(i, j)].abs() < 1e-11);
            }
        }
    }
}
