// SPDX-License-Identifier: MIT OR Apache-2.0

//! RWKV time mixing: token shift on receptance and key, WKV average over
//! exponentially decayed keys, sigmoid receptance gate. Values are the raw
//! inputs (no shift on the value path).

use crate::error::Result;
use crate::numerics::{sigmoid, Matrix, Rng};

use super::{gaussian, ModelConfig, PROJ_STD};

#[derive(Debug, Clone, PartialEq)]
pub struct RwkvBlockWeights {
    pub w_r: Matrix,
    pub w_k: Matrix,
    pub w_o: Matrix,
    /// Shift interpolation for receptance, in `[0, 1]`.
    pub mix_r: Vec<f64>,
    /// Shift interpolation for keys, in `[0, 1]`.
    pub mix_k: Vec<f64>,
    /// Per-channel decay `w >= 0`.
    pub decay: Vec<f64>,
    /// Per-channel bonus `u` for the current token.
    pub bonus: Vec<f64>,
}

impl RwkvBlockWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        Self {
            w_r: gaussian(rng, d, d, PROJ_STD),
            w_k: gaussian(rng, d, d, PROJ_STD),
            w_o: gaussian(rng, d, d, PROJ_STD),
            mix_r: (0..d).map(|_| rng.uniform()).collect(),
            mix_k: (0..d).map(|_| rng.uniform()).collect(),
            decay: (0..d).map(|_| rng.uniform_in(0.0, 3.0)).collect(),
            bonus: (0..d).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
        }
    }

    /// Receptance and key after the token shift (`x_{-1} = 0`).
    pub fn receptance_and_key(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let shifted = shift(x);
        let mix = |coef: &[f64]| {
            Matrix::from_fn(x.rows(), x.cols(), |t, d| {
                coef[d] * x[(t, d)] + (1.0 - coef[d]) * shifted[(t, d)]
            })
        };
        let r = mix(&self.mix_r).matmul(&self.w_r)?;
        let k = mix(&self.mix_k).matmul(&self.w_k)?;
        Ok((r, k))
    }

    pub fn wkv(&self, x: &Matrix) -> Result<Matrix> {
        let (_, k) = self.receptance_and_key(x)?;
        Ok(wkv_scan(x, &k, &self.decay, &self.bonus))
    }

    /// `σ(r) ⊙ wkv`, the output before `W_o`.
    pub fn forward_mixed(&self, x: &Matrix) -> Result<Matrix> {
        let (r, k) = self.receptance_and_key(x)?;
        let wkv = wkv_scan(x, &k, &self.decay, &self.bonus);
        r.map(sigmoid).hadamard(&wkv)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_mixed(x)?.matmul(&self.w_o)
    }
}

/// Row `t` holds `x_{t-1}`; row 0 is zero.
pub fn shift(x: &Matrix) -> Matrix {
    Matrix::from_fn(
        x.rows(),
        x.cols(),
        |t, d| if t == 0 { 0.0 } else { x[(t - 1, d)] },
    )
}

/// Recurrent WKV with running-max stabilization.
///
/// `wkv_t = (Σ_{i<t} e^{-(t-1-i)w + k_i} v_i + e^{u+k_t} v_t) / (same weights)`.
pub fn wkv_scan(v: &Matrix, k: &Matrix, decay: &[f64], bonus: &[f64]) -> Matrix {
    let (len, width) = v.shape();
    let mut out = Matrix::zeros(len, width);
    for d in 0..width {
        let (mut num, mut den, mut max_exp) = (0.0, 0.0, f64::NEG_INFINITY);
        for t in 0..len {
            let kt = k[(t, d)];
            let vt = v[(t, d)];
            let cur = bonus[d] + kt;
            let p = max_exp.max(cur);
            let (e_state, e_cur) = ((max_exp - p).exp(), (cur - p).exp());
            out[(t, d)] = (e_state * num + e_cur * vt) / (e_state * den + e_cur);

            let decayed = max_exp - decay[d];
            let p = decayed.max(kt);
            let (e_state, e_new) = ((decayed - p).exp(), (kt - p).exp());
            num = e_state * num + e_new * vt;
            den = e_state * den + e_new;
            max_exp = p;
        }
    }
    out
}
