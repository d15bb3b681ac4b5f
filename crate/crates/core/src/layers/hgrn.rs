// SPDX-License-Identifier: MIT OR Apache-2.0

//! HGRN: gated linear recurrence with forget and input gates and a SiLU
//! output gate. The candidate projection is folded away, so `c_t = silu(x_t)`.

use crate::error::Result;
use crate::numerics::{log_sigmoid, sigmoid, silu, Matrix, Rng};

use super::{gaussian, ModelConfig, PROJ_STD};

#[derive(Debug, Clone, PartialEq)]
pub struct HgrnWeights {
    pub w_f: Matrix,
    pub b_f: Vec<f64>,
    pub w_i: Matrix,
    pub b_i: Vec<f64>,
    /// Output gate projection for `g_t`.
    pub w_g: Matrix,
}

/// Forget gate in log space and input gate, both `L × D`.
#[derive(Debug, Clone)]
pub struct HgrnGates {
    pub log_forget: Matrix,
    pub input_gate: Matrix,
}

impl HgrnWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        Self {
            w_f: gaussian(rng, d, d, PROJ_STD),
            b_f: vec![0.0; d],
            w_i: gaussian(rng, d, d, PROJ_STD),
            b_i: vec![0.0; d],
            w_g: gaussian(rng, d, d, PROJ_STD),
        }
    }

    pub fn gates(&self, x: &Matrix) -> Result<HgrnGates> {
        Ok(HgrnGates {
            log_forget: x.matmul(&self.w_f)?.add_row(&self.b_f)?.map(log_sigmoid),
            input_gate: x.matmul(&self.w_i)?.add_row(&self.b_i)?.map(sigmoid),
        })
    }

    pub fn output_gate(&self, x: &Matrix) -> Result<Matrix> {
        Ok(x.matmul(&self.w_g)?.map(silu))
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let gates = self.gates(x)?;
        let h = hgrn_scan(&x.map(silu), &gates);
        self.output_gate(x)?.hadamard(&h)
    }
}

/// `h_t = f_t ⊙ h_{t-1} + i_t ⊙ c_t`.
pub fn hgrn_scan(candidate: &Matrix, gates: &HgrnGates) -> Matrix {
    let (len, width) = candidate.shape();
    let mut out = Matrix::zeros(len, width);
    for d in 0..width {
        let mut h = 0.0;
        for t in 0..len {
            h = gates.log_forget[(t, d)].exp() * h + gates.input_gate[(t, d)] * candidate[(t, d)];
            out[(t, d)] = h;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_forget_means_no_memory() {
        let c = Matrix::column(&[1.0, 2.0, 3.0]);
        let gates = HgrnGates {
            log_forget: Matrix::filled(3, 1, f64::NEG_INFINITY.max(-1e4)),
            input_gate: Matrix::column(&[0.5, 0.25, 1.0]),
        };
        let h = hgrn_scan(&c, &gates);
        assert_eq!(h.data(), &[0.5, 0.5, 3.0]);
    }

    #[test]
    fn zero_input_zero_output() {
        let cfg = ModelConfig::for_arch(super::super::Arch::Hgrn, 4, 3, 0);
        let w = HgrnWeights::init(&cfg, &mut Rng::new(1));
        assert_eq!(w.forward(&Matrix::zeros(3, 4)).unwrap().max_abs(), 0.0);
    }
}
