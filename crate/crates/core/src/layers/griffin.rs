// SPDX-License-Identifier: MIT OR Apache-2.0

//! Griffin / Hawk temporal-mixing block built on the RG-LRU.

use crate::error::{Error, Result};
use crate::numerics::{gelu, log_sigmoid, sigmoid, sqrt_one_minus_exp2, Matrix, Rng};

use super::mamba::conv_channels;
use super::{conv_filters, gaussian, ModelConfig, PROJ_STD};

/// Exponent scale in `a_t = a^{c·r_t}`.
pub const RG_LRU_C: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GriffinBlockWeights {
    /// `D × d_inner` gate projection (GeLU branch).
    pub linear1: Matrix,
    /// `D × d_inner` input projection into the recurrent branch.
    pub linear2: Matrix,
    pub linear3: Matrix,
    pub conv: Matrix,
    pub w_a: Matrix,
    pub b_a: Vec<f64>,
    pub w_x: Matrix,
    pub b_x: Vec<f64>,
    /// Per-channel logit of the base decay, `a = sigmoid(a_logit)`.
    pub a_logit: Vec<f64>,
    pub c: f64,
}

/// Per-token RG-LRU gates, `L × d_inner`.
#[derive(Debug, Clone)]
pub struct RgLruGates {
    /// `log a_t = c · r_t · log a`.
    pub log_a: Matrix,
    pub input_gate: Matrix,
}

impl GriffinBlockWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (d, e) = (cfg.d_model, cfg.d_inner);
        Self {
            linear1: gaussian(rng, d, e, PROJ_STD),
            linear2: gaussian(rng, d, e, PROJ_STD),
            linear3: gaussian(rng, e, d, PROJ_STD),
            conv: conv_filters(rng, e, cfg.conv_width),
            w_a: gaussian(rng, e, e, PROJ_STD),
            b_a: vec![0.0; e],
            w_x: gaussian(rng, e, e, PROJ_STD),
            b_x: vec![0.0; e],
            a_logit: (0..e)
                .map(|_| {
                    let a = rng.uniform_in(0.9, 0.999);
                    (a / (1.0 - a)).ln()
                })
                .collect(),
            c: RG_LRU_C,
        }
    }

    /// Base decay `a` per channel, in `(0, 1)`.
    pub fn base_decay(&self) -> Vec<f64> {
        self.a_logit.iter().map(|l| sigmoid(*l)).collect()
    }

    pub fn gates(&self, u: &Matrix) -> Result<RgLruGates> {
        let r = u.matmul(&self.w_a)?.add_row(&self.b_a)?.map(sigmoid);
        let input_gate = u.matmul(&self.w_x)?.add_row(&self.b_x)?.map(sigmoid);
        let log_a = Matrix::from_fn(u.rows(), u.cols(), |t, d| {
            self.c * r[(t, d)] * log_sigmoid(self.a_logit[d])
        });
        Ok(RgLruGates { log_a, input_gate })
    }

    /// `(linear2(x'), conv(linear2(x')))`.
    pub fn stream_and_conv(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let stream = x.matmul(&self.linear2)?;
        let conv = conv_channels(&stream, &self.conv)?;
        Ok((stream, conv))
    }

    pub fn gate_branch(&self, x: &Matrix) -> Result<Matrix> {
        Ok(x.matmul(&self.linear1)?.map(gelu))
    }

    /// Output before `linear3`: `gelu(linear1 x') ⊙ RG-LRU(conv(linear2 x'))`.
    pub fn forward_mixed(&self, x: &Matrix) -> Result<Matrix> {
        let (_, u) = self.stream_and_conv(x)?;
        let h = rg_lru_scan(&u, self)?;
        self.gate_branch(x)?.hadamard(&h)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_mixed(x)?.matmul(&self.linear3)
    }
}

/// RG-LRU recurrence on `u` (`L × d_inner`) using the gates of `w`.
pub fn rg_lru_scan(u: &Matrix, w: &GriffinBlockWeights) -> Result<Matrix> {
    let gates = w.gates(u)?;
    rg_lru_scan_raw(u, &gates)
}

/// `h_t = a_t h_{t-1} + sqrt(1 - a_t²) (i_t x_t)` with explicit gates.
pub fn rg_lru_scan_raw(u: &Matrix, gates: &RgLruGates) -> Result<Matrix> {
    if gates.log_a.shape() != u.shape() || gates.input_gate.shape() != u.shape() {
        return Err(Error::Shape("RG-LRU gates do not match input".into()));
    }
    let (len, width) = u.shape();
    let mut out = Matrix::zeros(len, width);
    for d in 0..width {
        let mut h = 0.0;
        for t in 0..len {
            let la = gates.log_a[(t, d)];
            h = la.exp() * h + sqrt_one_minus_exp2(la) * gates.input_gate[(t, d)] * u[(t, d)];
            out[(t, d)] = h;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Arch;

    #[test]
    fn hand_recurrence_half_decay() {
        let gates = RgLruGates {
            log_a: Matrix::filled(2, 1, 0.5f64.ln()),
            input_gate: Matrix::filled(2, 1, 1.0),
        };
        let h = rg_lru_scan_raw(&Matrix::filled(2, 1, 1.0), &gates).unwrap();
        assert!((h[(0, 0)] - 0.8660254037844386).abs() < 1e-15);
        assert!((h[(1, 0)] - 1.299038105676658).abs() < 1e-15);
    }

    #[test]
    fn unit_decay_freezes_state_at_zero() {
        let gates = RgLruGates {
            log_a: Matrix::zeros(3, 1),
            input_gate: Matrix::filled(3, 1, 1.0),
        };
        let h = rg_lru_scan_raw(&Matrix::filled(3, 1, 2.0), &gates).unwrap();
        assert_eq!(h.max_abs(), 0.0);
    }

    #[test]
    fn base_decay_in_range() {
        let cfg = ModelConfig::for_arch(Arch::Griffin, 8, 4, 0);
        let w = GriffinBlockWeights::init(&cfg, &mut Rng::new(0));
        assert!(w
            .base_decay()
            .iter()
            .all(|a| *a > 0.9 - 1e-12 && *a < 0.999 + 1e-12));
        assert_eq!(w.forward(&Matrix::zeros(4, 8)).unwrap().max_abs(), 0.0);
    }
}
