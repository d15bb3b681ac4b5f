// SPDX-License-Identifier: MIT OR Apache-2.0

//! RetNet multi-scale retention with a swish gate.
//!
//! Values are the raw head slices of the input and rotary phases are
//! omitted, so each head is `R x_head` with `R = (QKᵀ/√d) ⊙ Γ`.

use crate::error::Result;
use crate::numerics::{group_sigma, swish, Matrix, Rng};

use super::{gaussian, ModelConfig, PROJ_STD};

pub const RETNET_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct RetNetWeights {
    pub heads: usize,
    pub head_dim: usize,
    /// Per head, `D × head_dim`.
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    /// `D × D` gate projection.
    pub w_g: Matrix,
    /// Per-head decay `γ_h = 1 - 2^{-5-h}` (1-based `h`).
    pub gammas: Vec<f64>,
    pub eps: f64,
}

/// Decay for the 1-based head index `head`.
pub fn retention_gamma(head: usize) -> f64 {
    1.0 - 2f64.powi(-5 - head as i32)
}

impl RetNetWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let w_q = (0..cfg.heads)
            .map(|_| gaussian(rng, d, cfg.head_dim, PROJ_STD))
            .collect();
        let w_k = (0..cfg.heads)
            .map(|_| gaussian(rng, d, cfg.head_dim, PROJ_STD))
            .collect();
        Self {
            heads: cfg.heads,
            head_dim: cfg.head_dim,
            w_q,
            w_k,
            w_g: gaussian(rng, d, d, PROJ_STD),
            gammas: (1..=cfg.heads).map(retention_gamma).collect(),
            eps: RETNET_NORM_EPS,
        }
    }

    pub fn head_channels(&self, head: usize) -> std::ops::Range<usize> {
        head * self.head_dim..(head + 1) * self.head_dim
    }

    pub fn head_of(&self, channel: usize) -> usize {
        channel / self.head_dim
    }

    /// Concatenated head outputs before the norm, via the recurrent form
    /// `S_t = γ S_{t-1} + k_tᵀ v_t`, `o_t = q_t S_t / √d`.
    pub fn retention(&self, x: &Matrix) -> Result<Matrix> {
        let (len, width) = x.shape();
        let mut out = Matrix::zeros(len, width);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        for h in 0..self.heads {
            let q = x.matmul(&self.w_q[h])?;
            let k = x.matmul(&self.w_k[h])?;
            let chans = self.head_channels(h);
            let dk = q.cols();
            let dv = chans.len();
            let mut state = vec![0.0; dk * dv];
            for t in 0..len {
                for a in 0..dk {
                    for (b, ch) in chans.clone().enumerate() {
                        state[a * dv + b] =
                            self.gammas[h] * state[a * dv + b] + k[(t, a)] * x[(t, ch)];
                    }
                }
                for (b, ch) in chans.clone().enumerate() {
                    out[(t, ch)] =
                        scale * (0..dk).map(|a| q[(t, a)] * state[a * dv + b]).sum::<f64>();
                }
            }
        }
        Ok(out)
    }

    /// Per-token, per-head norm statistic of the retention output.
    pub fn sigmas(&self, y: &Matrix) -> Matrix {
        Matrix::from_fn(y.rows(), self.heads, |t, h| {
            group_sigma(&y.row(t)[self.head_channels(h)], self.eps)
        })
    }

    pub fn gate(&self, x: &Matrix) -> Result<Matrix> {
        Ok(x.matmul(&self.w_g)?.map(swish))
    }

    /// `swish(x W_G) ⊙ GroupNorm(retention(x))`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let y = self.retention(x)?;
        let sigma = self.sigmas(&y);
        let g = self.gate(x)?;
        Ok(Matrix::from_fn(y.rows(), y.cols(), |t, ch| {
            g[(t, ch)] * y[(t, ch)] / sigma[(t, self.head_of(ch))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_head_gamma() {
        assert_eq!(retention_gamma(1), 0.984375);
        assert_eq!(retention_gamma(2), 1.0 - 1.0 / 128.0);
    }

    #[test]
    fn zero_input_zero_output() {
        let cfg = ModelConfig::for_arch(super::super::Arch::Retnet, 4, 5, 0);
        let w = RetNetWeights::init(&cfg, &mut Rng::new(0));
        assert_eq!(w.forward(&Matrix::zeros(5, 4)).unwrap().max_abs(), 0.0);
    }
}
