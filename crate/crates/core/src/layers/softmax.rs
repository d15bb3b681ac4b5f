// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal multi-head softmax attention, the comparison baseline.

use crate::error::Result;
use crate::numerics::{Matrix, Rng};

use super::{gaussian, ModelConfig, PROJ_STD};

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxAttnWeights {
    pub heads: usize,
    pub head_dim: usize,
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    /// `D × D` value projection; head `h` reads columns `h·d..(h+1)·d`.
    pub w_v: Matrix,
}

impl SoftmaxAttnWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        Self {
            heads: cfg.heads,
            head_dim: cfg.head_dim,
            w_q: (0..cfg.heads)
                .map(|_| gaussian(rng, d, cfg.head_dim, PROJ_STD))
                .collect(),
            w_k: (0..cfg.heads)
                .map(|_| gaussian(rng, d, cfg.head_dim, PROJ_STD))
                .collect(),
            w_v: gaussian(rng, d, d, PROJ_STD),
        }
    }

    pub fn head_of(&self, channel: usize) -> usize {
        channel / self.head_dim
    }

    pub fn values(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.w_v)
    }

    /// Scaled scores `QKᵀ/√d` of one head (full square, unmasked).
    pub fn scores(&self, x: &Matrix, head: usize) -> Result<Matrix> {
        let q = x.matmul(&self.w_q[head])?;
        let k = x.matmul(&self.w_k[head])?;
        Ok(q.matmul(&k.transpose())?
            .scale(1.0 / (self.head_dim as f64).sqrt()))
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let v = self.values(x)?;
        let (len, width) = v.shape();
        let mut out = Matrix::zeros(len, width);
        for h in 0..self.heads {
            let s = self.scores(x, h)?;
            for t in 0..len {
                let m = (0..=t).map(|j| s[(t, j)]).fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = (0..=t).map(|j| (s[(t, j)] - m).exp()).collect();
                let z: f64 = w.iter().sum();
                for ch in h * self.head_dim..(h + 1) * self.head_dim {
                    out[(t, ch)] = (0..=t).map(|j| w[j] * v[(j, ch)]).sum::<f64>() / z;
                }
            }
        }
        Ok(out)
    }
}
