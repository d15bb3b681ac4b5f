// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mamba-2 block: multi-head SSM with per-head scalar decay and a grouped
//! norm after the gate.

use crate::error::Result;
use crate::numerics::{group_sigma, silu, softplus, Matrix, Rng};

use super::mamba::{conv_channels, init_delta_bias, MambaActivations};
use super::{conv_filters, gaussian, ModelConfig, PROJ_STD};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Multi-input SSM: `B_t`, `C_t` and the step size are shared by all
/// channels of a head, so each head has a single mixing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mamba2Ssm {
    /// Per-head decay `A_h = -exp(a_log[h])`.
    pub a_log: Vec<f64>,
    pub w_b: Matrix,
    pub w_c: Matrix,
    /// `d_inner × heads` step-size projection.
    pub w_delta: Matrix,
    pub b_delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mamba2BlockWeights {
    pub linear1: Matrix,
    pub linear2: Matrix,
    pub linear3: Matrix,
    pub conv: Matrix,
    pub ssm: Mamba2Ssm,
    pub heads: usize,
    pub head_dim: usize,
    pub eps: f64,
}

/// Step sizes (`L × heads`) and shared projections (`L × N`).
#[derive(Debug, Clone)]
pub struct Mamba2Inputs {
    pub delta: Matrix,
    pub b: Matrix,
    pub c: Matrix,
}

impl Mamba2BlockWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (d, e, h) = (cfg.d_model, cfg.d_inner, cfg.heads);
        Self {
            linear1: gaussian(rng, d, e, PROJ_STD),
            linear2: gaussian(rng, d, e, PROJ_STD),
            linear3: gaussian(rng, e, d, PROJ_STD),
            conv: conv_filters(rng, e, cfg.conv_width),
            ssm: Mamba2Ssm {
                a_log: (0..h).map(|_| rng.uniform_in(0.5, 8.0).ln()).collect(),
                w_b: gaussian(rng, e, cfg.state_size, PROJ_STD),
                w_c: gaussian(rng, e, cfg.state_size, PROJ_STD),
                w_delta: gaussian(rng, e, h, PROJ_STD),
                b_delta: init_delta_bias(h, rng),
            },
            heads: h,
            head_dim: cfg.head_dim,
            eps: GROUP_NORM_EPS,
        }
    }

    pub fn head_of(&self, channel: usize) -> usize {
        channel / self.head_dim
    }

    pub fn head_channels(&self, head: usize) -> std::ops::Range<usize> {
        head * self.head_dim..(head + 1) * self.head_dim
    }

    pub fn decay(&self, head: usize) -> f64 {
        -self.ssm.a_log[head].exp()
    }

    pub fn activations(&self, x: &Matrix) -> Result<MambaActivations> {
        let stream = x.matmul(&self.linear1)?;
        let conv_out = conv_channels(&stream, &self.conv)?;
        Ok(MambaActivations {
            xhat: conv_out.map(silu),
            gate: x.matmul(&self.linear2)?.map(silu),
            stream,
            conv_out,
        })
    }

    pub fn project(&self, xhat: &Matrix) -> Result<Mamba2Inputs> {
        Ok(Mamba2Inputs {
            delta: xhat
                .matmul(&self.ssm.w_delta)?
                .add_row(&self.ssm.b_delta)?
                .map(softplus),
            b: xhat.matmul(&self.ssm.w_b)?,
            c: xhat.matmul(&self.ssm.w_c)?,
        })
    }

    /// Recurrent multi-head scan of `x̂`.
    pub fn scan(&self, xhat: &Matrix) -> Result<Matrix> {
        let p = self.project(xhat)?;
        let (len, width) = xhat.shape();
        let n = p.b.cols();
        let mut out = Matrix::zeros(len, width);
        let mut h = vec![0.0; n];
        for ch in 0..width {
            let head = self.head_of(ch);
            let a = self.decay(head);
            h.iter_mut().for_each(|v| *v = 0.0);
            for t in 0..len {
                let dt = p.delta[(t, head)];
                let decay = (dt * a).exp();
                let mut y = 0.0;
                for (s, hs) in h.iter_mut().enumerate() {
                    *hs = decay * *hs + dt * p.b[(t, s)] * xhat[(t, ch)];
                    y += p.c[(t, s)] * *hs;
                }
                out[(t, ch)] = y;
            }
        }
        Ok(out)
    }

    /// Gated scan output before the grouped norm.
    pub fn forward_gated(&self, x: &Matrix) -> Result<Matrix> {
        let act = self.activations(x)?;
        act.gate.hadamard(&self.scan(&act.xhat)?)
    }

    /// Per-token, per-head norm statistic `σ` (`L × heads`) of the gated output.
    pub fn sigmas(&self, gated: &Matrix) -> Matrix {
        Matrix::from_fn(gated.rows(), self.heads, |t, h| {
            group_sigma(&gated.row(t)[self.head_channels(h)], self.eps)
        })
    }

    /// Normalized output before `linear3`: each head's values divided by its `σ`.
    pub fn forward_mixed(&self, x: &Matrix) -> Result<Matrix> {
        let gated = self.forward_gated(x)?;
        let sigma = self.sigmas(&gated);
        Ok(Matrix::from_fn(gated.rows(), gated.cols(), |t, ch| {
            gated[(t, ch)] / sigma[(t, self.head_of(ch))]
        }))
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_mixed(x)?.matmul(&self.linear3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Arch;

    #[test]
    fn sigma_of_symmetric_head() {
        let s = group_sigma(&[3.0, -3.0], GROUP_NORM_EPS);
        assert!((s - (3.0 + GROUP_NORM_EPS)).abs() < 1e-15);
    }

    #[test]
    fn normalized_heads_have_unit_scale() {
        let cfg = ModelConfig::for_arch(Arch::Mamba2, 4, 5, 0);
        let w = Mamba2BlockWeights::init(&cfg, &mut Rng::new(11));
        let x = gaussian(&mut Rng::new(12), 5, 4, 1.0);
        let y = w.forward_mixed(&x).unwrap();
        for t in 0..5 {
            for h in 0..w.heads {
                let vals = &y.row(t)[w.head_channels(h)];
                let s = group_sigma(vals, 0.0);
                assert!(s <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn causal_in_time() {
        let cfg = ModelConfig::for_arch(Arch::Mamba2, 4, 6, 0);
        let w = Mamba2BlockWeights::init(&cfg, &mut Rng::new(2));
        let x = gaussian(&mut Rng::new(3), 6, 4, 1.0);
        let mut x2 = x.clone();
        x2[(4, 1)] += 0.5;
        let a = w.forward(&x).unwrap();
        let b = w.forward(&x2).unwrap();
        for t in 0..4 {
            assert_eq!(a.row(t), b.row(t));
        }
    }
}
