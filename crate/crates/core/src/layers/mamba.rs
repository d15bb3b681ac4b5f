// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mamba block: causal conv, SiLU, selective scan (S6) and a SiLU gate branch.

use crate::error::{Error, Result};
use crate::numerics::{causal_conv, silu, softplus, Matrix, Rng};

use super::{conv_filters, gaussian, ModelConfig, PROJ_STD};

/// Selective state-space parameters for `channels` channels and `N` states.
#[derive(Debug, Clone, PartialEq)]
pub struct S6Weights {
    /// `channels × N`; the decay is `A = -exp(a_log)`.
    pub a_log: Matrix,
    /// `channels × N` projection producing `B_t`.
    pub w_b: Matrix,
    /// `channels × N` projection producing `C_t`.
    pub w_c: Matrix,
    /// `channels × channels` projection producing the step size.
    pub w_delta: Matrix,
    pub b_delta: Vec<f64>,
}

impl S6Weights {
    pub fn init(channels: usize, state: usize, rng: &mut Rng) -> Self {
        let a_log = Matrix::from_fn(channels, state, |_, _| rng.uniform_in(0.5, 8.0).ln());
        let w_b = gaussian(rng, channels, state, PROJ_STD);
        let w_c = gaussian(rng, channels, state, PROJ_STD);
        let w_delta = gaussian(rng, channels, channels, PROJ_STD);
        let b_delta = init_delta_bias(channels, rng);
        Self {
            a_log,
            w_b,
            w_c,
            w_delta,
            b_delta,
        }
    }

    /// Strictly negative continuous-time decay `A = -exp(a_log)`.
    pub fn a(&self) -> Matrix {
        self.a_log.map(|v| -v.exp())
    }

    pub fn channels(&self) -> usize {
        self.a_log.rows()
    }

    pub fn state_size(&self) -> usize {
        self.a_log.cols()
    }

    /// Step sizes, input and output projections for an activated input `x̂`.
    pub fn project(&self, xhat: &Matrix) -> Result<S6Inputs> {
        let delta = xhat
            .matmul(&self.w_delta)?
            .add_row(&self.b_delta)?
            .map(softplus);
        Ok(S6Inputs {
            delta,
            b: xhat.matmul(&self.w_b)?,
            c: xhat.matmul(&self.w_c)?,
        })
    }
}

/// Step-size bias so that `softplus(bias)` is log-uniform in `[1e-3, 1e-1]`.
pub(crate) fn init_delta_bias(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let dt = rng.uniform_in(1e-3f64.ln(), 1e-1f64.ln()).exp();
            crate::numerics::softplus_inv(dt)
        })
        .collect()
}

/// Data-dependent S6 quantities: `Δ` (`L×channels`), `B` and `C` (`L×N`).
#[derive(Debug, Clone, PartialEq)]
pub struct S6Inputs {
    pub delta: Matrix,
    pub b: Matrix,
    pub c: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MambaBlockWeights {
    /// `D × d_inner` input projection feeding the conv branch.
    pub linear1: Matrix,
    /// `D × d_inner` gate projection.
    pub linear2: Matrix,
    /// `d_inner × D` output projection.
    pub linear3: Matrix,
    /// `d_inner × K`, one causal filter per channel.
    pub conv: Matrix,
    pub s6: S6Weights,
}

impl MambaBlockWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (d, e) = (cfg.d_model, cfg.d_inner);
        Self {
            linear1: gaussian(rng, d, e, PROJ_STD),
            linear2: gaussian(rng, d, e, PROJ_STD),
            linear3: gaussian(rng, e, d, PROJ_STD),
            conv: conv_filters(rng, e, cfg.conv_width),
            s6: S6Weights::init(e, cfg.state_size, rng),
        }
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

    /// Token-mixed output before `linear3`: `silu(linear2 x) ⊙ S6(x̂)`.
    pub fn forward_mixed(&self, x: &Matrix) -> Result<Matrix> {
        let act = self.activations(x)?;
        let y = s6_scan(&act.xhat, &self.s6)?;
        act.gate.hadamard(&y)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_mixed(x)?.matmul(&self.linear3)
    }
}

/// Intermediate tensors of a Mamba block, all `L × d_inner`.
#[derive(Debug, Clone)]
pub struct MambaActivations {
    /// `linear1(x)`, the stream the implicit attention acts on.
    pub stream: Matrix,
    /// Raw causal conv output.
    pub conv_out: Matrix,
    /// `silu(conv_out)`, the S6 input.
    pub xhat: Matrix,
    /// `silu(linear2(x))`.
    pub gate: Matrix,
}

/// Applies each channel's causal filter (`filters` is `channels × K`).
pub fn conv_channels(x: &Matrix, filters: &Matrix) -> Result<Matrix> {
    if filters.rows() != x.cols() {
        return Err(Error::Shape(format!(
            "{} filters for {} channels",
            filters.rows(),
            x.cols()
        )));
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for d in 0..x.cols() {
        out.set_col(d, &causal_conv(&x.col(d), filters.row(d)));
    }
    Ok(out)
}

/// Selective scan with the projections of `w`.
pub fn s6_scan(xhat: &Matrix, w: &S6Weights) -> Result<Matrix> {
    let inputs = w.project(xhat)?;
    s6_scan_raw(xhat, &inputs, &w.a())
}

/// Selective scan with explicit `Δ`, `B`, `C` and decay `A` (`channels × N`).
///
/// Per channel: `h_t = exp(Δ_t A) ⊙ h_{t-1} + Δ_t B_t x̂_t`, `y_t = C_t · h_t`.
pub fn s6_scan_raw(xhat: &Matrix, inputs: &S6Inputs, a: &Matrix) -> Result<Matrix> {
    let (len, channels) = xhat.shape();
    let n = a.cols();
    check_s6_shapes(xhat, inputs, a)?;
    let mut out = Matrix::zeros(len, channels);
    let mut h = vec![0.0; n];
    for d in 0..channels {
        h.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..len {
            let dt = inputs.delta[(t, d)];
            let u = xhat[(t, d)];
            let mut y = 0.0;
            for (s, hs) in h.iter_mut().enumerate() {
                *hs = (dt * a[(d, s)]).exp() * *hs + dt * inputs.b[(t, s)] * u;
                y += inputs.c[(t, s)] * *hs;
            }
            out[(t, d)] = y;
        }
    }
    Ok(out)
}

pub(crate) fn check_s6_shapes(xhat: &Matrix, inputs: &S6Inputs, a: &Matrix) -> Result<()> {
    let (len, channels) = xhat.shape();
    let n = a.cols();
    if inputs.delta.shape() != (len, channels)
        || inputs.b.shape() != (len, n)
        || inputs.c.shape() != (len, n)
        || a.rows() != channels
    {
        return Err(Error::Shape(format!(
            "S6 inputs for {len}x{channels} with {n} states: delta {:?}, B {:?}, C {:?}, A {:?}",
            inputs.delta.shape(),
            inputs.b.shape(),
            inputs.c.shape(),
            a.shape()
        )));
    }
    Ok(())
}
