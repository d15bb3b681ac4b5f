// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference (recurrent / sequential) implementations of every mixing block.
//!
//! These are the ground truth the materialized matrices in
//! [`crate::attention`] are checked against.

mod config;
pub mod griffin;
pub mod hgrn;
pub mod mamba;
pub mod mamba2;
pub mod retnet;
pub mod rwkv;
pub mod softmax;

pub use config::{Arch, ModelConfig};
pub use griffin::{rg_lru_scan, GriffinBlockWeights};
pub use hgrn::{hgrn_scan, HgrnWeights};
pub use mamba::{s6_scan, MambaBlockWeights, S6Weights};
pub use mamba2::Mamba2BlockWeights;
pub use retnet::{retention_gamma, RetNetWeights};
pub use rwkv::{wkv_scan, RwkvBlockWeights};
pub use softmax::SoftmaxAttnWeights;

use crate::error::Result;
use crate::numerics::{rms_norm_rows, Matrix, Rng};

/// Standard deviation of every projection matrix at init.
pub const PROJ_STD: f64 = 0.02;

/// Epsilon of the scale-free RMSNorm in front of each stacked block.
pub const RMS_NORM_EPS: f64 = 1e-6;

pub(crate) fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal(std))
}

/// Depthwise filters, uniform in `±1/√K` (fan-in of a depthwise conv).
pub(crate) fn conv_filters(rng: &mut Rng, channels: usize, width: usize) -> Matrix {
    let bound = 1.0 / (width as f64).sqrt();
    Matrix::from_fn(channels, width, |_, _| rng.uniform_in(-bound, bound))
}

/// Weights of one mixing block.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockWeights {
    Mamba(MambaBlockWeights),
    Mamba2(Mamba2BlockWeights),
    Griffin(GriffinBlockWeights),
    Rwkv(RwkvBlockWeights),
    Retnet(RetNetWeights),
    Hgrn(HgrnWeights),
    SoftmaxAttn(SoftmaxAttnWeights),
}

impl BlockWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        match cfg.arch {
            Arch::Mamba => Self::Mamba(MambaBlockWeights::init(cfg, rng)),
            Arch::Mamba2 => Self::Mamba2(Mamba2BlockWeights::init(cfg, rng)),
            Arch::Griffin => Self::Griffin(GriffinBlockWeights::init(cfg, rng)),
            Arch::Rwkv => Self::Rwkv(RwkvBlockWeights::init(cfg, rng)),
            Arch::Retnet => Self::Retnet(RetNetWeights::init(cfg, rng)),
            Arch::Hgrn => Self::Hgrn(HgrnWeights::init(cfg, rng)),
            Arch::SoftmaxAttn => Self::SoftmaxAttn(SoftmaxAttnWeights::init(cfg, rng)),
        }
    }

    pub fn arch(&self) -> Arch {
        match self {
            Self::Mamba(_) => Arch::Mamba,
            Self::Mamba2(_) => Arch::Mamba2,
            Self::Griffin(_) => Arch::Griffin,
            Self::Rwkv(_) => Arch::Rwkv,
            Self::Retnet(_) => Arch::Retnet,
            Self::Hgrn(_) => Arch::Hgrn,
            Self::SoftmaxAttn(_) => Arch::SoftmaxAttn,
        }
    }

    /// The per-channel stream the implicit attention multiplies:
    /// `linear1(x)` for Mamba/Mamba-2, `linear2(x)` for Griffin, `x W_V`
    /// for softmax attention and the raw input otherwise.
    pub fn input_stream(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Self::Mamba(w) => x.matmul(&w.linear1),
            Self::Mamba2(w) => x.matmul(&w.linear1),
            Self::Griffin(w) => x.matmul(&w.linear2),
            Self::SoftmaxAttn(w) => w.values(x),
            Self::Rwkv(_) | Self::Retnet(_) | Self::Hgrn(_) => Ok(x.clone()),
        }
    }

    /// Token-mixed output before the channel-mixing output projection.
    pub fn forward_mixed(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Self::Mamba(w) => w.forward_mixed(x),
            Self::Mamba2(w) => w.forward_mixed(x),
            Self::Griffin(w) => w.forward_mixed(x),
            Self::Rwkv(w) => w.forward_mixed(x),
            Self::Retnet(w) => w.forward(x),
            Self::Hgrn(w) => w.forward(x),
            Self::SoftmaxAttn(w) => w.forward(x),
        }
    }

    /// Output projection applied after token mixing, if the block has one.
    pub fn output_projection(&self) -> Option<&Matrix> {
        match self {
            Self::Mamba(w) => Some(&w.linear3),
            Self::Mamba2(w) => Some(&w.linear3),
            Self::Griffin(w) => Some(&w.linear3),
            Self::Rwkv(w) => Some(&w.w_o),
            Self::Retnet(_) | Self::Hgrn(_) | Self::SoftmaxAttn(_) => None,
        }
    }

    pub fn project_out(&self, mixed: &Matrix) -> Result<Matrix> {
        match self.output_projection() {
            Some(w) => mixed.matmul(w),
            None => Ok(mixed.clone()),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.project_out(&self.forward_mixed(x)?)
    }
}

/// Deterministic per-layer weights for `cfg`, layer `ℓ` drawn from stream `ℓ` of `rng`.
pub fn init_weights(cfg: &ModelConfig, rng: &Rng) -> Result<Vec<BlockWeights>> {
    cfg.validate()?;
    Ok((0..cfg.depth)
        .map(|layer| BlockWeights::init(cfg, &mut rng.split(layer as u64)))
        .collect())
}

/// Pre-norm residual stack: `x_{ℓ+1} = x_ℓ + Mixer_ℓ(RMSNorm(x_ℓ))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub layers: Vec<BlockWeights>,
}

/// Residual streams of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `depth + 1` residual streams; the last one is the model output.
    pub residuals: Vec<Matrix>,
    /// RMS-normalized input of each layer.
    pub normed: Vec<Matrix>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let layers = init_weights(&cfg, &Rng::new(cfg.seed))?;
        Ok(Self { cfg, layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn trace(&self, x: &Matrix) -> Result<Trace> {
        let mut residuals = vec![x.clone()];
        let mut normed = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let cur = residuals.last().expect("nonempty");
            let n = rms_norm_rows(cur, RMS_NORM_EPS);
            let next = cur.add(&layer.forward(&n)?)?;
            normed.push(n);
            residuals.push(next);
        }
        Ok(Trace { residuals, normed })
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.trace(x)?.residuals.pop().expect("nonempty"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        for arch in Arch::ALL {
            let cfg = ModelConfig::for_arch(arch, 4, 6, 17).with_depth(2);
            assert_eq!(Model::new(cfg.clone()).unwrap(), Model::new(cfg).unwrap());
        }
    }

    #[test]
    fn layers_draw_from_distinct_streams() {
        let cfg = ModelConfig::for_arch(Arch::Hgrn, 4, 6, 1).with_depth(2);
        let m = Model::new(cfg).unwrap();
        assert_ne!(m.layers[0], m.layers[1]);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = ModelConfig::for_arch(Arch::Mamba, 4, 6, 1);
        cfg.conv_width = 0;
        assert!(Model::new(cfg).is_err());
    }

    #[test]
    fn retnet_gammas_follow_head_index() {
        let cfg = ModelConfig::for_arch(Arch::Retnet, 8, 6, 1);
        let m = Model::new(cfg).unwrap();
        let BlockWeights::Retnet(w) = &m.layers[0] else {
            panic!("wrong arch")
        };
        assert_eq!(w.gammas[0], 0.984375);
    }

    #[test]
    fn zero_input_zero_output_for_all() {
        for arch in Arch::ALL {
            let cfg = ModelConfig::for_arch(arch, 4, 5, 3).with_depth(2);
            let m = Model::new(cfg).unwrap();
            assert_eq!(
                m.forward(&Matrix::zeros(5, 4)).unwrap().max_abs(),
                0.0,
                "{arch}"
            );
        }
    }
}
