// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};
use crate::layers::{
    BlockWeights, GriffinBlockWeights, HgrnWeights, Mamba2BlockWeights, MambaBlockWeights, Model,
    RetNetWeights, RwkvBlockWeights, SoftmaxAttnWeights,
};
use crate::numerics::{group_sigma, sigmoid, Matrix};

use super::kernels::{
    build_conv_matrix, build_hgrn_matrix, build_rg_lru_matrix, build_rwkv_alpha_channel,
    build_s6_matrix, build_scalar_ssm_matrix, causal_softmax, retention_matrix,
};
use super::{ImplicitAttnStack, LayerAttn, LayerFactors};

/// Default cap on sequence length for dense stacks.
pub const DEFAULT_MAX_LEN: usize = 512;

fn conv_matrices(filters: &Matrix, len: usize) -> Result<Vec<Matrix>> {
    (0..filters.rows())
        .map(|d| build_conv_matrix(filters.row(d), len))
        .collect()
}

fn columns(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.cols()).map(|d| m.col(d)).collect()
}

fn ones(channels: usize, len: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0; len]; channels]
}

/// `H = diag(silu(linear2 x)) · α̂ · diag(sigmoid(conv)) · M`, acting on `linear1(x)`.
pub fn build_mamba_h(x: &Matrix, w: &MambaBlockWeights) -> Result<LayerAttn> {
    let len = x.rows();
    let act = w.activations(x)?;
    let channels = act.stream.cols();
    let cores = build_s6_matrix(&act.xhat, &w.s6)?;
    LayerAttn::from_factors(LayerFactors {
        norm: ones(channels, len),
        gate: columns(&act.gate),
        cores,
        core_of: (0..channels).collect(),
        act: columns(&act.conv_out.map(sigmoid)),
        conv: Some(conv_matrices(&w.conv, len)?),
    })
}

/// Mamba-2 with one shared core per head and the grouped-norm diagonal.
///
/// With `normalize = false` the norm factor is the identity, which reduces
/// the block to a multi-head Mamba.
pub fn build_mamba2_h_with(
    x: &Matrix,
    w: &Mamba2BlockWeights,
    normalize: bool,
) -> Result<LayerAttn> {
    let len = x.rows();
    let act = w.activations(x)?;
    let channels = act.stream.cols();
    let p = w.project(&act.xhat)?;
    let cores = (0..w.heads)
        .map(|h| build_scalar_ssm_matrix(&p.delta.col(h), &p.b, &p.c, w.decay(h)))
        .collect::<Result<Vec<_>>>()?;
    let mut factors = LayerFactors {
        norm: ones(channels, len),
        gate: columns(&act.gate),
        cores,
        core_of: (0..channels).map(|d| w.head_of(d)).collect(),
        act: columns(&act.conv_out.map(sigmoid)),
        conv: Some(conv_matrices(&w.conv, len)?),
    };
    if normalize {
        // Statistics of the gated output, computed through the matrices themselves.
        let gated = LayerAttn::from_factors(factors.clone())?.apply(&act.stream)?;
        let sigma = w.sigmas(&gated);
        factors.norm = (0..channels)
            .map(|d| (0..len).map(|t| 1.0 / sigma[(t, w.head_of(d))]).collect())
            .collect();
    }
    LayerAttn::from_factors(factors)
}

pub fn build_mamba2_h(x: &Matrix, w: &Mamba2BlockWeights) -> Result<LayerAttn> {
    build_mamba2_h_with(x, w, true)
}

/// `H = diag(gelu(linear1 x')) · α̃ · M`, acting on `linear2(x')`.
pub fn build_griffin_h(x: &Matrix, w: &GriffinBlockWeights) -> Result<LayerAttn> {
    let len = x.rows();
    let (stream, u) = w.stream_and_conv(x)?;
    let channels = stream.cols();
    LayerAttn::from_factors(LayerFactors {
        norm: ones(channels, len),
        gate: columns(&w.gate_branch(x)?),
        cores: build_rg_lru_matrix(&u, w)?,
        core_of: (0..channels).collect(),
        act: ones(channels, len),
        conv: Some(conv_matrices(&w.conv, len)?),
    })
}

/// Per-channel WKV matrices `α̂` (rows sum to one).
pub fn build_rwkv_alpha(x: &Matrix, w: &RwkvBlockWeights) -> Result<Vec<Matrix>> {
    let (_, k) = w.receptance_and_key(x)?;
    Ok((0..x.cols())
        .map(|d| build_rwkv_alpha_channel(&k.col(d), w.decay[d], w.bonus[d]))
        .collect())
}

/// `H = diag(sigmoid(r)) · α̂`, acting on `x`.
pub fn build_rwkv_h(x: &Matrix, w: &RwkvBlockWeights) -> Result<LayerAttn> {
    let len = x.rows();
    let channels = x.cols();
    let (r, _) = w.receptance_and_key(x)?;
    LayerAttn::from_factors(LayerFactors {
        norm: ones(channels, len),
        gate: columns(&r.map(sigmoid)),
        cores: build_rwkv_alpha(x, w)?,
        core_of: (0..channels).collect(),
        act: ones(channels, len),
        conv: None,
    })
}

/// `H = G · R` per head, with the group-norm statistic folded into the gate side.
pub fn build_retnet_h(x: &Matrix, w: &RetNetWeights) -> Result<LayerAttn> {
    let (len, channels) = x.shape();
    let cores = (0..w.heads)
        .map(|h| retention_matrix(&x.matmul(&w.w_q[h])?, &x.matmul(&w.w_k[h])?, w.gammas[h]))
        .collect::<Result<Vec<_>>>()?;
    let core_of: Vec<usize> = (0..channels).map(|d| w.head_of(d)).collect();
    let retained =
        LayerAttn::from_factors(LayerFactors::core_only(cores.clone(), core_of.clone()))?
            .apply(x)?;
    let norm = (0..channels)
        .map(|d| {
            let chans = w.head_channels(w.head_of(d));
            (0..len)
                .map(|t| 1.0 / group_sigma(&retained.row(t)[chans.clone()], w.eps))
                .collect()
        })
        .collect();
    LayerAttn::from_factors(LayerFactors {
        norm,
        gate: columns(&w.gate(x)?),
        cores,
        core_of,
        act: ones(channels, len),
        conv: None,
    })
}

/// `H = G · α_r · G_act` with `G = diag(silu(x W_g))`, `G_act = diag(sigmoid(x))`.
pub fn build_hgrn_h(x: &Matrix, w: &HgrnWeights) -> Result<LayerAttn> {
    let len = x.rows();
    let channels = x.cols();
    LayerAttn::from_factors(LayerFactors {
        norm: ones(channels, len),
        gate: columns(&w.output_gate(x)?),
        cores: build_hgrn_matrix(&w.gates(x)?)?,
        core_of: (0..channels).collect(),
        act: columns(&x.map(sigmoid)),
        conv: None,
    })
}

/// Causal softmax attention, acting on the values `x W_V`.
pub fn build_softmax_h(x: &Matrix, w: &SoftmaxAttnWeights) -> Result<LayerAttn> {
    let cores = (0..w.heads)
        .map(|h| Ok(causal_softmax(&w.scores(x, h)?)))
        .collect::<Result<Vec<_>>>()?;
    let core_of = (0..x.cols()).map(|d| w.head_of(d)).collect();
    LayerAttn::from_factors(LayerFactors::core_only(cores, core_of))
}

/// Builds one layer from the block's (already normalized) input.
pub fn build_layer(block: &BlockWeights, x: &Matrix) -> Result<LayerAttn> {
    match block {
        BlockWeights::Mamba(w) => build_mamba_h(x, w),
        BlockWeights::Mamba2(w) => build_mamba2_h(x, w),
        BlockWeights::Griffin(w) => build_griffin_h(x, w),
        BlockWeights::Rwkv(w) => build_rwkv_h(x, w),
        BlockWeights::Retnet(w) => build_retnet_h(x, w),
        BlockWeights::Hgrn(w) => build_hgrn_h(x, w),
        BlockWeights::SoftmaxAttn(w) => build_softmax_h(x, w),
    }
}

/// Implicit attention of every layer, each built on that layer's normalized input.
pub fn build_stack(model: &Model, x: &Matrix) -> Result<ImplicitAttnStack> {
    build_stack_capped(model, x, DEFAULT_MAX_LEN)
}

pub fn build_stack_capped(model: &Model, x: &Matrix, max_len: usize) -> Result<ImplicitAttnStack> {
    if x.rows() > max_len {
        return Err(Error::InvalidArgument(format!(
            "sequence of {} tokens exceeds the dense cap of {max_len}",
            x.rows()
        )));
    }
    let trace = model.trace(x)?;
    let layers = model
        .layers
        .iter()
        .zip(&trace.normed)
        .map(|(block, n)| build_layer(block, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImplicitAttnStack {
        arch: model.cfg.arch,
        layers,
    })
}

/// Relative error between `H · stream` and the block's recurrent mixed
/// output, one value per layer.
pub fn equivalence_errors(model: &Model, x: &Matrix) -> Result<Vec<f64>> {
    let trace = model.trace(x)?;
    model
        .layers
        .iter()
        .zip(&trace.normed)
        .map(|(block, n)| {
            let layer = build_layer(block, n)?;
            let via_matrix = layer.apply(&block.input_stream(n)?)?;
            via_matrix.max_rel_diff(&block.forward_mixed(n)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Arch, ModelConfig};
    use crate::numerics::Rng;

    fn random_input(len: usize, width: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_fn(len, width, |_, _| rng.normal(1.0))
    }

    #[test]
    fn every_arch_matches_its_recurrence() {
        for arch in Arch::ALL {
            for (len, d) in [(1, 4), (5, 4), (12, 8)] {
                let cfg = ModelConfig::for_arch(arch, d, len, 3).with_depth(2);
                let model = Model::new(cfg).unwrap();
                let x = random_input(len, d, 99);
                for err in equivalence_errors(&model, &x).unwrap() {
                    assert!(err < 1e-10, "{arch} L={len}: {err}");
                }
            }
        }
    }

    #[test]
    fn stacks_are_causal_and_recompose() {
        for arch in Arch::ALL {
            let model = Model::new(ModelConfig::for_arch(arch, 4, 7, 5)).unwrap();
            let stack = build_stack(&model, &random_input(7, 4, 1)).unwrap();
            for layer in &stack.layers {
                assert!(layer.is_causal(), "{arch}");
                assert!(layer.recomposition_error().unwrap() <= 1e-12);
            }
        }
    }

    #[test]
    fn empty_sequence_builds_empty_stack() {
        for arch in Arch::ALL {
            let model = Model::new(ModelConfig::for_arch(arch, 4, 0, 5)).unwrap();
            let stack = build_stack(&model, &Matrix::zeros(0, 4)).unwrap();
            assert_eq!(stack.seq_len(), 0);
            assert!(stack.layers[0].h.iter().all(Matrix::is_empty));
        }
    }

    #[test]
    fn mamba_zero_input_gives_zero_operator() {
        let model = Model::new(ModelConfig::for_arch(Arch::Mamba, 4, 5, 2)).unwrap();
        let stack = build_stack(&model, &Matrix::zeros(5, 4)).unwrap();
        assert!(stack.layers[0].h.iter().all(|h| h.max_abs() == 0.0));
    }

    #[test]
    fn mamba_unit_filter_has_identity_conv() {
        let mut cfg = ModelConfig::for_arch(Arch::Mamba, 4, 6, 2);
        cfg.conv_width = 1;
        let model = Model::new(cfg).unwrap();
        let BlockWeights::Mamba(mut w) = model.layers[0].clone() else {
            unreachable!()
        };
        w.conv = Matrix::filled(w.conv.rows(), 1, 1.0);
        let layer = build_mamba_h(&random_input(6, 4, 3), &w).unwrap();
        let conv = layer.factors.conv.as_ref().unwrap();
        assert!(conv.iter().all(|m| *m == Matrix::identity(6)));
        for d in 0..layer.channels() {
            let f = &layer.factors;
            let expected = f
                .core(d)
                .col_scale(&f.act[d])
                .unwrap()
                .row_scale(&f.gate[d])
                .unwrap();
            assert!(layer.h[d].sub(&expected).unwrap().max_abs() < 1e-15);
        }
    }

    #[test]
    fn mamba2_without_norm_is_multihead_mamba() {
        let cfg = ModelConfig::for_arch(Arch::Mamba2, 4, 6, 4);
        let model = Model::new(cfg).unwrap();
        let BlockWeights::Mamba2(w) = &model.layers[0] else {
            unreachable!()
        };
        let x = random_input(6, 4, 8);
        let layer = build_mamba2_h_with(&x, w, false).unwrap();
        let gated = w.forward_gated(&x).unwrap();
        let via = layer.apply(&x.matmul(&w.linear1).unwrap()).unwrap();
        assert!(via.max_rel_diff(&gated).unwrap() < 1e-10);
        assert!(layer.factors.norm.iter().flatten().all(|v| *v == 1.0));
    }

    #[test]
    fn rwkv_zero_receptance_halves_alpha() {
        let model = Model::new(ModelConfig::for_arch(Arch::Rwkv, 4, 5, 6)).unwrap();
        let BlockWeights::Rwkv(mut w) = model.layers[0].clone() else {
            unreachable!()
        };
        w.w_r = Matrix::zeros(4, 4);
        let layer = build_rwkv_h(&random_input(5, 4, 2), &w).unwrap();
        for d in 0..4 {
            assert_eq!(layer.h[d], layer.factors.cores[d].scale(0.5));
        }
    }

    #[test]
    fn griffin_zero_gate_projection_kills_operator() {
        let model = Model::new(ModelConfig::for_arch(Arch::Griffin, 4, 5, 6)).unwrap();
        let BlockWeights::Griffin(mut w) = model.layers[0].clone() else {
            unreachable!()
        };
        w.linear1 = Matrix::zeros(4, w.linear1.cols());
        let layer = build_griffin_h(&random_input(5, 4, 2), &w).unwrap();
        assert!(layer.h.iter().all(|h| h.max_abs() == 0.0));
    }

    #[test]
    fn hgrn_zero_input_gives_zero_operator() {
        let model = Model::new(ModelConfig::for_arch(Arch::Hgrn, 4, 5, 6)).unwrap();
        let stack = build_stack(&model, &Matrix::zeros(5, 4)).unwrap();
        assert!(stack.layers[0].h.iter().all(|h| h.max_abs() == 0.0));
    }

    #[test]
    fn cap_is_enforced() {
        let model = Model::new(ModelConfig::for_arch(Arch::Hgrn, 2, 8, 6)).unwrap();
        assert!(build_stack_capped(&model, &Matrix::zeros(8, 2), 4).is_err());
    }
}
