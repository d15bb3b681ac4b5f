// SPDX-License-Identifier: MIT OR Apache-2.0

//! The same operators as [`super::build_layer`], recorded on an autodiff
//! tape so that gradients flow through their dependence on the input.

use crate::autodiff::{NodeId, Tape, Unary};
use crate::error::Result;
use crate::layers::{
    BlockWeights, GriffinBlockWeights, HgrnWeights, Mamba2BlockWeights, MambaBlockWeights,
    RetNetWeights, RwkvBlockWeights, SoftmaxAttnWeights,
};
use crate::numerics::{log_sigmoid, Matrix};

use super::kernels::{build_conv_matrix, retention_decay_mask};

fn linear(tape: &mut Tape, x: NodeId, w: &Matrix) -> Result<NodeId> {
    let w = tape.leaf(w.clone());
    tape.matmul(x, w)
}

fn affine(tape: &mut Tape, x: NodeId, w: &Matrix, b: &[f64]) -> Result<NodeId> {
    let y = linear(tape, x, w)?;
    let b = tape.leaf(Matrix::new(1, b.len(), b.to_vec())?);
    tape.add_row(y, b)
}

fn column(tape: &mut Tape, m: NodeId, d: usize) -> Result<NodeId> {
    tape.select_cols(m, &[d])
}

fn columns(tape: &mut Tape, m: NodeId, width: usize) -> Result<Vec<NodeId>> {
    (0..width).map(|d| column(tape, m, d)).collect()
}

fn seq_len(tape: &Tape, x: NodeId) -> Result<usize> {
    Ok(tape.value(x)?.rows())
}

/// Conv matrices as constant leaves, plus the concatenated conv output.
fn conv(tape: &mut Tape, stream: NodeId, filters: &Matrix) -> Result<(Vec<NodeId>, NodeId)> {
    let len = seq_len(tape, stream)?;
    let mut mats = Vec::with_capacity(filters.rows());
    let mut outs = Vec::with_capacity(filters.rows());
    for d in 0..filters.rows() {
        let m = tape.leaf(build_conv_matrix(filters.row(d), len)?);
        let col = column(tape, stream, d)?;
        outs.push(tape.matmul(m, col)?);
        mats.push(m);
    }
    let out = tape.concat_cols(&outs)?;
    Ok((mats, out))
}

/// Stream the layer's operators act on, recorded from the normalized input.
pub fn trace_input_stream(tape: &mut Tape, block: &BlockWeights, x: NodeId) -> Result<NodeId> {
    match block {
        BlockWeights::Mamba(w) => linear(tape, x, &w.linear1),
        BlockWeights::Mamba2(w) => linear(tape, x, &w.linear1),
        BlockWeights::Griffin(w) => linear(tape, x, &w.linear2),
        BlockWeights::SoftmaxAttn(w) => linear(tape, x, &w.w_v),
        BlockWeights::Rwkv(_) | BlockWeights::Retnet(_) | BlockWeights::Hgrn(_) => Ok(x),
    }
}

/// Per-channel operator nodes of one layer, recorded from its normalized input.
pub fn trace_layer(tape: &mut Tape, block: &BlockWeights, x: NodeId) -> Result<Vec<NodeId>> {
    match block {
        BlockWeights::Mamba(w) => trace_mamba(tape, w, x),
        BlockWeights::Mamba2(w) => trace_mamba2(tape, w, x),
        BlockWeights::Griffin(w) => trace_griffin(tape, w, x),
        BlockWeights::Rwkv(w) => trace_rwkv(tape, w, x),
        BlockWeights::Retnet(w) => trace_retnet(tape, w, x),
        BlockWeights::Hgrn(w) => trace_hgrn(tape, w, x),
        BlockWeights::SoftmaxAttn(w) => trace_softmax(tape, w, x),
    }
}

/// `diag(gate) · core · diag(act) · conv`, skipping absent factors.
fn compose(
    tape: &mut Tape,
    gate: Option<NodeId>,
    core: NodeId,
    act: Option<NodeId>,
    conv: Option<NodeId>,
) -> Result<NodeId> {
    let mut h = core;
    if let Some(a) = act {
        h = tape.col_scale(h, a)?;
    }
    if let Some(m) = conv {
        h = tape.matmul(h, m)?;
    }
    if let Some(g) = gate {
        h = tape.row_scale(h, g)?;
    }
    Ok(h)
}

fn trace_mamba(tape: &mut Tape, w: &MambaBlockWeights, x: NodeId) -> Result<Vec<NodeId>> {
    let width = w.linear1.cols();
    let stream = linear(tape, x, &w.linear1)?;
    let (mats, conv_out) = conv(tape, stream, &w.conv)?;
    let xhat = tape.map(conv_out, Unary::Silu)?;
    let delta = affine(tape, xhat, &w.s6.w_delta, &w.s6.b_delta)?;
    let delta = tape.map(delta, Unary::Softplus)?;
    let b = linear(tape, xhat, &w.s6.w_b)?;
    let c = linear(tape, xhat, &w.s6.w_c)?;
    let b_cols = columns(tape, b, w.s6.state_size())?;
    let c_cols = columns(tape, c, w.s6.state_size())?;
    let gate = linear(tape, x, &w.linear2)?;
    let gate = tape.map(gate, Unary::Silu)?;
    let z = tape.map(conv_out, Unary::Sigmoid)?;
    let a = w.s6.a();
    let mut out = Vec::with_capacity(width);
    for d in 0..width {
        let dt = column(tape, delta, d)?;
        let mut alpha: Option<NodeId> = None;
        for s in 0..w.s6.state_size() {
            let logd = tape.scale(dt, a[(d, s)])?;
            let term = tape.decay_matrix(logd, dt)?;
            let term = tape.col_scale(term, b_cols[s])?;
            let term = tape.row_scale(term, c_cols[s])?;
            alpha = Some(match alpha {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let alpha = alpha.expect("state size is at least one");
        let (g, act) = (column(tape, gate, d)?, column(tape, z, d)?);
        out.push(compose(tape, Some(g), alpha, Some(act), Some(mats[d]))?);
    }
    Ok(out)
}

fn trace_mamba2(tape: &mut Tape, w: &Mamba2BlockWeights, x: NodeId) -> Result<Vec<NodeId>> {
    let width = w.linear1.cols();
    let stream = linear(tape, x, &w.linear1)?;
    let (mats, conv_out) = conv(tape, stream, &w.conv)?;
    let xhat = tape.map(conv_out, Unary::Silu)?;
    let delta = affine(tape, xhat, &w.ssm.w_delta, &w.ssm.b_delta)?;
    let delta = tape.map(delta, Unary::Softplus)?;
    let b = linear(tape, xhat, &w.ssm.w_b)?;
    let c = linear(tape, xhat, &w.ssm.w_c)?;
    let bt = tape.transpose(b)?;
    let cb = tape.matmul(c, bt)?;
    let gate = linear(tape, x, &w.linear2)?;
    let gate = tape.map(gate, Unary::Silu)?;
    let z = tape.map(conv_out, Unary::Sigmoid)?;

    let mut out = Vec::with_capacity(width);
    for h in 0..w.heads {
        let dt = column(tape, delta, h)?;
        let logd = tape.scale(dt, w.decay(h))?;
        let decay = tape.decay_matrix(logd, dt)?;
        let alpha = tape.mul(cb, decay)?;
        let mut unnormed = Vec::new();
        let mut gated = Vec::new();
        for d in w.head_channels(h) {
            let (g, act) = (column(tape, gate, d)?, column(tape, z, d)?);
            let k = compose(tape, Some(g), alpha, Some(act), Some(mats[d]))?;
            let s = column(tape, stream, d)?;
            gated.push(tape.matmul(k, s)?);
            unnormed.push(k);
        }
        let gated = tape.concat_cols(&gated)?;
        let sigma = tape.row_std_eps(gated, w.eps)?;
        let inv = tape.map(sigma, Unary::Recip)?;
        for k in unnormed {
            out.push(tape.row_scale(k, inv)?);
        }
    }
    Ok(out)
}

fn trace_griffin(tape: &mut Tape, w: &GriffinBlockWeights, x: NodeId) -> Result<Vec<NodeId>> {
    let width = w.linear2.cols();
    let stream = linear(tape, x, &w.linear2)?;
    let (mats, u) = conv(tape, stream, &w.conv)?;
    let r = affine(tape, u, &w.w_a, &w.b_a)?;
    let r = tape.map(r, Unary::Sigmoid)?;
    let i = affine(tape, u, &w.w_x, &w.b_x)?;
    let i = tape.map(i, Unary::Sigmoid)?;
    let gate = linear(tape, x, &w.linear1)?;
    let gate = tape.map(gate, Unary::Gelu)?;
    let mut out = Vec::with_capacity(width);
    for (d, &conv_d) in mats.iter().enumerate().take(width) {
        let rd = column(tape, r, d)?;
        let log_a = tape.scale(rd, w.c * log_sigmoid(w.a_logit[d]))?;
        let scale = tape.map(log_a, Unary::Sqrt1mExp2)?;
        let id = column(tape, i, d)?;
        let inject = tape.mul(scale, id)?;
        let alpha = tape.decay_matrix(log_a, inject)?;
        let g = column(tape, gate, d)?;
        out.push(compose(tape, Some(g), alpha, None, Some(conv_d))?);
    }
    Ok(out)
}

fn trace_rwkv(tape: &mut Tape, w: &RwkvBlockWeights, x: NodeId) -> Result<Vec<NodeId>> {
    let len = seq_len(tape, x)?;
    let width = w.w_r.rows();
    let shift = tape.leaf(Matrix::from_fn(len, len, |t, j| {
        f64::from(u8::from(t == j + 1))
    }));
    let shifted = tape.matmul(shift, x)?;
    let mut mix = |coef: &[f64], proj: &Matrix| -> Result<NodeId> {
        let keep = tape.leaf(Matrix::new(1, coef.len(), coef.to_vec())?);
        let rest = tape.leaf(Matrix::new(
            1,
            coef.len(),
            coef.iter().map(|c| 1.0 - c).collect(),
        )?);
        let a = tape.col_scale(x, keep)?;
        let b = tape.col_scale(shifted, rest)?;
        let m = tape.add(a, b)?;
        linear(tape, m, proj)
    };
    let r = mix(&w.mix_r, &w.w_r)?;
    let k = mix(&w.mix_k, &w.w_k)?;
    let r = tape.map(r, Unary::Sigmoid)?;
    let ones = tape.leaf(Matrix::filled(len, 1, 1.0));
    let mut out = Vec::with_capacity(width);
    for d in 0..width {
        let kd = column(tape, k, d)?;
        let kt = tape.transpose(kd)?;
        let keys = tape.matmul(ones, kt)?;
        let (decay, bonus) = (w.decay[d], w.bonus[d]);
        let offsets = tape.leaf(Matrix::from_fn(len, len, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => -((i - 1 - j) as f64) * decay,
            std::cmp::Ordering::Equal => bonus,
            std::cmp::Ordering::Less => 0.0,
        }));
        let logits = tape.add(keys, offsets)?;
        let alpha = tape.causal_softmax(logits)?;
        let g = column(tape, r, d)?;
        out.push(compose(tape, Some(g), alpha, None, None)?);
    }
    Ok(out)
}

fn trace_retnet(tape: &mut Tape, w: &RetNetWeights, x: NodeId) -> Result<Vec<NodeId>> {
    let len = seq_len(tape, x)?;
    let gate = linear(tape, x, &w.w_g)?;
    let gate = tape.map(gate, Unary::Silu)?;
    let scale = 1.0 / (w.head_dim as f64).sqrt();
    let mut out = Vec::new();
    for h in 0..w.heads {
        let q = linear(tape, x, &w.w_q[h])?;
        let k = linear(tape, x, &w.w_k[h])?;
        let kt = tape.transpose(k)?;
        let qk = tape.matmul(q, kt)?;
        let qk = tape.scale(qk, scale)?;
        let mask = tape.leaf(retention_decay_mask(w.gammas[h], len));
        let core = tape.mul(qk, mask)?;
        let mut retained = Vec::new();
        for d in w.head_channels(h) {
            let xd = column(tape, x, d)?;
            retained.push(tape.matmul(core, xd)?);
        }
        let retained = tape.concat_cols(&retained)?;
        let sigma = tape.row_std_eps(retained, w.eps)?;
        let inv = tape.map(sigma, Unary::Recip)?;
        let normed = tape.row_scale(core, inv)?;
        for d in w.head_channels(h) {
            let g = column(tape, gate, d)?;
            out.push(compose(tape, Some(g), normed, None, None)?);
        }
    }
    Ok(out)
}

fn trace_hgrn(tape: &mut Tape, w: &HgrnWeights, x: NodeId) -> Result<Vec<NodeId>> {
    let width = w.w_f.cols();
    let f = affine(tape, x, &w.w_f, &w.b_f)?;
    let f = tape.map(f, Unary::LogSigmoid)?;
    let i = affine(tape, x, &w.w_i, &w.b_i)?;
    let i = tape.map(i, Unary::Sigmoid)?;
    let gate = linear(tape, x, &w.w_g)?;
    let gate = tape.map(gate, Unary::Silu)?;
    let act = tape.map(x, Unary::Sigmoid)?;
    let mut out = Vec::with_capacity(width);
    for d in 0..width {
        let (fd, id) = (column(tape, f, d)?, column(tape, i, d)?);
        let alpha = tape.decay_matrix(fd, id)?;
        let (g, a) = (column(tape, gate, d)?, column(tape, act, d)?);
        out.push(compose(tape, Some(g), alpha, Some(a), None)?);
    }
    Ok(out)
}

fn trace_softmax(tape: &mut Tape, w: &SoftmaxAttnWeights, x: NodeId) -> Result<Vec<NodeId>> {
    let scale = 1.0 / (w.head_dim as f64).sqrt();
    let mut out = Vec::new();
    for h in 0..w.heads {
        let q = linear(tape, x, &w.w_q[h])?;
        let k = linear(tape, x, &w.w_k[h])?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, scale)?;
        let alpha = tape.causal_softmax(s)?;
        out.extend(std::iter::repeat_n(alpha, w.head_dim));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::build_layer;
    use crate::layers::{Arch, Model, ModelConfig};
    use crate::numerics::{rms_norm_rows, Rng};

    #[test]
    fn traced_operators_match_direct_build() {
        for arch in Arch::ALL {
            for len in [1, 6] {
                let model = Model::new(ModelConfig::for_arch(arch, 4, len, 11)).unwrap();
                let mut rng = Rng::new(4);
                let x = rms_norm_rows(&Matrix::from_fn(len, 4, |_, _| rng.normal(1.0)), 1e-6);
                let block = &model.layers[0];
                let direct = build_layer(block, &x).unwrap();
                let mut tape = Tape::new();
                let xn = tape.leaf(x.clone());
                let hs = trace_layer(&mut tape, block, xn).unwrap();
                let stream = trace_input_stream(&mut tape, block, xn).unwrap();
                assert_eq!(hs.len(), direct.channels(), "{arch}");
                for (d, h) in hs.iter().enumerate() {
                    let traced = tape.value(*h).unwrap();
                    let diff = traced.sub(&direct.h[d]).unwrap().max_abs();
                    let scale = direct.h[d].max_abs().max(1e-300);
                    assert!(diff / scale < 1e-12, "{arch} channel {d}: {diff:e}");
                }
                let s = block.input_stream(&x).unwrap();
                assert_eq!(tape.value(stream).unwrap(), &s);
            }
        }
    }
}
