// SPDX-License-Identifier: MIT OR Apache-2.0

//! Relevance maps from materialized attention: raw attention, rollout and
//! gradient × attention attribution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::traced::{trace_input_stream, trace_layer};
use crate::attention::{build_layer, ImplicitAttnStack, LayerAttn};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::layers::{BlockWeights, Model, RMS_NORM_EPS};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Raw,
    Rollout,
    #[serde(rename = "attr")]
    Attribution,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Raw, Method::Rollout, Method::Attribution];

    pub fn name(self) -> &'static str {
        match self {
            Self::Raw => "raw",
            Self::Rollout => "rollout",
            Self::Attribution => "attr",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "method",
                name: s.to_string(),
            })
    }
}

/// Per-token relevance for one target position.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    /// Nonnegative scores before normalization.
    pub scores: Vec<f64>,
    /// Min-max normalized scores in `[0, 1]`.
    pub normalized: Vec<f64>,
    pub target_pos: usize,
    pub target_class: Option<usize>,
    pub method: Method,
}

impl RelevanceMap {
    pub fn new(
        scores: Vec<f64>,
        target_pos: usize,
        target_class: Option<usize>,
        method: Method,
    ) -> Result<Self> {
        if let Some(bad) = scores.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite(format!(
                "relevance at position {bad} is {}",
                scores[bad]
            )));
        }
        Ok(Self {
            normalized: minmax_normalize(&scores),
            scores,
            target_pos,
            target_class,
            method,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Drops one position (typically the classification token) and
    /// re-normalizes the rest.
    pub fn exclude(&self, pos: usize) -> Result<Self> {
        if pos >= self.len() {
            return Err(Error::OutOfRange {
                what: "position",
                index: pos,
                limit: self.len(),
            });
        }
        let mut scores = self.scores.clone();
        scores.remove(pos);
        Self::new(scores, self.target_pos, self.target_class, self.method)
    }
}

/// `(|v| - min|v|) / (max|v| - min|v|)`; all ties map to zeros.
pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let lo = abs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = abs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range > 0.0 {
        abs.iter().map(|v| (v - lo) / range).collect()
    } else {
        vec![0.0; abs.len()]
    }
}

/// Mean over channels of `|H^{(d)}|`.
pub fn aggregate_layer(layer: &LayerAttn) -> Result<Matrix> {
    mean_abs(&layer.h)
}

fn mean_abs(mats: &[Matrix]) -> Result<Matrix> {
    let first = mats
        .first()
        .ok_or_else(|| Error::InvalidArgument("layer has no channels".into()))?;
    let mut acc = Matrix::zeros(first.rows(), first.cols());
    for m in mats {
        acc.add_assign(&m.map(f64::abs))?;
    }
    Ok(acc.scale(1.0 / mats.len() as f64))
}

fn check_target(len: usize, target_pos: usize) -> Result<()> {
    if target_pos >= len {
        return Err(Error::OutOfRange {
            what: "target position",
            index: target_pos,
            limit: len,
        });
    }
    Ok(())
}

fn last_layer(stack: &ImplicitAttnStack) -> Result<&LayerAttn> {
    stack
        .layers
        .last()
        .ok_or_else(|| Error::InvalidArgument("stack has no layers".into()))
}

/// Row `target_pos` of the last layer's aggregated attention.
pub fn raw_attention_relevance(
    stack: &ImplicitAttnStack,
    target_pos: usize,
) -> Result<RelevanceMap> {
    check_target(stack.seq_len(), target_pos)?;
    let agg = aggregate_layer(last_layer(stack)?)?;
    RelevanceMap::new(agg.row(target_pos).to_vec(), target_pos, None, Method::Raw)
}

/// Divides each row by its sum; rows summing to zero are left as zeros.
pub fn row_normalize(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let s: f64 = row.iter().sum();
        if s != 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    out
}

/// `R = Ã_Λ ⋯ Ã_1` for per-layer matrices given first layer first.
pub fn layer_product(mats: &[Matrix]) -> Result<Matrix> {
    let n = mats.first().map_or(0, Matrix::rows);
    mats.iter()
        .try_fold(Matrix::identity(n), |acc, m| m.matmul(&acc))
}

/// Rollout with `Ã_ℓ = rownorm(Ā_ℓ + I)`.
pub fn attention_rollout(stack: &ImplicitAttnStack, target_pos: usize) -> Result<RelevanceMap> {
    check_target(stack.seq_len(), target_pos)?;
    let n = stack.seq_len();
    let mats = stack
        .layers
        .iter()
        .map(|l| {
            Ok(row_normalize(
                &aggregate_layer(l)?.add(&Matrix::identity(n))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let r = layer_product(&mats)?;
    RelevanceMap::new(
        r.row(target_pos).to_vec(),
        target_pos,
        None,
        Method::Rollout,
    )
}

/// Linear readout of one position of the model output.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    /// Row read from the final residual stream; `None` is the last row.
    pub position: Option<usize>,
    /// `D × classes`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Readout {
    /// Class `c` is channel `c` of the output at the given position.
    pub fn identity(d_model: usize, position: Option<usize>) -> Self {
        Self {
            position,
            weights: Matrix::identity(d_model),
            bias: vec![0.0; d_model],
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn position_in(&self, len: usize) -> Result<usize> {
        let pos = self.position.unwrap_or(len.saturating_sub(1));
        check_target(len, pos)?;
        Ok(pos)
    }

    pub fn logits(&self, out: &Matrix) -> Result<Vec<f64>> {
        let pos = self.position_in(out.rows())?;
        let row = Matrix::new(1, out.cols(), out.row(pos).to_vec())?;
        Ok(row.matmul(&self.weights)?.add_row(&self.bias)?.into_data())
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.classes() {
            return Err(Error::OutOfRange {
                what: "target class",
                index: class,
                limit: self.classes(),
            });
        }
        Ok(())
    }
}

/// Backbone plus readout.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub model: Model,
    pub readout: Readout,
}

impl Classifier {
    pub fn logits(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.readout.logits(&self.model.forward(x)?)
    }

    pub fn predict(&self, x: &Matrix) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
            if *v > bv {
                (i, *v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// How gradients treat the operators' dependence on the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradMode {
    /// Operators are leaves: `∂score/∂H` at the materialized values.
    #[default]
    Frozen,
    /// Operators are recorded from their inputs; gradients flow through them.
    Full,
}

/// Cross-layer combination of attribution maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Combine {
    /// Product of `rownorm(E_ℓ) + I` over layers.
    #[default]
    Rollout,
    LastLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttributionOptions {
    pub mode: GradMode,
    pub combine: Combine,
}

/// A recorded class score and the per-layer operator nodes it depends on.
#[derive(Debug)]
pub struct ScoreGraph {
    pub score: NodeId,
    /// `layers × channels` operator nodes.
    pub operators: Vec<Vec<NodeId>>,
}

/// Records `score = logits(model(x))[class]` on `tape`, with the operators
/// either as leaves or traced from their inputs.
pub fn record_score(
    tape: &mut Tape,
    clf: &Classifier,
    x: NodeId,
    class: usize,
    mode: GradMode,
) -> Result<ScoreGraph> {
    record(tape, clf, x, class, &mut |tape, _, block, n| match mode {
        GradMode::Frozen => {
            let layer = build_layer(block, tape.value(n)?)?;
            Ok(layer.h.into_iter().map(|h| tape.leaf(h)).collect())
        }
        GradMode::Full => trace_layer(tape, block, n),
    })
}

/// Like [`record_score`] in frozen mode, but with caller-supplied operator
/// nodes (`layers × channels`), so the score can be evaluated at arbitrary
/// operator values.
pub fn record_score_with_operators(
    tape: &mut Tape,
    clf: &Classifier,
    x: NodeId,
    class: usize,
    operators: &[Vec<NodeId>],
) -> Result<ScoreGraph> {
    if operators.len() != clf.model.depth() {
        return Err(Error::Shape(format!(
            "{} operator layers for depth {}",
            operators.len(),
            clf.model.depth()
        )));
    }
    record(tape, clf, x, class, &mut |_, l, _, _| {
        Ok(operators[l].clone())
    })
}

type OperatorSource<'a> =
    dyn FnMut(&mut Tape, usize, &BlockWeights, NodeId) -> Result<Vec<NodeId>> + 'a;

fn record(
    tape: &mut Tape,
    clf: &Classifier,
    x: NodeId,
    class: usize,
    operators_for: &mut OperatorSource<'_>,
) -> Result<ScoreGraph> {
    clf.readout.check_class(class)?;
    let len = tape.value(x)?.rows();
    let pos = clf.readout.position_in(len)?;
    let mut cur = x;
    let mut operators = Vec::with_capacity(clf.model.depth());
    for (l, block) in clf.model.layers.iter().enumerate() {
        let n = tape.row_rms(cur, RMS_NORM_EPS)?;
        let hs = operators_for(tape, l, block, n)?;
        let stream = trace_input_stream(tape, block, n)?;
        if hs.len() != tape.value(stream)?.cols() {
            return Err(Error::Shape(format!(
                "layer {l}: {} operators for {} stream channels",
                hs.len(),
                tape.value(stream)?.cols()
            )));
        }
        let mut cols = Vec::with_capacity(hs.len());
        for (d, h) in hs.iter().enumerate() {
            let s = tape.select_cols(stream, &[d])?;
            cols.push(tape.matmul(*h, s)?);
        }
        let mut mixed = tape.concat_cols(&cols)?;
        if let Some(w) = block.output_projection() {
            let w = tape.leaf(w.clone());
            mixed = tape.matmul(mixed, w)?;
        }
        cur = tape.add(cur, mixed)?;
        operators.push(hs);
    }
    let row = tape.select_rows(cur, &[pos])?;
    let w = tape.leaf(clf.readout.weights.select_cols(&[class]));
    let logit = tape.matmul(row, w)?;
    let bias = tape.leaf(Matrix::filled(1, 1, clf.readout.bias[class]));
    let score = tape.add(logit, bias)?;
    Ok(ScoreGraph { score, operators })
}

/// Operators and `∂score/∂H` for every layer and channel.
pub fn attribution_gradients(
    clf: &Classifier,
    x: &Matrix,
    class: usize,
    mode: GradMode,
) -> Result<(ImplicitAttnStack, Vec<Vec<Matrix>>)> {
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone());
    let graph = record_score(&mut tape, clf, xn, class, mode)?;
    let grads = tape.backward(graph.score)?;
    let mut layers = Vec::with_capacity(graph.operators.len());
    let mut all = Vec::with_capacity(graph.operators.len());
    let trace = clf.model.trace(x)?;
    for (block, (ops, n)) in clf
        .model
        .layers
        .iter()
        .zip(graph.operators.iter().zip(&trace.normed))
    {
        layers.push(build_layer(block, n)?);
        all.push(
            ops.iter()
                .map(|id| grads.get(&tape, *id))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((
        ImplicitAttnStack {
            arch: clf.model.cfg.arch,
            layers,
        },
        all,
    ))
}

/// Combines `E_ℓ = mean_d (grad ⊙ H)⁺` over layers into a relevance map.
///
/// `stack` supplies the `H` factors; it may differ from the operators the
/// gradients were taken at (for ablated variants).
pub fn attribution_from_gradients(
    stack: &ImplicitAttnStack,
    grads: &[Vec<Matrix>],
    target_pos: usize,
    target_class: Option<usize>,
    combine: Combine,
) -> Result<RelevanceMap> {
    check_target(stack.seq_len(), target_pos)?;
    if grads.len() != stack.depth() {
        return Err(Error::Shape(format!(
            "{} gradient layers for {} operator layers",
            grads.len(),
            stack.depth()
        )));
    }
    let n = stack.seq_len();
    let mut maps = Vec::with_capacity(stack.depth());
    for (layer, g) in stack.layers.iter().zip(grads) {
        if g.len() != layer.channels() {
            return Err(Error::Shape(
                "gradient channels do not match operators".into(),
            ));
        }
        let mut e = Matrix::zeros(n, n);
        for (h, gd) in layer.h.iter().zip(g) {
            e.add_assign(&h.hadamard(gd)?.map(|v| v.max(0.0)))?;
        }
        maps.push(e.scale(1.0 / layer.channels().max(1) as f64));
    }
    let combined = match combine {
        Combine::Rollout => {
            let mats = maps
                .iter()
                .map(|e| row_normalize(e).add(&Matrix::identity(n)))
                .collect::<Result<Vec<_>>>()?;
            layer_product(&mats)?
        }
        Combine::LastLayer => maps
            .pop()
            .ok_or_else(|| Error::InvalidArgument("stack has no layers".into()))?,
    };
    RelevanceMap::new(
        combined.row(target_pos).to_vec(),
        target_pos,
        target_class,
        Method::Attribution,
    )
}

/// Gradient × attention relevance for `class` at the readout position.
pub fn attribution_relevance(clf: &Classifier, x: &Matrix, class: usize) -> Result<RelevanceMap> {
    attribution_relevance_with(clf, x, class, AttributionOptions::default())
}

pub fn attribution_relevance_with(
    clf: &Classifier,
    x: &Matrix,
    class: usize,
    opts: AttributionOptions,
) -> Result<RelevanceMap> {
    let (stack, grads) = attribution_gradients(clf, x, class, opts.mode)?;
    let pos = clf.readout.position_in(x.rows())?;
    attribution_from_gradients(&stack, &grads, pos, Some(class), opts.combine)
}

/// Relevance of `method` for `class` at the readout position.
pub fn explain(clf: &Classifier, x: &Matrix, method: Method, class: usize) -> Result<RelevanceMap> {
    clf.readout.check_class(class)?;
    let pos = clf.readout.position_in(x.rows())?;
    let with_class = |mut m: RelevanceMap| {
        m.target_class = Some(class);
        m
    };
    match method {
        Method::Raw => Ok(with_class(raw_attention_relevance(
            &crate::attention::build_stack(&clf.model, x)?,
            pos,
        )?)),
        Method::Rollout => Ok(with_class(attention_rollout(
            &crate::attention::build_stack(&clf.model, x)?,
            pos,
        )?)),
        Method::Attribution => attribution_relevance(clf, x, class),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::LayerFactors;
    use crate::layers::{Arch, ModelConfig};
    use crate::numerics::Rng;

    fn stack_of(layers: Vec<Vec<Matrix>>) -> ImplicitAttnStack {
        ImplicitAttnStack {
            arch: Arch::Mamba,
            layers: layers
                .into_iter()
                .map(|hs| {
                    let n = hs.len();
                    LayerAttn::from_factors(LayerFactors::core_only(hs, (0..n).collect())).unwrap()
                })
                .collect(),
        }
    }

    #[test]
    fn minmax_examples() {
        let v = minmax_normalize(&[-1.0, 0.0, 3.0]);
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-16 && v[1] == 0.0 && v[2] == 1.0);
        assert_eq!(minmax_normalize(&[2.0, 2.0, 2.0]), vec![0.0; 3]);
        assert_eq!(minmax_normalize(&[0.0, 5.0]), vec![0.0, 1.0]);
    }

    #[test]
    fn aggregation_takes_mean_of_absolutes() {
        let h = Matrix::from_rows(&[vec![1.0, 0.0], vec![-2.0, 0.5]]).unwrap();
        let s = stack_of(vec![vec![h.clone(), h.scale(-1.0)]]);
        assert_eq!(aggregate_layer(&s.layers[0]).unwrap(), h.map(f64::abs));
    }

    #[test]
    fn raw_identity_is_one_hot() {
        let s = stack_of(vec![vec![Matrix::identity(4)]]);
        let r = raw_attention_relevance(&s, 2).unwrap();
        assert_eq!(r.normalized, vec![0.0, 0.0, 1.0, 0.0]);
        assert!(raw_attention_relevance(&s, 4).is_err());
    }

    #[test]
    fn rollout_hand_example() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let r = attention_rollout(&stack_of(vec![vec![a]]), 1).unwrap();
        assert_eq!(r.scores, vec![0.25, 0.75]);
    }

    #[test]
    fn rollout_of_identities_and_zeros_is_identity() {
        for depth in 1..4 {
            let s = stack_of(vec![vec![Matrix::identity(3)]; depth]);
            assert_eq!(
                attention_rollout(&s, 1).unwrap().scores,
                vec![0.0, 1.0, 0.0]
            );
        }
        let z = stack_of(vec![vec![Matrix::zeros(3, 3)]]);
        assert_eq!(
            attention_rollout(&z, 2).unwrap().scores,
            vec![0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn exclude_drops_and_renormalizes() {
        let m = RelevanceMap::new(vec![0.0, 2.0, 1.0, 9.0], 3, None, Method::Raw).unwrap();
        let e = m.exclude(3).unwrap();
        assert_eq!(e.scores, vec![0.0, 2.0, 1.0]);
        assert_eq!(e.normalized, vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn linear_layer_attribution_gradient_is_input_row() {
        // One layer y = H s with identity readout of channel c at position t.
        let cfg = ModelConfig::for_arch(Arch::Hgrn, 2, 4, 1);
        let model = Model::new(cfg).unwrap();
        let clf = Classifier {
            readout: Readout::identity(2, Some(2)),
            model,
        };
        let mut rng = Rng::new(3);
        let x = Matrix::from_fn(4, 2, |_, _| rng.normal(1.0));
        let (_, grads) = attribution_gradients(&clf, &x, 1, GradMode::Frozen).unwrap();
        let s = crate::numerics::rms_norm_rows(&x, RMS_NORM_EPS);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == 2 { s[(j, 1)] } else { 0.0 };
                assert_eq!(grads[0][1][(i, j)], expect);
                assert_eq!(grads[0][0][(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn all_negative_products_fall_back_to_identity() {
        let h = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let g = vec![vec![h.scale(-1.0)]];
        let m = attribution_from_gradients(&stack_of(vec![vec![h]]), &g, 1, None, Combine::Rollout)
            .unwrap();
        assert_eq!(m.scores, vec![0.0, 1.0]);
        assert_eq!(m.exclude(1).unwrap().normalized, vec![0.0]);
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let model = Model::new(ModelConfig::for_arch(Arch::Mamba, 4, 3, 1)).unwrap();
        let clf = Classifier {
            readout: Readout::identity(4, None),
            model,
        };
        let x = Matrix::filled(3, 4, 0.5);
        assert!(attribution_relevance(&clf, &x, 4).is_err());
        assert!(explain(&clf, &x, Method::Raw, 9).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("grad".parse::<Method>().is_err());
    }

    #[test]
    fn frozen_gradients_match_finite_differences() {
        for arch in Arch::ALL {
            let cfg = ModelConfig::for_arch(arch, 4, 6, 21).with_depth(2);
            let clf = Classifier {
                readout: Readout::identity(4, None),
                model: Model::new(cfg).unwrap(),
            };
            let mut rng = Rng::new(8);
            let x = Matrix::from_fn(6, 4, |_, _| rng.normal(1.0));
            let stack = crate::attention::build_stack(&clf.model, &x).unwrap();
            let mut point = vec![x];
            let shape: Vec<usize> = stack.layers.iter().map(|l| l.channels()).collect();
            point.extend(stack.layers.iter().flat_map(|l| l.h.clone()));
            let graph = |tape: &mut Tape, ids: &[NodeId]| {
                let mut ops = Vec::new();
                let mut k = 1;
                for c in &shape {
                    ops.push(ids[k..k + c].to_vec());
                    k += c;
                }
                Ok(record_score_with_operators(tape, &clf, ids[0], 2, &ops)?.score)
            };
            let report = crate::autodiff::finite_diff_check(graph, &point, 1e-2).unwrap();
            assert!(report.within(1e-4), "{arch}: {report:?}");

            let full = |tape: &mut Tape, ids: &[NodeId]| {
                Ok(record_score(tape, &clf, ids[0], 2, GradMode::Full)?.score)
            };
            let report = crate::autodiff::finite_diff_check(full, &point[..1], 1e-2).unwrap();
            assert!(report.within(1e-4), "{arch} full: {report:?}");
        }
    }
}
