// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode differentiation over matrix-valued primitives.
//!
//! A [`Tape`] records every operation eagerly: values are computed on
//! insertion and one [`Tape::backward`] sweep walks the records in reverse.
//! Vector operands (`diag` factors, biases, decay sequences) are matrices
//! with a single row or a single column, read in storage order.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::attention::{causal_softmax, decay_matrix};
use crate::error::{Error, Result};
use crate::numerics::{
    gelu, gelu_grad, log_sigmoid, sigmoid, sigmoid_grad, silu, silu_grad, softplus,
    sqrt_one_minus_exp2, sqrt_one_minus_exp2_grad, Matrix,
};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

/// Elementwise functions with a known derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Silu,
    Gelu,
    Softplus,
    Exp,
    LogSigmoid,
    Recip,
    /// `sqrt(1 - exp(2z))`, the RG-LRU injection scale as a function of `log a`.
    Sqrt1mExp2,
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Sigmoid => sigmoid(x),
            Self::Silu => silu(x),
            Self::Gelu => gelu(x),
            Self::Softplus => softplus(x),
            Self::Exp => x.exp(),
            Self::LogSigmoid => log_sigmoid(x),
            Self::Recip => 1.0 / x,
            Self::Sqrt1mExp2 => sqrt_one_minus_exp2(x),
        }
    }

    /// Derivative at `x`, given the output `y = apply(x)`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Sigmoid => sigmoid_grad(x),
            Self::Silu => silu_grad(x),
            Self::Gelu => gelu_grad(x),
            Self::Softplus => sigmoid(x),
            Self::Exp => y,
            Self::LogSigmoid => sigmoid(-x),
            Self::Recip => -y * y,
            Self::Sqrt1mExp2 => sqrt_one_minus_exp2_grad(x),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Map(usize, Unary),
    RowScale(usize, usize),
    ColScale(usize, usize),
    Transpose(usize),
    SelectCols(usize, Vec<usize>),
    SelectRows(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    Sum(usize),
    DecayMatrix(usize, usize),
    CausalSoftmax(usize),
    RowRms(usize, f64),
    RowStdEps(usize, f64),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Ordered record of primitive operations and their values.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn vector_len(m: &Matrix) -> Option<usize> {
    (m.rows() == 1 || m.cols() == 1).then(|| m.data().len())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, id: NodeId) -> Result<usize> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(Error::Autodiff("node is not on this tape".into()));
        }
        Ok(id.index)
    }

    pub fn value(&self, id: NodeId) -> Result<&Matrix> {
        Ok(&self.nodes[self.index(id)?].value)
    }

    fn val(&self, i: usize) -> &Matrix {
        &self.nodes[i].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn vector(&self, id: NodeId, len: usize, what: &str) -> Result<usize> {
        let i = self.index(id)?;
        match vector_len(self.val(i)) {
            Some(n) if n == len => Ok(i),
            _ => Err(Error::Shape(format!(
                "{what}: expected a vector of length {len}, got {:?}",
                self.val(i).shape()
            ))),
        }
    }

    /// Records an input (or constant) value.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        let v = self.val(a).matmul(self.val(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        let v = self.val(a).add(self.val(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        let v = self.val(a).sub(self.val(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        let v = self.val(a).hadamard(self.val(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let a = self.index(a)?;
        let v = self.val(a).scale(factor);
        Ok(self.push(Op::Scale(a, factor), v))
    }

    /// Adds the vector `bias` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let a = self.index(a)?;
        let b = self.vector(bias, self.val(a).cols(), "add_row")?;
        let v = self.val(a).add_row(self.val(b).data())?;
        Ok(self.push(Op::AddRow(a, b), v))
    }

    pub fn map(&mut self, a: NodeId, f: Unary) -> Result<NodeId> {
        let a = self.index(a)?;
        let v = self.val(a).map(|x| f.apply(x));
        Ok(self.push(Op::Map(a, f), v))
    }

    /// `diag(v) · a`.
    pub fn row_scale(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let a = self.index(a)?;
        let s = self.vector(v, self.val(a).rows(), "row_scale")?;
        let out = self.val(a).row_scale(self.val(s).data())?;
        Ok(self.push(Op::RowScale(a, s), out))
    }

    /// `a · diag(v)`.
    pub fn col_scale(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let a = self.index(a)?;
        let s = self.vector(v, self.val(a).cols(), "col_scale")?;
        let out = self.val(a).col_scale(self.val(s).data())?;
        Ok(self.push(Op::ColScale(a, s), out))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let a = self.index(a)?;
        let v = self.val(a).transpose();
        Ok(self.push(Op::Transpose(a), v))
    }

    pub fn select_cols(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        let a = self.index(a)?;
        let width = self.val(a).cols();
        if let Some(bad) = cols.iter().find(|c| **c >= width) {
            return Err(Error::OutOfRange {
                what: "column",
                index: *bad,
                limit: width,
            });
        }
        let v = self.val(a).select_cols(cols);
        Ok(self.push(Op::SelectCols(a, cols.to_vec()), v))
    }

    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let a = self.index(a)?;
        let height = self.val(a).rows();
        if let Some(bad) = rows.iter().find(|r| **r >= height) {
            return Err(Error::OutOfRange {
                what: "row",
                index: *bad,
                limit: height,
            });
        }
        let v = self.val(a).select_rows(rows);
        Ok(self.push(Op::SelectRows(a, rows.to_vec()), v))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let idx = parts
            .iter()
            .map(|p| self.index(*p))
            .collect::<Result<Vec<_>>>()?;
        let mats: Vec<Matrix> = idx.iter().map(|i| self.val(*i).clone()).collect();
        let v = Matrix::concat_cols(&mats)?;
        Ok(self.push(Op::ConcatCols(idx), v))
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let a = self.index(a)?;
        let v = Matrix::filled(1, 1, self.val(a).sum());
        Ok(self.push(Op::Sum(a), v))
    }

    /// Lower-triangular `out[i][j] = inject_j · exp(Σ_{k=j+1}^{i} log_decay_k)`.
    pub fn decay_matrix(&mut self, log_decay: NodeId, inject: NodeId) -> Result<NodeId> {
        let l = self.index(log_decay)?;
        let len = vector_len(self.val(l))
            .ok_or_else(|| Error::Shape("decay_matrix: log decay must be a vector".into()))?;
        let j = self.vector(inject, len, "decay_matrix")?;
        let v = decay_matrix(self.val(l).data(), self.val(j).data())?;
        Ok(self.push(Op::DecayMatrix(l, j), v))
    }

    /// Row softmax over `j <= i` of a square matrix, zero above the diagonal.
    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let a = self.index(a)?;
        let (r, c) = self.val(a).shape();
        if r != c {
            return Err(Error::Shape(format!("causal_softmax of {r}×{c}")));
        }
        let v = causal_softmax(self.val(a));
        Ok(self.push(Op::CausalSoftmax(a), v))
    }

    /// Row-wise `a_ij / sqrt(mean_j a_ij² + eps)`.
    pub fn row_rms(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let a = self.index(a)?;
        let v = crate::numerics::rms_norm_rows(self.val(a), eps);
        Ok(self.push(Op::RowRms(a, eps), v))
    }

    /// Row-wise `eps + sqrt(var_j a_ij)` as an `rows × 1` column.
    pub fn row_std_eps(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let a = self.index(a)?;
        let m = self.val(a);
        let v = Matrix::from_fn(m.rows(), 1, |i, _| {
            crate::numerics::group_sigma(m.row(i), eps)
        });
        Ok(self.push(Op::RowStdEps(a, eps), v))
    }

    /// Adjoints of every node reachable from the scalar `score`.
    pub fn backward(&self, score: NodeId) -> Result<Gradients> {
        let s = self.index(score)?;
        if self.val(s).shape() != (1, 1) {
            return Err(Error::Autodiff(format!(
                "score must be 1×1, got {:?}",
                self.val(s).shape()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; s + 1];
        adj[s] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=s).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            adjoints: adj,
        })
    }

    /// Gradients of `score` with respect to each node in `wrt`; nodes that do
    /// not influence the score get zeros.
    pub fn grad_scalar(&self, score: NodeId, wrt: &[NodeId]) -> Result<Vec<Matrix>> {
        let grads = self.backward(score)?;
        wrt.iter().map(|id| grads.get(self, *id)).collect()
    }

    fn propagate(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        let out = self.val(i);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul(&self.val(*b).transpose())?;
                let gb = self.val(*a).transpose().matmul(g)?;
                accumulate(adj, *a, ga)?;
                accumulate(adj, *b, gb)?;
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone())?;
                accumulate(adj, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.clone())?;
                accumulate(adj, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let ga = g.hadamard(self.val(*b))?;
                let gb = g.hadamard(self.val(*a))?;
                accumulate(adj, *a, ga)?;
                accumulate(adj, *b, gb)?;
            }
            Op::Scale(a, f) => accumulate(adj, *a, g.scale(*f))?,
            Op::AddRow(a, b) => {
                accumulate(adj, *a, g.clone())?;
                let sums: Vec<f64> = (0..g.cols()).map(|c| g.col(c).iter().sum()).collect();
                accumulate(adj, *b, reshape_like(sums, self.val(*b)))?;
            }
            Op::Map(a, f) => {
                let x = self.val(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((x, y), g)| g * f.derivative(*x, *y))
                    .collect();
                accumulate(adj, *a, Matrix::new(x.rows(), x.cols(), data)?)?;
            }
            Op::RowScale(a, v) => {
                let x = self.val(*a);
                let s = self.val(*v).data();
                accumulate(adj, *a, g.row_scale(s)?)?;
                let gv = (0..x.rows())
                    .map(|r| x.row(r).iter().zip(g.row(r)).map(|(p, q)| p * q).sum())
                    .collect();
                accumulate(adj, *v, reshape_like(gv, self.val(*v)))?;
            }
            Op::ColScale(a, v) => {
                let x = self.val(*a);
                let s = self.val(*v).data();
                accumulate(adj, *a, g.col_scale(s)?)?;
                let mut gv = vec![0.0; x.cols()];
                for r in 0..x.rows() {
                    for (c, acc) in gv.iter_mut().enumerate() {
                        *acc += x[(r, c)] * g[(r, c)];
                    }
                }
                accumulate(adj, *v, reshape_like(gv, self.val(*v)))?;
            }
            Op::Transpose(a) => accumulate(adj, *a, g.transpose())?,
            Op::SelectCols(a, cols) => {
                let x = self.val(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for (k, c) in cols.iter().enumerate() {
                    for r in 0..x.rows() {
                        ga[(r, *c)] += g[(r, k)];
                    }
                }
                accumulate(adj, *a, ga)?;
            }
            Op::SelectRows(a, rows) => {
                let x = self.val(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for (k, r) in rows.iter().enumerate() {
                    for c in 0..x.cols() {
                        ga[(*r, c)] += g[(k, c)];
                    }
                }
                accumulate(adj, *a, ga)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.val(*p).cols();
                    let cols: Vec<usize> = (start..start + w).collect();
                    accumulate(adj, *p, g.select_cols(&cols))?;
                    start += w;
                }
            }
            Op::Sum(a) => {
                let x = self.val(*a);
                accumulate(adj, *a, Matrix::filled(x.rows(), x.cols(), g[(0, 0)]))?;
            }
            Op::DecayMatrix(l, j) => {
                let (gl, gj) = decay_matrix_vjp(self.val(*l).data(), out, g)?;
                accumulate(adj, *l, reshape_like(gl, self.val(*l)))?;
                accumulate(adj, *j, reshape_like(gj, self.val(*j)))?;
            }
            Op::CausalSoftmax(a) => {
                let n = out.rows();
                let mut ga = Matrix::zeros(n, n);
                for r in 0..n {
                    let dot: f64 = (0..=r).map(|c| g[(r, c)] * out[(r, c)]).sum();
                    for c in 0..=r {
                        ga[(r, c)] = out[(r, c)] * (g[(r, c)] - dot);
                    }
                }
                accumulate(adj, *a, ga)?;
            }
            Op::RowRms(a, eps) => {
                let x = self.val(*a);
                let width = x.cols().max(1) as f64;
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let ms = x.row(r).iter().map(|v| v * v).sum::<f64>() / width;
                    let rms = (ms + eps).sqrt();
                    let dot = out
                        .row(r)
                        .iter()
                        .zip(g.row(r))
                        .map(|(y, q)| y * q)
                        .sum::<f64>()
                        / width;
                    for c in 0..x.cols() {
                        ga[(r, c)] = (g[(r, c)] - out[(r, c)] * dot) / rms;
                    }
                }
                accumulate(adj, *a, ga)?;
            }
            Op::RowStdEps(a, eps) => {
                let x = self.val(*a);
                let width = x.cols().max(1) as f64;
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let std = out[(r, 0)] - eps;
                    if std <= 0.0 {
                        continue;
                    }
                    let mu = x.row(r).iter().sum::<f64>() / width;
                    for c in 0..x.cols() {
                        ga[(r, c)] = g[(r, 0)] * (x[(r, c)] - mu) / (width * std);
                    }
                }
                accumulate(adj, *a, ga)?;
            }
        }
        Ok(())
    }
}

fn reshape_like(data: Vec<f64>, like: &Matrix) -> Matrix {
    Matrix::new(like.rows(), like.cols(), data).expect("adjoint shape matches operand")
}

fn accumulate(adj: &mut [Option<Matrix>], i: usize, g: Matrix) -> Result<()> {
    match &mut adj[i] {
        Some(acc) => acc.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Vector-Jacobian product of [`Tape::decay_matrix`].
///
/// `∂/∂inject_j = Σ_{i≥j} g_ij E_ij` with `E` the pure decay, and
/// `∂/∂log_decay_k = Σ_{i≥k} Σ_{j<k} g_ij out_ij`, accumulated through row
/// prefixes in `O(L²)`.
fn decay_matrix_vjp(log_decay: &[f64], out: &Matrix, g: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let len = log_decay.len();
    let pure = decay_matrix(log_decay, &vec![1.0; len])?;
    let mut g_inject = vec![0.0; len];
    let mut g_log = vec![0.0; len];
    for i in 0..len {
        let mut prefix = 0.0;
        for j in 0..=i {
            g_inject[j] += g[(i, j)] * pure[(i, j)];
            // prefix = Σ_{j' < j} g_ij' out_ij' contributes to k = j.
            if j > 0 {
                g_log[j] += prefix;
            }
            prefix += g[(i, j)] * out[(i, j)];
        }
    }
    Ok((g_log, g_inject))
}

/// Adjoints from one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `id`; zeros if the node does not influence the score.
    pub fn get(&self, tape: &Tape, id: NodeId) -> Result<Matrix> {
        if id.tape != self.tape {
            return Err(Error::Autodiff("node is not on this tape".into()));
        }
        let v = tape.value(id)?;
        Ok(self
            .adjoints
            .get(id.index)
            .and_then(Option::as_ref)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(v.rows(), v.cols())))
    }
}

/// Coordinates whose reverse-mode gradient is smaller than this are compared
/// absolutely instead of relatively.
pub const FD_ABS_FLOOR: f64 = 1e-8;

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// Largest `|g - fd| / |g|` over coordinates with `|g| >= FD_ABS_FLOOR`.
    pub max_rel_deviation: f64,
    /// Largest `|g - fd|` over coordinates with `|g| < FD_ABS_FLOOR`.
    pub max_abs_deviation: f64,
    pub coordinates: usize,
}

impl FdReport {
    pub fn within(&self, rel_tol: f64) -> bool {
        self.max_rel_deviation <= rel_tol && self.max_abs_deviation <= FD_ABS_FLOOR
    }
}

/// Starting steps of the extrapolation runs, relative to the requested step.
const FD_START_SCALES: [f64; 4] = [1.0, 0.1, 0.01, 0.001];

/// Rounding noise of a score evaluation, in units of `eps · max(|score|, 1)`.
const FD_NOISE_ULPS: f64 = 16.0;

/// Polynomial extrapolation of central differences `central(h)` to `h → 0`
/// over a geometric sequence of steps starting at `step`. Returns the
/// estimate and its error estimate, which includes the rounding noise
/// `noise / h` of the smallest step the estimate used.
fn ridders(
    central: &mut impl FnMut(f64) -> Result<f64>,
    step: f64,
    noise: f64,
) -> Result<(f64, f64)> {
    const SHRINK: f64 = 1.4;
    const SHRINK2: f64 = SHRINK * SHRINK;
    const TABLE: usize = 10;
    const SAFE: f64 = 2.0;
    let mut h = step;
    let mut prev = vec![central(h)?];
    let (mut best, mut err, mut best_h) = (prev[0], f64::INFINITY, h);
    for _ in 1..TABLE {
        h /= SHRINK;
        let mut row = vec![central(h)?];
        let mut fac = SHRINK2;
        for j in 1..=prev.len() {
            let next = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= SHRINK2;
            let e = (next - row[j - 1]).abs().max((next - prev[j - 1]).abs());
            if e <= err {
                err = e;
                best = next;
                best_h = h;
            }
            row.push(next);
        }
        let diverging = (row[row.len() - 1] - prev[prev.len() - 1]).abs() >= SAFE * err;
        prev = row;
        if diverging {
            break;
        }
    }
    Ok((best, err + noise / best_h))
}

/// Compares reverse-mode gradients of `graph` at `point` with central
/// differences on every coordinate of every input.
///
/// Each estimate extrapolates central differences downwards from `step`,
/// `step / 10`, `step / 100` and `step / 1000` (Ridders' method) and keeps
/// the run with the smallest error estimate once rounding noise in the score
/// is charged against small steps. Strongly curved coordinates want small steps and
/// tiny gradients want large ones; no single step serves both.
///
/// `graph` records a scalar score on a fresh tape from the given input nodes.
pub fn finite_diff_check<F>(graph: F, point: &[Matrix], step: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {step}"
        )));
    }
    let eval = |inputs: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let s = graph(&mut tape, &ids)?;
        let v = tape.value(s)?;
        if v.shape() != (1, 1) {
            return Err(Error::Autodiff("score must be 1×1".into()));
        }
        Ok(v[(0, 0)])
    };
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = point.iter().map(|m| tape.leaf(m.clone())).collect();
    let score = graph(&mut tape, &ids)?;
    let grads = tape.grad_scalar(score, &ids)?;
    let noise = FD_NOISE_ULPS * f64::EPSILON * tape.value(score)?[(0, 0)].abs().max(1.0);

    let mut report = FdReport {
        max_rel_deviation: 0.0,
        max_abs_deviation: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Matrix> = point.to_vec();
    for (m, grad) in grads.iter().enumerate() {
        for k in 0..grad.data().len() {
            let orig = work[m].data()[k];
            let mut central = |h: f64| {
                work[m].data_mut()[k] = orig + h;
                let up = eval(&work)?;
                work[m].data_mut()[k] = orig - h;
                let down = eval(&work)?;
                work[m].data_mut()[k] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let mut fd = (0.0, f64::INFINITY);
            for start in FD_START_SCALES.map(|s| s * step) {
                let candidate = ridders(&mut central, start, noise)?;
                if candidate.1 < fd.1 {
                    fd = candidate;
                }
            }
            let fd = fd.0;
            let g = grad.data()[k];
            let diff = (g - fd).abs();
            if g.abs() < FD_ABS_FLOOR {
                report.max_abs_deviation = report.max_abs_deviation.max(diff);
            } else {
                report.max_rel_deviation = report.max_rel_deviation.max(diff / g.abs());
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.normal(1.0))
    }

    #[test]
    fn linear_map_adjoint_is_column_sums() {
        let mut rng = Rng::new(1);
        let a = random(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let an = tape.leaf(a.clone());
        let x = tape.leaf(random(&mut rng, 4, 1));
        let y = tape.matmul(an, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.grad_scalar(s, &[x]).unwrap().remove(0);
        for c in 0..4 {
            let expect: f64 = a.col(c).iter().sum();
            assert!((g[(c, 0)] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut tape = Tape::new();
        let t = tape.leaf(Matrix::zeros(1, 1));
        let s = tape.map(t, Unary::Sigmoid).unwrap();
        assert_eq!(tape.grad_scalar(s, &[t]).unwrap()[0][(0, 0)], 0.25);
    }

    #[test]
    fn non_scalar_score_is_rejected() {
        let mut tape = Tape::new();
        let t = tape.leaf(Matrix::zeros(2, 1));
        assert!(matches!(tape.backward(t), Err(Error::Autodiff(_))));
    }

    #[test]
    fn foreign_node_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Matrix::zeros(1, 1));
        let y = b.leaf(Matrix::zeros(1, 1));
        assert!(b.grad_scalar(y, &[x]).is_err());
        assert!(b.map(x, Unary::Exp).is_err());
    }

    #[test]
    fn unreachable_nodes_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::filled(2, 2, 1.0));
        let z = tape.leaf(Matrix::filled(1, 3, 1.0));
        let s = tape.sum(x).unwrap();
        let g = tape.grad_scalar(s, &[z]).unwrap();
        assert_eq!(g[0], Matrix::zeros(1, 3));
    }

    #[test]
    fn linear_function_fd_is_exact() {
        let mut rng = Rng::new(2);
        let a = random(&mut rng, 3, 3);
        let report = finite_diff_check(
            |t, ids| {
                let an = t.leaf(a.clone());
                let y = t.matmul(an, ids[0])?;
                t.sum(y)
            },
            &[random(&mut rng, 3, 2)],
            1e-2,
        )
        .unwrap();
        assert!(report.max_rel_deviation <= 1e-12, "{report:?}");
        assert_eq!(report.coordinates, 6);
    }

    #[test]
    fn softplus_derivative_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(1, 1));
        let y = tape.map(x, Unary::Softplus).unwrap();
        let g = tape.grad_scalar(y, &[x]).unwrap()[0][(0, 0)];
        let h = 1e-5;
        let fd = (softplus(h) - softplus(-h)) / (2.0 * h);
        assert!((g - 0.5).abs() < 1e-15);
        assert!((fd - 0.5).abs() < 1e-8);
    }

    #[test]
    fn nonpositive_step_is_rejected() {
        let r = finite_diff_check(|t, ids| t.sum(ids[0]), &[Matrix::zeros(1, 1)], 0.0);
        assert!(r.is_err());
    }

    fn check(graph: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>, point: &[Matrix]) {
        let report = finite_diff_check(graph, point, 1e-2).unwrap();
        assert!(report.within(1e-4), "{report:?}");
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let x = random(&mut rng, 5, 3);
        let w = random(&mut rng, 3, 5);
        let v = random(&mut rng, 5, 1);
        let b = random(&mut rng, 1, 5);
        let unaries = [
            Unary::Sigmoid,
            Unary::Silu,
            Unary::Gelu,
            Unary::Softplus,
            Unary::Exp,
            Unary::LogSigmoid,
        ];
        for f in unaries {
            check(
                |t, ids| {
                    let y = t.matmul(ids[0], ids[1])?;
                    let y = t.add_row(y, ids[3])?;
                    let y = t.map(y, f)?;
                    let y = t.row_scale(y, ids[2])?;
                    let y = t.col_scale(y, ids[2])?;
                    let y = t.mul(y, y)?;
                    t.sum(y)
                },
                &[x.clone(), w.clone(), v.clone(), b.clone()],
            );
        }
        let positive = x.map(|v| 1.0 + v.abs());
        check(
            |t, ids| {
                let y = t.map(ids[0], Unary::Recip)?;
                let y = t.transpose(y)?;
                let y = t.select_rows(y, &[2, 0, 2])?;
                let y = t.select_cols(y, &[4, 1])?;
                let z = t.scale(y, -1.5)?;
                let d = t.sub(y, z)?;
                let y = t.concat_cols(&[y, d, y])?;
                let y = t.mul(y, y)?;
                t.sum(y)
            },
            &[positive],
        );
        let negative = v.map(|v| -0.1 - v.abs());
        check(
            |t, ids| {
                let y = t.map(ids[0], Unary::Sqrt1mExp2)?;
                let y = t.mul(y, y)?;
                t.sum(y)
            },
            &[negative],
        );
    }

    #[test]
    fn structured_primitives_match_finite_differences() {
        let mut rng = Rng::new(4);
        let logd = random(&mut rng, 6, 1).map(|v| -v.abs());
        let inject = random(&mut rng, 6, 1);
        let weights = random(&mut rng, 6, 6);
        check(
            |t, ids| {
                let m = t.decay_matrix(ids[0], ids[1])?;
                let w = t.leaf(weights.clone());
                let y = t.mul(m, w)?;
                t.sum(y)
            },
            &[logd, inject],
        );
        let scores = random(&mut rng, 5, 5);
        check(
            |t, ids| {
                let p = t.causal_softmax(ids[0])?;
                let w = t.leaf(
                    weights
                        .select_rows(&[0, 1, 2, 3, 4])
                        .select_cols(&[0, 1, 2, 3, 4]),
                );
                let y = t.mul(p, w)?;
                t.sum(y)
            },
            &[scores],
        );
        let x = random(&mut rng, 4, 5);
        check(
            |t, ids| {
                let n = t.row_rms(ids[0], 1e-6)?;
                let s = t.row_std_eps(ids[0], 1e-5)?;
                let s = t.map(s, Unary::Recip)?;
                let y = t.row_scale(n, s)?;
                let w = t.leaf(
                    weights
                        .select_rows(&[0, 1, 2, 3])
                        .select_cols(&[0, 1, 2, 3, 4]),
                );
                let y = t.mul(y, w)?;
                t.sum(y)
            },
            &[x],
        );
    }

    #[test]
    fn random_two_layer_graph_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let point = [
            random(&mut rng, 6, 4),
            random(&mut rng, 4, 4).scale(0.5),
            random(&mut rng, 4, 3).scale(0.5),
        ];
        check(
            |t, ids| {
                let h = t.matmul(ids[0], ids[1])?;
                let h = t.map(h, Unary::Silu)?;
                let h = t.matmul(h, ids[2])?;
                let h = t.map(h, Unary::Gelu)?;
                t.sum(h)
            },
            &point,
        );
    }

    #[test]
    fn backward_is_bit_reproducible() {
        let mut rng = Rng::new(6);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, 4, 4));
        let p = tape.causal_softmax(x).unwrap();
        let q = tape.map(p, Unary::Exp).unwrap();
        let s = tape.sum(q).unwrap();
        let a = tape.grad_scalar(s, &[x]).unwrap();
        let b = tape.grad_scalar(s, &[x]).unwrap();
        assert_eq!(a, b);
    }
}
