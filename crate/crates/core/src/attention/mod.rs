// SPDX-License-Identifier: MIT OR Apache-2.0

//! Materialized implicit attention.
//!
//! For every block the token-mixing part is rewritten as a per-channel
//! product of diagonal and lower-triangular factors,
//!
//! ```text
//! H = diag(norm ⊙ gate) · core · diag(act) · conv
//! ```
//!
//! so that `H · stream` equals the block's mixed output exactly. Factors that
//! an architecture lacks are identities.

mod build;
mod kernels;
pub mod traced;

pub use build::*;
pub use kernels::*;

use crate::error::{Error, Result};
use crate::layers::Arch;
use crate::numerics::Matrix;

/// Factor decomposition of one layer's implicit attention.
///
/// Diagonals are stored per channel as length-`L` vectors. Core matrices may
/// be shared by several channels (one per head for Mamba-2, RetNet and
/// softmax attention); `core_of[d]` indexes the core used by channel `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactors {
    pub norm: Vec<Vec<f64>>,
    pub gate: Vec<Vec<f64>>,
    pub cores: Vec<Matrix>,
    pub core_of: Vec<usize>,
    pub act: Vec<Vec<f64>>,
    /// Per-channel conv matrices; `None` is the identity.
    pub conv: Option<Vec<Matrix>>,
}

impl LayerFactors {
    /// Factors with every diagonal set to one and no conv, around the given cores.
    pub fn core_only(cores: Vec<Matrix>, core_of: Vec<usize>) -> Self {
        let len = cores.first().map_or(0, Matrix::rows);
        let ones = vec![vec![1.0; len]; core_of.len()];
        Self {
            norm: ones.clone(),
            gate: ones.clone(),
            act: ones,
            cores,
            core_of,
            conv: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.core_of.len()
    }

    pub fn seq_len(&self) -> usize {
        self.cores.first().map_or(0, Matrix::rows)
    }

    pub fn core(&self, channel: usize) -> &Matrix {
        &self.cores[self.core_of[channel]]
    }

    /// `diag(norm ⊙ gate) · core · diag(act) · conv` for one channel.
    pub fn compose_channel(&self, d: usize) -> Result<Matrix> {
        let left: Vec<f64> = self.norm[d]
            .iter()
            .zip(&self.gate[d])
            .map(|(n, g)| n * g)
            .collect();
        let inner = self.core(d).col_scale(&self.act[d])?;
        let inner = match &self.conv {
            Some(conv) => inner.matmul(&conv[d])?,
            None => inner,
        };
        inner.row_scale(&left)
    }

    pub fn compose(&self) -> Result<Vec<Matrix>> {
        (0..self.channels())
            .map(|d| self.compose_channel(d))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        let len = self.seq_len();
        let diag_ok = |v: &Vec<Vec<f64>>| v.len() == c && v.iter().all(|d| d.len() == len);
        let square = |m: &Matrix| m.shape() == (len, len);
        if !diag_ok(&self.norm) || !diag_ok(&self.gate) || !diag_ok(&self.act) {
            return Err(Error::Shape(
                "factor diagonals do not match channels × L".into(),
            ));
        }
        if !self.cores.iter().all(square)
            || self.core_of.iter().any(|i| *i >= self.cores.len())
            || self
                .conv
                .as_ref()
                .is_some_and(|cv| cv.len() != c || !cv.iter().all(square))
        {
            return Err(Error::Shape("factor matrices do not match L×L".into()));
        }
        Ok(())
    }
}

/// One layer: factors plus the composed per-channel operators.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttn {
    pub factors: LayerFactors,
    pub h: Vec<Matrix>,
}

impl LayerAttn {
    pub fn from_factors(factors: LayerFactors) -> Result<Self> {
        factors.validate()?;
        let h = factors.compose()?;
        Ok(Self { factors, h })
    }

    pub fn channels(&self) -> usize {
        self.h.len()
    }

    pub fn seq_len(&self) -> usize {
        self.factors.seq_len()
    }

    /// Per-channel `H^{(d)} · stream[:, d]`.
    pub fn apply(&self, stream: &Matrix) -> Result<Matrix> {
        if stream.cols() != self.channels() || stream.rows() != self.seq_len() {
            return Err(Error::Shape(format!(
                "stream {:?} for {} channels of length {}",
                stream.shape(),
                self.channels(),
                self.seq_len()
            )));
        }
        let mut out = Matrix::zeros(stream.rows(), stream.cols());
        for (d, h) in self.h.iter().enumerate() {
            out.set_col(d, &h.matvec(&stream.col(d))?);
        }
        Ok(out)
    }

    /// Largest deviation between the stored operators and a fresh composition.
    pub fn recomposition_error(&self) -> Result<f64> {
        let fresh = self.factors.compose()?;
        let mut worst = 0.0f64;
        for (a, b) in self.h.iter().zip(&fresh) {
            worst = worst.max(a.sub(b)?.max_abs());
        }
        Ok(worst)
    }

    pub fn is_causal(&self) -> bool {
        self.h.iter().all(Matrix::is_lower_triangular)
            && self.factors.cores.iter().all(Matrix::is_lower_triangular)
    }
}

/// Implicit attention of every layer of a model for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitAttnStack {
    pub arch: Arch,
    pub layers: Vec<LayerAttn>,
}

impl ImplicitAttnStack {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.layers.first().map_or(0, LayerAttn::seq_len)
    }
}
