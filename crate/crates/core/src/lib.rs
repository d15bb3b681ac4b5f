// SPDX-License-Identifier: MIT OR Apache-2.0

//! Implicit attention for attention-free sequence mixers.
//!
//! Every supported mixing block (Mamba, Mamba-2, Griffin, RWKV, RetNet, HGRN
//! and a causal softmax baseline) is implemented twice: once as the usual
//! recurrence in [`layers`], and once as a materialized, data-dependent,
//! lower-triangular L×L operator per channel in [`attention`]. The two agree
//! to rounding error, which is what makes the matrices usable for
//! explainability ([`explain`]) and perturbation evaluation ([`harness`]).

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod explain;
pub mod harness;
pub mod io;
pub mod layers;
pub mod numerics;

pub use error::{Error, Result};
