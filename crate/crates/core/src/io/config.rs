// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::Method;
use crate::harness::{Direction, Metric, TaskRule, Variant};
use crate::layers::{Arch, ModelConfig};

/// Default sequence length when neither the file nor a flag sets one.
pub const DEFAULT_SEQ_LEN: usize = 16;
/// Default model width when neither the file nor a flag sets one.
pub const DEFAULT_D_MODEL: usize = 8;

/// Options of one CLI invocation. Every field is optional so that a config
/// file and the command line can each supply a subset; see [`RunConfig::merge`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Option<Arch>,
    pub depth: Option<usize>,
    pub d_model: Option<usize>,
    pub d_inner: Option<usize>,
    pub state_size: Option<usize>,
    pub conv_width: Option<usize>,
    pub heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub seq_len: Option<usize>,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub out: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub method: Option<Method>,
    pub direction: Option<Direction>,
    pub metric: Option<Metric>,
    pub variant: Option<Variant>,
    pub task: Option<TaskRule>,
    pub seeds: Option<usize>,
    pub target_class: Option<usize>,
}

macro_rules! overlay {
    ($base:ident, $over:ident; $($field:ident),*) => {
        RunConfig { $($field: $over.$field.or($base.$field)),* }
    };
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Fields set in `over` win; the rest come from `self`.
    pub fn merge(self, over: RunConfig) -> RunConfig {
        let base = self;
        overlay!(base, over; arch, depth, d_model, d_inner, state_size, conv_width, heads,
            head_dim, seq_len, seed, tol, out, input, method, direction, metric, variant,
            task, seeds, target_class)
    }

    pub fn require_arch(&self) -> Result<Arch> {
        self.arch
            .ok_or_else(|| Error::InvalidConfig("no architecture given (--arch)".into()))
    }

    /// Model configuration: conventional shapes for the architecture, with any
    /// explicitly given dimension taking precedence.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::for_arch(
            self.require_arch()?,
            self.d_model.unwrap_or(DEFAULT_D_MODEL),
            self.seq_len.unwrap_or(DEFAULT_SEQ_LEN),
            self.seed.unwrap_or(0),
        );
        if let Some(v) = self.depth {
            cfg.depth = v;
        }
        if let Some(v) = self.d_inner {
            cfg.d_inner = v;
        }
        if let Some(v) = self.state_size {
            cfg.state_size = v;
        }
        if let Some(v) = self.conv_width {
            cfg.conv_width = v;
        }
        match (self.heads, self.head_dim) {
            (Some(h), Some(d)) => (cfg.heads, cfg.head_dim) = (h, d),
            (Some(h), None) if h > 0 => (cfg.heads, cfg.head_dim) = (h, cfg.mixed_width() / h),
            (None, Some(d)) if d > 0 => (cfg.heads, cfg.head_dim) = (cfg.mixed_width() / d, d),
            (Some(_), None) | (None, Some(_)) => {
                return Err(Error::InvalidConfig(
                    "heads and head_dim must be positive".into(),
                ))
            }
            (None, None) => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
