// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Mamba,
    Mamba2,
    Griffin,
    Rwkv,
    Retnet,
    Hgrn,
    SoftmaxAttn,
}

impl Arch {
    pub const ALL: [Arch; 7] = [
        Arch::Mamba,
        Arch::Mamba2,
        Arch::Griffin,
        Arch::Rwkv,
        Arch::Retnet,
        Arch::Hgrn,
        Arch::SoftmaxAttn,
    ];

    /// The attention-free mixers (everything except the softmax baseline).
    pub const IMPLICIT: [Arch; 6] = [
        Arch::Mamba,
        Arch::Mamba2,
        Arch::Griffin,
        Arch::Rwkv,
        Arch::Retnet,
        Arch::Hgrn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Mamba => "mamba",
            Arch::Mamba2 => "mamba2",
            Arch::Griffin => "griffin",
            Arch::Rwkv => "rwkv",
            Arch::Retnet => "retnet",
            Arch::Hgrn => "hgrn",
            Arch::SoftmaxAttn => "softmax-attn",
        }
    }

    /// Whether channels are grouped into heads that share one core matrix.
    pub fn has_heads(self) -> bool {
        matches!(self, Arch::Mamba2 | Arch::Retnet | Arch::SoftmaxAttn)
    }

    /// Whether the mixer widens to `d_inner` channels before mixing tokens.
    pub fn expands(self) -> bool {
        matches!(self, Arch::Mamba | Arch::Mamba2 | Arch::Griffin)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "arch",
                name: s.to_string(),
            })
    }
}

/// Shape of a stacked model.
///
/// `heads · head_dim` must equal the mixed width: `d_inner` for Mamba-2,
/// `d_model` for RetNet and softmax attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub depth: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub state_size: usize,
    pub conv_width: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Conventional shapes for `arch` at width `d_model`: expansion factor 2,
    /// state size 4, conv width 4 and two heads where the width allows it.
    pub fn for_arch(arch: Arch, d_model: usize, seq_len: usize, seed: u64) -> Self {
        let d_inner = if arch.expands() { 2 * d_model } else { d_model };
        let (heads, head_dim) = if arch.has_heads() {
            let heads = if d_inner % 2 == 0 && d_inner >= 2 {
                2
            } else {
                1
            };
            (heads, d_inner / heads)
        } else {
            (1, d_inner)
        };
        Self {
            arch,
            depth: 1,
            d_model,
            d_inner,
            state_size: 4,
            conv_width: 4,
            heads,
            head_dim,
            seq_len,
            seed,
        }
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    /// Channel count of the stream the implicit attention acts on.
    pub fn mixed_width(&self) -> usize {
        if self.arch.expands() {
            self.d_inner
        } else {
            self.d_model
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("depth", self.depth),
            ("d_model", self.d_model),
            ("d_inner", self.d_inner),
            ("state_size", self.state_size),
            ("conv_width", self.conv_width),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.arch.has_heads() && self.heads * self.head_dim != self.mixed_width() {
            return Err(Error::InvalidConfig(format!(
                "{} heads of width {} do not tile {} channels",
                self.heads,
                self.head_dim,
                self.mixed_width()
            )));
        }
        if !self.arch.expands() && self.d_inner != self.d_model {
            return Err(Error::InvalidConfig(format!(
                "{} mixes at model width; d_inner must equal d_model",
                self.arch
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_names_round_trip() {
        for a in Arch::ALL {
            assert_eq!(a.name().parse::<Arch>().unwrap(), a);
        }
        assert!("transformer".parse::<Arch>().is_err());
    }

    #[test]
    fn defaults_validate() {
        for a in Arch::ALL {
            for d in [1, 4, 8, 16] {
                ModelConfig::for_arch(a, d, 8, 0).validate().unwrap();
            }
        }
    }

    #[test]
    fn zero_conv_width_is_rejected() {
        let mut cfg = ModelConfig::for_arch(Arch::Mamba, 4, 8, 0);
        cfg.conv_width = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn head_tiling_is_checked() {
        let mut cfg = ModelConfig::for_arch(Arch::Mamba2, 4, 8, 0);
        cfg.head_dim = 3;
        assert!(cfg.validate().is_err());
    }
}
