// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{build_stack, ImplicitAttnStack, LayerAttn};
use crate::error::{Error, Result};
use crate::layers::Model;
use crate::numerics::Matrix;

/// Which factors of the composition are replaced by identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Activation diagonal removed.
    NoAct,
    /// Convolution removed.
    NoConv,
    /// Gate diagonal removed (the normalization diagonal is kept).
    NoGate,
    /// The core matrix alone.
    #[serde(rename = "core")]
    CoreOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoAct,
        Variant::NoConv,
        Variant::NoGate,
        Variant::CoreOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoAct => "no-act",
            Self::NoConv => "no-conv",
            Self::NoGate => "no-gate",
            Self::CoreOnly => "core",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "ablation variant",
                name: s.to_string(),
            })
    }
}

/// Recomposes a layer with the variant's factors set to identity.
pub fn ablate_layer(layer: &LayerAttn, variant: Variant) -> Result<LayerAttn> {
    let mut f = layer.factors.clone();
    let (len, channels) = (f.seq_len(), f.channels());
    let ones = || vec![vec![1.0; len]; channels];
    match variant {
        Variant::Full => return Ok(layer.clone()),
        Variant::NoAct => f.act = ones(),
        Variant::NoConv => f.conv = None,
        Variant::NoGate => f.gate = ones(),
        Variant::CoreOnly => {
            f.norm = ones();
            f.gate = ones();
            f.act = ones();
            f.conv = None;
        }
    }
    LayerAttn::from_factors(f)
}

pub fn ablate_stack(stack: &ImplicitAttnStack, variant: Variant) -> Result<ImplicitAttnStack> {
    Ok(ImplicitAttnStack {
        arch: stack.arch,
        layers: stack
            .layers
            .iter()
            .map(|l| ablate_layer(l, variant))
            .collect::<Result<_>>()?,
    })
}

/// Stack of `model` on `x` with the variant applied to every layer.
pub fn ablate_build(model: &Model, x: &Matrix, variant: Variant) -> Result<ImplicitAttnStack> {
    ablate_stack(&build_stack(model, x)?, variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Arch, BlockWeights, ModelConfig};
    use crate::numerics::Rng;

    fn input(len: usize, d: usize) -> Matrix {
        let mut rng = Rng::new(2);
        Matrix::from_fn(len, d, |_, _| rng.normal(1.0))
    }

    #[test]
    fn core_only_mamba_is_the_s6_matrix() {
        let model = Model::new(ModelConfig::for_arch(Arch::Mamba, 4, 6, 1)).unwrap();
        let s = ablate_build(&model, &input(6, 4), Variant::CoreOnly).unwrap();
        for (h, core) in s.layers[0].h.iter().zip(&s.layers[0].factors.cores) {
            assert_eq!(h, core);
        }
    }

    #[test]
    fn no_conv_with_unit_filter_equals_full() {
        let mut cfg = ModelConfig::for_arch(Arch::Mamba, 4, 6, 1);
        cfg.conv_width = 1;
        let mut model = Model::new(cfg).unwrap();
        if let BlockWeights::Mamba(w) = &mut model.layers[0] {
            w.conv = Matrix::filled(w.conv.rows(), 1, 1.0);
        }
        let x = input(6, 4);
        let full = ablate_build(&model, &x, Variant::Full).unwrap();
        let no_conv = ablate_build(&model, &x, Variant::NoConv).unwrap();
        assert_eq!(full.layers[0].h, no_conv.layers[0].h);
    }

    #[test]
    fn no_gate_replaces_gate_column_with_ones() {
        let model = Model::new(ModelConfig::for_arch(Arch::Mamba2, 4, 6, 9)).unwrap();
        let x = input(6, 4);
        let full = ablate_build(&model, &x, Variant::Full).unwrap();
        let no_gate = ablate_build(&model, &x, Variant::NoGate).unwrap();
        let f = &full.layers[0].factors;
        for d in 0..f.channels() {
            let mut fixture = f.clone();
            fixture.gate[d] = vec![1.0; 6];
            let expect = fixture.compose_channel(d).unwrap();
            assert_eq!(no_gate.layers[0].h[d], expect);
        }
    }

    #[test]
    fn ablated_stacks_stay_causal_and_recompose() {
        for arch in Arch::ALL {
            let model = Model::new(ModelConfig::for_arch(arch, 4, 5, 3)).unwrap();
            for v in Variant::ALL {
                let s = ablate_build(&model, &input(5, 4), v).unwrap();
                for l in &s.layers {
                    assert!(l.is_causal());
                    assert_eq!(l.recomposition_error().unwrap(), 0.0);
                }
            }
        }
    }

    #[test]
    fn unknown_variant_is_rejected() {
        assert!("no-s6".parse::<Variant>().is_err());
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }
}
