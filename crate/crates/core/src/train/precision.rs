//! Number formats used for each class of training value.

use serde::{Deserialize, Serialize};

use crate::minifloat::{FloatSpec, RoundingPolicy};
use crate::mx::{AccumulatorKind, DEFAULT_BLOCK};
use crate::tensor::{ContainerKind, MatmulMode, TensorError};

/// Containers for weights, activations, gradients and optimizer moments, and
/// how matrix products are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionConfig {
    pub weights: ContainerKind,
    pub activations: ContainerKind,
    pub gradients: ContainerKind,
    pub adam: ContainerKind,
    /// Keep `f64` weights for the optimizer and derive the stored weights
    /// from them after every step.
    pub master_copy: bool,
    pub matmul: MatmulMode,
    /// Keep token encodings, probabilities and losses in `f64`.
    pub full_precision_probs: bool,
    /// Accumulator used by on-line MX matrix products.
    pub accumulator: AccumulatorKind,
    /// Rounding policy applied to every minifloat container.
    pub rounding: RoundingPolicy,
}

/// Preset names accepted by [`PrecisionConfig::preset`].
pub const PRESET_NAMES: [&str; 10] = ["baseline", "A", "B", "C", "D", "D'", "E", "F", "F'", "G"];

fn mx(elem: FloatSpec) -> ContainerKind {
    ContainerKind::Mx { elem, block: DEFAULT_BLOCK }
}

fn online(elem: FloatSpec) -> MatmulMode {
    MatmulMode::OnlineMx { elem, block: DEFAULT_BLOCK, acc: AccumulatorKind::WideFloat }
}

impl PrecisionConfig {
    /// Everything in one container, direct products, no master copy.
    pub fn uniform(kind: ContainerKind) -> Self {
        Self {
            weights: kind,
            activations: kind,
            gradients: kind,
            adam: kind,
            master_copy: false,
            matmul: MatmulMode::Direct,
            full_precision_probs: false,
            accumulator: AccumulatorKind::WideFloat,
            rounding: RoundingPolicy::TiesToAway,
        }
    }

    /// All `f64`; the reference for gradient checks.
    pub fn wide() -> Self {
        Self::uniform(ContainerKind::Wide)
    }

    pub fn preset(name: &str) -> Option<Self> {
        let bf16 = ContainerKind::Mini(FloatSpec::E8M7);
        let e4m3 = mx(FloatSpec::E4M3);
        let cfg = match name {
            "baseline" => Self::uniform(ContainerKind::F32),
            "A" => Self::uniform(bf16),
            "B" => Self { master_copy: true, ..Self::uniform(bf16) },
            "C" => Self::uniform(mx(FloatSpec::E5M10)),
            "D" => Self {
                weights: e4m3,
                activations: bf16,
                gradients: e4m3,
                adam: ContainerKind::F32,
                master_copy: true,
                matmul: online(FloatSpec::E4M3),
                full_precision_probs: true,
                ..Self::uniform(bf16)
            },
            "E" => Self { activations: e4m3, ..Self::preset("D")? },
            "F" => Self {
                master_copy: true,
                matmul: online(FloatSpec::E4M3),
                full_precision_probs: true,
                ..Self::uniform(bf16)
            },
            "G" => {
                let e3m4 = mx(FloatSpec::E3M4);
                Self {
                    weights: e3m4,
                    activations: e3m4,
                    gradients: e3m4,
                    matmul: online(FloatSpec::E3M4),
                    ..Self::preset("D")?
                }
            }
            "D'" => Self { accumulator: AccumulatorKind::Exact, ..Self::preset("D")? },
            "F'" => Self { accumulator: AccumulatorKind::Exact, ..Self::preset("F")? },
            _ => return None,
        };
        Some(cfg)
    }

    pub fn with_rounding(self, rounding: RoundingPolicy) -> Self {
        Self { rounding, ..self }
    }

    pub fn with_accumulator(self, accumulator: AccumulatorKind) -> Self {
        Self { accumulator, ..self }
    }

    /// Replaces the element format of every MX container and of on-line
    /// MX products.
    pub fn with_element(self, elem: FloatSpec) -> Self {
        let swap = |k: ContainerKind| match k {
            ContainerKind::Mx { block, .. } => ContainerKind::Mx { elem, block },
            other => other,
        };
        let matmul = match self.matmul {
            MatmulMode::OnlineMx { block, acc, .. } => MatmulMode::OnlineMx { elem, block, acc },
            MatmulMode::Direct => MatmulMode::Direct,
        };
        Self {
            weights: swap(self.weights),
            activations: swap(self.activations),
            gradients: swap(self.gradients),
            adam: swap(self.adam),
            matmul,
            ..self
        }
    }

    fn kind(&self, k: ContainerKind) -> ContainerKind {
        k.with_rounding(self.rounding)
    }

    pub fn weights_kind(&self) -> ContainerKind {
        self.kind(self.weights)
    }

    pub fn activations_kind(&self) -> ContainerKind {
        self.kind(self.activations)
    }

    pub fn gradients_kind(&self) -> ContainerKind {
        self.kind(self.gradients)
    }

    pub fn adam_kind(&self) -> ContainerKind {
        self.kind(self.adam)
    }

    /// Container for encodings, probabilities and losses.
    pub fn probs_kind(&self) -> ContainerKind {
        if self.full_precision_probs {
            ContainerKind::Wide
        } else {
            self.activations_kind()
        }
    }

    /// Matrix product mode with this config's accumulator and rounding.
    pub fn matmul_mode(&self) -> MatmulMode {
        match self.matmul {
            MatmulMode::Direct => MatmulMode::Direct,
            MatmulMode::OnlineMx { elem, block, .. } => MatmulMode::OnlineMx {
                elem: elem.with_rounding(self.rounding),
                block,
                acc: self.accumulator,
            },
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        self.matmul_mode().validate()
    }
}
