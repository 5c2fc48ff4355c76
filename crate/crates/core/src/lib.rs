//! Emulated minifloat and microscaling (MX) arithmetic, exact dot-product
//! accumulation, and a small GPT-2 trainer whose tensors live in those
//! formats.

pub mod exact_acc;
pub mod luts;
pub mod minifloat;
pub mod mx;
pub mod tensor;
pub mod train;

pub use exact_acc::{required_width, ExactAccumulator, ExactSum};
pub use luts::LutSet;
pub use minifloat::{FloatSpec, Minifloat, NumberFormat, OverflowPolicy, RoundingPolicy};
pub use mx::{mx_dot, AccumulatorKind, MxVector, ScaleExp};
pub use tensor::{ContainerKind, MatmulMode, Tensor};
pub use train::{Model, ModelConfig, PrecisionConfig, RunConfig, TrainError};
