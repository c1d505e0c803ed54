//! Reverse-mode differentiation over dense `f64` tensors, the layers the
//! networks are built from, and the ADAM update rule.

pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, Checkpointed};
pub use layers::{dropout, BatchNorm, Dense, Mlp, Phase, RunningUpdate};
pub use params::{glorot_uniform, AdamConfig, Bound, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, Tensor};
