//! Reverse-mode differentiation, parameters, Adam and checkpoints.

mod adam;
mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{ParamStore, ParamVars};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
