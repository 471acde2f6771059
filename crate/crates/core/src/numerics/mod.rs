//! Minimal reverse-mode differentiable tensor core.

mod adam;
mod checkpoint;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, relative_error};
pub use tape::{Gradients, Tape, Var, PAD};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
