//! Differentiable numeric substrate: dense tensors, a reverse-mode tape, and
//! the Adam optimizer.

mod adam;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{Gradients, Index, Tape, Var};
pub use tensor::Tensor;
