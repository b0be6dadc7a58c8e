//! Dense tensors and tape-based reverse-mode differentiation.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{cosine, gelu_scalar, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
