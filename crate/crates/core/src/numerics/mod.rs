//! Tensor arithmetic and reverse-mode differentiation.

pub mod kernels;
mod real;
mod tape;
mod tensor;
pub mod vltp1;

pub use tape::{Gradients, Tape, Var};
pub use real::Real;
pub use tensor::Tensor;
