//! Minimal dense-matrix numerics with reverse-mode differentiation.
//!
//! [`Tensor`] is a row-major `f64` buffer with a shape. [`Tape`] records
//! operations as they are executed (define-by-run) and [`Tape::backward`]
//! replays them in reverse to produce gradients for every recorded node.
//! The tape is meant to be rebuilt for every forward pass.

mod check;
mod error;
mod tape;
mod tensor;

pub use check::grad_check;
pub use error::TensorError;
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
