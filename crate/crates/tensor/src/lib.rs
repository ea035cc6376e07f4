//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The [`Tape`] records operations as they execute (define-by-run) and
//! replays them in reverse recording order to accumulate gradients. Tensors
//! handed to the tape become leaves; every other node is the output of a
//! recorded operation. Layers outside this crate can register their own
//! operations through [`CustomOp`].

mod error;
mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use tape::{BackwardCtx, BinaryKind, CustomOp, ReduceKind, Tape, UnaryKind, Var};
pub use tensor::Tensor;

/// Lower clamp applied to probabilities before a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
