//! Minimal dense tensor library with tape-based reverse-mode automatic
//! differentiation, a finite-difference gradient oracle, and the `.mmt`
//! binary tensor format.
//!
//! Tensors are plain values. Differentiable computation goes through a
//! [`Tape`]: inputs become leaves, every op appends a node, and
//! [`Tape::backward`] returns gradients for the leaves marked with
//! `requires_grad`. Broadcasting is limited to adding a bias over the last
//! axis; every other op requires exact shape agreement.

mod element;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod mmt;
mod tape;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
