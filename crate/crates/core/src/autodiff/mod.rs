//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations return [`Var`]
//! handles; [`Tape::backward`] walks the record in reverse and deposits
//! gradients on the differentiable leaves.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{central_difference, grad_check, grad_check_many, max_relative_error};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
