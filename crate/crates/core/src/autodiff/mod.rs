//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_configured, grad_check_many, relative_error, GradCheckReport};
pub use tape::{softmax_rows, BinaryKind, OpTag, Tape, Traversal, UnaryKind, Var};
pub use tensor::Tensor;
