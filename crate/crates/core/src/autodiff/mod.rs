//! Minimal reverse-mode automatic differentiation.

pub mod gradcheck;
mod tape;

pub use gradcheck::{finite_diff_check, numerical_gradient, relative_error, GradCheckReport};
pub use tape::{AdjointFault, Gradients, OpKind, Tape, Tensor, Var, FRN_EPS};
