//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records one forward evaluation; [`Var`] handles point into it.
//! Trainable state lives outside the tape in [`Parameter`]s, which are
//! registered as leaves for each evaluation with [`Tape::param`].

mod check;
mod ops;
pub mod special;
mod tape;
mod tensor;

pub use check::{finite_diff_check, GradReport, ParamGradError, ABS_FLOOR};
pub use tape::{Parameter, Parameterized, Tape, Var};
pub use tensor::Tensor;

pub use ops::cholesky;
