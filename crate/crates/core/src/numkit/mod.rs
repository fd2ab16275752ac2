//! Dense 2-D tensors, a reverse-mode tape, and a finite-difference checker.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradChecker, GradReport};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{OpKind, Tape, Var, EPS, LN_EPS};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;
