//! Dense tensors and reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod ops;
mod scalar;
mod value;

pub use gradcheck::{finite_diff_check, grad_report, relative_error, GradReport};
pub use graph::{BackwardCtx, Graph, InputGrads, Var};
pub use scalar::Scalar;
pub use value::Tensor;
