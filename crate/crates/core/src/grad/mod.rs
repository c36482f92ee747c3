//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.

mod array;
mod check;
mod graph;

pub use array::Array;
pub use check::{grad_check, relative_error, GradCheckReport, ParamCheck, REL_ERR_FLOOR};
pub use graph::{CustomOp, Gradients, Graph, Var};

pub(crate) use graph::{sigmoid, softmax_row};
