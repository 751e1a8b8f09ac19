//! Define-by-run reverse-mode differentiation with nested gradients.

mod check;
mod graph;

pub use check::{central_difference, finite_diff_check, hessian, relative_error};
pub use graph::{CustomOp, GradientRequest, Graph, NodeId};
