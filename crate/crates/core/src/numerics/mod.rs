//! Dense tensors, a tape-based reverse-mode graph over them, and a
//! central-difference gradient oracle.

mod finite_diff;
mod graph;
mod tensor;

pub use finite_diff::{finite_difference_grad, max_relative_error, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{matmul, softmax_lastdim, Tensor};
