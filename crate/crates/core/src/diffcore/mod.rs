//! Dense tensors, a recording graph with reverse-mode gradients, and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, numeric_gradient, relative_error};
pub use graph::{sigmoid, ElementwiseKind, Graph, Var};
#[allow(unused_imports)]
pub(crate) use graph::stable_bce;
pub use tensor::{Real, Tensor};
