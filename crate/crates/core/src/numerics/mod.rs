//! Tensor storage, the autodiff tape and finite-difference checking.

pub mod gradcheck;
mod graph;
mod tensor;

pub use graph::{Graph, Var, NORM_EPS};
pub use tensor::{softmax, Tensor};
