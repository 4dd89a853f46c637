//! Minimal dense reverse-mode differentiation, parameter sets, plain SGD and
//! finite-difference gradient checking.

pub mod checkpoint;
mod graph;
mod params;
mod tensor;

pub use graph::{softmax_rows, Grads, Graph, Var};
pub use params::{grad_check, sgd_step, Bound, Param, ParamSet};
pub use tensor::Tensor;
