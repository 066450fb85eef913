//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, Coverage};
pub use graph::{Gradients, Graph, PlaneGather, Recording, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};

/// Exact (erf-based) GELU on a single value.
pub fn gelu<T: Real>(x: T) -> T {
    graph::gelu_scalar(x)
}

/// Logistic sigmoid on a single value.
pub fn sigmoid<T: Real>(x: T) -> T {
    graph::sigmoid_scalar(x)
}
