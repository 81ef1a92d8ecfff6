//! Dense `f64` tensors with a reverse-mode differentiation tape.

mod array;
pub mod gradcheck;
mod graph;
mod params;

pub use array::Tensor;
pub(crate) use array::dot;
pub use gradcheck::{grad_check, grad_check_elements, rel_err, GradCheckReport};
pub use graph::{
    ensure_finite, BatchNormConfig, Graph, Mode, OpKind, Reduction, RunningStats, Var,
};
pub use params::{AdamConfig, Binder, Parameter, ParameterStore};
