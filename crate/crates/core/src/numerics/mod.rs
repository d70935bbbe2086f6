//! Dense arrays, a reverse-mode tape, the optimizer, and finite-difference
//! gradient verification.

mod array;
mod gradcheck;
mod graph;
mod optim;
mod params;

pub use array::Array;
pub use gradcheck::{grad_check, grad_check_many, GradCheckOptions};
pub use graph::{ConvGeometry, Graph, Mode, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{xavier_uniform, Bound, ParamId, ParamSet};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}

#[cfg(test)]
mod tests;
