//! Tensor substrate: values, the autodiff tape, special functions and
//! reparameterised Gamma sampling.

mod gamma;
mod gradcheck;
pub mod linalg;
mod special;
mod tape;
mod tensor;

pub use gamma::{sample_gamma_reparam, GammaDraw, NoiseStream};
pub use gradcheck::finite_diff_check;
pub use special::{digamma, lgamma, softplus, trigamma};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value at coordinate {coord} during finite-difference check")]
    NonFinite { coord: usize },
    #[error("{op}: parameter must be strictly positive, got {value}")]
    NonPositive { op: &'static str, value: f64 },
}

pub type Result<T> = std::result::Result<T, NumError>;
