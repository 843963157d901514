//! Dense reverse-mode differentiation engine: matrices, a tape, Adam, a
//! seeded sampler, parameter bundles and finite-difference checking.

mod adam;
mod gradcheck;
mod matrix;
mod params;
mod rng;
mod tape;

pub use adam::{Adam, AdamConfig, AdamState};
pub use gradcheck::{central_difference, check_gradients, op_suite, GradCheckReport, GRAD_FLOOR};
pub use matrix::{CsrMatrix, Matrix};
pub use params::{ParamVars, Parameters};
pub use rng::SeededRng;
pub use tape::{sigmoid, Tape, Var, COSINE_NORM_FLOOR};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{op} received an empty selection")]
    EmptySelection { op: &'static str },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("tape state error: {0}")]
    State(String),
}
