//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records forward operations; [`Tape::backward`] walks it in
//! reverse and returns exact gradients. Parameters live in a
//! [`ParamStore`] and are updated with Adam or blended with an EMA.

mod array;
mod check;
mod params;
mod tape;

pub use array::{gemm, Array2, MatView, MatViewMut};
pub use check::{directional_gradient_error, op_gradient_error, perturbed, FD_STEP};
pub use params::{adam_step, ema_update, read_params, write_params, AdamState, ParamId, ParamStore};
pub use tape::{Gradients, Reduction, Tape, Var, PROB_CLAMP};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value detected in {0}")]
    NonFiniteDetected(String),
    #[error("parameter stores differ: {0}")]
    StoreMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed parameter dump: {0}")]
    Malformed(String),
}
