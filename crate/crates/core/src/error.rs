use thiserror::Error;

use crate::model::TraceRow;

/// Errors produced by the inference engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    #[error("index {index} out of range for grid with {len} points")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("block dims {block:?} do not divide grid dims {grid:?}")]
    NonDividingBlocks { grid: Vec<usize>, block: Vec<usize> },

    #[error("shape mismatch: expected length {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("{clamped} of {total} circulant eigenvalues fell below the floor (limit 1%)")]
    TooManyClamped { clamped: usize, total: usize },

    #[error("conjugate gradient breakdown: curvature {curvature:e} at iteration {iteration}")]
    Breakdown { iteration: usize, curvature: f64 },

    #[error("solve did not converge: relative residual {relative_residual:e} after {iterations} iterations")]
    SolveNotConverged { iterations: usize, relative_residual: f64 },

    #[error("derivative observations are not supported by the {0} kernel")]
    DerivativeNotSupported(String),

    #[error("noise standard deviation must be positive, got {0}")]
    NonPositiveNoise(f64),

    #[error("natural gradient step rejected: block {block} lost positive definiteness")]
    StepRejected { block: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("objective became non-finite at epoch {epoch}")]
    NonFiniteObjective { epoch: usize },

    #[error("hyperparameter step at epoch {epoch} left the valid range: {reason}")]
    HyperparameterDiverged { epoch: usize, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("fit aborted after {} completed epochs: {source}", trace.len())]
    FitAborted {
        #[source]
        source: Box<Error>,
        trace: Vec<TraceRow>,
    },
}

impl Error {
    /// True for failures that come from the numerics rather than from bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::TooManyClamped { .. }
            | Error::Breakdown { .. }
            | Error::SolveNotConverged { .. }
            | Error::StepRejected { .. }
            | Error::NonFiniteObjective { .. }
            | Error::HyperparameterDiverged { .. } => true,
            Error::FitAborted { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
