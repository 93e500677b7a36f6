//! Gaussian process inference with inducing points on a regular grid.
//!
//! The Gram matrix of a stationary kernel on an evenly spaced grid is
//! hierarchical Toeplitz, so products with it, with its whitening root and
//! with a circulant preconditioner all cost O(M log M). On top of that sit a
//! whitened block-diagonal variational posterior trained by natural
//! gradients, analytic hyperparameter gradients through the Toeplitz solves,
//! and observations through identity, derivative and line-integral operators.

// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values, and
// index loops over several parallel arrays read better than zipped iterators.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
pub mod error;
mod fft;
pub mod grid;
pub mod hypergrad;
pub mod kernel;
pub mod model;
pub mod reference;
pub mod solver;
pub mod structured;
pub mod synthetic;
pub mod variational;
pub mod whitening;

pub use error::{Error, Result};
pub use grid::{BlockLayout, InducingGrid};
pub use kernel::{Family, KernelSpec, OperatorTag};
pub use model::{
    fit, metrics, predict_latent, predict_transformed, FitConfig, Metrics, Observation, Posterior, TraceRow,
};
pub use structured::{CirculantSpectrum, RootOperator, ToeplitzOperator};
pub use variational::{BlockGaussian, NaturalParams};
