//! Whitened correlation vectors `k_n = Rᵀ K⁻¹ k*_{u,n}`.
//!
//! The solve runs PCG with the circulant preconditioner and the product with
//! `Rᵀ` goes through the square-root spectrum, so each observation costs
//! O(M log M). A dense Cholesky whitener is kept as a reference for small `M`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::InducingGrid;
use crate::kernel::KernelSpec;
use crate::solver::pcg_batch;
use crate::structured::{CirculantSpectrum, RootOperator, ToeplitzOperator};

/// Largest grid the dense reference whitener accepts.
pub const DENSE_WHITEN_CAP: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhitenOptions {
    pub tol: f64,
    pub maxiter: usize,
    /// Fail on solves that hit `maxiter` instead of using the partial solution.
    pub strict: bool,
}

impl Default for WhitenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            maxiter: 1000,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedCorrelation {
    /// `k_n`, length `M'`.
    pub k_n: Vec<f64>,
    /// `K⁻¹ k*_{u,n}`, length `M`.
    pub solve: Vec<f64>,
    pub solver_iterations: usize,
    pub converged: bool,
}

pub fn whiten(
    spec: &CirculantSpectrum,
    root: &RootOperator,
    kstar: &[f64],
    opts: &WhitenOptions,
) -> Result<WhitenedCorrelation> {
    let mut out = whiten_batch(spec, root, std::slice::from_ref(&kstar.to_vec()), opts)?;
    Ok(out.pop().expect("one column"))
}

pub fn whiten_batch(
    spec: &CirculantSpectrum,
    root: &RootOperator,
    kstars: &[Vec<f64>],
    opts: &WhitenOptions,
) -> Result<Vec<WhitenedCorrelation>> {
    if let Some(bad) = kstars.iter().find(|k| k.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidConfig(format!(
            "non-finite cross-covariance of length {}",
            bad.len()
        )));
    }
    let report = pcg_batch(&spec.gram(), &spec.preconditioner(), kstars, opts.tol, opts.maxiter)?;
    if opts.strict {
        if let Some(c) = report.columns.iter().find(|c| !c.converged) {
            return Err(Error::SolveNotConverged {
                iterations: c.iterations,
                relative_residual: c.relative_residual(),
            });
        }
    }
    let solves: Vec<Vec<f64>> = report.columns.iter().map(|c| c.solution.clone()).collect();
    let ks = root.root_mvm_t_batch(&solves)?;
    Ok(report
        .columns
        .into_iter()
        .zip(ks)
        .map(|(c, k_n)| WhitenedCorrelation {
            k_n,
            solver_iterations: c.iterations,
            converged: c.converged,
            solve: c.solution,
        })
        .collect())
}

/// Classical whitening with a dense Cholesky factor, `k_n = L⁻¹ k*_{u,n}`.
#[derive(Debug, Clone)]
pub struct DenseCholeskyWhitener {
    lower: DMatrix<f64>,
}

impl DenseCholeskyWhitener {
    pub fn new(kernel: &KernelSpec, grid: &InducingGrid) -> Result<Self> {
        let m = grid.len();
        if m > DENSE_WHITEN_CAP {
            return Err(Error::Unsupported(format!(
                "dense whitening limited to M <= {DENSE_WHITEN_CAP}, got {m}"
            )));
        }
        let dense = ToeplitzOperator::from_kernel(kernel, grid).to_dense();
        let k = DMatrix::from_row_slice(m, m, &dense);
        let chol = k
            .cholesky()
            .ok_or_else(|| Error::Unsupported("Gram matrix is not numerically positive definite".into()))?;
        Ok(Self { lower: chol.unpack() })
    }

    pub fn whiten(&self, kstar: &[f64]) -> Vec<f64> {
        let mut v = DVector::from_column_slice(kstar);
        self.lower.solve_lower_triangular_mut(&mut v);
        v.as_slice().to_vec()
    }
}
