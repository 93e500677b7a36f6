//! Block-independent Gaussian posterior over whitened coordinates.
//!
//! `q(ε) = Π_b N(ε_b | m_b, S_b)` where the blocks are tiles of the whitened
//! grid described by a [`BlockLayout`]. Each `S_b` is stored through a lower
//! triangular factor `L_b` with positive diagonal. Training uses natural
//! gradients on the canonical parameters `θ₁ = S⁻¹m`, `θ₂ = -½S⁻¹`, computed
//! blockwise from minibatch sufficient statistics.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::BlockLayout;
use crate::solver::{dot, pcg, FnOperator};

/// `½ ln 2π`, the per-observation constant left out of the training objective.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGaussian {
    mean: Vec<f64>,
    factors: Vec<DMatrix<f64>>,
    layout: BlockLayout,
}

fn check_factor(l: &DMatrix<f64>, b: usize) -> Result<()> {
    for i in 0..l.nrows() {
        if !(l[(i, i)] > 0.0 && l[(i, i)].is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "factor of block {b} has non-positive diagonal entry {}",
                l[(i, i)]
            )));
        }
        for j in i + 1..l.ncols() {
            if l[(i, j)] != 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "factor of block {b} is not lower triangular"
                )));
            }
        }
    }
    Ok(())
}

impl BlockGaussian {
    /// The prior `N(0, I)`.
    pub fn prior(layout: BlockLayout) -> Self {
        let s = layout.block_size();
        Self {
            mean: vec![0.0; layout.len()],
            factors: vec![DMatrix::identity(s, s); layout.n_blocks()],
            layout,
        }
    }

    pub fn new(mean: Vec<f64>, factors: Vec<DMatrix<f64>>, layout: BlockLayout) -> Result<Self> {
        if mean.len() != layout.len() {
            return Err(Error::ShapeMismatch {
                expected: layout.len(),
                got: mean.len(),
            });
        }
        if factors.len() != layout.n_blocks() {
            return Err(Error::ShapeMismatch {
                expected: layout.n_blocks(),
                got: factors.len(),
            });
        }
        let s = layout.block_size();
        for (b, l) in factors.iter().enumerate() {
            if l.nrows() != s || l.ncols() != s {
                return Err(Error::ShapeMismatch {
                    expected: s,
                    got: l.nrows(),
                });
            }
            check_factor(l, b)?;
        }
        Ok(Self { mean, factors, layout })
    }

    /// Builds `q` from covariance blocks, factorizing each.
    pub fn from_covariances(mean: Vec<f64>, covs: Vec<DMatrix<f64>>, layout: BlockLayout) -> Result<Self> {
        let factors = covs
            .into_iter()
            .enumerate()
            .map(|(b, c)| {
                c.cholesky()
                    .map(|ch| ch.unpack())
                    .ok_or(Error::StepRejected { block: b })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(mean, factors, layout)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn factors(&self) -> &[DMatrix<f64>] {
        &self.factors
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    /// `M'`.
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn covariance_block(&self, b: usize) -> DMatrix<f64> {
        &self.factors[b] * self.factors[b].transpose()
    }

    fn block_vec(&self, v: &[f64], b: usize) -> DVector<f64> {
        DVector::from_iterator(
            self.layout.block_size(),
            self.layout.block_indices(b).iter().map(|&i| v[i]),
        )
    }

    /// `kᵀ S k = Σ_b ‖L_bᵀ k_b‖²`.
    pub fn quad_form(&self, k: &[f64]) -> f64 {
        (0..self.factors.len())
            .map(|b| (self.factors[b].transpose() * self.block_vec(k, b)).norm_squared())
            .sum()
    }

    /// `S k` in C-order.
    pub fn cov_mvm(&self, k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; k.len()];
        for (b, l) in self.factors.iter().enumerate() {
            let y = l * (l.transpose() * self.block_vec(k, b));
            for (&i, v) in self.layout.block_indices(b).iter().zip(y.iter()) {
                out[i] = *v;
            }
        }
        out
    }

    /// `ln |S| = 2 Σ_b Σ_i ln (L_b)_{ii}`.
    pub fn log_det(&self) -> f64 {
        2.0 * self
            .factors
            .iter()
            .map(|l| (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>())
            .sum::<f64>()
    }

    pub fn trace(&self) -> f64 {
        self.factors.iter().map(|l| l.norm_squared()).sum()
    }

    /// Full `M' × M'` covariance in C-order. Test-sized problems only.
    pub fn dense_covariance(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut s = DMatrix::zeros(n, n);
        for b in 0..self.factors.len() {
            let cb = self.covariance_block(b);
            let idx = self.layout.block_indices(b);
            for (p, &i) in idx.iter().enumerate() {
                for (q, &j) in idx.iter().enumerate() {
                    s[(i, j)] = cb[(p, q)];
                }
            }
        }
        s
    }
}

/// Canonical parameters, blockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParams {
    /// `S⁻¹ m` in C-order.
    pub theta1: Vec<f64>,
    /// `-½ S_b⁻¹` per block.
    pub theta2: Vec<DMatrix<f64>>,
}

impl NaturalParams {
    pub fn from_gaussian(q: &BlockGaussian) -> Self {
        let mut theta1 = vec![0.0; q.len()];
        let theta2 = q
            .factors
            .iter()
            .enumerate()
            .map(|(b, l)| {
                let chol = nalgebra::Cholesky::pack_dirty(l.clone());
                let prec = chol.inverse();
                let t1 = &prec * q.block_vec(&q.mean, b);
                for (&i, v) in q.layout.block_indices(b).iter().zip(t1.iter()) {
                    theta1[i] = *v;
                }
                prec * -0.5
            })
            .collect();
        Self { theta1, theta2 }
    }

    /// Recovers `(m, L)`; fails if any `-2θ₂` block is not positive definite.
    pub fn to_gaussian(&self, layout: &BlockLayout) -> Result<BlockGaussian> {
        let mut mean = vec![0.0; layout.len()];
        let factors = self
            .theta2
            .iter()
            .enumerate()
            .map(|(b, t2)| {
                let prec = t2 * -2.0;
                let chol = prec.cholesky().ok_or(Error::StepRejected { block: b })?;
                let idx = layout.block_indices(b);
                let t1 = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.theta1[i]));
                let mb = chol.solve(&t1);
                for (&i, v) in idx.iter().zip(mb.iter()) {
                    mean[i] = *v;
                }
                let cov = chol.inverse();
                let cov = (&cov + cov.transpose()) * 0.5;
                cov.cholesky()
                    .map(|c| c.unpack())
                    .ok_or(Error::StepRejected { block: b })
            })
            .collect::<Result<Vec<_>>>()?;
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::StepRejected { block: 0 });
        }
        BlockGaussian::new(mean, factors, layout.clone())
    }
}

/// One whitened observation: value, noise, prior variance and `k_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedDatum {
    pub y: f64,
    pub sigma: f64,
    /// `k**_{n,n}`.
    pub kss: f64,
    pub k_n: Vec<f64>,
}

/// Expected log-likelihood term of one observation, without `-½ ln 2π`.
pub fn elbo_term(y: f64, sigma: f64, kss: f64, k_n: &[f64], q: &BlockGaussian) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::NonPositiveNoise(sigma));
    }
    if k_n.len() != q.len() {
        return Err(Error::ShapeMismatch {
            expected: q.len(),
            got: k_n.len(),
        });
    }
    let s2 = sigma * sigma;
    let km = dot(k_n, &q.mean);
    let kk = dot(k_n, k_n);
    let ksk = q.quad_form(k_n);
    Ok(-0.5 * s2.ln() - (y * y + kss - kk + ksk + km * km - 2.0 * y * km) / (2.0 * s2))
}

/// `KL(q ‖ N(0, I)) = ½(tr S + mᵀm - ln|S| - M')`.
pub fn kl(q: &BlockGaussian) -> f64 {
    0.5 * (q.trace() + dot(&q.mean, &q.mean) - q.log_det() - q.len() as f64)
}

/// `scale · Σ_n a'_n - KL`. Add `-HALF_LN_2PI` per observation (times
/// `scale`) for the normalized bound.
pub fn elbo(data: &[WhitenedDatum], q: &BlockGaussian, scale: f64) -> Result<f64> {
    let terms = data
        .par_iter()
        .map(|d| elbo_term(d.y, d.sigma, d.kss, &d.k_n, q))
        .collect::<Result<Vec<f64>>>()?;
    Ok(scale * terms.iter().sum::<f64>() - kl(q))
}

/// Minibatch sufficient statistics for the whitened Gaussian likelihood.
#[derive(Debug, Clone)]
pub struct BatchStats<'a> {
    /// Blocks of `Λ = scale·Σ_n kₙkₙᵀ/σₙ² + I`.
    pub lambda_blocks: Vec<DMatrix<f64>>,
    /// `scale·Σ_n yₙkₙ/σₙ²`.
    pub b_vec: Vec<f64>,
    data: &'a [WhitenedDatum],
    scale: f64,
    layout: BlockLayout,
}

impl BatchStats<'_> {
    /// `Λ w` reconstructed from the batch vectors.
    pub fn lambda_mvm(&self, w: &[f64]) -> Vec<f64> {
        let mut out = w.to_vec();
        for d in self.data {
            let c = self.scale * dot(&d.k_n, w) / (d.sigma * d.sigma);
            for (o, k) in out.iter_mut().zip(&d.k_n) {
                *o += c * k;
            }
        }
        out
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

pub fn accumulate_stats<'a>(data: &'a [WhitenedDatum], scale: f64, layout: &BlockLayout) -> Result<BatchStats<'a>> {
    let n = layout.len();
    for d in data {
        if !(d.sigma > 0.0) {
            return Err(Error::NonPositiveNoise(d.sigma));
        }
        if d.k_n.len() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                got: d.k_n.len(),
            });
        }
    }
    let s = layout.block_size();
    let lambda_blocks = (0..layout.n_blocks())
        .into_par_iter()
        .map(|b| {
            let idx = layout.block_indices(b);
            let mut lam = DMatrix::<f64>::identity(s, s);
            let mut kb = DVector::<f64>::zeros(s);
            for d in data {
                for (p, &i) in idx.iter().enumerate() {
                    kb[p] = d.k_n[i];
                }
                let w = scale / (d.sigma * d.sigma);
                lam.ger(w, &kb, &kb, 1.0);
            }
            lam
        })
        .collect();
    let mut b_vec = vec![0.0; n];
    for d in data {
        let w = scale * d.y / (d.sigma * d.sigma);
        for (o, k) in b_vec.iter_mut().zip(&d.k_n) {
            *o += w * k;
        }
    }
    Ok(BatchStats {
        lambda_blocks,
        b_vec,
        data,
        scale,
        layout: layout.clone(),
    })
}

/// One natural-gradient step with step size `lr ∈ (0, 1]`.
///
/// Returns the updated canonical parameters and the matching `q`.
pub fn ngd_step(
    params: &NaturalParams,
    stats: &BatchStats<'_>,
    q: &BlockGaussian,
    lr: f64,
) -> Result<(NaturalParams, BlockGaussian)> {
    if !(lr > 0.0 && lr <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "learning rate must lie in (0, 1], got {lr}"
        )));
    }
    let layout = &stats.layout;
    let lm = stats.lambda_mvm(&q.mean);
    let mut theta1 = params.theta1.clone();
    let mut theta2 = Vec::with_capacity(params.theta2.len());
    for (b, (lam, t2)) in stats.lambda_blocks.iter().zip(&params.theta2).enumerate() {
        let idx = layout.block_indices(b);
        let mb = DVector::from_iterator(idx.len(), idx.iter().map(|&i| q.mean[i]));
        let lam_mb = lam * mb;
        for (p, &i) in idx.iter().enumerate() {
            let off_block = lm[i] - lam_mb[p];
            let grad = stats.b_vec[i] - params.theta1[i] - off_block;
            theta1[i] += lr * grad;
        }
        // -½Λ_b + ½S_b⁻¹ with ½S_b⁻¹ = -θ₂
        theta2.push(t2 + (lam * -0.5 - t2) * lr);
    }
    let next = NaturalParams { theta1, theta2 };
    let q_next = next.to_gaussian(layout)?;
    Ok((next, q_next))
}

/// Closed-form optimum: `S_b = Λ_b⁻¹` and `m = Λ⁻¹ b` by CG preconditioned
/// with the block diagonal of `Λ`.
pub fn direct_solve(stats: &BatchStats<'_>, tol: f64, maxiter: usize) -> Result<BlockGaussian> {
    let layout = &stats.layout;
    let chols = stats
        .lambda_blocks
        .iter()
        .enumerate()
        .map(|(b, lam)| lam.clone().cholesky().ok_or(Error::StepRejected { block: b }))
        .collect::<Result<Vec<_>>>()?;
    let n = layout.len();
    let lambda = FnOperator::new(n, |w: &[f64]| stats.lambda_mvm(w));
    let block_inv = FnOperator::new(n, |w: &[f64]| {
        let mut out = vec![0.0; n];
        for (b, ch) in chols.iter().enumerate() {
            let idx = layout.block_indices(b);
            let wb = DVector::from_iterator(idx.len(), idx.iter().map(|&i| w[i]));
            for (&i, v) in idx.iter().zip(ch.solve(&wb).iter()) {
                out[i] = *v;
            }
        }
        out
    });
    let report = pcg(&lambda, &block_inv, &stats.b_vec, tol, maxiter)?.require_converged()?;
    let covs = chols
        .iter()
        .map(|ch| {
            let c = ch.inverse();
            (&c + c.transpose()) * 0.5
        })
        .collect();
    BlockGaussian::from_covariances(report.solution, covs, layout.clone())
}
