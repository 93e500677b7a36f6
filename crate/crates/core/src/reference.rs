//! Dense exact Gaussian process regression with inter-domain observations.
//!
//! O(N³); meant for small reference problems.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernel::{KernelSpec, OperatorTag};
use crate::model::{mc_seed, Observation};
use crate::variational::HALF_LN_2PI;

/// Factorized training covariance `K_ff + diag(σ²)`.
pub struct ExactGp {
    kernel: KernelSpec,
    train: Vec<Observation>,
    mc_base: u64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl ExactGp {
    pub fn new(kernel: &KernelSpec, train: &[Observation], mc_base: u64) -> Result<Self> {
        let n = train.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            let oi = &train[i];
            for j in 0..=i {
                let oj = &train[j];
                let v = kernel.cov_between(&oi.x, &oi.op, oi.mc_seed(mc_base), &oj.x, &oj.op, oj.mc_seed(mc_base))?;
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] += oi.sigma * oi.sigma;
        }
        let chol = k
            .cholesky()
            .ok_or_else(|| Error::Unsupported("training covariance is not positive definite".into()))?;
        let y = DVector::from_iterator(n, train.iter().map(|o| o.y));
        let alpha = chol.solve(&y);
        Ok(Self {
            kernel: kernel.clone(),
            train: train.to_vec(),
            mc_base,
            chol,
            alpha,
        })
    }

    /// `ln p(y)` including the `-½ ln 2π` constants.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.train.len();
        let y = DVector::from_iterator(n, self.train.iter().map(|o| o.y));
        -0.5 * y.dot(&self.alpha) - 0.5 * self.chol.ln_determinant() - n as f64 * HALF_LN_2PI
    }

    /// Posterior means and variances of the query functionals.
    pub fn predict(&self, queries: &[(Vec<f64>, OperatorTag)]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.train.len();
        let mut means = Vec::with_capacity(queries.len());
        let mut vars = Vec::with_capacity(queries.len());
        for (x, op) in queries {
            let sq = mc_seed(op, self.mc_base);
            let kq = self
                .train
                .iter()
                .map(|o| self.kernel.cov_between(x, op, sq, &o.x, &o.op, o.mc_seed(self.mc_base)))
                .collect::<Result<Vec<f64>>>()?;
            let kq = DVector::from_vec(kq);
            let mut v = kq.clone();
            self.chol.l_dirty().solve_lower_triangular_mut(&mut v);
            let kqq = self.kernel.cov_between(x, op, sq, x, op, sq)?;
            debug_assert_eq!(kq.len(), n);
            means.push(kq.dot(&self.alpha));
            vars.push((kqq - v.norm_squared()).max(0.0));
        }
        Ok((means, vars))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Family;
    use approx::assert_relative_eq;

    #[test]
    fn single_observation_closed_form() {
        let k = KernelSpec::isotropic(Family::SquaredExponential, 2.0, 0.5, 1).unwrap();
        let obs = [Observation::identity(vec![0.0], 1.0, 0.5).unwrap()];
        let gp = ExactGp::new(&k, &obs, 0).unwrap();
        let (m, v) = gp.predict(&[(vec![0.0], OperatorTag::Identity)]).unwrap();
        assert_relative_eq!(m[0], 2.0 / 2.25, epsilon = 1e-14);
        assert_relative_eq!(v[0], 2.0 - 4.0 / 2.25, epsilon = 1e-14);
        let lml = gp.log_marginal_likelihood();
        assert_relative_eq!(lml, -0.5 / 2.25 - 0.5 * 2.25f64.ln() - HALF_LN_2PI, epsilon = 1e-14);
    }
}
