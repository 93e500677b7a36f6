//! Stationary covariance functions and their inter-domain extensions.
//!
//! A [`KernelSpec`] describes the latent covariance `k(Δ)`. Observations see the
//! latent process through an [`OperatorTag`]: point evaluation, a partial
//! derivative, or a line integral along a segment. Integrals are estimated by
//! Monte Carlo over uniformly sampled nodes; every other pairing is closed form.
//!
//! Hyperparameters are ordered `[σ_f², ℓ_1, …, ℓ_D]` throughout the crate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::InducingGrid;

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

/// Covariance family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(alias = "sqexp", alias = "rbf")]
    SquaredExponential,
    #[serde(alias = "matern05", alias = "matern12")]
    Matern05,
    #[serde(alias = "matern15", alias = "matern32")]
    Matern15,
    #[serde(alias = "matern25", alias = "matern52")]
    Matern25,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Matern05,
        Family::Matern15,
        Family::Matern25,
        Family::SquaredExponential,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::SquaredExponential => "sqexp",
            Family::Matern05 => "matern05",
            Family::Matern15 => "matern15",
            Family::Matern25 => "matern25",
        }
    }

    pub fn supports_derivatives(self) -> bool {
        !matches!(self, Family::Matern05)
    }

    /// Unit-variance profile as a function of scaled distance.
    fn profile(self, r: f64) -> f64 {
        match self {
            Family::SquaredExponential => (-0.5 * r * r).exp(),
            Family::Matern05 => (-r).exp(),
            Family::Matern15 => (1.0 + SQRT3 * r) * (-SQRT3 * r).exp(),
            Family::Matern25 => (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * (-SQRT5 * r).exp(),
        }
    }

    /// `-φ'(r) / r`. Finite at zero for every family except Matern05.
    fn slope(self, r: f64) -> f64 {
        match self {
            Family::SquaredExponential => (-0.5 * r * r).exp(),
            Family::Matern05 => (-r).exp() / r,
            Family::Matern15 => 3.0 * (-SQRT3 * r).exp(),
            Family::Matern25 => 5.0 / 3.0 * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp(),
        }
    }

    /// `slope'(r) / r`, multiplied by `r²` wherever it is used.
    fn curvature(self, r: f64) -> f64 {
        match self {
            Family::SquaredExponential => -(-0.5 * r * r).exp(),
            Family::Matern05 => f64::NAN,
            Family::Matern15 => -3.0 * SQRT3 * (-SQRT3 * r).exp() / r,
            Family::Matern25 => -25.0 / 3.0 * (-SQRT5 * r).exp(),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A stationary kernel with per-dimension lengthscales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernel")]
pub struct KernelSpec {
    family: Family,
    signal_variance: f64,
    lengthscales: Vec<f64>,
}

#[derive(Deserialize)]
struct RawKernel {
    family: Family,
    signal_variance: f64,
    lengthscales: Vec<f64>,
}

impl TryFrom<RawKernel> for KernelSpec {
    type Error = Error;

    fn try_from(raw: RawKernel) -> Result<Self> {
        KernelSpec::new(raw.family, raw.signal_variance, raw.lengthscales)
    }
}

impl KernelSpec {
    pub fn new(family: Family, signal_variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if !(signal_variance > 0.0 && signal_variance.is_finite()) {
            return Err(Error::InvalidKernel(format!(
                "signal variance must be positive, got {signal_variance}"
            )));
        }
        if lengthscales.is_empty() {
            return Err(Error::InvalidKernel("at least one lengthscale required".into()));
        }
        if let Some(bad) = lengthscales.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidKernel(format!(
                "lengthscales must be positive, got {bad}"
            )));
        }
        Ok(Self {
            family,
            signal_variance,
            lengthscales,
        })
    }

    /// Same lengthscale in every one of `dim` dimensions.
    pub fn isotropic(family: Family, signal_variance: f64, lengthscale: f64, dim: usize) -> Result<Self> {
        Self::new(family, signal_variance, vec![lengthscale; dim])
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Number of hyperparameters, `1 + D`.
    pub fn n_params(&self) -> usize {
        1 + self.lengthscales.len()
    }

    /// `[ln σ_f², ln ℓ_1, …, ln ℓ_D]`.
    pub fn log_params(&self) -> Vec<f64> {
        std::iter::once(self.signal_variance.ln())
            .chain(self.lengthscales.iter().map(|l| l.ln()))
            .collect()
    }

    pub fn with_log_params(&self, log_params: &[f64]) -> Result<Self> {
        if log_params.len() != self.n_params() {
            return Err(Error::ShapeMismatch {
                expected: self.n_params(),
                got: log_params.len(),
            });
        }
        Self::new(
            self.family,
            log_params[0].exp(),
            log_params[1..].iter().map(|v| v.exp()).collect(),
        )
    }

    /// Natural-space parameter values in hyperparameter order.
    pub fn params(&self) -> Vec<f64> {
        std::iter::once(self.signal_variance)
            .chain(self.lengthscales.iter().copied())
            .collect()
    }

    fn scaled_distance(&self, delta: &[f64]) -> f64 {
        delta
            .iter()
            .zip(&self.lengthscales)
            .map(|(d, l)| (d / l) * (d / l))
            .sum::<f64>()
            .sqrt()
    }

    /// `k(Δ)`.
    pub fn eval(&self, delta: &[f64]) -> f64 {
        debug_assert_eq!(delta.len(), self.dim());
        self.signal_variance * self.family.profile(self.scaled_distance(delta))
    }

    /// Gradient of `k(Δ)` with respect to `[σ_f², ℓ_1, …, ℓ_D]`, written into `out`.
    pub fn eval_grad(&self, delta: &[f64], out: &mut [f64]) {
        let r = self.scaled_distance(delta);
        out[0] = self.family.profile(r);
        if r == 0.0 {
            out[1..].iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        let g = self.signal_variance * self.family.slope(r);
        for (d, (&dd, &l)) in delta.iter().zip(&self.lengthscales).enumerate() {
            out[1 + d] = g * dd * dd / (l * l * l);
        }
    }

    fn check_operator(&self, op: &OperatorTag) -> Result<()> {
        op.validate(self.dim())?;
        if let OperatorTag::Derivative { .. } = op {
            if !self.family.supports_derivatives() {
                return Err(Error::DerivativeNotSupported(self.family.to_string()));
            }
        }
        Ok(())
    }

    /// Covariance between two point functionals, `Cov(L₁ρ(x₁), L₂ρ(x₂))`.
    fn point_cov(&self, x1: &[f64], op1: PointOp, x2: &[f64], op2: PointOp) -> f64 {
        let delta: Vec<f64> = x1.iter().zip(x2).map(|(a, b)| a - b).collect();
        let ls = &self.lengthscales;
        match (op1, op2) {
            (PointOp::Value, PointOp::Value) => self.eval(&delta),
            (PointOp::Value, PointOp::Derivative(d)) | (PointOp::Derivative(d), PointOp::Value) => {
                let r = self.scaled_distance(&delta);
                if r == 0.0 {
                    return 0.0;
                }
                let v = self.signal_variance * self.family.slope(r) * delta[d] / (ls[d] * ls[d]);
                if matches!(op1, PointOp::Value) {
                    v
                } else {
                    -v
                }
            }
            (PointOp::Derivative(i), PointOp::Derivative(j)) => {
                let r = self.scaled_distance(&delta);
                let diag = if i == j {
                    self.signal_variance * self.family.slope(r) / (ls[i] * ls[i])
                } else {
                    0.0
                };
                if r == 0.0 {
                    return diag;
                }
                let cross = self.signal_variance * self.family.curvature(r) * delta[i] * delta[j]
                    / (ls[i] * ls[i] * ls[j] * ls[j]);
                diag + cross
            }
        }
    }

    /// Covariance between two observation functionals, each with its own
    /// Monte Carlo seed (ignored for non-integral operators).
    pub fn cov_between(
        &self,
        x1: &[f64],
        op1: &OperatorTag,
        seed1: u64,
        x2: &[f64],
        op2: &OperatorTag,
        seed2: u64,
    ) -> Result<f64> {
        self.check_operator(op1)?;
        self.check_operator(op2)?;
        let f1 = op1.functionals(x1, seed1);
        let f2 = op2.functionals(x2, seed2);
        let mut acc = 0.0;
        for (w1, p1, o1) in &f1 {
            for (w2, p2, o2) in &f2 {
                acc += w1 * w2 * self.point_cov(p1, *o1, p2, *o2);
            }
        }
        Ok(acc)
    }

    /// First row of the grid Gram matrix as a C-order tensor of shape `grid.dims()`.
    pub fn gram_first_row(&self, grid: &InducingGrid) -> Vec<f64> {
        let h = grid.spacing();
        let mut delta = vec![0.0; grid.ndim()];
        (0..grid.len())
            .map(|i| {
                let idx = grid.multi_index(i);
                for d in 0..delta.len() {
                    delta[d] = idx[d] as f64 * h[d];
                }
                self.eval(&delta)
            })
            .collect()
    }

    /// `∂c/∂θ_p` for each hyperparameter in natural (not log) space.
    pub fn first_row_grad(&self, grid: &InducingGrid) -> Vec<Vec<f64>> {
        let h = grid.spacing();
        let p = self.n_params();
        let mut out = vec![vec![0.0; grid.len()]; p];
        let mut delta = vec![0.0; grid.ndim()];
        let mut g = vec![0.0; p];
        for i in 0..grid.len() {
            let idx = grid.multi_index(i);
            for d in 0..delta.len() {
                delta[d] = idx[d] as f64 * h[d];
            }
            self.eval_grad(&delta, &mut g);
            for (k, gk) in g.iter().enumerate() {
                out[k][i] = *gk;
            }
        }
        out
    }

    /// `k*_{u,n}`: covariance between every inducing value and one observation.
    pub fn cross_cov(&self, grid: &InducingGrid, x: &[f64], op: &OperatorTag, seed: u64) -> Result<Vec<f64>> {
        self.check_operator(op)?;
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let funcs = op.functionals(x, seed);
        let mut out = vec![0.0; grid.len()];
        let mut pt = vec![0.0; grid.ndim()];
        for (m, o) in out.iter_mut().enumerate() {
            grid.point_into(m, &mut pt);
            *o = funcs
                .iter()
                .map(|(w, p, po)| w * self.point_cov(&pt, PointOp::Value, p, *po))
                .sum();
        }
        Ok(out)
    }

    /// `k**_{n,n}`: prior variance of one observation functional.
    pub fn transformed_var(&self, x: &[f64], op: &OperatorTag, seed: u64) -> Result<f64> {
        self.cov_between(x, op, seed, x, op, seed)
    }

    /// Gradient of `cross_cov` with respect to the natural hyperparameters:
    /// one `M`-vector per hyperparameter. Integral operators are not supported.
    pub fn cross_cov_grad(&self, grid: &InducingGrid, x: &[f64], op: &OperatorTag) -> Result<Vec<Vec<f64>>> {
        self.check_operator(op)?;
        let p = self.n_params();
        let ls = &self.lengthscales;
        let mut out = vec![vec![0.0; grid.len()]; p];
        let mut pt = vec![0.0; grid.ndim()];
        let mut delta = vec![0.0; grid.ndim()];
        let mut g = vec![0.0; p];
        for m in 0..grid.len() {
            grid.point_into(m, &mut pt);
            for d in 0..delta.len() {
                delta[d] = pt[d] - x[d];
            }
            match op {
                OperatorTag::Identity => {
                    self.eval_grad(&delta, &mut g);
                    for k in 0..p {
                        out[k][m] = g[k];
                    }
                }
                OperatorTag::Derivative { dim } => {
                    let dd = *dim;
                    let r = self.scaled_distance(&delta);
                    if r == 0.0 {
                        continue;
                    }
                    let slope = self.family.slope(r);
                    let curv = self.family.curvature(r);
                    let s2 = self.signal_variance;
                    out[0][m] = slope * delta[dd] / (ls[dd] * ls[dd]);
                    for e in 0..ls.len() {
                        let mut v = -s2 * curv * delta[e] * delta[e] * delta[dd] / (ls[e].powi(3) * ls[dd] * ls[dd]);
                        if e == dd {
                            v -= 2.0 * s2 * slope * delta[dd] / ls[dd].powi(3);
                        }
                        out[1 + e][m] = v;
                    }
                }
                OperatorTag::Integral { .. } => {
                    return Err(Error::Unsupported(
                        "hyperparameter gradients for integral observations".into(),
                    ))
                }
            }
        }
        Ok(out)
    }

    /// Gradient of `transformed_var` with respect to the natural hyperparameters.
    pub fn transformed_var_grad(&self, op: &OperatorTag) -> Result<Vec<f64>> {
        self.check_operator(op)?;
        let mut out = vec![0.0; self.n_params()];
        match op {
            OperatorTag::Identity => out[0] = 1.0,
            OperatorTag::Derivative { dim } => {
                let l = self.lengthscales[*dim];
                let g0 = self.family.slope(0.0);
                out[0] = g0 / (l * l);
                out[1 + dim] = -2.0 * self.signal_variance * g0 / (l * l * l);
            }
            OperatorTag::Integral { .. } => {
                return Err(Error::Unsupported(
                    "hyperparameter gradients for integral observations".into(),
                ))
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
enum PointOp {
    Value,
    Derivative(usize),
}

/// Linear operator through which an observation sees the latent function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorTag {
    Identity,
    Derivative {
        dim: usize,
    },
    /// Line integral of the latent function along the segment `a → b`.
    Integral {
        a: Vec<f64>,
        b: Vec<f64>,
        n_nodes: usize,
    },
}

/// Default Monte Carlo node count for integral operators.
pub const DEFAULT_MC_NODES: usize = 64;

impl OperatorTag {
    pub fn integral(a: Vec<f64>, b: Vec<f64>) -> Self {
        OperatorTag::Integral {
            a,
            b,
            n_nodes: DEFAULT_MC_NODES,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            OperatorTag::Identity => Ok(()),
            OperatorTag::Derivative { dim: d } if *d < dim => Ok(()),
            OperatorTag::Derivative { dim: d } => Err(Error::InvalidOperator(format!(
                "derivative dimension {d} out of range for {dim}-dimensional input"
            ))),
            OperatorTag::Integral { a, b, n_nodes } => {
                if a.len() != dim || b.len() != dim {
                    return Err(Error::InvalidOperator(format!(
                        "integral endpoints must have {dim} coordinates"
                    )));
                }
                if *n_nodes == 0 {
                    return Err(Error::InvalidOperator("integral needs at least one node".into()));
                }
                if a == b {
                    return Err(Error::InvalidOperator("integral endpoints coincide".into()));
                }
                Ok(())
            }
        }
    }

    /// Short label used in CSV files: `identity`, `deriv:<d>` or `integral`.
    pub fn label(&self) -> String {
        match self {
            OperatorTag::Identity => "identity".into(),
            OperatorTag::Derivative { dim } => format!("deriv:{dim}"),
            OperatorTag::Integral { .. } => "integral".into(),
        }
    }

    /// Jittered uniform nodes on the integration segment: node `j` is uniform
    /// on the `j`-th of `n_nodes` equal sub-segments. The equal-weight estimate
    /// stays unbiased for the integral.
    pub fn integral_nodes(a: &[f64], b: &[f64], n_nodes: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inv = 1.0 / n_nodes as f64;
        (0..n_nodes)
            .map(|j| {
                let t: f64 = (j as f64 + rng.random::<f64>()) * inv;
                a.iter().zip(b).map(|(ai, bi)| ai + t * (bi - ai)).collect()
            })
            .collect()
    }

    /// Expands the operator into weighted point functionals.
    fn functionals(&self, x: &[f64], seed: u64) -> Vec<(f64, Vec<f64>, PointOp)> {
        match self {
            OperatorTag::Identity => vec![(1.0, x.to_vec(), PointOp::Value)],
            OperatorTag::Derivative { dim } => vec![(1.0, x.to_vec(), PointOp::Derivative(*dim))],
            OperatorTag::Integral { a, b, n_nodes } => {
                let len = segment_length(a, b);
                let w = len / *n_nodes as f64;
                Self::integral_nodes(a, b, *n_nodes, seed)
                    .into_iter()
                    .map(|p| (w, p, PointOp::Value))
                    .collect()
            }
        }
    }
}

pub fn segment_length(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn se(s2: f64, l: f64, dim: usize) -> KernelSpec {
        KernelSpec::isotropic(Family::SquaredExponential, s2, l, dim).unwrap()
    }

    #[test]
    fn closed_form_values() {
        assert_eq!(se(1.0, 1.0, 1).eval(&[0.0]), 1.0);
        assert_relative_eq!(se(1.0, 1.0, 1).eval(&[1.0]), 0.606_530_659_712_633_4, epsilon = 1e-15);
        let m05 = KernelSpec::isotropic(Family::Matern05, 1.0, 1.0, 1).unwrap();
        assert_relative_eq!(m05.eval(&[1.0]), 0.367_879_441_171_442_3, epsilon = 1e-15);
        for fam in Family::ALL {
            let k = KernelSpec::new(fam, 2.5, vec![0.3, 1.7]).unwrap();
            assert_eq!(k.eval(&[0.0, 0.0]), 2.5);
            assert_eq!(k.eval(&[0.4, -1.1]), k.eval(&[-0.4, 1.1]));
            assert!(k.eval(&[0.4, -1.1]) <= k.eval(&[0.0, 0.0]));
        }
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(KernelSpec::new(Family::Matern15, 0.0, vec![1.0]).is_err());
        assert!(KernelSpec::new(Family::Matern15, 1.0, vec![1.0, -2.0]).is_err());
        assert!(KernelSpec::new(Family::Matern15, 1.0, vec![]).is_err());
        let bad: std::result::Result<KernelSpec, _> =
            serde_json::from_str(r#"{"family":"Matern25","signal_variance":-1.0,"lengthscales":[1.0]}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn first_row_examples() {
        let grid = InducingGrid::new(vec![3], vec![1.0], vec![0.0]).unwrap();
        let c = se(1.0, 1.0, 1).gram_first_row(&grid);
        assert_relative_eq!(c[0], 1.0);
        assert_relative_eq!(c[1], 0.606_530_659_712_633_4, epsilon = 1e-15);
        assert_relative_eq!(c[2], 0.135_335_283_236_612_7, epsilon = 1e-15);

        let grid2 = InducingGrid::new(vec![2, 2], vec![1.0, 1.0], vec![0.0, 0.0]).unwrap();
        let c2 = se(1.0, 1.0, 2).gram_first_row(&grid2);
        let expect = [
            1.0,
            0.606_530_659_712_633_4,
            0.606_530_659_712_633_4,
            0.367_879_441_171_442_3,
        ];
        for (a, b) in c2.iter().zip(expect) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }

        let single = InducingGrid::new(vec![1], vec![0.5], vec![0.0]).unwrap();
        assert_eq!(se(3.0, 0.2, 1).gram_first_row(&single), vec![3.0]);
    }

    #[test]
    fn derivative_variances() {
        assert_relative_eq!(
            se(2.0, 0.5, 1)
                .transformed_var(&[0.3], &OperatorTag::Derivative { dim: 0 }, 0)
                .unwrap(),
            8.0,
            epsilon = 1e-14
        );
        let m15 = KernelSpec::isotropic(Family::Matern15, 2.0, 0.5, 1).unwrap();
        assert_relative_eq!(
            m15.transformed_var(&[0.0], &OperatorTag::Derivative { dim: 0 }, 0)
                .unwrap(),
            24.0,
            epsilon = 1e-14
        );
        let m25 = KernelSpec::isotropic(Family::Matern25, 2.0, 0.5, 1).unwrap();
        assert_relative_eq!(
            m25.transformed_var(&[0.0], &OperatorTag::Derivative { dim: 0 }, 0)
                .unwrap(),
            5.0 * 2.0 / (3.0 * 0.25),
            epsilon = 1e-14
        );
    }

    #[test]
    fn matern05_rejects_derivatives() {
        let k = KernelSpec::isotropic(Family::Matern05, 1.0, 1.0, 1).unwrap();
        let grid = InducingGrid::new(vec![4], vec![1.0], vec![0.0]).unwrap();
        let op = OperatorTag::Derivative { dim: 0 };
        assert!(matches!(
            k.cross_cov(&grid, &[0.5], &op, 0),
            Err(Error::DerivativeNotSupported(_))
        ));
        assert!(matches!(
            k.transformed_var(&[0.5], &op, 0),
            Err(Error::DerivativeNotSupported(_))
        ));
    }

    #[test]
    fn identity_cross_cov_is_gram_column() {
        let grid = InducingGrid::new(vec![3, 4], vec![0.5, 0.25], vec![-1.0, 0.0]).unwrap();
        let k = KernelSpec::new(Family::Matern25, 1.3, vec![0.7, 0.4]).unwrap();
        let j = 7;
        let col = k
            .cross_cov(&grid, &grid.point(j).unwrap(), &OperatorTag::Identity, 0)
            .unwrap();
        for (i, v) in col.iter().enumerate() {
            let a = grid.point(i).unwrap();
            let b = grid.point(j).unwrap();
            let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            assert_relative_eq!(*v, k.eval(&d), epsilon = 1e-15);
        }
        let dcol = se(1.0, 0.6, 2)
            .cross_cov(&grid, &grid.point(j).unwrap(), &OperatorTag::Derivative { dim: 1 }, 0)
            .unwrap();
        assert_eq!(dcol[j], 0.0);
    }

    /// Central differences of the closed forms in the input location.
    #[test]
    fn derivative_covariances_match_finite_differences() {
        let h = 1e-5;
        for fam in [Family::SquaredExponential, Family::Matern15, Family::Matern25] {
            let k = KernelSpec::new(fam, 0.8, vec![0.6, 1.1]).unwrap();
            let x1 = [0.2, -0.3];
            let x2 = [0.9, 0.4];
            for d in 0..2 {
                let op = OperatorTag::Derivative { dim: d };
                let mut xp = x2;
                let mut xm = x2;
                xp[d] += h;
                xm[d] -= h;
                let fd =
                    (k.eval(&[x1[0] - xp[0], x1[1] - xp[1]]) - k.eval(&[x1[0] - xm[0], x1[1] - xm[1]])) / (2.0 * h);
                let cf = k.cov_between(&x1, &OperatorTag::Identity, 0, &x2, &op, 0).unwrap();
                assert_relative_eq!(cf, fd, max_relative = 1e-7);
                for e in 0..2 {
                    let op2 = OperatorTag::Derivative { dim: e };
                    let cov = |x: [f64; 2]| k.cov_between(&x, &OperatorTag::Identity, 0, &x2, &op2, 0).unwrap();
                    let mut a = x1;
                    let mut b = x1;
                    a[d] += h;
                    b[d] -= h;
                    let fd2 = (cov(a) - cov(b)) / (2.0 * h);
                    let cf2 = k.cov_between(&x1, &op, 0, &x2, &op2, 0).unwrap();
                    assert_relative_eq!(cf2, fd2, max_relative = 1e-6, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn first_row_grad_examples() {
        let grid = InducingGrid::new(vec![2], vec![1.0], vec![0.0]).unwrap();
        let g = se(1.0, 1.0, 1).first_row_grad(&grid);
        assert_relative_eq!(g[1][1], 0.606_530_659_712_633_4, epsilon = 1e-15);
        for fam in Family::ALL {
            let k = KernelSpec::new(fam, 1.7, vec![0.9]).unwrap();
            let grid = InducingGrid::new(vec![5], vec![0.3], vec![0.0]).unwrap();
            let c = k.gram_first_row(&grid);
            let g = k.first_row_grad(&grid);
            for (a, b) in g[0].iter().zip(&c) {
                assert_relative_eq!(*a, b / 1.7, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn integral_nodes_are_seeded() {
        let op = OperatorTag::Integral {
            a: vec![0.0, 0.0],
            b: vec![1.0, 2.0],
            n_nodes: 16,
        };
        let k = se(1.0, 0.5, 2);
        let v1 = k.transformed_var(&[1.0, 2.0], &op, 11).unwrap();
        let v2 = k.transformed_var(&[1.0, 2.0], &op, 11).unwrap();
        assert_eq!(v1, v2);
        assert!(OperatorTag::Integral {
            a: vec![1.0],
            b: vec![1.0],
            n_nodes: 4
        }
        .validate(1)
        .is_err());
    }
}
