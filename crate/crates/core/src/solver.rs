//! Conjugate gradients and preconditioned conjugate gradients.
//!
//! Operators are abstract symmetric positive definite maps. Batched solves run
//! every right-hand side in lockstep so each iteration issues one batched
//! operator application; the per-column arithmetic is identical to a single
//! solve.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Iterations between recomputing the true residual `b - A x`.
pub const RESIDUAL_REPLACEMENT_PERIOD: usize = 50;

/// A linear map on `R^dim`.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;

    fn apply(&self, v: &[f64]) -> Vec<f64>;

    /// Columnwise application.
    fn apply_batch(&self, vs: &[&[f64]]) -> Vec<Vec<f64>> {
        vs.par_iter().map(|v| self.apply(v)).collect()
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (**self).apply(v)
    }

    fn apply_batch(&self, vs: &[&[f64]]) -> Vec<Vec<f64>> {
        (**self).apply_batch(vs)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Identity(pub usize);

impl LinearOperator for Identity {
    fn dim(&self) -> usize {
        self.0
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }
}

/// Wraps a closure as an operator.
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> FnOperator<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> LinearOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (self.f)(v)
    }
}

/// Dense row-major matrix as an operator.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    n: usize,
    data: Vec<f64>,
}

impl DenseOperator {
    pub fn new(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n);
        Self { n, data }
    }
}

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.data.chunks(self.n).map(|row| dot(row, v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub final_residual_norm: f64,
    pub converged: bool,
    pub rhs_norm: f64,
}

impl SolveReport {
    pub fn relative_residual(&self) -> f64 {
        if self.rhs_norm == 0.0 {
            0.0
        } else {
            self.final_residual_norm / self.rhs_norm
        }
    }

    /// Turns a non-converged report into an error.
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::SolveNotConverged {
                iterations: self.iterations,
                relative_residual: self.relative_residual(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSolveReport {
    pub columns: Vec<SolveReport>,
}

impl BatchSolveReport {
    pub fn solutions(&self) -> Vec<&[f64]> {
        self.columns.iter().map(|c| c.solution.as_slice()).collect()
    }

    pub fn into_solutions(self) -> Vec<Vec<f64>> {
        self.columns.into_iter().map(|c| c.solution).collect()
    }

    pub fn all_converged(&self) -> bool {
        self.columns.iter().all(|c| c.converged)
    }

    pub fn total_iterations(&self) -> usize {
        self.columns.iter().map(|c| c.iterations).sum()
    }

    pub fn max_iterations(&self) -> usize {
        self.columns.iter().map(|c| c.iterations).max().unwrap_or(0)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_args(a: &dyn LinearOperator, m: &dyn LinearOperator, tol: f64, maxiter: usize) -> Result<()> {
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "solver tolerance must be positive, got {tol}"
        )));
    }
    if maxiter == 0 {
        return Err(Error::InvalidConfig("maxiter must be at least 1".into()));
    }
    if a.dim() != m.dim() {
        return Err(Error::ShapeMismatch {
            expected: a.dim(),
            got: m.dim(),
        });
    }
    Ok(())
}

/// Unpreconditioned conjugate gradients from `x₀ = 0`.
pub fn cg(a: &dyn LinearOperator, b: &[f64], tol: f64, maxiter: usize) -> Result<SolveReport> {
    pcg(a, &Identity(a.dim()), b, tol, maxiter)
}

/// Preconditioned conjugate gradients from `x₀ = 0`.
pub fn pcg(a: &dyn LinearOperator, m: &dyn LinearOperator, b: &[f64], tol: f64, maxiter: usize) -> Result<SolveReport> {
    pcg_observed(a, m, b, tol, maxiter, &mut |_, _, _| {})
}

/// [`pcg`] with a callback receiving `(iteration, iterate, residual_norm)`
/// after every iteration.
pub fn pcg_observed(
    a: &dyn LinearOperator,
    m: &dyn LinearOperator,
    b: &[f64],
    tol: f64,
    maxiter: usize,
    observer: &mut dyn FnMut(usize, &[f64], f64),
) -> Result<SolveReport> {
    let mut obs = |_: usize, it: usize, x: &[f64], r: f64| observer(it, x, r);
    let mut report = run_batch(a, m, &[b], tol, maxiter, Some(&mut obs))?;
    Ok(report.columns.pop().expect("one column"))
}

/// Solves `A X = B` column by column in lockstep.
pub fn pcg_batch(
    a: &dyn LinearOperator,
    m: &dyn LinearOperator,
    rhs: &[Vec<f64>],
    tol: f64,
    maxiter: usize,
) -> Result<BatchSolveReport> {
    let cols: Vec<&[f64]> = rhs.iter().map(|c| c.as_slice()).collect();
    run_batch(a, m, &cols, tol, maxiter, None)
}

struct Column {
    x: Vec<f64>,
    r: Vec<f64>,
    p: Vec<f64>,
    rz: f64,
    bnorm: f64,
    rnorm: f64,
    iterations: usize,
    done: bool,
    converged: bool,
}

type BatchObserver<'a> = &'a mut dyn FnMut(usize, usize, &[f64], f64);

fn run_batch(
    a: &dyn LinearOperator,
    m: &dyn LinearOperator,
    rhs: &[&[f64]],
    tol: f64,
    maxiter: usize,
    mut observer: Option<BatchObserver<'_>>,
) -> Result<BatchSolveReport> {
    check_args(a, m, tol, maxiter)?;
    let n = a.dim();
    for b in rhs {
        if b.len() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                got: b.len(),
            });
        }
    }

    let mut cols: Vec<Column> = rhs
        .iter()
        .map(|b| {
            let bnorm = norm(b);
            Column {
                x: vec![0.0; n],
                r: b.to_vec(),
                p: Vec::new(),
                rz: 0.0,
                bnorm,
                rnorm: bnorm,
                iterations: 0,
                done: bnorm == 0.0,
                converged: bnorm == 0.0,
            }
        })
        .collect();

    // initial preconditioned residuals
    let active: Vec<usize> = (0..cols.len()).filter(|&i| !cols[i].done).collect();
    let zs = m.apply_batch(&active.iter().map(|&i| cols[i].r.as_slice()).collect::<Vec<_>>());
    for (&i, z) in active.iter().zip(zs) {
        let c = &mut cols[i];
        c.rz = dot(&c.r, &z);
        c.p = z;
    }

    loop {
        let active: Vec<usize> = (0..cols.len()).filter(|&i| !cols[i].done).collect();
        if active.is_empty() {
            break;
        }
        let aps = a.apply_batch(&active.iter().map(|&i| cols[i].p.as_slice()).collect::<Vec<_>>());

        let mut need_true = Vec::new();
        for (&i, ap) in active.iter().zip(&aps) {
            let c = &mut cols[i];
            let pap = dot(&c.p, ap);
            c.iterations += 1;
            if !(pap > 0.0) {
                return Err(Error::Breakdown {
                    iteration: c.iterations,
                    curvature: pap,
                });
            }
            let alpha = c.rz / pap;
            for ((x, r), (p, q)) in c.x.iter_mut().zip(c.r.iter_mut()).zip(c.p.iter().zip(ap)) {
                *x += alpha * p;
                *r -= alpha * q;
            }
            c.rnorm = norm(&c.r);
            let periodic = c.iterations.is_multiple_of(RESIDUAL_REPLACEMENT_PERIOD);
            let claims = c.rnorm <= tol * c.bnorm;
            if periodic || claims || c.iterations >= maxiter {
                need_true.push(i);
            }
        }

        if !need_true.is_empty() {
            let axs = a.apply_batch(&need_true.iter().map(|&i| cols[i].x.as_slice()).collect::<Vec<_>>());
            for (&i, ax) in need_true.iter().zip(axs) {
                let c = &mut cols[i];
                for ((r, b), q) in c.r.iter_mut().zip(rhs[i]).zip(&ax) {
                    *r = b - q;
                }
                c.rnorm = norm(&c.r);
            }
        }

        for &i in &active {
            let c = &mut cols[i];
            if let Some(obs) = observer.as_mut() {
                obs(i, c.iterations, &c.x, c.rnorm);
            }
            if c.rnorm <= tol * c.bnorm {
                c.done = true;
                c.converged = true;
            } else if c.iterations >= maxiter {
                c.done = true;
            }
        }

        let still: Vec<usize> = active.into_iter().filter(|&i| !cols[i].done).collect();
        if still.is_empty() {
            continue;
        }
        let zs = m.apply_batch(&still.iter().map(|&i| cols[i].r.as_slice()).collect::<Vec<_>>());
        for (&i, z) in still.iter().zip(zs) {
            let c = &mut cols[i];
            let rz_new = dot(&c.r, &z);
            let beta = rz_new / c.rz;
            c.rz = rz_new;
            for (p, zi) in c.p.iter_mut().zip(&z) {
                *p = zi + beta * *p;
            }
        }
    }

    Ok(BatchSolveReport {
        columns: cols
            .into_iter()
            .map(|c| SolveReport {
                solution: c.x,
                iterations: c.iterations,
                final_residual_norm: c.rnorm,
                converged: c.converged,
                rhs_norm: c.bnorm,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn op(m: &DMatrix<f64>) -> DenseOperator {
        let n = m.nrows();
        DenseOperator::new(n, m.transpose().as_slice().to_vec())
    }

    #[test]
    fn identity_operator_converges_in_one_iteration() {
        let b = vec![1.0, -2.0, 3.0];
        let r = cg(&Identity(3), &b, 1e-12, 10).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
        assert_eq!(r.solution, b);
    }

    #[test]
    fn diagonal_system() {
        let d = FnOperator::new(3, |v: &[f64]| vec![v[0], 2.0 * v[1], 4.0 * v[2]]);
        let r = cg(&d, &[1.0, 1.0, 1.0], 1e-12, 3).unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 3);
        for (x, want) in r.solution.iter().zip([1.0, 0.5, 0.25]) {
            assert_relative_eq!(*x, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_rhs_returns_zero() {
        let r = cg(&Identity(4), &[0.0; 4], 1e-10, 5).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.solution, vec![0.0; 4]);
    }

    #[test]
    fn random_spd_matches_direct_solve() {
        let a = random_spd(64, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b: Vec<f64> = (0..64).map(|_| rng.random::<f64>() - 0.5).collect();
        let r = cg(&op(&a), &b, 1e-10, 1000).unwrap();
        assert!(r.converged);
        let x = a.clone().lu().solve(&nalgebra::DVector::from_vec(b.clone())).unwrap();
        let err: f64 = r
            .solution
            .iter()
            .zip(x.iter())
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err / x.norm() <= 1e-8, "rel err {}", err / x.norm());
        // true residual satisfies tolerance
        let res = &a * nalgebra::DVector::from_vec(r.solution.clone()) - nalgebra::DVector::from_vec(b.clone());
        assert!(res.norm() <= 1e-10 * norm(&b));
    }

    #[test]
    fn exact_inverse_preconditioner() {
        let a = random_spd(20, 5);
        let inv = a.clone().try_inverse().unwrap();
        let b: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let r = pcg(&op(&a), &op(&inv), &b, 1e-8, 100).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn identity_preconditioner_matches_cg() {
        let a = random_spd(30, 7);
        let b: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).cos()).collect();
        let r1 = cg(&op(&a), &b, 1e-10, 500).unwrap();
        let r2 = pcg(&op(&a), &Identity(30), &b, 1e-10, 500).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn breakdown_on_indefinite_operator() {
        let d = FnOperator::new(2, |v: &[f64]| vec![v[0], -v[1]]);
        assert!(matches!(cg(&d, &[0.0, 1.0], 1e-10, 10), Err(Error::Breakdown { .. })));
    }

    #[test]
    fn maxiter_reports_nonconvergence() {
        let a = random_spd(40, 11);
        let b = vec![1.0; 40];
        let r = cg(&op(&a), &b, 1e-14, 2).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 2);
        assert!(matches!(r.require_converged(), Err(Error::SolveNotConverged { .. })));
    }

    #[test]
    fn batch_matches_loop() {
        let a = random_spd(25, 13);
        let pre = DenseOperator::new(25, {
            let mut d = vec![0.0; 625];
            for i in 0..25 {
                d[i * 25 + i] = 1.0 / a[(i, i)];
            }
            d
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rhs: Vec<Vec<f64>> = (0..8).map(|_| (0..25).map(|_| rng.random::<f64>()).collect()).collect();
        rhs.push(rhs[0].clone());
        let batch = pcg_batch(&op(&a), &pre, &rhs, 1e-11, 300).unwrap();
        for (col, b) in batch.columns.iter().zip(&rhs) {
            let single = pcg(&op(&a), &pre, b, 1e-11, 300).unwrap();
            assert_eq!(col, &single);
        }
        assert_eq!(batch.columns[0].solution, batch.columns[8].solution);
        let one = pcg_batch(&op(&a), &pre, &rhs[..1], 1e-11, 300).unwrap();
        assert_eq!(one.columns[0], batch.columns[0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// The energy-norm error of (P)CG never increases.
        #[test]
        fn energy_error_is_monotone(seed in 0u64..1000, n in 5usize..30) {
            let a = random_spd(n, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let b: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            let exact = a.clone().lu().solve(&nalgebra::DVector::from_vec(b.clone())).unwrap();
            let diag = FnOperator::new(n, |v: &[f64]| v.iter().enumerate().map(|(i, x)| x / a[(i, i)]).collect());
            let mut errs = Vec::new();
            pcg_observed(&op(&a), &diag, &b, 1e-12, 4 * n, &mut |_, x, _| {
                let e = nalgebra::DVector::from_column_slice(x) - &exact;
                errs.push((e.transpose() * &a * &e)[(0, 0)].sqrt());
            }).unwrap();
            let scale = errs.first().copied().unwrap_or(1.0).max(1e-300);
            for w in errs.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12 * scale, "{} > {}", w[1], w[0]);
            }
        }

        #[test]
        fn scaling_rhs_scales_solution(seed in 0u64..1000, alpha in -50.0f64..50.0) {
            prop_assume!(alpha.abs() > 1e-3);
            let a = random_spd(16, seed);
            let b: Vec<f64> = (0..16).map(|i| ((i as u64 + seed) as f64).sin()).collect();
            let sb: Vec<f64> = b.iter().map(|x| alpha * x).collect();
            let x1 = cg(&op(&a), &b, 1e-13, 500).unwrap().solution;
            let x2 = cg(&op(&a), &sb, 1e-13, 500).unwrap().solution;
            let diff: f64 = x1.iter().zip(&x2).map(|(p, q)| (alpha * p - q).powi(2)).sum::<f64>().sqrt();
            prop_assert!(diff <= 1e-10 * alpha.abs() * norm(&x1));
        }
    }
}
