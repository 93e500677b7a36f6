//! Dense reference computations shared by the integration tests.
//!
//! Everything here is built from kernel evaluations and textbook linear
//! algebra only, never from the structured code paths under test.

#![allow(dead_code)]

use gridgp::grid::{ravel, unravel};
use gridgp::model::Observation;
use gridgp::variational::BlockGaussian;
use gridgp::{InducingGrid, KernelSpec};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

pub fn grid_points(grid: &InducingGrid) -> Vec<Vec<f64>> {
    (0..grid.len()).map(|i| grid.point(i).unwrap()).collect()
}

/// `K_uu[i, j] = k(x_i - x_j)` over the grid in C-order.
pub fn dense_kuu(kernel: &KernelSpec, grid: &InducingGrid) -> DMatrix<f64> {
    let pts = grid_points(grid);
    let m = pts.len();
    DMatrix::from_fn(m, m, |i, j| {
        let d: Vec<f64> = pts[i].iter().zip(&pts[j]).map(|(a, b)| a - b).collect();
        kernel.eval(&d)
    })
}

/// First row of the circulant embedding, evaluated directly from the kernel.
/// Along each axis an embedded index `k` has offset `k` below `M_d`, no
/// neighbour at `M_d`, and offset `2M_d - k` above.
pub fn embedded_row(kernel: &KernelSpec, grid: &InducingGrid) -> (Vec<f64>, Vec<usize>) {
    let edims: Vec<usize> = grid.dims().iter().map(|m| 2 * m).collect();
    let n: usize = edims.iter().product();
    let row = (0..n)
        .map(|i| {
            let idx = unravel(i, &edims);
            let mut delta = Vec::with_capacity(idx.len());
            for (d, &k) in idx.iter().enumerate() {
                let m = grid.dims()[d];
                let off = if k < m {
                    k
                } else if k == m {
                    return 0.0;
                } else {
                    2 * m - k
                };
                delta.push(off as f64 * grid.spacing()[d]);
            }
            kernel.eval(&delta)
        })
        .collect();
    (row, edims)
}

/// Multi-level circulant with the given first row.
pub fn dense_circulant(row: &[f64], edims: &[usize]) -> DMatrix<f64> {
    let n = row.len();
    DMatrix::from_fn(n, n, |i, j| {
        let a = unravel(i, edims);
        let b = unravel(j, edims);
        let diff: Vec<usize> = a.iter().zip(&b).zip(edims).map(|((x, y), n)| (n + y - x) % n).collect();
        row[ravel(&diff, edims)]
    })
}

/// Real part of the multi-dimensional DFT by direct summation.
pub fn naive_dft(row: &[f64], edims: &[usize]) -> Vec<f64> {
    let n = row.len();
    let idx: Vec<Vec<usize>> = (0..n).map(|i| unravel(i, edims)).collect();
    (0..n)
        .map(|f| {
            idx.iter()
                .zip(row)
                .map(|(k, c)| {
                    let phase: f64 = idx[f]
                        .iter()
                        .zip(k)
                        .zip(edims)
                        .map(|((&fd, &kd), &nd)| ((fd * kd) % nd) as f64 / nd as f64)
                        .sum();
                    c * (2.0 * std::f64::consts::PI * phase).cos()
                })
                .sum()
        })
        .collect()
}

/// Embedded index of each grid point.
pub fn lead_indices(grid: &InducingGrid) -> Vec<usize> {
    let edims: Vec<usize> = grid.dims().iter().map(|m| 2 * m).collect();
    (0..grid.len())
        .map(|i| ravel(&unravel(i, grid.dims()), &edims))
        .collect()
}

/// Principal square root of a symmetric positive semidefinite matrix.
pub fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// Rows of `C^{1/2}` at the grid points: the rectangular root.
pub fn dense_root(kernel: &KernelSpec, grid: &InducingGrid) -> DMatrix<f64> {
    let (row, edims) = embedded_row(kernel, grid);
    let half = sym_sqrt(&dense_circulant(&row, &edims));
    let lead = lead_indices(grid);
    DMatrix::from_fn(lead.len(), row.len(), |i, j| half[(lead[i], j)])
}

pub fn mat_vec(a: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (a * DVector::from_column_slice(v)).as_slice().to_vec()
}

/// ELBO from its definition with a dense root, a dense Cholesky solve and a
/// dense variational covariance. Omits `-½ ln 2π` per observation, like
/// `gridgp::variational::elbo`.
pub fn dense_elbo(
    kernel: &KernelSpec,
    grid: &InducingGrid,
    q: &BlockGaussian,
    data: &[Observation],
    mc_base: u64,
) -> f64 {
    let pts = grid_points(grid);
    let kuu = dense_kuu(kernel, grid);
    let chol = kuu.clone().cholesky().expect("K_uu positive definite");
    let r = dense_root(kernel, grid);
    let s = q.dense_covariance();
    let m = DVector::from_column_slice(q.mean());
    let mut total = 0.0;
    for o in data {
        let seed = o.mc_seed(mc_base);
        let kstar = DVector::from_iterator(
            pts.len(),
            pts.iter().map(|p| {
                kernel
                    .cov_between(p, &gridgp::OperatorTag::Identity, 0, &o.x, &o.op, seed)
                    .unwrap()
            }),
        );
        let kss = kernel.cov_between(&o.x, &o.op, seed, &o.x, &o.op, seed).unwrap();
        let kn = r.transpose() * chol.solve(&kstar);
        let mean = kn.dot(&m);
        let var = kss - kn.dot(&kn) + (kn.transpose() * &s * &kn)[(0, 0)];
        let s2 = o.sigma * o.sigma;
        total += -0.5 * s2.ln() - ((o.y - mean).powi(2) + var) / (2.0 * s2);
    }
    let sc = s.clone().cholesky().expect("S positive definite");
    let logdet = 2.0 * sc.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let kl = 0.5 * (s.trace() + m.dot(&m) - logdet - m.len() as f64);
    total - kl
}
