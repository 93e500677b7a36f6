//! Hierarchical Toeplitz algebra through circulant embedding.
//!
//! The Gram matrix of a stationary kernel on an evenly spaced grid is
//! determined by its first row. Embedding that row into a circulant of shape
//! `2M₁ × … × 2M_D` diagonalizes it with the D-dimensional DFT, which gives
//! O(M log M) products with `K`, with the rectangular root `R` (the leading
//! row block of `C^{1/2}`), and with the leading block of `C^{-1}` used as a
//! preconditioner.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::FftNd;
use crate::grid::{unravel, InducingGrid};
use crate::kernel::KernelSpec;
use crate::solver::LinearOperator;

/// Eigenvalues below `DEFAULT_RELATIVE_FLOOR * max(eigenvalue)` are clamped.
pub const DEFAULT_RELATIVE_FLOOR: f64 = 1e-10;

/// Largest fraction of clamped eigenvalues [`CirculantSpectrum::new`] accepts.
pub const MAX_CLAMPED_FRACTION: f64 = 0.01;

/// Circulant embedding of a C-order first-row tensor of shape `dims`.
///
/// Each dimension is extended by reversing the tensor along it, dropping the
/// slice that would duplicate zero displacement, padding one zero slice in
/// front and concatenating. In 1D, `[a, b, c]` becomes `[a, b, c, 0, c, b]`.
pub fn circulant_embed(first_row: &[f64], dims: &[usize]) -> Vec<f64> {
    let mut data = first_row.to_vec();
    let mut shape = dims.to_vec();
    for axis in 0..dims.len() {
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = Vec::with_capacity(data.len() * 2);
        for o in 0..outer {
            let slab = &data[o * n * inner..(o + 1) * n * inner];
            // original
            out.extend_from_slice(slab);
            // zero slice, then the reversed tensor without its last (zero-displacement) slice
            out.extend(std::iter::repeat_n(0.0, inner));
            for k in (1..n).rev() {
                out.extend_from_slice(&slab[k * inner..(k + 1) * inner]);
            }
        }
        data = out;
        shape[axis] = 2 * n;
    }
    data
}

/// Geometry shared by the spectrum and root operators.
#[derive(Debug)]
struct Embedding {
    dims: Vec<usize>,
    embed_dims: Vec<usize>,
    /// Embedded linear index of every original C-order index.
    lead: Vec<usize>,
    plan: FftNd,
}

impl Embedding {
    fn new(dims: &[usize]) -> Self {
        let embed_dims: Vec<usize> = dims.iter().map(|m| 2 * m).collect();
        let m: usize = dims.iter().product();
        let lead = (0..m)
            .map(|i| crate::grid::ravel(&unravel(i, dims), &embed_dims))
            .collect();
        Self {
            plan: FftNd::new(&embed_dims),
            dims: dims.to_vec(),
            embed_dims,
            lead,
        }
    }

    fn m(&self) -> usize {
        self.lead.len()
    }

    fn n(&self) -> usize {
        self.plan.len()
    }

    fn check(&self, len: usize, expected: usize) -> Result<()> {
        if len == expected {
            Ok(())
        } else {
            Err(Error::ShapeMismatch { expected, got: len })
        }
    }

    fn zero_pad(&self, v: &[f64]) -> Vec<Complex64> {
        let mut buf = vec![Complex64::default(); self.n()];
        for (&j, &x) in self.lead.iter().zip(v) {
            buf[j] = Complex64::new(x, 0.0);
        }
        buf
    }

    fn filter(&self, buf: &mut [Complex64], diag: &[f64]) {
        self.plan.forward(buf);
        for (z, d) in buf.iter_mut().zip(diag) {
            *z *= *d;
        }
        self.plan.inverse(buf);
    }

    /// Leading block of `F⁻¹ diag F` applied to the zero-padded `v`.
    fn block_apply(&self, v: &[f64], diag: &[f64]) -> Vec<f64> {
        let mut buf = self.zero_pad(v);
        self.filter(&mut buf, diag);
        self.lead.iter().map(|&j| buf[j].re).collect()
    }
}

/// Symmetric hierarchical Toeplitz matrix stored by its first row.
#[derive(Debug, Clone, PartialEq)]
pub struct ToeplitzOperator {
    first_row: Vec<f64>,
    dims: Vec<usize>,
}

impl ToeplitzOperator {
    pub fn new(first_row: Vec<f64>, dims: Vec<usize>) -> Result<Self> {
        let m: usize = dims.iter().product();
        if first_row.len() != m || m == 0 {
            return Err(Error::ShapeMismatch {
                expected: m,
                got: first_row.len(),
            });
        }
        Ok(Self { first_row, dims })
    }

    pub fn from_kernel(kernel: &KernelSpec, grid: &InducingGrid) -> Self {
        Self {
            first_row: kernel.gram_first_row(grid),
            dims: grid.dims().to_vec(),
        }
    }

    pub fn first_row(&self) -> &[f64] {
        &self.first_row
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.first_row.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_row.is_empty()
    }

    /// Entry `(i, j)`: the first row at the per-dimension absolute displacement.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let a = unravel(i, &self.dims);
        let b = unravel(j, &self.dims);
        let disp: Vec<usize> = a.iter().zip(&b).map(|(x, y)| x.abs_diff(*y)).collect();
        self.first_row[crate::grid::ravel(&disp, &self.dims)]
    }

    /// Dense materialization, row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        let m = self.len();
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                out[i * m + j] = self.entry(i, j);
            }
        }
        out
    }
}

/// Eigenvalues of the circulant embedding.
#[derive(Debug, Clone)]
pub struct CirculantSpectrum {
    geom: Arc<Embedding>,
    raw: Vec<f64>,
    eigenvalues: Vec<f64>,
    floor: f64,
    clamped: Vec<usize>,
    max_index: usize,
    max_imag_rel: f64,
}

impl CirculantSpectrum {
    /// Diagonalizes the embedding of `op`, clamping eigenvalues below
    /// `relative_floor * max(eigenvalue)`.
    pub fn new(op: &ToeplitzOperator, relative_floor: f64) -> Result<Self> {
        Self::with_clamp_limit(op, relative_floor, MAX_CLAMPED_FRACTION)
    }

    /// As [`new`](Self::new) with a custom limit on the clamped fraction.
    /// Products with `K` stay exact at any limit; the root and the
    /// preconditioner degrade as more eigenvalues are clamped.
    pub fn with_clamp_limit(op: &ToeplitzOperator, relative_floor: f64, max_fraction: f64) -> Result<Self> {
        if !(relative_floor > 0.0) {
            return Err(Error::InvalidConfig("eigenvalue floor must be positive".into()));
        }
        let geom = Arc::new(Embedding::new(op.dims()));
        let mut buf: Vec<Complex64> = circulant_embed(op.first_row(), op.dims())
            .into_iter()
            .map(|x| Complex64::new(x, 0.0))
            .collect();
        geom.plan.forward(&mut buf);
        let raw: Vec<f64> = buf.iter().map(|z| z.re).collect();
        let (max_index, &max) = raw
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty spectrum");
        let max_imag = buf.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
        let floor = relative_floor * max.abs();
        let mut clamped = Vec::new();
        let eigenvalues = raw
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v < floor {
                    clamped.push(i);
                    floor
                } else {
                    v
                }
            })
            .collect();
        if clamped.len() as f64 > max_fraction * raw.len() as f64 {
            return Err(Error::TooManyClamped {
                clamped: clamped.len(),
                total: raw.len(),
            });
        }
        Ok(Self {
            geom,
            raw,
            eigenvalues,
            floor,
            clamped,
            max_index,
            max_imag_rel: if max > 0.0 { max_imag / max } else { 0.0 },
        })
    }

    pub fn from_kernel(kernel: &KernelSpec, grid: &InducingGrid) -> Result<Self> {
        Self::new(&ToeplitzOperator::from_kernel(kernel, grid), DEFAULT_RELATIVE_FLOOR)
    }

    /// Clamped eigenvalues in C-order over the embedded shape.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Eigenvalues before clamping.
    pub fn raw_eigenvalues(&self) -> &[f64] {
        &self.raw
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn floor_applied(&self) -> usize {
        self.clamped.len()
    }

    pub fn clamped_indices(&self) -> &[usize] {
        &self.clamped
    }

    pub fn max_index(&self) -> usize {
        self.max_index
    }

    /// Largest imaginary part of the transform relative to the largest eigenvalue.
    pub fn max_imag_rel(&self) -> f64 {
        self.max_imag_rel
    }

    pub fn dims(&self) -> &[usize] {
        &self.geom.dims
    }

    pub fn embed_dims(&self) -> &[usize] {
        &self.geom.embed_dims
    }

    /// `M`.
    pub fn m(&self) -> usize {
        self.geom.m()
    }

    /// `M' = Π 2M_d`, the length of whitened vectors.
    pub fn embedded_len(&self) -> usize {
        self.geom.n()
    }

    /// Embedded linear index of each original grid index.
    pub fn leading_indices(&self) -> &[usize] {
        &self.geom.lead
    }

    pub(crate) fn plan(&self) -> &FftNd {
        &self.geom.plan
    }

    /// `K v`. Uses the unclamped eigenvalues so the product is exact.
    pub fn toeplitz_mvm(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.geom.check(v.len(), self.m())?;
        Ok(self.geom.block_apply(v, &self.raw))
    }

    /// Leading `M × M` block of `C⁻¹` applied to `v`.
    pub fn precond_mvm(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.geom.check(v.len(), self.m())?;
        let inv: Vec<f64> = self.eigenvalues.iter().map(|l| 1.0 / l).collect();
        Ok(self.geom.block_apply(v, &inv))
    }

    pub fn toeplitz_mvm_batch(&self, vs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        vs.par_iter().map(|v| self.toeplitz_mvm(v)).collect()
    }

    pub fn precond_mvm_batch(&self, vs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let inv: Vec<f64> = self.eigenvalues.iter().map(|l| 1.0 / l).collect();
        vs.par_iter()
            .map(|v| {
                self.geom.check(v.len(), self.m())?;
                Ok(self.geom.block_apply(v, &inv))
            })
            .collect()
    }

    /// `K` as a solver operator.
    pub fn gram(&self) -> GramOperator<'_> {
        GramOperator { spec: self }
    }

    /// Circulant-inverse preconditioner as a solver operator.
    pub fn preconditioner(&self) -> CirculantPreconditioner {
        CirculantPreconditioner {
            geom: self.geom.clone(),
            inv: self.eigenvalues.iter().map(|l| 1.0 / l).collect(),
        }
    }

    pub fn root(&self) -> RootOperator {
        RootOperator {
            geom: self.geom.clone(),
            sqrt_eigenvalues: self.eigenvalues.iter().map(|l| l.sqrt()).collect(),
        }
    }
}

/// `K` backed by the circulant spectrum.
#[derive(Debug, Clone, Copy)]
pub struct GramOperator<'a> {
    spec: &'a CirculantSpectrum,
}

impl LinearOperator for GramOperator<'_> {
    fn dim(&self) -> usize {
        self.spec.m()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.spec.geom.block_apply(v, &self.spec.raw)
    }
}

/// Leading block of the inverse circulant.
#[derive(Debug, Clone)]
pub struct CirculantPreconditioner {
    geom: Arc<Embedding>,
    inv: Vec<f64>,
}

impl LinearOperator for CirculantPreconditioner {
    fn dim(&self) -> usize {
        self.geom.m()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.geom.block_apply(v, &self.inv)
    }
}

/// The rectangular root `R`, the first row block of `C^{1/2}`.
#[derive(Debug, Clone)]
pub struct RootOperator {
    geom: Arc<Embedding>,
    sqrt_eigenvalues: Vec<f64>,
}

impl RootOperator {
    pub fn sqrt_eigenvalues(&self) -> &[f64] {
        &self.sqrt_eigenvalues
    }

    pub fn m(&self) -> usize {
        self.geom.m()
    }

    pub fn embedded_len(&self) -> usize {
        self.geom.n()
    }

    /// `Rᵀ v`: `C^{1/2}` applied to the zero-padded `v`, full embedded length.
    pub fn root_mvm_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.geom.check(v.len(), self.m())?;
        let mut buf = self.geom.zero_pad(v);
        self.geom.filter(&mut buf, &self.sqrt_eigenvalues);
        Ok(buf.into_iter().map(|z| z.re).collect())
    }

    /// `R u`: `C^{1/2} u` truncated to the leading block.
    pub fn root_mvm(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.geom.check(u.len(), self.embedded_len())?;
        let mut buf: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.geom.filter(&mut buf, &self.sqrt_eigenvalues);
        Ok(self.geom.lead.iter().map(|&j| buf[j].re).collect())
    }

    pub fn root_mvm_t_batch(&self, vs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        vs.par_iter().map(|v| self.root_mvm_t(v)).collect()
    }

    pub fn root_mvm_batch(&self, us: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        us.par_iter().map(|u| self.root_mvm(u)).collect()
    }
}

/// `T z` for a general (possibly non-symmetric) 1D Toeplitz matrix with the
/// given first column and first row, via a circulant embedding of size `2n`.
pub fn toeplitz_mm(first_col: &[f64], first_row: &[f64], z: &[f64]) -> Vec<f64> {
    let n = z.len();
    assert!(first_col.len() == n && first_row.len() == n && n > 0);
    // circulant first column: [col_0..col_{n-1}, 0, row_{n-1}..row_1]
    let mut c = vec![Complex64::default(); 2 * n];
    for i in 0..n {
        c[i] = Complex64::new(first_col[i], 0.0);
    }
    for k in 1..n {
        c[2 * n - k] = Complex64::new(first_row[k], 0.0);
    }
    let plan = FftNd::new(&[2 * n]);
    let mut v = vec![Complex64::default(); 2 * n];
    for (i, &x) in z.iter().enumerate() {
        v[i] = Complex64::new(x, 0.0);
    }
    plan.forward(&mut c);
    plan.forward(&mut v);
    for (a, b) in v.iter_mut().zip(&c) {
        *a *= b;
    }
    plan.inverse(&mut v);
    v[..n].iter().map(|z| z.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Family;
    use approx::assert_relative_eq;

    #[test]
    fn embed_examples() {
        assert_eq!(
            circulant_embed(&[1.0, 0.5, 0.25], &[3]),
            vec![1.0, 0.5, 0.25, 0.0, 0.25, 0.5]
        );
        assert_eq!(circulant_embed(&[7.0], &[1]), vec![7.0, 0.0]);
        // 2x1: rows [a],[b] -> 4x2
        assert_eq!(
            circulant_embed(&[1.0, 2.0], &[2, 1]),
            vec![1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0, 0.0]
        );
    }

    #[test]
    fn spectrum_example() {
        let op = ToeplitzOperator::new(vec![1.0, 0.5, 0.25], vec![3]).unwrap();
        let s = CirculantSpectrum::new(&op, 1e-10).unwrap();
        for (a, b) in s.eigenvalues().iter().zip([2.5, 1.25, 0.25, 0.5, 0.25, 1.25]) {
            assert_relative_eq!(*a, b, epsilon = 1e-14);
        }
        assert_eq!(s.floor_applied(), 0);
        assert!(s.max_imag_rel() < 1e-12);
    }

    #[test]
    fn white_kernel() {
        let mut row = vec![0.0; 12];
        row[0] = 2.0;
        let op = ToeplitzOperator::new(row, vec![3, 4]).unwrap();
        let s = CirculantSpectrum::new(&op, 1e-10).unwrap();
        assert!(s.eigenvalues().iter().all(|&l| (l - 2.0).abs() < 1e-14));
        let v: Vec<f64> = (0..12).map(|i| i as f64 - 3.0).collect();
        let kv = s.toeplitz_mvm(&v).unwrap();
        let pv = s.precond_mvm(&v).unwrap();
        for i in 0..12 {
            assert_relative_eq!(kv[i], 2.0 * v[i], epsilon = 1e-13);
            assert_relative_eq!(pv[i], v[i] / 2.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn small_mvm() {
        let op = ToeplitzOperator::new(vec![1.0, 0.5], vec![2]).unwrap();
        // the embedding [1, 0.5, 0, 0.5] has a zero eigenvalue
        assert!(matches!(
            CirculantSpectrum::new(&op, 1e-10),
            Err(Error::TooManyClamped { .. })
        ));
        let s = CirculantSpectrum::with_clamp_limit(&op, 1e-10, 1.0).unwrap();
        let kv = s.toeplitz_mvm(&[1.0, 1.0]).unwrap();
        assert_relative_eq!(kv[0], 1.5, epsilon = 1e-14);
        assert_relative_eq!(kv[1], 1.5, epsilon = 1e-14);
        assert!(matches!(
            s.toeplitz_mvm(&[1.0]),
            Err(Error::ShapeMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn root_zero_and_white() {
        let mut row = vec![0.0; 5];
        row[0] = 1.0;
        let s = CirculantSpectrum::new(&ToeplitzOperator::new(row, vec![5]).unwrap(), 1e-10).unwrap();
        let r = s.root();
        let v = [1.0, -2.0, 3.0, 0.5, 4.0];
        let rt = r.root_mvm_t(&v).unwrap();
        for (i, x) in rt.iter().enumerate() {
            let want = if i < 5 { v[i] } else { 0.0 };
            assert_relative_eq!(*x, want, epsilon = 1e-14);
        }
        let u: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ru = r.root_mvm(&u).unwrap();
        for i in 0..5 {
            assert_relative_eq!(ru[i], u[i], epsilon = 1e-13);
        }
        assert!(r.root_mvm_t(&[0.0; 5]).unwrap().iter().all(|x| *x == 0.0));
        assert!(r.root_mvm(&[0.0; 10]).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn too_many_clamped_is_an_error() {
        // Smooth kernel on a very fine grid: most of the spectrum underflows.
        let k = KernelSpec::isotropic(Family::SquaredExponential, 1.0, 1.0, 1).unwrap();
        let grid = InducingGrid::new(vec![200], vec![0.01], vec![0.0]).unwrap();
        assert!(matches!(
            CirculantSpectrum::from_kernel(&k, &grid),
            Err(Error::TooManyClamped { .. })
        ));
    }

    #[test]
    fn general_toeplitz_mm() {
        let col = [1.0, 2.0, 3.0];
        let row = [1.0, -1.0, 0.5];
        let z = [0.3, -0.7, 1.1];
        let got = toeplitz_mm(&col, &row, &z);
        let t = |i: usize, j: usize| if i >= j { col[i - j] } else { row[j - i] };
        for i in 0..3 {
            let want: f64 = (0..3).map(|j| t(i, j) * z[j]).sum();
            assert_relative_eq!(got[i], want, epsilon = 1e-14);
        }
    }
}
