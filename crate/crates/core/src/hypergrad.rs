//! Hyperparameter gradients through Toeplitz solves and the whitening root.
//!
//! For `s = rᵀK⁻¹v`, `∂s/∂c = -∂(aᵀKb)/∂c` with `a = K⁻¹r`, `b = K⁻¹v`, and
//! `∂(aᵀKb)/∂c_k` sums `aᵢbⱼ` over all pairs whose per-dimension absolute
//! displacement is `k`. Those sums are a cross-correlation of `a` and `b`,
//! evaluated on the doubled grid with one FFT pair and then folded over the
//! sign orientations of each displacement.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::FftNd;
use crate::grid::{unravel, InducingGrid};
use crate::kernel::{KernelSpec, OperatorTag};
use crate::model::{whiten_observations, Observation};
use crate::solver::{dot, pcg, pcg_batch};
use crate::structured::{toeplitz_mm, CirculantSpectrum};
use crate::variational::{elbo, BlockGaussian};
use crate::whitening::WhitenOptions;

/// Observations per chunk in the deterministic gradient reduction.
const REDUCE_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct SolveGradient {
    /// Gradient with respect to each first-row entry, C-order over the grid.
    pub dc: Vec<f64>,
    /// `Σ_k dc_k ∂c_k/∂θ_p` in natural parameters `[σ_f², ℓ_1..ℓ_D]`.
    pub dtheta: Vec<f64>,
    /// Same gradient with respect to `[ln σ_f², ln ℓ_1..ln ℓ_D]`.
    pub dlog_theta: Vec<f64>,
}

/// Sums an embedded-shape tensor over both sign orientations of every
/// per-dimension displacement, producing a tensor over `dims`. Zero
/// displacements are counted once.
fn fold_signed(x: &[f64], dims: &[usize], embed_dims: &[usize]) -> Vec<f64> {
    let m: usize = dims.iter().product();
    let nd = dims.len();
    (0..m)
        .map(|i| {
            let k = unravel(i, dims);
            let mut acc = 0.0;
            'mask: for mask in 0..(1usize << nd) {
                let mut idx = 0;
                for d in 0..nd {
                    let flip = mask >> d & 1 == 1;
                    if flip && k[d] == 0 {
                        continue 'mask;
                    }
                    let j = if flip { embed_dims[d] - k[d] } else { k[d] };
                    idx = idx * embed_dims[d] + j;
                }
                acc += x[idx];
            }
            acc
        })
        .collect()
}

fn lead_indices(dims: &[usize], embed_dims: &[usize]) -> Vec<usize> {
    let m: usize = dims.iter().product();
    (0..m)
        .map(|i| crate::grid::ravel(&unravel(i, dims), embed_dims))
        .collect()
}

fn padded_spectrum(plan: &FftNd, lead: &[usize], v: &[f64]) -> Vec<Complex64> {
    let mut buf = vec![Complex64::default(); plan.len()];
    for (&j, &x) in lead.iter().zip(v) {
        buf[j] = Complex64::new(x, 0.0);
    }
    plan.forward(&mut buf);
    buf
}

/// `-∂(aᵀKb)/∂c` from the accumulated cross spectrum `Σ A·conj(B)`.
fn fold_cross_spectrum(plan: &FftNd, mut acc: Vec<Complex64>, dims: &[usize]) -> Vec<f64> {
    plan.inverse(&mut acc);
    let corr: Vec<f64> = acc.iter().map(|z| z.re).collect();
    fold_signed(&corr, dims, plan.shape()).into_iter().map(|v| -v).collect()
}

fn check_len(len: usize, expected: usize) -> Result<()> {
    if len == expected {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, got: len })
    }
}

/// `-∂(aᵀKb)/∂c` for `a = K⁻¹r`, `b = K⁻¹v`, i.e. `∂(rᵀK⁻¹v)/∂c`.
pub fn solve_grad_c(a: &[f64], b: &[f64], dims: &[usize]) -> Result<Vec<f64>> {
    let m: usize = dims.iter().product();
    check_len(a.len(), m)?;
    check_len(b.len(), m)?;
    let embed: Vec<usize> = dims.iter().map(|d| 2 * d).collect();
    let plan = FftNd::new(&embed);
    let lead = lead_indices(dims, &embed);
    let fa = padded_spectrum(&plan, &lead, a);
    let fb = padded_spectrum(&plan, &lead, b);
    let acc = fa.iter().zip(&fb).map(|(x, y)| x * y.conj()).collect();
    Ok(fold_cross_spectrum(&plan, acc, dims))
}

/// The 1D closed form
/// `-(toeplitz_mm(b₁e₁, b, a) + toeplitz_mm(a₁e₁, a, b) - (aᵀb)e₁)`.
pub fn solve_grad_c_1d_toeplitz(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_len(b.len(), a.len())?;
    let n = a.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut col_b = vec![0.0; n];
    col_b[0] = b[0];
    let mut col_a = vec![0.0; n];
    col_a[0] = a[0];
    let t1 = toeplitz_mm(&col_b, b, a);
    let t2 = toeplitz_mm(&col_a, a, b);
    let ab = dot(a, b);
    Ok(t1
        .iter()
        .zip(&t2)
        .enumerate()
        .map(|(k, (x, y))| -(x + y - if k == 0 { ab } else { 0.0 }))
        .collect())
}

fn contract(dc: &[f64], dc_dtheta: &[Vec<f64>]) -> Vec<f64> {
    dc_dtheta.iter().map(|g| dot(dc, g)).collect()
}

fn to_log_space(kernel: &KernelSpec, natural: &[f64]) -> Vec<f64> {
    natural.iter().zip(kernel.params()).map(|(g, p)| g * p).collect()
}

/// Gradient of `rᵀK(θ)⁻¹v`. `cached_b` is `K⁻¹v` from an earlier solve.
#[allow(clippy::too_many_arguments)]
pub fn hyper_grad(
    kernel: &KernelSpec,
    grid: &InducingGrid,
    r: &[f64],
    v: &[f64],
    spec: &CirculantSpectrum,
    tol: f64,
    maxiter: usize,
    cached_b: Option<&[f64]>,
) -> Result<SolveGradient> {
    let m = grid.len();
    check_len(r.len(), m)?;
    check_len(v.len(), m)?;
    let gram = spec.gram();
    let pre = spec.preconditioner();
    let a = pcg(&gram, &pre, r, tol, maxiter)?.require_converged()?.solution;
    let b = match cached_b {
        Some(b) => {
            check_len(b.len(), m)?;
            b.to_vec()
        }
        None => pcg(&gram, &pre, v, tol, maxiter)?.require_converged()?.solution,
    };
    let dc = solve_grad_c(&a, &b, grid.dims())?;
    let dtheta = contract(&dc, &kernel.first_row_grad(grid));
    let dlog_theta = to_log_space(kernel, &dtheta);
    Ok(SolveGradient { dc, dtheta, dlog_theta })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradient {
    /// `scale·Σₙ a'ₙ - KL` at the current hyperparameters.
    pub elbo: f64,
    /// `∂ELBO/∂[ln σ_f², ln ℓ_1..ln ℓ_D]` with `q` held fixed in whitened coordinates.
    pub dlog_theta: Vec<f64>,
    /// Total PCG iterations spent in whitening and adjoint solves.
    pub pcg_iterations: usize,
}

/// Per-chunk partial sums of the gradient pieces.
struct Partial {
    /// `Σ coef·A·conj(K')` for the solve path.
    cross: Vec<Complex64>,
    /// `Σ coef·Re(conj(F pad k')·F w)`, not yet divided by `2N√λ`.
    root: Vec<f64>,
    /// Direct contributions in natural parameters.
    direct: Vec<f64>,
}

impl Partial {
    fn zeros(n: usize, p: usize) -> Self {
        Self {
            cross: vec![Complex64::default(); n],
            root: vec![0.0; n],
            direct: vec![0.0; p],
        }
    }

    fn add(&mut self, other: &Partial) {
        self.cross.iter_mut().zip(&other.cross).for_each(|(a, b)| *a += b);
        self.root.iter_mut().zip(&other.root).for_each(|(a, b)| *a += b);
        self.direct.iter_mut().zip(&other.direct).for_each(|(a, b)| *a += b);
    }
}

/// ELBO and its gradient with respect to the log hyperparameters.
///
/// `kₙ = RᵀK⁻¹k*ₙ` depends on θ through `k*ₙ`, through `K⁻¹` and through the
/// root `R`. With `wₙ = Skₙ - kₙ + (kₙᵀm - yₙ)m` and `aₙ = K⁻¹Rwₙ`,
/// `wₙᵀdkₙ = k'ₙᵀ dR wₙ + aₙᵀdk*ₙ - aₙᵀ dK k'ₙ`. The root term is taken in
/// the spectral domain: `R = P F⁻¹ diag(√λ) F` and `λ = Re F(embed(c))`.
/// A clamped eigenvalue equals `floor·λ_max`, so its sensitivity moves to
/// the largest eigenvalue.
#[allow(clippy::too_many_arguments)]
pub fn elbo_hyper_grad(
    kernel: &KernelSpec,
    grid: &InducingGrid,
    q: &BlockGaussian,
    data: &[Observation],
    scale: f64,
    opts: &WhitenOptions,
) -> Result<ElboGradient> {
    if let Some(o) = data.iter().find(|o| matches!(o.op, OperatorTag::Integral { .. })) {
        return Err(Error::Unsupported(format!(
            "hyperparameter gradients for {} observations",
            o.op.label()
        )));
    }
    let spec = CirculantSpectrum::from_kernel(kernel, grid)?;
    let root = spec.root();
    check_len(q.len(), spec.embedded_len())?;
    let strict = WhitenOptions { strict: true, ..*opts };
    let whitened = whiten_observations(kernel, grid, &spec, &root, data, 0, &strict)?;
    let value = elbo(&whitened.data, q, scale)?;

    // wₙ and the adjoint right-hand sides Rwₙ
    let ws: Vec<Vec<f64>> = whitened
        .data
        .par_iter()
        .map(|d| {
            let km = dot(&d.k_n, q.mean());
            let sk = q.cov_mvm(&d.k_n);
            sk.iter()
                .zip(&d.k_n)
                .zip(q.mean())
                .map(|((s, k), m)| s - k + (km - d.y) * m)
                .collect()
        })
        .collect();
    let rws = root.root_mvm_batch(&ws)?;
    let adj = pcg_batch(&spec.gram(), &spec.preconditioner(), &rws, opts.tol, opts.maxiter)?;
    if let Some(c) = adj.columns.iter().find(|c| !c.converged) {
        return Err(Error::SolveNotConverged {
            iterations: c.iterations,
            relative_residual: c.relative_residual(),
        });
    }
    let pcg_iterations = whitened.iterations + adj.total_iterations();

    let plan = spec.plan();
    let lead = spec.leading_indices();
    let n_embed = spec.embedded_len();
    let p = kernel.n_params();
    let idx: Vec<usize> = (0..data.len()).collect();
    let partials = idx
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut part = Partial::zeros(n_embed, p);
            for &n in chunk {
                let obs = &data[n];
                let coef = -scale / (obs.sigma * obs.sigma);
                let a = &adj.columns[n].solution;
                let kp = &whitened.solves[n];
                let fa = padded_spectrum(plan, lead, a);
                let fk = padded_spectrum(plan, lead, kp);
                let mut fw: Vec<Complex64> = ws[n].iter().map(|&x| Complex64::new(x, 0.0)).collect();
                plan.forward(&mut fw);
                for f in 0..n_embed {
                    part.cross[f] += coef * fa[f] * fk[f].conj();
                    part.root[f] += coef * (fk[f].conj() * fw[f]).re;
                }
                let dks = kernel.cross_cov_grad(grid, &obs.x, &obs.op)?;
                let dkss = kernel.transformed_var_grad(&obs.op)?;
                for k in 0..p {
                    part.direct[k] += coef * (dot(a, &dks[k]) + 0.5 * dkss[k]);
                }
            }
            Ok(part)
        })
        .collect::<Result<Vec<Partial>>>()?;
    let mut total = Partial::zeros(n_embed, p);
    for part in &partials {
        total.add(part);
    }

    let dc_solve = fold_cross_spectrum(plan, total.cross, grid.dims());

    let sqrt_l = root.sqrt_eigenvalues();
    let mut g: Vec<f64> = total
        .root
        .iter()
        .zip(sqrt_l)
        .map(|(x, s)| x / (2.0 * n_embed as f64 * s))
        .collect();
    let max_i = spec.max_index();
    let rel_floor = spec.floor() / spec.raw_eigenvalues()[max_i];
    for &f in spec.clamped_indices() {
        let moved = g[f];
        g[f] = 0.0;
        g[max_i] += rel_floor * moved;
    }
    let mut buf: Vec<Complex64> = g.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    plan.forward(&mut buf);
    let de: Vec<f64> = buf.iter().map(|z| z.re).collect();
    let dc_root = fold_signed(&de, grid.dims(), spec.embed_dims());

    let dc: Vec<f64> = dc_solve.iter().zip(&dc_root).map(|(a, b)| a + b).collect();
    let mut natural = contract(&dc, &kernel.first_row_grad(grid));
    for (n, d) in natural.iter_mut().zip(&total.direct) {
        *n += d;
    }
    Ok(ElboGradient {
        elbo: value,
        dlog_theta: to_log_space(kernel, &natural),
        pcg_iterations,
    })
}
