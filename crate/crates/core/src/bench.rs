//! Benchmark drivers shared by the CLI and the acceptance tests.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::InducingGrid;
use crate::kernel::{Family, KernelSpec, OperatorTag};
use crate::model::{fit, metrics, predict_latent, FitConfig, Metrics, Observation, Optimizer};
use crate::reference::ExactGp;
use crate::solver::{dot, norm, pcg, pcg_observed, Identity, SolveReport};
use crate::structured::CirculantSpectrum;
use crate::synthetic::{derivative_demo as demo_data, DerivativeDemoParams};
use crate::whitening::{whiten_batch, DenseCholeskyWhitener, WhitenOptions, DENSE_WHITEN_CAP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcgTrial {
    pub cg_iterations: usize,
    pub pcg_iterations: usize,
    pub cg_converged: bool,
    pub pcg_converged: bool,
    /// `‖x_k - x*‖/√M` after each CG iteration.
    pub cg_errors: Vec<f64>,
    /// Same for PCG.
    pub pcg_errors: Vec<f64>,
}

impl PcgTrial {
    pub fn ratio(&self) -> f64 {
        self.pcg_iterations as f64 / self.cg_iterations.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcgBench {
    pub m: usize,
    pub trials: Vec<PcgTrial>,
    /// Mean over trials of PCG iterations divided by CG iterations.
    pub r_pcg: f64,
}

impl PcgBench {
    pub fn all_converged(&self) -> bool {
        self.trials.iter().all(|t| t.cg_converged && t.pcg_converged)
    }
}

fn unit_normal_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..n).map(|_| z.sample(rng)).collect();
    let s = norm(&v);
    v.into_iter().map(|x| x / s).collect()
}

fn traced_solve(
    gram: &dyn crate::solver::LinearOperator,
    pre: &dyn crate::solver::LinearOperator,
    b: &[f64],
    reference: &[f64],
    tol: f64,
    maxiter: usize,
    record: bool,
) -> Result<(SolveReport, Vec<f64>)> {
    let scale = (reference.len() as f64).sqrt();
    let mut errors = Vec::new();
    let report = pcg_observed(gram, pre, b, tol, maxiter, &mut |_, x, _| {
        if record {
            let e: f64 = x.iter().zip(reference).map(|(a, r)| (a - r) * (a - r)).sum();
            errors.push(e.sqrt() / scale);
        }
    })?;
    Ok((report, errors))
}

/// CG and PCG on `K x = b` for `trials` random unit right-hand sides.
///
/// Errors are measured against a reference solve at `tol / 100`.
pub fn pcg_convergence(
    kernel: &KernelSpec,
    grid: &InducingGrid,
    trials: usize,
    tol: f64,
    maxiter: usize,
    seed: u64,
    record_errors: bool,
) -> Result<PcgBench> {
    let spec = CirculantSpectrum::from_kernel(kernel, grid)?;
    let gram = spec.gram();
    let pre = spec.preconditioner();
    let m = grid.len();
    let ident = Identity(m);
    let results = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let b = unit_normal_vec(m, &mut rng);
            let reference = if record_errors {
                pcg(&gram, &pre, &b, tol * 1e-2, maxiter)?.solution
            } else {
                Vec::new()
            };
            let (c, cg_errors) = traced_solve(&gram, &ident, &b, &reference, tol, maxiter, record_errors)?;
            let (p, pcg_errors) = traced_solve(&gram, &pre, &b, &reference, tol, maxiter, record_errors)?;
            Ok(PcgTrial {
                cg_iterations: c.iterations,
                pcg_iterations: p.iterations,
                cg_converged: c.converged,
                pcg_converged: p.converged,
                cg_errors,
                pcg_errors,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let r_pcg = results.iter().map(PcgTrial::ratio).sum::<f64>() / results.len().max(1) as f64;
    Ok(PcgBench {
        m,
        trials: results,
        r_pcg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub family: Family,
    pub lengthscale: f64,
    pub m: usize,
    pub r_pcg: f64,
    pub converged: bool,
}

/// `r_pcg` for 1D grids of `M` evenly spaced points on `[0, 2]`, unit signal
/// variance, over families, lengthscales and sizes.
pub fn pcg_sweep(
    families: &[Family],
    lengthscales: &[f64],
    sizes: &[usize],
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &family in families {
        for &l in lengthscales {
            for &m in sizes {
                let kernel = KernelSpec::isotropic(family, 1.0, l, 1)?;
                let grid = InducingGrid::spanning(&[0.0], &[2.0], &[m])?;
                let b = pcg_convergence(&kernel, &grid, trials, tol, 100 * m, seed, false)?;
                rows.push(SweepRow {
                    family,
                    lengthscale: l,
                    m,
                    r_pcg: b.r_pcg,
                    converged: b.all_converged(),
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhitenBenchRow {
    pub family: Family,
    pub m: usize,
    pub n_obs: usize,
    pub structured_seconds: f64,
    pub mean_pcg_iters: f64,
    /// `None` when `M` exceeds the dense cap.
    pub dense_seconds: Option<f64>,
    /// `max |G_s - G_d| / √(G_d,nn G_d,mm)` over Gram entries `kₙᵀkₘ`.
    pub max_rel_dev: Option<f64>,
}

/// Times structured against dense whitening for `n_obs` random points in the
/// grid's bounding box.
pub fn whiten_bench(
    kernel: &KernelSpec,
    grid: &InducingGrid,
    n_obs: usize,
    seed: u64,
    opts: &WhitenOptions,
) -> Result<WhitenBenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0, 1.0).expect("unit interval");
    let points: Vec<Vec<f64>> = (0..n_obs)
        .map(|_| {
            (0..grid.ndim())
                .map(|d| grid.origin()[d] + unit.sample(&mut rng) * grid.spacing()[d] * (grid.dims()[d] - 1) as f64)
                .collect()
        })
        .collect();
    let kstars = points
        .par_iter()
        .map(|x| kernel.cross_cov(grid, x, &OperatorTag::Identity, 0))
        .collect::<Result<Vec<_>>>()?;

    let start = Instant::now();
    let spec = CirculantSpectrum::from_kernel(kernel, grid)?;
    let root = spec.root();
    let white = whiten_batch(&spec, &root, &kstars, opts)?;
    let structured_seconds = start.elapsed().as_secs_f64();
    let mean_pcg_iters = white.iter().map(|w| w.solver_iterations).sum::<usize>() as f64 / n_obs.max(1) as f64;

    let (dense_seconds, max_rel_dev) = if grid.len() <= DENSE_WHITEN_CAP {
        let start = Instant::now();
        let dense = DenseCholeskyWhitener::new(kernel, grid)?;
        let dk: Vec<Vec<f64>> = kstars.par_iter().map(|k| dense.whiten(k)).collect();
        let secs = start.elapsed().as_secs_f64();
        let ks: Vec<&[f64]> = white.iter().map(|w| w.k_n.as_slice()).collect();
        let diag: Vec<f64> = dk.iter().map(|k| dot(k, k)).collect();
        let dev = (0..n_obs)
            .into_par_iter()
            .map(|i| {
                (0..=i)
                    .map(|j| {
                        let gs = dot(ks[i], ks[j]);
                        let gd = dot(&dk[i], &dk[j]);
                        let scale = (diag[i] * diag[j]).sqrt();
                        if scale > 0.0 {
                            (gs - gd).abs() / scale
                        } else {
                            (gs - gd).abs()
                        }
                    })
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max);
        (Some(secs), Some(dev))
    } else {
        (None, None)
    };
    Ok(WhitenBenchRow {
        family: kernel.family(),
        m: grid.len(),
        n_obs,
        structured_seconds,
        mean_pcg_iters,
        dense_seconds,
        max_rel_dev,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoVariant {
    pub name: String,
    pub metrics: Metrics,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeDemo {
    pub test_x: Vec<f64>,
    pub truth: Vec<f64>,
    pub variants: Vec<DemoVariant>,
}

impl DerivativeDemo {
    pub fn variant(&self, name: &str) -> Option<&DemoVariant> {
        self.variants.iter().find(|v| v.name == name)
    }
}

/// Inducing grid spacing used by the demo, as a fraction of the lengthscale.
pub const DEMO_SPACING_RATIO: f64 = 0.5;

/// Model configuration for the derivative demo: the generating kernel on a
/// grid covering `[-0.5, 1.5]`, full-rank posterior, direct solve.
pub fn demo_config(params: &DerivativeDemoParams, seed: u64) -> Result<FitConfig> {
    let kernel = KernelSpec::isotropic(Family::SquaredExponential, params.variance, params.lengthscale, 1)?;
    let h = DEMO_SPACING_RATIO * params.lengthscale;
    let m = (2.0 / h).round() as usize + 1;
    let grid = InducingGrid::spanning(&[-0.5], &[1.5], &[m])?;
    let mut cfg = FitConfig::new(kernel, grid, vec![2 * m]);
    cfg.epochs = 1;
    cfg.batch_size = usize::MAX;
    cfg.ngd_lr = 1.0;
    cfg.optimizer = Optimizer::Direct;
    cfg.pcg_tol = 1e-11;
    cfg.pcg_maxiter_train = 10_000;
    cfg.pcg_maxiter_eval = 10_000;
    cfg.seed = seed;
    Ok(cfg)
}

fn variant(name: &str, means: Vec<f64>, vars: Vec<f64>, truth: &[f64]) -> Result<DemoVariant> {
    let zeros = vec![0.0; truth.len()];
    let metrics = metrics(&means, &vars, truth, &zeros)?;
    Ok(DemoVariant {
        name: name.into(),
        metrics,
        means,
        stds: vars.iter().map(|v| v.sqrt()).collect(),
    })
}

/// Function-only fit, function-plus-derivative fit and the dense exact GP on
/// the seeded derivative problem.
pub fn derivative_demo(params: &DerivativeDemoParams, seed: u64) -> Result<DerivativeDemo> {
    let data = demo_data(params, seed)?;
    let cfg = demo_config(params, seed)?;
    let test_x: Vec<Vec<f64>> = data.test.iter().map(|p| p.x.clone()).collect();
    let truth: Vec<f64> = data.test.iter().map(|p| p.truth).collect();
    let function_only: Vec<Observation> = data
        .train
        .iter()
        .filter(|o| o.op == OperatorTag::Identity)
        .cloned()
        .collect();
    if function_only.is_empty() {
        return Err(Error::InvalidConfig("the demo needs function observations".into()));
    }

    let mut variants = Vec::new();
    let post = fit(&cfg, &function_only)?;
    let (m, v) = predict_latent(&post, &test_x)?;
    variants.push(variant("function_only", m, v, &truth)?);

    let post = fit(&cfg, &data.train)?;
    let (m, v) = predict_latent(&post, &test_x)?;
    variants.push(variant("with_derivatives", m, v, &truth)?);

    let gp = ExactGp::new(&cfg.kernel, &data.train, seed)?;
    let queries: Vec<(Vec<f64>, OperatorTag)> = test_x.iter().map(|x| (x.clone(), OperatorTag::Identity)).collect();
    let (m, v) = gp.predict(&queries)?;
    variants.push(variant("exact_gp", m, v, &truth)?);

    Ok(DerivativeDemo {
        test_x: test_x.into_iter().map(|x| x[0]).collect(),
        truth,
        variants,
    })
}
