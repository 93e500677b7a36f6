//! Training loop and posterior prediction.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BlockLayout, InducingGrid};
use crate::hypergrad::elbo_hyper_grad;
use crate::kernel::{KernelSpec, OperatorTag};
use crate::solver::dot;
use crate::structured::{CirculantSpectrum, RootOperator};
use crate::variational::{accumulate_stats, direct_solve, elbo, ngd_step, BlockGaussian, NaturalParams, WhitenedDatum};
use crate::whitening::{whiten_batch, WhitenOptions};

/// Predictive variances are floored here.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Halvings of the NGD step size tried before giving up on a batch.
const MAX_STEP_HALVINGS: usize = 30;

/// One noisy observation `y = (L f)(x) + ε`, `ε ~ N(0, σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: Vec<f64>,
    pub op: OperatorTag,
    pub y: f64,
    pub sigma: f64,
}

impl Observation {
    /// Integral observations may pass an empty `x`; the segment end is used.
    pub fn new(x: Vec<f64>, op: OperatorTag, y: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::NonPositiveNoise(sigma));
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("observation has non-finite values".into()));
        }
        let x = match (&op, x.is_empty()) {
            (OperatorTag::Integral { b, .. }, true) => b.clone(),
            _ => x,
        };
        Ok(Self { x, op, y, sigma })
    }

    pub fn identity(x: Vec<f64>, y: f64, sigma: f64) -> Result<Self> {
        Self::new(x, OperatorTag::Identity, y, sigma)
    }

    fn validate(&self, kernel: &KernelSpec) -> Result<()> {
        if self.x.len() != kernel.dim() {
            return Err(Error::ShapeMismatch {
                expected: kernel.dim(),
                got: self.x.len(),
            });
        }
        if !(self.sigma > 0.0) {
            return Err(Error::NonPositiveNoise(self.sigma));
        }
        self.op.validate(kernel.dim())?;
        if matches!(self.op, OperatorTag::Derivative { .. }) && !kernel.family().supports_derivatives() {
            return Err(Error::DerivativeNotSupported(kernel.family().name().into()));
        }
        Ok(())
    }

    /// Monte Carlo seed for this observation's integral nodes. Depends only on
    /// `base` and the segment, so the same segment always sees the same nodes.
    pub fn mc_seed(&self, base: u64) -> u64 {
        mc_seed(&self.op, base)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn mc_seed(op: &OperatorTag, base: u64) -> u64 {
    match op {
        OperatorTag::Integral { a, b, .. } => a.iter().chain(b).fold(splitmix(base), |h, v| splitmix(h ^ v.to_bits())),
        _ => base,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Natural-gradient steps on minibatches.
    #[default]
    Ngd,
    /// Closed-form optimum of each batch's statistics.
    Direct,
}

fn default_batch_size() -> usize {
    256
}
fn default_epochs() -> usize {
    20
}
fn default_ngd_lr() -> f64 {
    0.1
}
fn default_pcg_tol() -> f64 {
    1e-10
}
fn default_maxiter_train() -> usize {
    20
}
fn default_maxiter_eval() -> usize {
    50
}
fn default_hyper_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub kernel: KernelSpec,
    pub grid: InducingGrid,
    /// Block shape over the doubled (whitened) grid; each entry divides `2M_d`.
    pub block_dims: Vec<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_ngd_lr")]
    pub ngd_lr: f64,
    /// Step on the log hyperparameters per unit of `∂ELBO/N`; 0 keeps θ fixed.
    #[serde(default)]
    pub hyper_lr: f64,
    /// Epochs between hyperparameter steps.
    #[serde(default = "default_hyper_every")]
    pub hyper_every: usize,
    #[serde(default = "default_pcg_tol")]
    pub pcg_tol: f64,
    #[serde(default = "default_maxiter_train")]
    pub pcg_maxiter_train: usize,
    #[serde(default = "default_maxiter_eval")]
    pub pcg_maxiter_eval: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Whiten every observation once and reuse across epochs. Only valid with
    /// fixed hyperparameters.
    #[serde(default)]
    pub cache_whitened: bool,
}

impl FitConfig {
    /// Config with defaults for everything but the model itself.
    pub fn new(kernel: KernelSpec, grid: InducingGrid, block_dims: Vec<usize>) -> Self {
        Self {
            kernel,
            grid,
            block_dims,
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            ngd_lr: default_ngd_lr(),
            hyper_lr: 0.0,
            hyper_every: default_hyper_every(),
            pcg_tol: default_pcg_tol(),
            pcg_maxiter_train: default_maxiter_train(),
            pcg_maxiter_eval: default_maxiter_eval(),
            seed: 0,
            optimizer: Optimizer::Ngd,
            cache_whitened: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.dim() != self.grid.ndim() {
            return Err(Error::InvalidConfig(format!(
                "kernel has {} dimensions but grid has {}",
                self.kernel.dim(),
                self.grid.ndim()
            )));
        }
        BlockLayout::new(&self.grid.embedded_dims(), &self.block_dims)?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.ngd_lr > 0.0 && self.ngd_lr <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ngd_lr must lie in (0, 1], got {}",
                self.ngd_lr
            )));
        }
        if !(self.hyper_lr >= 0.0 && self.hyper_lr.is_finite()) {
            return Err(Error::InvalidConfig("hyper_lr must be finite and non-negative".into()));
        }
        if self.hyper_every == 0 {
            return Err(Error::InvalidConfig("hyper_every must be at least 1".into()));
        }
        if !(self.pcg_tol > 0.0) {
            return Err(Error::InvalidConfig("pcg_tol must be positive".into()));
        }
        if self.pcg_maxiter_train == 0 || self.pcg_maxiter_eval < self.pcg_maxiter_train {
            return Err(Error::InvalidConfig(
                "need 1 <= pcg_maxiter_train <= pcg_maxiter_eval".into(),
            ));
        }
        if self.cache_whitened && self.hyper_lr > 0.0 {
            return Err(Error::InvalidConfig(
                "cache_whitened requires fixed hyperparameters (hyper_lr = 0)".into(),
            ));
        }
        Ok(())
    }

    fn train_opts(&self) -> WhitenOptions {
        WhitenOptions {
            tol: self.pcg_tol,
            maxiter: self.pcg_maxiter_train,
            strict: false,
        }
    }

    fn eval_opts(&self) -> WhitenOptions {
        WhitenOptions {
            tol: self.pcg_tol,
            maxiter: self.pcg_maxiter_eval,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub elbo: f64,
    pub seconds: f64,
    pub mean_pcg_iters: f64,
}

/// Whitened vectors for a set of observations.
#[derive(Debug, Clone)]
pub struct WhitenedSet {
    pub data: Vec<WhitenedDatum>,
    /// `K⁻¹k*ₙ` for each observation.
    pub solves: Vec<Vec<f64>>,
    /// Total PCG iterations.
    pub iterations: usize,
}

pub fn whiten_observations(
    kernel: &KernelSpec,
    grid: &InducingGrid,
    spec: &CirculantSpectrum,
    root: &RootOperator,
    obs: &[Observation],
    mc_base: u64,
    opts: &WhitenOptions,
) -> Result<WhitenedSet> {
    let cov: Vec<(Vec<f64>, f64)> = obs
        .par_iter()
        .map(|o| {
            let seed = o.mc_seed(mc_base);
            Ok((
                kernel.cross_cov(grid, &o.x, &o.op, seed)?,
                kernel.transformed_var(&o.x, &o.op, seed)?,
            ))
        })
        .collect::<Result<_>>()?;
    let (kstars, kss): (Vec<Vec<f64>>, Vec<f64>) = cov.into_iter().unzip();
    let white = whiten_batch(spec, root, &kstars, opts)?;
    let iterations = white.iter().map(|w| w.solver_iterations).sum();
    let mut data = Vec::with_capacity(obs.len());
    let mut solves = Vec::with_capacity(obs.len());
    for ((w, o), s) in white.into_iter().zip(obs).zip(kss) {
        data.push(WhitenedDatum {
            y: o.y,
            sigma: o.sigma,
            kss: s,
            k_n: w.k_n,
        });
        solves.push(w.solve);
    }
    Ok(WhitenedSet {
        data,
        solves,
        iterations,
    })
}

/// Trained model: variational posterior plus the operators it was built with.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub q: BlockGaussian,
    pub kernel: KernelSpec,
    pub grid: InducingGrid,
    pub config: FitConfig,
    pub spectrum: CirculantSpectrum,
    pub root: RootOperator,
    pub trace: Vec<TraceRow>,
}

/// Portable posterior state. Block factors are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorState {
    pub config: FitConfig,
    /// Hyperparameters after training; may differ from `config.kernel`.
    pub kernel: KernelSpec,
    pub mean: Vec<f64>,
    pub factors: Vec<Vec<f64>>,
    pub trace: Vec<TraceRow>,
}

impl Posterior {
    fn assemble(q: BlockGaussian, kernel: KernelSpec, config: FitConfig, trace: Vec<TraceRow>) -> Result<Self> {
        let grid = config.grid.clone();
        let spectrum = CirculantSpectrum::from_kernel(&kernel, &grid)?;
        let root = spectrum.root();
        Ok(Self {
            q,
            kernel,
            grid,
            config,
            spectrum,
            root,
            trace,
        })
    }

    pub fn to_state(&self) -> PosteriorState {
        PosteriorState {
            config: self.config.clone(),
            kernel: self.kernel.clone(),
            mean: self.q.mean().to_vec(),
            factors: self
                .q
                .factors()
                .iter()
                .map(|l| l.transpose().as_slice().to_vec())
                .collect(),
            trace: self.trace.clone(),
        }
    }

    pub fn from_state(state: PosteriorState) -> Result<Self> {
        state.config.validate()?;
        let layout = BlockLayout::new(&state.config.grid.embedded_dims(), &state.config.block_dims)?;
        let s = layout.block_size();
        let factors = state
            .factors
            .iter()
            .map(|f| {
                if f.len() != s * s {
                    return Err(Error::ShapeMismatch {
                        expected: s * s,
                        got: f.len(),
                    });
                }
                Ok(DMatrix::from_row_slice(s, s, f))
            })
            .collect::<Result<Vec<_>>>()?;
        let q = BlockGaussian::new(state.mean, factors, layout)?;
        Self::assemble(q, state.kernel, state.config, state.trace)
    }
}

fn whitened_for(
    kernel: &KernelSpec,
    grid: &InducingGrid,
    spec: &CirculantSpectrum,
    root: &RootOperator,
    obs: &[Observation],
    config: &FitConfig,
) -> Result<WhitenedSet> {
    whiten_observations(kernel, grid, spec, root, obs, config.seed, &config.train_opts())
}

/// One NGD step, halving the step size on rejection.
fn ngd_with_backoff(
    params: &NaturalParams,
    stats: &crate::variational::BatchStats<'_>,
    batch: &[WhitenedDatum],
    q: &BlockGaussian,
    lr: f64,
) -> Result<(NaturalParams, BlockGaussian)> {
    // With several blocks the mean update is damped block Jacobi, which can
    // overshoot; a step must not lower the batch objective.
    let before = elbo(batch, q, stats.scale())?;
    let slack = 1e-12 * before.abs().max(1.0);
    let mut lr = lr;
    for _ in 0..=MAX_STEP_HALVINGS {
        match ngd_step(params, stats, q, lr) {
            Ok((p, next)) => {
                let after = elbo(batch, &next, stats.scale())?;
                if after >= before - slack {
                    return Ok((p, next));
                }
            }
            Err(Error::StepRejected { .. }) => {}
            Err(e) => return Err(e),
        }
        lr *= 0.5;
    }
    Ok((params.clone(), q.clone()))
}

/// Trains the variational posterior. Errors after training starts come back
/// as [`Error::FitAborted`] carrying the completed epochs.
pub fn fit(config: &FitConfig, data: &[Observation]) -> Result<Posterior> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("no observations".into()));
    }
    for o in data {
        o.validate(&config.kernel)?;
    }
    if config.hyper_lr > 0.0 && data.iter().any(|o| matches!(o.op, OperatorTag::Integral { .. })) {
        return Err(Error::InvalidConfig(
            "hyperparameter learning is not supported with integral observations".into(),
        ));
    }
    let layout = BlockLayout::new(&config.grid.embedded_dims(), &config.block_dims)?;
    let mut trace = Vec::with_capacity(config.epochs);
    match train(config, data, layout, &mut trace) {
        Ok((q, kernel)) => Posterior::assemble(q, kernel, config.clone(), trace),
        Err(e) => Err(Error::FitAborted {
            source: Box::new(e),
            trace,
        }),
    }
}

fn train(
    config: &FitConfig,
    data: &[Observation],
    layout: BlockLayout,
    trace: &mut Vec<TraceRow>,
) -> Result<(BlockGaussian, KernelSpec)> {
    let grid = &config.grid;
    let mut kernel = config.kernel.clone();
    let mut q = BlockGaussian::prior(layout.clone());
    let mut params = NaturalParams::from_gaussian(&q);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut operators: Option<(CirculantSpectrum, RootOperator)> = None;
    let mut cache: Option<WhitenedSet> = None;

    for epoch in 0..config.epochs {
        let start = Instant::now();
        if operators.is_none() {
            let spec = CirculantSpectrum::from_kernel(&kernel, grid)?;
            let root = spec.root();
            operators = Some((spec, root));
        }
        let (spec, root) = operators.as_ref().expect("operators built");
        if config.cache_whitened && cache.is_none() {
            cache = Some(whitened_for(&kernel, grid, spec, root, data, config)?);
        }

        order.shuffle(&mut rng);
        let mut iters = 0usize;
        let mut elbo_sum = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let white = match &cache {
                Some(all) => WhitenedSet {
                    data: batch.iter().map(|&i| all.data[i].clone()).collect(),
                    solves: Vec::new(),
                    iterations: 0,
                },
                None => {
                    let obs: Vec<Observation> = batch.iter().map(|&i| data[i].clone()).collect();
                    whitened_for(&kernel, grid, spec, root, &obs, config)?
                }
            };
            iters += white.iterations;
            let scale = n as f64 / batch.len() as f64;
            let stats = accumulate_stats(&white.data, scale, &layout)?;
            match config.optimizer {
                Optimizer::Ngd => {
                    let (p, next) = ngd_with_backoff(&params, &stats, &white.data, &q, config.ngd_lr)?;
                    params = p;
                    q = next;
                }
                Optimizer::Direct => {
                    q = direct_solve(&stats, config.pcg_tol, 10 * q.len().max(100))?;
                    params = NaturalParams::from_gaussian(&q);
                }
            }
            elbo_sum += elbo(&white.data, &q, scale)?;
            n_batches += 1;
        }
        let estimate = elbo_sum / n_batches as f64;
        if !estimate.is_finite() {
            return Err(Error::NonFiniteObjective { epoch });
        }

        if config.hyper_lr > 0.0 && (epoch + 1) % config.hyper_every == 0 {
            let g = elbo_hyper_grad(&kernel, grid, &q, data, 1.0, &config.eval_opts())?;
            if g.dlog_theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteObjective { epoch });
            }
            let step: Vec<f64> = kernel
                .log_params()
                .iter()
                .zip(&g.dlog_theta)
                .map(|(p, d)| p + config.hyper_lr * d / n as f64)
                .collect();
            kernel = kernel
                .with_log_params(&step)
                .map_err(|e| Error::HyperparameterDiverged {
                    epoch,
                    reason: e.to_string(),
                })?;
            operators = None;
        }

        trace.push(TraceRow {
            epoch,
            elbo: estimate,
            seconds: start.elapsed().as_secs_f64(),
            mean_pcg_iters: if cache.is_some() { 0.0 } else { iters as f64 / n as f64 },
        });
    }
    // cached runs report the one-off whitening cost on the first row
    if let (Some(all), Some(first)) = (&cache, trace.first_mut()) {
        first.mean_pcg_iters = all.iterations as f64 / n as f64;
    }
    Ok((q, kernel))
}

/// Predictive means and variances of the observation functionals.
pub fn predict_transformed(post: &Posterior, queries: &[(Vec<f64>, OperatorTag)]) -> Result<(Vec<f64>, Vec<f64>)> {
    let obs = queries
        .iter()
        .map(|(x, op)| {
            let o = Observation {
                x: if x.is_empty() {
                    match op {
                        OperatorTag::Integral { b, .. } => b.clone(),
                        _ => x.clone(),
                    }
                } else {
                    x.clone()
                },
                op: op.clone(),
                y: 0.0,
                sigma: 1.0,
            };
            o.validate(&post.kernel)?;
            Ok(o)
        })
        .collect::<Result<Vec<_>>>()?;
    let white = whiten_observations(
        &post.kernel,
        &post.grid,
        &post.spectrum,
        &post.root,
        &obs,
        post.config.seed,
        &post.config.eval_opts(),
    )?;
    let (means, vars) = white
        .data
        .par_iter()
        .map(|d| {
            let mean = dot(&d.k_n, post.q.mean());
            let var = d.kss - dot(&d.k_n, &d.k_n) + post.q.quad_form(&d.k_n);
            (mean, var.max(VARIANCE_FLOOR))
        })
        .unzip();
    Ok((means, vars))
}

/// Predictive means and variances of the latent function.
pub fn predict_latent(post: &Posterior, xs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let queries: Vec<(Vec<f64>, OperatorTag)> = xs.iter().map(|x| (x.clone(), OperatorTag::Identity)).collect();
    predict_transformed(post, &queries)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub mean_std: f64,
    /// Mean Gaussian log density of the truths under `N(mean, var + σ²)`.
    pub avg_loglik: f64,
}

pub fn metrics(means: &[f64], variances: &[f64], truths: &[f64], sigmas: &[f64]) -> Result<Metrics> {
    let n = means.len();
    for len in [variances.len(), truths.len(), sigmas.len()] {
        if len != n {
            return Err(Error::LengthMismatch { left: n, right: len });
        }
    }
    if n == 0 {
        return Err(Error::InvalidConfig("metrics need at least one prediction".into()));
    }
    let nf = n as f64;
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut std = 0.0;
    let mut ll = 0.0;
    for i in 0..n {
        let e = truths[i] - means[i];
        let v = variances[i] + sigmas[i] * sigmas[i];
        sq += e * e;
        abs += e.abs();
        std += variances[i].sqrt();
        ll += -crate::variational::HALF_LN_2PI - 0.5 * v.ln() - e * e / (2.0 * v);
    }
    Ok(Metrics {
        rmse: (sq / nf).sqrt(),
        mae: abs / nf,
        mean_std: std / nf,
        avg_loglik: ll / nf,
    })
}
