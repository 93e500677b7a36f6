//! `gridgp`: training, prediction, synthetic data and benchmarks.
//!
//! Exit codes: 0 on success, 1 for unreadable or invalid input, 2 when the
//! numerics fail.

mod commands;
mod records;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: impl Display) -> Self {
        Self::input(format!("{}: {e}", path.display()))
    }
}

impl From<gridgp::Error> for Failure {
    fn from(e: gridgp::Error) -> Self {
        Self {
            code: if e.is_numerical() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "gridgp", version, about = "Gaussian processes on gridded inducing points")]
struct Cli {
    /// Seed for every random choice; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Relative residual tolerance for PCG solves.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// PCG iteration cap.
    #[arg(long, global = true)]
    maxiter: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SyntheticKind {
    /// Point observations of a smooth 2D field.
    Field2d,
    /// Line integrals of a density field along segments from the origin.
    Lineintegral3d,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a posterior. Writes the state JSON and a per-epoch trace CSV.
    Fit {
        /// FitConfig JSON.
        #[arg(long)]
        config: PathBuf,
        /// Observation CSV.
        #[arg(long)]
        data: PathBuf,
        /// Posterior state JSON.
        #[arg(long)]
        out: PathBuf,
        /// Trace CSV (default: <out>.trace.csv).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Predict observation functionals from a saved posterior.
    Predict {
        /// Posterior state JSON written by `fit`.
        #[arg(long)]
        state: PathBuf,
        /// Query CSV; a filled `y` column is scored as the truth.
        #[arg(long)]
        data: PathBuf,
        /// Prediction CSV: x_1..x_D, op, mean, std.
        #[arg(long)]
        out: PathBuf,
        /// Metrics JSON when truths are given (default: <out>.metrics.json).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// CG against circulant-preconditioned CG on K x = b.
    BenchPcg {
        /// Kernel families, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "matern25")]
        families: Vec<String>,
        /// Lengthscales, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0.05")]
        lengthscales: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        variance: f64,
        /// Grid shapes such as `25x25`, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "25x25,50x50")]
        sizes: Vec<String>,
        /// Every axis spans [lower, upper].
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        lower: f64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        upper: f64,
        #[arg(long, default_value_t = 25)]
        trials: usize,
        /// Per-trial iteration counts.
        #[arg(long)]
        out: PathBuf,
        /// r_pcg per configuration (default: <out>.summary.csv).
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Per-iteration error norms; skipped when absent.
        #[arg(long)]
        errors: Option<PathBuf>,
    },
    /// Structured whitening timed against the dense Cholesky reference.
    BenchWhiten {
        /// Kernel families, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "matern05,matern25,sqexp")]
        families: Vec<String>,
        /// Grid shapes such as `4096` or `64x64`, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "512,2048,8192")]
        sizes: Vec<String>,
        #[arg(long, default_value_t = 200)]
        n_obs: usize,
        /// Lengthscale in units of the grid spacing.
        #[arg(long, default_value_t = 1.0)]
        lengthscale_ratio: f64,
        /// Timed runs per configuration; the fastest is reported.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Function-only, with-derivative and exact GP fits of a 1D problem.
    DemoDerivative {
        #[arg(long)]
        out_dir: PathBuf,
        /// DerivativeDemoParams JSON; missing fields take defaults.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Seeded synthetic datasets in the observation schema.
    GenSynthetic {
        #[arg(long, value_enum)]
        kind: SyntheticKind,
        /// FieldParams or LineIntegralParams JSON; missing fields take defaults.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Training observations.
        #[arg(long)]
        out: PathBuf,
        /// Held-out probes with truths in `y` (default: <out>.test.csv).
        #[arg(long)]
        test_out: Option<PathBuf>,
        /// Latent truths on a regular grid, line integrals only (default: <out>.latent.csv).
        #[arg(long)]
        latent_out: Option<PathBuf>,
    },
}

/// `dir/stem.csv` → `dir/stem.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::input(format!("--threads: {e}")))?;
    }
    let solver = commands::SolverFlags {
        seed: cli.seed,
        tol: cli.tol,
        maxiter: cli.maxiter,
    };
    match cli.command {
        Command::Fit {
            config,
            data,
            out,
            trace,
        } => {
            let trace = trace.unwrap_or_else(|| sibling(&out, "trace.csv"));
            commands::fit(&config, &data, &out, &trace, &solver)
        }
        Command::Predict {
            state,
            data,
            out,
            metrics,
        } => {
            let metrics = metrics.unwrap_or_else(|| sibling(&out, "metrics.json"));
            commands::predict(&state, &data, &out, &metrics, &solver)
        }
        Command::BenchPcg {
            families,
            lengthscales,
            variance,
            sizes,
            lower,
            upper,
            trials,
            out,
            summary,
            errors,
        } => {
            let summary = summary.unwrap_or_else(|| sibling(&out, "summary.csv"));
            commands::bench_pcg(
                &commands::PcgArgs {
                    families: commands::parse_families(&families)?,
                    lengthscales,
                    variance,
                    sizes: commands::parse_sizes(&sizes)?,
                    lower,
                    upper,
                    trials,
                },
                &out,
                &summary,
                errors.as_deref(),
                &solver,
            )
        }
        Command::BenchWhiten {
            families,
            sizes,
            n_obs,
            lengthscale_ratio,
            repeats,
            out,
        } => commands::bench_whiten(
            &commands::parse_families(&families)?,
            &commands::parse_sizes(&sizes)?,
            n_obs,
            lengthscale_ratio,
            repeats,
            &out,
            &solver,
        ),
        Command::DemoDerivative { out_dir, params } => commands::demo_derivative(&out_dir, params.as_deref(), &solver),
        Command::GenSynthetic {
            kind,
            params,
            out,
            test_out,
            latent_out,
        } => {
            let test_out = test_out.unwrap_or_else(|| sibling(&out, "test.csv"));
            let latent_out = latent_out.unwrap_or_else(|| sibling(&out, "latent.csv"));
            commands::gen_synthetic(kind, params.as_deref(), &out, &test_out, &latent_out, &solver)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
