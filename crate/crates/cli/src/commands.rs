use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use gridgp::bench::{derivative_demo, pcg_convergence, whiten_bench, WhitenBenchRow};
use gridgp::model::PosteriorState;
use gridgp::synthetic::{field2d, line_integrals, DerivativeDemoParams, FieldParams, LineIntegralParams, SyntheticSet};
use gridgp::whitening::WhitenOptions;
use gridgp::{metrics, predict_transformed, Error, Family, FitConfig, InducingGrid, KernelSpec, Posterior, TraceRow};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::records::{read_observations, read_records, write_records, Record};
use crate::{Failure, SyntheticKind};

/// Global flags that reach the numerics.
#[derive(Debug, Clone, Copy, Default)]
pub struct SolverFlags {
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub maxiter: Option<usize>,
}

impl SolverFlags {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let file = File::open(path).map_err(|e| Failure::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Failure::io(path, e))
}

fn read_json_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let file = File::create(path).map_err(|e| Failure::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value).map_err(|e| Failure::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, Failure> {
    csv::Writer::from_path(path).map_err(|e| Failure::io(path, e))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), Failure> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| Failure::io(path, e))?;
    }
    w.flush().map_err(|e| Failure::io(path, e))
}

fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<(), Failure> {
    // an empty trace still gets its header
    let mut w = csv_writer(path)?;
    w.write_record(["epoch", "elbo", "seconds", "mean_pcg_iters"])
        .map_err(|e| Failure::io(path, e))?;
    for r in trace {
        w.write_record([
            r.epoch.to_string(),
            r.elbo.to_string(),
            r.seconds.to_string(),
            r.mean_pcg_iters.to_string(),
        ])
        .map_err(|e| Failure::io(path, e))?;
    }
    w.flush().map_err(|e| Failure::io(path, e))
}

pub fn parse_families(names: &[String]) -> Result<Vec<Family>, Failure> {
    names
        .iter()
        .map(|s| {
            serde_json::from_value(serde_json::Value::String(s.trim().to_string()))
                .map_err(|_| Failure::input(format!("unknown kernel family {s:?}")))
        })
        .collect()
}

/// `"25x25"` → `[25, 25]`.
pub fn parse_sizes(specs: &[String]) -> Result<Vec<Vec<usize>>, Failure> {
    specs
        .iter()
        .map(|s| {
            let dims = s
                .trim()
                .split('x')
                .map(|p| p.parse::<usize>().ok().filter(|&m| m >= 2))
                .collect::<Option<Vec<_>>>();
            dims.ok_or_else(|| Failure::input(format!("grid shape {s:?} must look like 64 or 25x25, each axis >= 2")))
        })
        .collect()
}

fn shape_label(dims: &[usize]) -> String {
    dims.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn fit(config: &Path, data: &Path, out: &Path, trace: &Path, flags: &SolverFlags) -> Result<(), Failure> {
    let mut config: FitConfig = read_json(config)?;
    if let Some(s) = flags.seed {
        config.seed = s;
    }
    if let Some(t) = flags.tol {
        config.pcg_tol = t;
    }
    if let Some(m) = flags.maxiter {
        config.pcg_maxiter_train = m;
        config.pcg_maxiter_eval = config.pcg_maxiter_eval.max(m);
    }
    let data = read_observations(data)?;
    match gridgp::fit(&config, &data) {
        Ok(post) => {
            write_trace(trace, &post.trace)?;
            write_json(out, &post.to_state())
        }
        Err(Error::FitAborted { source, trace: rows }) => {
            write_trace(trace, &rows)?;
            Err(Failure {
                code: if source.is_numerical() { 2 } else { 1 },
                message: format!(
                    "fit aborted after {} epochs: {source}; partial trace in {}",
                    rows.len(),
                    trace.display()
                ),
            })
        }
        Err(e) => Err(e.into()),
    }
}

/// The seed is fixed by the state file so integral queries reuse the training nodes.
pub fn predict(state: &Path, data: &Path, out: &Path, metrics_out: &Path, flags: &SolverFlags) -> Result<(), Failure> {
    let mut state: PosteriorState = read_json(state)?;
    if let Some(t) = flags.tol {
        state.config.pcg_tol = t;
    }
    if let Some(m) = flags.maxiter {
        state.config.pcg_maxiter_eval = m;
        state.config.pcg_maxiter_train = state.config.pcg_maxiter_train.min(m);
    }
    let post = Posterior::from_state(state)?;
    let (dim, records) = read_records(data)?;
    if dim != post.kernel.dim() {
        return Err(Failure::input(format!(
            "queries have {dim} input dimensions but the model has {}",
            post.kernel.dim()
        )));
    }
    let queries: Vec<(Vec<f64>, gridgp::OperatorTag)> = records.iter().map(|r| (r.x.clone(), r.op.clone())).collect();
    let (means, vars) = predict_transformed(&post, &queries)?;

    let mut w = csv_writer(out)?;
    let mut header: Vec<String> = (1..=dim).map(|d| format!("x_{d}")).collect();
    header.extend(["op".into(), "mean".into(), "std".into()]);
    w.write_record(&header).map_err(|e| Failure::io(out, e))?;
    for (i, r) in records.iter().enumerate() {
        let x = match (&r.op, r.x.is_empty()) {
            (gridgp::OperatorTag::Integral { b, .. }, true) => b,
            _ => &r.x,
        };
        let mut row: Vec<String> = x.iter().map(f64::to_string).collect();
        row.extend([r.op.label(), means[i].to_string(), vars[i].sqrt().to_string()]);
        w.write_record(&row).map_err(|e| Failure::io(out, e))?;
    }
    w.flush().map_err(|e| Failure::io(out, e))?;

    let truths: Vec<Option<f64>> = records.iter().map(|r| r.y).collect();
    if truths.iter().any(Option::is_some) {
        let Some(truths) = truths.into_iter().collect::<Option<Vec<f64>>>() else {
            return Err(Failure::input("y must be filled on every query row or on none"));
        };
        let sigmas: Vec<f64> = records.iter().map(|r| r.sigma.unwrap_or(0.0)).collect();
        let m = metrics(&means, &vars, &truths, &sigmas)?;
        write_json(metrics_out, &m)?;
        println!("rmse {:.6}  mae {:.6}  mean std {:.6}", m.rmse, m.mae, m.mean_std);
    }
    Ok(())
}

pub struct PcgArgs {
    pub families: Vec<Family>,
    pub lengthscales: Vec<f64>,
    pub variance: f64,
    pub sizes: Vec<Vec<usize>>,
    pub lower: f64,
    pub upper: f64,
    pub trials: usize,
}

#[derive(Serialize)]
struct PcgTrialRow {
    family: &'static str,
    lengthscale: f64,
    shape: String,
    m: usize,
    trial: usize,
    cg_iterations: usize,
    pcg_iterations: usize,
    ratio: f64,
    cg_converged: bool,
    pcg_converged: bool,
}

#[derive(Serialize)]
struct PcgSummaryRow {
    family: &'static str,
    lengthscale: f64,
    shape: String,
    m: usize,
    trials: usize,
    r_pcg: f64,
    all_converged: bool,
}

#[derive(Serialize)]
struct PcgErrorRow<'a> {
    family: &'static str,
    lengthscale: f64,
    shape: &'a str,
    m: usize,
    trial: usize,
    method: &'static str,
    iteration: usize,
    error: f64,
}

/// Defaults: tolerance 1e-10, iteration cap 100·M.
pub fn bench_pcg(
    args: &PcgArgs,
    out: &Path,
    summary: &Path,
    errors: Option<&Path>,
    flags: &SolverFlags,
) -> Result<(), Failure> {
    if args.trials == 0 {
        return Err(Failure::input("--trials must be at least 1"));
    }
    let tol = flags.tol.unwrap_or(1e-10);
    let mut trial_rows = Vec::new();
    let mut summary_rows = Vec::new();
    let mut error_writer = errors.map(csv_writer).transpose()?;
    for &family in &args.families {
        for &l in &args.lengthscales {
            for dims in &args.sizes {
                let d = dims.len();
                let kernel = KernelSpec::isotropic(family, args.variance, l, d)?;
                let grid = InducingGrid::spanning(&vec![args.lower; d], &vec![args.upper; d], dims)?;
                let m = grid.len();
                let maxiter = flags.maxiter.unwrap_or(100 * m);
                let bench = pcg_convergence(
                    &kernel,
                    &grid,
                    args.trials,
                    tol,
                    maxiter,
                    flags.seed(),
                    errors.is_some(),
                )?;
                let shape = shape_label(dims);
                for (t, trial) in bench.trials.iter().enumerate() {
                    trial_rows.push(PcgTrialRow {
                        family: family.name(),
                        lengthscale: l,
                        shape: shape.clone(),
                        m,
                        trial: t,
                        cg_iterations: trial.cg_iterations,
                        pcg_iterations: trial.pcg_iterations,
                        ratio: trial.ratio(),
                        cg_converged: trial.cg_converged,
                        pcg_converged: trial.pcg_converged,
                    });
                    if let (Some(w), Some(path)) = (error_writer.as_mut(), errors) {
                        for (method, errs) in [("cg", &trial.cg_errors), ("pcg", &trial.pcg_errors)] {
                            for (k, &error) in errs.iter().enumerate() {
                                w.serialize(PcgErrorRow {
                                    family: family.name(),
                                    lengthscale: l,
                                    shape: &shape,
                                    m,
                                    trial: t,
                                    method,
                                    iteration: k + 1,
                                    error,
                                })
                                .map_err(|e| Failure::io(path, e))?;
                            }
                        }
                    }
                }
                println!("{family} l={l} {shape}: r_pcg {:.4}", bench.r_pcg);
                summary_rows.push(PcgSummaryRow {
                    family: family.name(),
                    lengthscale: l,
                    shape,
                    m,
                    trials: args.trials,
                    r_pcg: bench.r_pcg,
                    all_converged: bench.all_converged(),
                });
            }
        }
    }
    if let (Some(mut w), Some(path)) = (error_writer, errors) {
        w.flush().map_err(|e| Failure::io(path, e))?;
    }
    write_rows(out, &trial_rows)?;
    write_rows(summary, &summary_rows)
}

fn na(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| v.to_string())
}

/// Grids span `[0, 1]` on every axis with `ℓ_d = ratio · h_d`. Defaults:
/// tolerance 1e-10, iteration cap 1000.
pub fn bench_whiten(
    families: &[Family],
    sizes: &[Vec<usize>],
    n_obs: usize,
    ratio: f64,
    repeats: usize,
    out: &Path,
    flags: &SolverFlags,
) -> Result<(), Failure> {
    let opts = WhitenOptions {
        tol: flags.tol.unwrap_or(1e-10),
        maxiter: flags.maxiter.unwrap_or(1000),
        strict: false,
    };
    let mut w = csv_writer(out)?;
    w.write_record([
        "family",
        "shape",
        "m",
        "n_obs",
        "structured_seconds",
        "mean_pcg_iters",
        "dense_seconds",
        "max_rel_dev",
    ])
    .map_err(|e| Failure::io(out, e))?;
    for &family in families {
        for dims in sizes {
            let d = dims.len();
            let grid = InducingGrid::spanning(&vec![0.0; d], &vec![1.0; d], dims)?;
            let ls: Vec<f64> = grid.spacing().iter().map(|h| ratio * h).collect();
            let kernel = KernelSpec::new(family, 1.0, ls)?;
            let mut best: Option<WhitenBenchRow> = None;
            for _ in 0..repeats.max(1) {
                let row = whiten_bench(&kernel, &grid, n_obs, flags.seed(), &opts)?;
                best = Some(match best {
                    Some(b) if b.structured_seconds <= row.structured_seconds => b,
                    _ => row,
                });
            }
            let row = best.expect("at least one repeat");
            let shape = shape_label(dims);
            println!(
                "{family} {shape}: structured {:.4}s, dense {}",
                row.structured_seconds,
                row.dense_seconds.map_or_else(|| "n/a".into(), |s| format!("{s:.4}s"))
            );
            w.write_record([
                family.to_string(),
                shape,
                row.m.to_string(),
                row.n_obs.to_string(),
                row.structured_seconds.to_string(),
                row.mean_pcg_iters.to_string(),
                na(row.dense_seconds),
                na(row.max_rel_dev),
            ])
            .map_err(|e| Failure::io(out, e))?;
        }
    }
    w.flush().map_err(|e| Failure::io(out, e))
}

/// Writes `train.csv`, `predictions.csv`, `metrics.csv` and `metrics.json`.
pub fn demo_derivative(out_dir: &Path, params: Option<&Path>, flags: &SolverFlags) -> Result<(), Failure> {
    let params: DerivativeDemoParams = read_json_or_default(params)?;
    let seed = flags.seed();
    let demo = derivative_demo(&params, seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Failure::io(out_dir, e))?;

    let data = gridgp::synthetic::derivative_demo(&params, seed)?;
    let train: Vec<Record> = data.train.iter().map(Record::from).collect();
    write_records(&out_dir.join("train.csv"), 1, &train)?;

    let path = out_dir.join("predictions.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["x_1".to_string(), "truth".to_string()];
    for v in &demo.variants {
        header.push(format!("{}_mean", v.name));
        header.push(format!("{}_std", v.name));
    }
    w.write_record(&header).map_err(|e| Failure::io(&path, e))?;
    for i in 0..demo.test_x.len() {
        let mut row = vec![demo.test_x[i].to_string(), demo.truth[i].to_string()];
        for v in &demo.variants {
            row.push(v.means[i].to_string());
            row.push(v.stds[i].to_string());
        }
        w.write_record(&row).map_err(|e| Failure::io(&path, e))?;
    }
    w.flush().map_err(|e| Failure::io(&path, e))?;

    let path = out_dir.join("metrics.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["variant", "rmse", "mae", "mean_std", "avg_loglik"])
        .map_err(|e| Failure::io(&path, e))?;
    for v in &demo.variants {
        let m = &v.metrics;
        w.write_record([
            v.name.clone(),
            m.rmse.to_string(),
            m.mae.to_string(),
            m.mean_std.to_string(),
            m.avg_loglik.to_string(),
        ])
        .map_err(|e| Failure::io(&path, e))?;
        println!("{:<18} rmse {:.5}  mean std {:.5}", v.name, m.rmse, m.mean_std);
    }
    w.flush().map_err(|e| Failure::io(&path, e))?;

    let table: BTreeMap<&str, &gridgp::Metrics> = demo.variants.iter().map(|v| (v.name.as_str(), &v.metrics)).collect();
    write_json(&out_dir.join("metrics.json"), &table)
}

fn probes(set: &[gridgp::synthetic::Probe]) -> Vec<Record> {
    set.iter()
        .map(|p| Record {
            x: p.x.clone(),
            op: p.op.clone(),
            y: Some(p.truth),
            sigma: None,
        })
        .collect()
}

/// Test and latent files carry noiseless truths in `y` and leave `sigma` empty.
pub fn gen_synthetic(
    kind: SyntheticKind,
    params: Option<&Path>,
    out: &Path,
    test_out: &Path,
    latent_out: &Path,
    flags: &SolverFlags,
) -> Result<(), Failure> {
    let seed = flags.seed();
    let (dim, set): (usize, SyntheticSet) = match kind {
        SyntheticKind::Field2d => {
            let p: FieldParams = read_json_or_default(params)?;
            (2, field2d(&p, seed)?)
        }
        SyntheticKind::Lineintegral3d => {
            let p: LineIntegralParams = read_json_or_default(params)?;
            (p.dim, line_integrals(&p, seed)?)
        }
    };
    let train: Vec<Record> = set.train.iter().map(Record::from).collect();
    write_records(out, dim, &train)?;
    write_records(test_out, dim, &probes(&set.test))?;
    if !set.latent.is_empty() {
        write_records(latent_out, dim, &probes(&set.latent))?;
    }
    Ok(())
}
