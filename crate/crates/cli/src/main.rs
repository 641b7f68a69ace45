//! Command-line front end for the stacking library: synthetic data
//! generation, weight fitting, stacked leave-one-out scoring, population
//! bound checks, and merging raw log-likelihood draws into a density table.
//!
//! Every run writes its artifacts plus a `manifest.json` into `--out`;
//! reruns with the same arguments reproduce the artifacts and the manifest
//! bit-for-bit except for the recorded wall time. Failures print a single
//! JSON object to stderr and exit with 2 (bad input), 3 (sampler
//! diagnostics), or 4 (internal numerical failure).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use stacking_core::Error;

mod commands;
mod manifest;

#[derive(Parser)]
#[command(name = "stacking", version, about = "Input-dependent model averaging tools")]
struct Cli {
    /// Worker threads for parallel chains; defaults to $STACKING_THREADS,
    /// then to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic data set with a fixed seed.
    Simulate(SimulateArgs),
    /// Fit combination weights to a log predictive density table.
    Fit(FitArgs),
    /// Score a weight fit by stacked leave-one-out log density.
    Loo(LooArgs),
    /// Population-level weight curves and separability bound checks.
    Theory(TheoryArgs),
    /// Merge per-model log-likelihood draw tables into one density table.
    Merge(MergeArgs),
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[command(subcommand)]
    generator: Generator,

    /// RNG seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory (created if absent). Not part of the hashed
    /// configuration: reruns into different directories compare equal.
    #[arg(long, global = true)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Serialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
enum Generator {
    /// Grouped two-point data: J cells with per-cell model quality.
    Cells {
        /// Number of cells J (≥ 2).
        #[arg(long, default_value_t = 2)]
        cells: usize,
        /// Number of candidate models K (≥ 2).
        #[arg(long, default_value_t = 2)]
        models: usize,
        /// Rows per cell, comma-separated; a single value is repeated.
        #[arg(long, value_delimiter = ',', default_value = "50")]
        per_cell: Vec<usize>,
        /// Spread of per-cell model quality.
        #[arg(long, default_value_t = 1.0)]
        effect: f64,
    },
    /// Two uniform mixtures with overlap mass delta on each other's support.
    SpikeSlab {
        #[arg(long)]
        delta: f64,
        /// Observations to draw.
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// x ~ U(0,1), y ~ Bernoulli(x); constant-1/2 model vs sqrt(x) model.
    Bernoulli {
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Nonlinear regression curve with optional outlier contamination.
    Neal {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        outlier_prob: f64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Method {
    /// One shared weight vector (multiplicative EM).
    Complete,
    /// Independent weights per cell (EM per cell).
    Nopool,
    /// Partially pooled input-dependent weights (HMC).
    Hier,
}

#[derive(Args, Serialize)]
struct FitArgs {
    #[arg(long, value_enum)]
    method: Method,

    /// Log predictive density table, `obs_id,M1,...,MK` CSV.
    #[arg(long)]
    lpd: PathBuf,

    /// Feature table, `obs_id,cell,f1,...` CSV; required for nopool and hier.
    #[arg(long)]
    features: Option<PathBuf>,

    /// Prior description JSON for hier; defaults to the basic prior.
    #[arg(long)]
    prior: Option<PathBuf>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// HMC chains (hier only).
    #[arg(long, default_value_t = 4)]
    chains: usize,

    /// Warmup iterations per chain (hier only).
    #[arg(long, default_value_t = 500)]
    warmup: usize,

    /// Post-warmup draws per chain (hier only).
    #[arg(long, default_value_t = 500)]
    draws: usize,

    /// Dual-averaging acceptance target (hier only).
    #[arg(long, default_value_t = 0.8)]
    target_accept: f64,

    /// Write draws even when convergence diagnostics fail instead of
    /// exiting with code 3.
    #[arg(long, default_value_t = false)]
    allow_unhealthy: bool,

    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct LooArgs {
    /// Log predictive density table; a single-model table (K = 1) is scored
    /// exactly as its column sum, with no draws required.
    #[arg(long)]
    lpd: PathBuf,

    /// Draw table written by `fit --method hier` (required when K ≥ 2).
    #[arg(long)]
    draws: Option<PathBuf>,

    /// Feature table the fit used (required when K ≥ 2).
    #[arg(long)]
    features: Option<PathBuf>,

    /// Prior description JSON the fit used; defaults to the basic prior.
    #[arg(long)]
    prior: Option<PathBuf>,

    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ScenarioArg {
    /// Two uniform mixtures indexed by the overlap mass delta.
    SpikeSlab,
    /// Bernoulli(x) data against constant and sqrt(x) predictors.
    Bernoulli,
}

#[derive(Args, Serialize)]
struct TheoryArgs {
    #[arg(long, value_enum)]
    scenario: ScenarioArg,

    /// Delta values as `start:end:step` or a single number (spike-slab only).
    /// Exactly delta = 0.5 makes the two models identical and is reported
    /// with `stacking_undefined` instead of a weight.
    #[arg(long)]
    delta_grid: Option<String>,

    /// Discretization cells per spike-slab scenario.
    #[arg(long, default_value_t = 2000)]
    cells: usize,

    /// y-grid points for the Bernoulli scenario.
    #[arg(long, default_value_t = 10_000)]
    points: usize,

    /// Margin quantile used to pick the separation level L for the bound
    /// checks.
    #[arg(long, default_value_t = 0.5)]
    margin_quantile: f64,

    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct MergeArgs {
    /// Per-model log-likelihood draw table (S rows × n columns); repeat the
    /// flag once per model, in model order.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,

    /// Tail fraction for Pareto smoothing.
    #[arg(long, default_value_t = 0.2)]
    tail_fraction: f64,

    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

fn exit_info(err: &Error) -> (u8, &'static str) {
    match err {
        Error::Invalid(_)
        | Error::DimensionMismatch(_)
        | Error::NonFinite(_)
        | Error::EmptyCells(_)
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_) => (2, "input"),
        Error::Diagnostics(_) => (3, "diagnostics"),
        Error::Numerical(_) => (4, "internal"),
    }
}

fn init_threads(requested: Option<usize>) {
    let n = requested.or_else(|| {
        std::env::var("STACKING_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        // Ignore failure: the global pool can only be configured once, which
        // is harmless under repeated initialization in tests.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads(cli.threads);
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = exit_info(&err);
            let msg = serde_json::json!({
                "error": { "code": code, "kind": kind, "message": err.to_string() }
            });
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}
