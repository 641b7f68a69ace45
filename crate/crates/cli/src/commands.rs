//! Implementations of the five subcommands. Each one reads its inputs,
//! writes artifacts into `--out`, and finishes by writing the run manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3};
use serde::Serialize;
use stacking_core::hier::{self, PriorSpec, WeightDraws};
use stacking_core::io::{self, WeightsReport};
use stacking_core::optimize::{fit_complete_pooling, fit_no_pooling, FitOptions};
use stacking_core::psis::{loo_matrix, stacked_loo, KhatStatus, LogLikDraws, TailConfig};
use stacking_core::sampler::SamplerConfig;
use stacking_core::synth;
use stacking_core::theory::{
    self, pseudo_bma_weight, separation_profile, theorem_bounds, BoundReport, Scenario,
};
use stacking_core::{Error, FeatureSet, LpdMatrix, Result};

use crate::manifest::RunManifest;
use crate::{
    Cmd, FitArgs, Generator, LooArgs, MergeArgs, Method, ScenarioArg, SimulateArgs, TheoryArgs,
};

pub fn run(cmd: Cmd) -> Result<()> {
    let started = Instant::now();
    match cmd {
        Cmd::Simulate(args) => cmd_simulate(args, started),
        Cmd::Fit(args) => cmd_fit(args, started),
        Cmd::Loo(args) => cmd_loo(args, started),
        Cmd::Theory(args) => cmd_theory(args, started),
        Cmd::Merge(args) => cmd_merge(args, started),
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(args: SimulateArgs, started: Instant) -> Result<()> {
    let out = args
        .out
        .as_deref()
        .ok_or_else(|| Error::Invalid("--out is required".into()))?;
    ensure_dir(out)?;
    let mut man = RunManifest::new("simulate", &args, args.seed);

    match &args.generator {
        Generator::Cells {
            cells,
            models,
            per_cell,
            effect,
        } => {
            let sizes = broadcast_sizes(per_cell, *cells)?;
            let draw = synth::gen_cells(*cells, *models, &sizes, *effect, args.seed)?;
            io::write_lpd_csv(&draw.lpd, &out.join("lpd.csv"))?;
            man.output("lpd.csv");
            io::write_features_csv(&draw.features, &out.join("features.csv"))?;
            man.output("features.csv");
            write_json(&out.join("truth.json"), &draw.truth)?;
            man.output("truth.json");
        }
        Generator::SpikeSlab { delta, n } => {
            let draw = synth::gen_spike_slab(*delta, *n, args.seed)?;
            io::write_lpd_csv(&draw.lpd, &out.join("lpd.csv"))?;
            man.output("lpd.csv");
            write_column_csv(&out.join("y.csv"), &[("y", &draw.y)])?;
            man.output("y.csv");
        }
        Generator::Bernoulli { n } => {
            let draw = synth::gen_bernoulli_sqrt(*n, args.seed)?;
            io::write_lpd_csv(&draw.lpd, &out.join("lpd.csv"))?;
            man.output("lpd.csv");
            let y: Vec<f64> = draw.y.iter().map(|&v| v as f64).collect();
            write_column_csv(&out.join("xy.csv"), &[("x", &draw.x), ("y", &y)])?;
            man.output("xy.csv");
        }
        Generator::Neal { n, outlier_prob } => {
            let draw = synth::gen_neal_regression(*n, args.seed, *outlier_prob)?;
            let outlier: Vec<f64> = draw.outlier.iter().map(|&b| b as u8 as f64).collect();
            write_column_csv(
                &out.join("data.csv"),
                &[("x", &draw.x), ("y", &draw.y), ("f", &draw.f), ("outlier", &outlier)],
            )?;
            man.output("data.csv");
        }
    }
    man.write(out, started)
}

fn broadcast_sizes(per_cell: &[usize], j: usize) -> Result<Vec<usize>> {
    if per_cell.len() == 1 {
        Ok(vec![per_cell[0]; j])
    } else if per_cell.len() == j {
        Ok(per_cell.to_vec())
    } else {
        Err(Error::Invalid(format!(
            "--per-cell needs 1 or {j} entries, got {}",
            per_cell.len()
        )))
    }
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

fn cmd_fit(args: FitArgs, started: Instant) -> Result<()> {
    ensure_dir(&args.out)?;
    require_file(&args.lpd)?;
    let lpd = io::read_lpd_csv(&args.lpd)?;
    let mut man = RunManifest::new("fit", &args, args.seed);
    man.input(&args.lpd);

    match args.method {
        Method::Complete => {
            let fit = fit_complete_pooling(&lpd, &FitOptions::default())?;
            let report = WeightsReport::from_simplex(
                "complete",
                &fit.weights,
                fit.objective,
                fit.iters,
                fit.converged,
            );
            report.write_json(&args.out.join("weights.json"))?;
            man.output("weights.json");
        }
        Method::Nopool => {
            let feats = read_features_arg(&args.features, &mut man)?;
            let fit = fit_no_pooling(&lpd, &feats, &FitOptions::default())?;
            let converged = fit.per_cell.iter().all(|c| c.converged);
            let iters = fit.per_cell.iter().map(|c| c.iters).max().unwrap_or(0);
            let report =
                WeightsReport::from_simplex("nopool", &fit.weights, fit.objective, iters, converged);
            report.write_json(&args.out.join("weights.json"))?;
            man.output("weights.json");
        }
        Method::Hier => {
            let feats = read_features_arg(&args.features, &mut man)?;
            let prior = read_prior_arg(&args.prior, &mut man)?;
            let cfg = SamplerConfig {
                chains: args.chains,
                warmup: args.warmup,
                draws_per_chain: args.draws,
                seed: args.seed,
                target_accept: args.target_accept,
                ..SamplerConfig::default()
            };
            let fit = if args.allow_unhealthy {
                hier::fit_hierarchical_unchecked(&lpd, &feats, &prior, &cfg, None)?
            } else {
                hier::fit_hierarchical(&lpd, &feats, &prior, &cfg, None)?
            };

            let objective = train_log_score(&lpd, &fit.wbar);
            let report = WeightsReport::from_simplex(
                "hier",
                &fit.wbar,
                objective,
                fit.n_draws(),
                fit.diagnostics.healthy(),
            );
            report.write_json(&args.out.join("weights.json"))?;
            man.output("weights.json");

            write_draws_csv(
                &args.out.join("draws.csv"),
                fit.params(),
                fit.param_names(),
                args.chains,
            )?;
            man.output("draws.csv");

            let summary = HierSummary {
                n_draws: fit.n_draws(),
                param_names: fit.param_names().to_vec(),
                train_log_score: objective,
                diagnostics: &fit.diagnostics,
                chain_stats: &fit.chain_stats,
            };
            write_json(&args.out.join("summary.json"), &summary)?;
            man.output("summary.json");
        }
    }
    man.write(&args.out, started)
}

#[derive(Serialize)]
struct HierSummary<'a> {
    n_draws: usize,
    param_names: Vec<String>,
    /// Σ_i log Σ_k w̄_k(x_i) exp(lpd_ik) at the posterior-mean weights.
    train_log_score: f64,
    diagnostics: &'a stacking_core::diagnostics::DiagnosticsReport,
    chain_stats: &'a [stacking_core::sampler::ChainStats],
}

fn train_log_score(lpd: &LpdMatrix, w: &stacking_core::SimplexWeights) -> f64 {
    (0..lpd.n())
        .map(|i| hier::combine_predictions(&w.row(i).to_vec(), &lpd.row(i).to_vec()))
        .sum()
}

// ---------------------------------------------------------------------------
// loo
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct LooReport {
    n: usize,
    k: usize,
    elpd: f64,
    worst_khat: Option<f64>,
    n_unreliable: usize,
    pointwise: Vec<f64>,
    khat: Vec<f64>,
    flags: Vec<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

fn khat_flag(status: KhatStatus) -> &'static str {
    match status {
        KhatStatus::Good => "good",
        KhatStatus::Ok => "ok",
        KhatStatus::Unreliable => "unreliable",
        KhatStatus::NotSmoothed => "not_smoothed",
        KhatStatus::Degenerate => "degenerate",
    }
}

fn cmd_loo(args: LooArgs, started: Instant) -> Result<()> {
    ensure_dir(&args.out)?;
    require_file(&args.lpd)?;
    let (values, ids) = io::read_density_columns_csv(&args.lpd)?;
    let mut man = RunManifest::new("loo", &args, 0);
    man.input(&args.lpd);

    let report = if values.ncols() == 1 {
        // One candidate: the mixture is that model and the estimate is the
        // exact sum of its leave-one-out densities.
        let pointwise: Vec<f64> = values.column(0).to_vec();
        LooReport {
            n: pointwise.len(),
            k: 1,
            elpd: pointwise.iter().sum(),
            worst_khat: None,
            n_unreliable: 0,
            pointwise,
            khat: Vec::new(),
            flags: Vec::new(),
            note: Some("single model: elpd is the exact column sum".into()),
        }
    } else {
        let draws_path = require_arg(&args.draws, "--draws is required when K >= 2")?;
        let feats_path = require_arg(&args.features, "--features is required when K >= 2")?;
        require_file(draws_path)?;
        require_file(feats_path)?;
        man.input(draws_path);
        man.input(feats_path);

        let lpd = LpdMatrix::new(values, ids)?;
        let feats = io::read_features_csv(feats_path)?;
        let prior = read_prior_arg(&args.prior, &mut man)?;
        let (cube, names) = read_draws_csv(draws_path)?;
        let wd = WeightDraws::from_saved(&lpd, &feats, &prior, None, cube, &names)?;
        let pw = wd.pointwise_draws()?;
        let sl = stacked_loo(&lpd, pw.view(), &TailConfig::default())?;

        let flags: Vec<&'static str> = sl.status.iter().map(|&s| khat_flag(s)).collect();
        let n_unreliable = sl
            .status
            .iter()
            .filter(|&&s| s == KhatStatus::Unreliable)
            .count();
        let worst = sl.khat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        LooReport {
            n: lpd.n(),
            k: lpd.k(),
            elpd: sl.elpd,
            worst_khat: worst.is_finite().then_some(worst),
            n_unreliable,
            pointwise: sl.pointwise,
            khat: sl.khat,
            flags,
            note: None,
        }
    };

    write_json(&args.out.join("loo.json"), &report)?;
    man.output("loo.json");
    man.write(&args.out, started)
}

// ---------------------------------------------------------------------------
// theory
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct DeltaRow {
    delta: f64,
    /// True exactly at delta = 0.5, where the two models coincide and every
    /// weight vector scores identically.
    stacking_undefined: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    w1_stacking: Option<f64>,
    /// Pseudo-BMA weight of model 1 at sample size 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    w1_bma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bounds: Option<BoundReport>,
}

#[derive(Serialize)]
struct Trends {
    /// Population stacking weight of the better model never decreases as the
    /// models separate (delta shrinking is scanned in grid order).
    w1_stacking_nondecreasing: bool,
    w1_bma_strictly_decreasing: bool,
    /// The two curves move in opposite directions over the scanned grid.
    opposite_directions: bool,
}

#[derive(Serialize)]
struct TheoryReport {
    scenario: String,
    margin_quantile: f64,
    rows: Vec<DeltaRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trends: Option<Trends>,
    /// All four bound checks pass on every defined row.
    all_bounds_pass: bool,
}

fn cmd_theory(args: TheoryArgs, started: Instant) -> Result<()> {
    ensure_dir(&args.out)?;
    let mut man = RunManifest::new("theory", &args, 0);

    let report = match args.scenario {
        ScenarioArg::SpikeSlab => {
            let grid_text = require_arg(
                &args.delta_grid,
                "--delta-grid is required for the spike-slab scenario",
            )?;
            let grid = parse_grid(grid_text)?;
            let mut rows = Vec::with_capacity(grid.len());
            let mut separation = Vec::new();
            for &delta in &grid {
                if (delta - 0.5).abs() < 1e-9 {
                    rows.push(DeltaRow {
                        delta: 0.5,
                        stacking_undefined: true,
                        w1_stacking: None,
                        w1_bma: None,
                        bounds: None,
                    });
                    continue;
                }
                let sc = theory::spike_slab(delta, args.cells)?;
                rows.push(delta_row(delta, &sc, args.margin_quantile)?);
                separation_rows(Some(delta), &sc, &mut separation);
            }
            let trends = compute_trends(&rows);
            let all_pass = rows
                .iter()
                .filter_map(|r| r.bounds.as_ref())
                .all(|b| b.all_pass);
            write_curves_csv(&args.out.join("curves.csv"), &rows)?;
            man.output("curves.csv");
            write_separation_csv(&args.out.join("separation.csv"), &separation)?;
            man.output("separation.csv");
            TheoryReport {
                scenario: "spike_slab".into(),
                margin_quantile: args.margin_quantile,
                rows,
                trends: Some(trends),
                all_bounds_pass: all_pass,
            }
        }
        ScenarioArg::Bernoulli => {
            if args.delta_grid.is_some() {
                return Err(Error::Invalid(
                    "--delta-grid only applies to the spike-slab scenario".into(),
                ));
            }
            let sc = theory::bernoulli_sqrt(args.points)?;
            let row = delta_row(f64::NAN, &sc, args.margin_quantile)?;
            let mut separation = Vec::new();
            separation_rows(None, &sc, &mut separation);
            write_separation_csv(&args.out.join("separation.csv"), &separation)?;
            man.output("separation.csv");
            let all_pass = row.bounds.as_ref().is_some_and(|b| b.all_pass);
            TheoryReport {
                scenario: "bernoulli".into(),
                margin_quantile: args.margin_quantile,
                rows: vec![row],
                trends: None,
                all_bounds_pass: all_pass,
            }
        }
    };

    write_json(&args.out.join("report.json"), &report)?;
    man.output("report.json");
    man.write(&args.out, started)
}

fn delta_row(delta: f64, sc: &Scenario, margin_quantile: f64) -> Result<DeltaRow> {
    let (w, _) = theory::population_stacking_weights(sc)?;
    let bma = pseudo_bma_weight(sc, 1.0);
    let l = sc.margin_quantile(margin_quantile).max(1e-3) * (1.0 - 1e-9);
    let bounds = theorem_bounds(sc, l)?;
    Ok(DeltaRow {
        delta,
        stacking_undefined: false,
        w1_stacking: Some(w[0]),
        w1_bma: Some(bma[0]),
        bounds: Some(bounds),
    })
}

struct SeparationRow {
    delta: Option<f64>,
    l: f64,
    eps_joint: f64,
    eps_strong: f64,
}

fn separation_rows(delta: Option<f64>, sc: &Scenario, out: &mut Vec<SeparationRow>) {
    let mut grid: Vec<f64> = (1..=9)
        .map(|q| sc.margin_quantile(q as f64 / 10.0).max(1e-3))
        .collect();
    grid.dedup();
    for p in separation_profile(sc, &grid) {
        out.push(SeparationRow {
            delta,
            l: p.l,
            eps_joint: p.eps_joint,
            eps_strong: p.eps_strong,
        });
    }
}

fn compute_trends(rows: &[DeltaRow]) -> Trends {
    let defined: Vec<&DeltaRow> = rows.iter().filter(|r| !r.stacking_undefined).collect();
    let mut stack_nondec = true;
    let mut bma_dec = true;
    for pair in defined.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b.w1_stacking.unwrap() < a.w1_stacking.unwrap() - 1e-12 {
            stack_nondec = false;
        }
        if b.w1_bma.unwrap() >= a.w1_bma.unwrap() - 1e-12 {
            bma_dec = false;
        }
    }
    Trends {
        w1_stacking_nondecreasing: stack_nondec,
        w1_bma_strictly_decreasing: bma_dec,
        opposite_directions: stack_nondec && bma_dec,
    }
}

/// `start:end:step` (end-inclusive within 1e-9) or a single value.
fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Invalid(format!("bad grid number {s:?} in {text:?}")))
    };
    let grid = match parts.as_slice() {
        [single] => vec![parse(single)?],
        [start, end, step] => {
            let (start, end, step) = (parse(start)?, parse(end)?, parse(step)?);
            if !(step > 0.0) {
                return Err(Error::Invalid(format!("grid step must be positive, got {step}")));
            }
            if end < start {
                return Err(Error::Invalid(format!(
                    "grid end {end} is below start {start}"
                )));
            }
            let mut grid = Vec::new();
            let mut i = 0usize;
            loop {
                let v = start + i as f64 * step;
                if v > end + 1e-9 {
                    break;
                }
                grid.push(v);
                i += 1;
            }
            grid
        }
        _ => {
            return Err(Error::Invalid(format!(
                "grid must be `start:end:step` or a single value, got {text:?}"
            )))
        }
    };
    for &v in &grid {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Invalid(format!("delta {v} outside [0, 1]")));
        }
    }
    Ok(grid)
}

fn write_curves_csv(path: &Path, rows: &[DeltaRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record([
        "delta",
        "stacking_undefined",
        "w1_stacking",
        "w1_bma",
        "l",
        "eps",
        "elpd_stacking",
        "elpd_best",
        "gain",
        "gain_lower_bound",
        "all_bounds_pass",
    ])?;
    for r in rows {
        let mut rec = vec![fmt(r.delta), r.stacking_undefined.to_string()];
        match &r.bounds {
            Some(b) => {
                let best = b.elpd_models.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                rec.extend([
                    fmt(r.w1_stacking.unwrap()),
                    fmt(r.w1_bma.unwrap()),
                    fmt(b.l),
                    fmt(b.eps),
                    fmt(b.elpd_stacking),
                    fmt(best),
                    fmt(b.gain),
                    fmt(b.t3.g_star),
                    b.all_pass.to_string(),
                ]);
            }
            None => rec.extend(std::iter::repeat(String::new()).take(9)),
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

fn write_separation_csv(path: &Path, rows: &[SeparationRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["delta", "l", "eps_joint", "eps_strong"])?;
    for r in rows {
        wtr.write_record(&[
            r.delta.map(fmt).unwrap_or_default(),
            fmt(r.l),
            fmt(r.eps_joint),
            fmt(r.eps_strong),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// merge
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct MergeModelReport {
    file: String,
    elpd: f64,
    worst_khat: f64,
    n_unreliable: usize,
    flags: Vec<&'static str>,
}

fn cmd_merge(args: MergeArgs, started: Instant) -> Result<()> {
    ensure_dir(&args.out)?;
    let mut man = RunManifest::new("merge", &args, 0);

    let mut models = Vec::new();
    let mut shared_ids: Option<Vec<String>> = None;
    for path in &args.models {
        require_file(path)?;
        man.input(path);
        let (draws, ids) = io::read_loglik_draws_csv(path)?;
        match &shared_ids {
            None => shared_ids = Some(ids),
            Some(first) if *first != ids => {
                return Err(Error::Invalid(format!(
                    "{}: observation ids differ from the first model's",
                    path.display()
                )));
            }
            _ => {}
        }
        models.push(LogLikDraws::new(draws)?);
    }

    let cfg = TailConfig {
        fraction: args.tail_fraction,
        ..TailConfig::default()
    };
    let (lpd, reports) = loo_matrix(&models, &cfg)?;
    // Restore the obs ids from the draw tables; loo_matrix numbers rows.
    let lpd = LpdMatrix::new(lpd.values().clone(), shared_ids.expect("at least one model"))?;
    io::write_lpd_csv(&lpd, &args.out.join("lpd.csv"))?;
    man.output("lpd.csv");

    let per_model: Vec<MergeModelReport> = reports
        .iter()
        .zip(&args.models)
        .map(|(rep, path)| MergeModelReport {
            file: path.display().to_string(),
            elpd: rep.elpd,
            worst_khat: rep.worst_khat(),
            n_unreliable: rep
                .status
                .iter()
                .filter(|&&s| s == KhatStatus::Unreliable)
                .count(),
            flags: rep.status.iter().map(|&s| khat_flag(s)).collect(),
        })
        .collect();
    write_json(&args.out.join("psis.json"), &per_model)?;
    man.output("psis.json");
    man.write(&args.out, started)
}

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{}: file not found", path.display())))
    }
}

fn require_arg<'a, T>(value: &'a Option<T>, msg: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| Error::Invalid(msg.into()))
}

fn read_features_arg(path: &Option<PathBuf>, man: &mut RunManifest) -> Result<FeatureSet> {
    let path = require_arg(path, "--features is required for this method")?;
    require_file(path)?;
    man.input(path);
    io::read_features_csv(path)
}

fn read_prior_arg(path: &Option<PathBuf>, man: &mut RunManifest) -> Result<PriorSpec> {
    match path {
        None => Ok(PriorSpec::basic()),
        Some(p) => {
            require_file(p)?;
            man.input(p);
            let text = std::fs::read_to_string(p)?;
            let prior: PriorSpec = serde_json::from_str(&text)
                .map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?;
            prior.validate()?;
            Ok(prior)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&f, value).map_err(|e| Error::Invalid(e.to_string()))?;
    use std::io::Write;
    writeln!(&f)?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Column table with a 1-based `obs_id` first column.
fn write_column_csv(path: &Path, cols: &[(&str, &[f64])]) -> Result<()> {
    let n = cols.first().map(|(_, v)| v.len()).unwrap_or(0);
    let mut wtr = csv::Writer::from_path(path)?;
    let mut header = vec!["obs_id".to_string()];
    header.extend(cols.iter().map(|(name, _)| name.to_string()));
    wtr.write_record(&header)?;
    for i in 0..n {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(cols.iter().map(|(_, v)| fmt(v[i])));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Draw table: `chain,draw,<param...>`, chain-major, both indices 1-based.
fn write_draws_csv(
    path: &Path,
    params: &Array2<f64>,
    names: &[String],
    chains: usize,
) -> Result<()> {
    let total = params.nrows();
    if chains == 0 || total % chains != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{total} draws do not split into {chains} chains"
        )));
    }
    let per = total / chains;
    let mut wtr = csv::Writer::from_path(path)?;
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    header.extend(names.iter().cloned());
    wtr.write_record(&header)?;
    for s in 0..total {
        let mut rec = vec![(s / per + 1).to_string(), (s % per + 1).to_string()];
        rec.extend(params.row(s).iter().map(|&v| fmt(v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

fn read_draws_csv(path: &Path) -> Result<(Array3<f64>, Vec<String>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || headers.get(0) != Some("chain") || headers.get(1) != Some("draw") {
        return Err(Error::Invalid(format!(
            "{}: expected header `chain,draw,<params...>`",
            path.display()
        )));
    }
    let names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let dim = names.len();

    let mut by_chain: Vec<Vec<f64>> = Vec::new();
    for (row_no, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row_no + 2;
        if rec.len() != dim + 2 {
            return Err(Error::Invalid(format!(
                "{}: row {line} has {} fields, expected {}",
                path.display(),
                rec.len(),
                dim + 2
            )));
        }
        let chain: usize = rec[0].parse().map_err(|_| {
            Error::Invalid(format!("{}: row {line}: bad chain index {:?}", path.display(), &rec[0]))
        })?;
        if chain == 0 {
            return Err(Error::Invalid(format!(
                "{}: row {line}: chain indices are 1-based",
                path.display()
            )));
        }
        if chain > by_chain.len() {
            by_chain.resize(chain, Vec::new());
        }
        let dest = &mut by_chain[chain - 1];
        for field in rec.iter().skip(2) {
            let v: f64 = field.parse().map_err(|_| {
                Error::Invalid(format!(
                    "{}: row {line}: bad number {field:?}",
                    path.display()
                ))
            })?;
            dest.push(v);
        }
    }

    let chains = by_chain.len();
    if chains == 0 {
        return Err(Error::Invalid(format!("{}: no draws", path.display())));
    }
    let per = by_chain[0].len() / dim.max(1);
    for (c, flat) in by_chain.iter().enumerate() {
        if flat.len() != per * dim {
            return Err(Error::Invalid(format!(
                "{}: chain {} has {} draws, chain 1 has {per}",
                path.display(),
                c + 1,
                flat.len() / dim.max(1)
            )));
        }
    }
    let flat: Vec<f64> = by_chain.into_iter().flatten().collect();
    let cube = Array3::from_shape_vec((chains, per, dim), flat)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    Ok((cube, names))
}
