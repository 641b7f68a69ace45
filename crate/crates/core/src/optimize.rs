//! Point-estimate stacking: complete pooling, per-cell (no pooling), and
//! unpenalized additive maximum likelihood.
//!
//! The pooled and per-cell fits use the multiplicative EM update
//!
//! ```text
//! w_k ← (1/n) Σ_i w_k p_{ik} / Σ_l w_l p_{il}
//! ```
//!
//! which is monotone for this concave objective (it is an MM step: Jensen on
//! the mixture log). The additive fit maximizes the same log score over
//! unconstrained softmax scores by projected gradient ascent with Armijo
//! backtracking; on separable data the coefficients are capped at |α| ≤ 30
//! (weights within ~1e−13 of 0/1) and flagged rather than diverging.

use ndarray::{Array2, ArrayView2};

use crate::data::{FeatureSet, LpdMatrix, SimplexWeights, UnconstrainedParams};
use crate::error::{Error, Result};
use crate::simplex::{log_mix, softmax_weights};

/// Iteration controls shared by the fitters.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Relative objective-change tolerance (with a unit floor: iteration
    /// stops when |Δobj| ≤ tol·(1 + |obj|)).
    pub tol: f64,
    /// Kept for API symmetry; the EM fitters are deterministic from uniform
    /// initialization, so restarts only matter for non-concave fits.
    pub restarts: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 100_000,
            tol: 1e-10,
            restarts: 1,
        }
    }
}

impl FitOptions {
    fn check(&self) -> Result<()> {
        if self.tol <= 0.0 {
            return Err(Error::Invalid("tol must be > 0".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Invalid("max_iters must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Result of a pooled EM fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub weights: SimplexWeights,
    /// Final objective: mass-weighted Σ_i m_i log Σ_k w_k p_{ik}, in nats.
    pub objective: f64,
    pub iters: usize,
    pub converged: bool,
    /// Objective after every EM update (index 0 is the initial value);
    /// monotone non-decreasing up to floating-point noise.
    pub trace: Vec<f64>,
}

/// Complete-pooling stacking: one simplex weight vector maximizing
/// Σ_i log Σ_k w_k exp(lpd_{ik}).
///
/// Deterministic: EM starts at uniform weights, which also serves as the
/// tie-break rule (identical models stay at equal weight by symmetry).
pub fn fit_complete_pooling(lpd: &LpdMatrix, opts: &FitOptions) -> Result<FitResult> {
    let mass = vec![1.0; lpd.n()];
    em_weighted(lpd.values().view(), &mass, opts)
}

/// Population / weighted variant of [`fit_complete_pooling`]: rows carry
/// nonnegative masses (grid-cell probabilities), and log densities may be
/// −∞ where a model has zero density. Used by the theory module with
/// grid-cell masses as row weights.
pub fn fit_complete_pooling_weighted(
    log_dens: ArrayView2<'_, f64>,
    row_mass: &[f64],
    opts: &FitOptions,
) -> Result<FitResult> {
    em_weighted(log_dens, row_mass, opts)
}

fn em_weighted(
    log_dens: ArrayView2<'_, f64>,
    row_mass: &[f64],
    opts: &FitOptions,
) -> Result<FitResult> {
    opts.check()?;
    let (n, k) = log_dens.dim();
    if n == 0 || k < 2 {
        return Err(Error::Invalid(format!(
            "need n ≥ 1 rows and K ≥ 2 models, got n={n}, K={k}"
        )));
    }
    if row_mass.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} row masses for {n} rows",
            row_mass.len()
        )));
    }
    if row_mass.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(Error::Invalid("row masses must be finite and ≥ 0".into()));
    }
    let total_mass: f64 = row_mass.iter().sum();
    if total_mass <= 0.0 {
        return Err(Error::Invalid("total row mass is zero".into()));
    }
    for (i, row) in log_dens.rows().into_iter().enumerate() {
        if row_mass[i] > 0.0 && row.iter().all(|&v| v == f64::NEG_INFINITY) {
            return Err(Error::Numerical(format!(
                "zero mixture density: every model has zero density on row {i} with positive mass"
            )));
        }
        if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite(format!("log density in row {i}")));
        }
    }

    let mut w = vec![1.0 / k as f64; k];
    let mut q_sum = vec![0.0; k];
    let objective = |w: &[f64]| -> f64 {
        let mut obj = 0.0;
        for (i, row) in log_dens.rows().into_iter().enumerate() {
            if row_mass[i] > 0.0 {
                obj += row_mass[i] * log_mix(w, row.as_slice().expect("contiguous"));
            }
        }
        obj
    };

    let mut obj = objective(&w);
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iters = 0;
    for _ in 0..opts.max_iters {
        q_sum.iter_mut().for_each(|v| *v = 0.0);
        for (i, row) in log_dens.rows().into_iter().enumerate() {
            if row_mass[i] == 0.0 {
                continue;
            }
            let row = row.as_slice().expect("contiguous");
            let mix = log_mix(&w, row);
            if mix == f64::NEG_INFINITY {
                return Err(Error::Numerical(format!(
                    "zero mixture density encountered on row {i} during EM"
                )));
            }
            for (kk, (wk, l)) in w.iter().zip(row).enumerate() {
                if *wk > 0.0 {
                    q_sum[kk] += row_mass[i] * (wk.ln() + l - mix).exp();
                }
            }
        }
        for (wk, qs) in w.iter_mut().zip(&q_sum) {
            *wk = qs / total_mass;
        }
        // Guard drift: responsibilities sum to 1 per row, so w stays on the
        // simplex up to rounding; renormalize to keep the invariant exact.
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);

        iters += 1;
        let new_obj = objective(&w);
        trace.push(new_obj);
        let delta = (new_obj - obj).abs();
        obj = new_obj;
        if delta <= opts.tol * (1.0 + obj.abs()) {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        weights: SimplexWeights::single(w)?,
        objective: obj,
        iters,
        converged,
        trace,
    })
}

/// Per-cell (no-pooling) stacking: row j of the output is the
/// complete-pooling solution restricted to observations in cell j.
#[derive(Debug, Clone)]
pub struct NoPoolResult {
    /// J×K per-cell weights.
    pub weights: SimplexWeights,
    /// Sum of per-cell objectives, in nats.
    pub objective: f64,
    pub per_cell: Vec<FitResult>,
}

pub fn fit_no_pooling(
    lpd: &LpdMatrix,
    feats: &FeatureSet,
    opts: &FitOptions,
) -> Result<NoPoolResult> {
    if lpd.n() != feats.n() {
        return Err(Error::DimensionMismatch(format!(
            "log-density matrix has {} rows but feature set has {}",
            lpd.n(),
            feats.n()
        )));
    }
    feats.check()?;
    let rows_by_cell = feats.rows_by_cell()?;
    let j = rows_by_cell.len();
    let mut w = Array2::zeros((j, lpd.k()));
    let mut per_cell = Vec::with_capacity(j);
    let mut objective = 0.0;
    for (cell, rows) in rows_by_cell.iter().enumerate() {
        let sub = lpd.select_rows(rows)?;
        let fit = fit_complete_pooling(&sub, opts)?;
        for (kk, v) in fit.weights.row(0).iter().enumerate() {
            w[[cell, kk]] = *v;
        }
        objective += fit.objective;
        per_cell.push(fit);
    }
    Ok(NoPoolResult {
        weights: SimplexWeights::new(w)?,
        objective,
        per_cell,
    })
}

/// Unpenalized additive fit: maximize Σ_i log Σ_k w_k(x_i) p_{ik} over
/// intercepts μ and feature coefficients α, where the score of model k < K
/// at row i is μ_k + Σ_m α_{mk} f_m(x_i) and model K is the softmax
/// reference.
#[derive(Debug, Clone)]
pub struct AdditiveMleFit {
    pub params: UnconstrainedParams,
    /// n×K pointwise weights at the fitted coefficients.
    pub pointwise: SimplexWeights,
    pub objective: f64,
    pub iters: usize,
    pub converged: bool,
    /// Set when any coefficient reached the ±COEF_CAP bound (separable
    /// data degenerating toward pointwise selection).
    pub capped: bool,
}

/// Coefficient bound for the additive MLE; beyond ±30 the softmax is within
/// ~1e−13 of a 0/1 vertex, so larger values only encode divergence.
pub const COEF_CAP: f64 = 30.0;

pub fn fit_additive_mle(
    lpd: &LpdMatrix,
    feats: &FeatureSet,
    opts: &FitOptions,
) -> Result<AdditiveMleFit> {
    opts.check()?;
    if lpd.n() != feats.n() {
        return Err(Error::DimensionMismatch(format!(
            "log-density matrix has {} rows but feature set has {}",
            lpd.n(),
            feats.n()
        )));
    }
    feats.check()?;
    let n = lpd.n();
    let k = lpd.k();
    let m = feats.m();
    let dim = (k - 1) * (m + 1); // per non-reference model: intercept + M coefficients

    // Parameter layout: [mu_1..mu_{K−1}, alpha_{1,1}..alpha_{M,1}, mu is
    // actually stored per model block: block k = [mu_k, alpha_{1..M,k}]].
    let scores = |x: &[f64], i: usize, out: &mut Vec<f64>| {
        out.clear();
        for kk in 0..k - 1 {
            let block = &x[kk * (m + 1)..(kk + 1) * (m + 1)];
            let mut s = block[0];
            for mm in 0..m {
                s += block[1 + mm] * feats.features[[i, mm]];
            }
            out.push(s);
        }
    };

    let values = lpd.values();
    let f_and_grad = |x: &[f64], grad: &mut [f64]| -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut obj = 0.0;
        let mut sc = Vec::with_capacity(k - 1);
        for i in 0..n {
            scores(x, i, &mut sc);
            let w = softmax_weights(&sc);
            let row = values.row(i);
            let row = row.as_slice().expect("contiguous");
            let mix = log_mix(&w, row);
            obj += mix;
            for kk in 0..k - 1 {
                // d mix / d score_k = q_k − w_k with q the posterior
                // model responsibility.
                let q = if w[kk] > 0.0 {
                    (w[kk].ln() + row[kk] - mix).exp()
                } else {
                    0.0
                };
                let g = q - w[kk];
                let block = kk * (m + 1);
                grad[block] += g;
                for mm in 0..m {
                    grad[block + 1 + mm] += g * feats.features[[i, mm]];
                }
            }
        }
        obj
    };

    let project = |x: &mut [f64]| {
        for v in x.iter_mut() {
            *v = v.clamp(-COEF_CAP, COEF_CAP);
        }
    };

    let x0 = vec![0.0; dim];
    let gtol = 1e-9 * n as f64;
    let mut out = armijo_ascent(&f_and_grad, &|_| 0.0, &project, x0, opts.max_iters, gtol);

    // Separable data drive coefficients toward ±∞, but the log score goes
    // numerically flat once the softmax saturates (|score| ≈ 18), so ascent
    // stalls short of the bound. Snap any such runaway coordinate to the cap
    // when doing so does not reduce the objective beyond fp noise; this makes
    // separability visible in the output instead of leaving an arbitrary
    // stall point.
    {
        let mut scratch = vec![0.0; dim];
        let mut obj = f_and_grad(&out.x, &mut scratch);
        for j in 0..dim {
            if out.x[j].abs() > COEF_CAP / 3.0 && out.x[j].abs() < COEF_CAP {
                let saved = out.x[j];
                out.x[j] = COEF_CAP * saved.signum();
                let snapped = f_and_grad(&out.x, &mut scratch);
                if snapped >= obj - 1e-11 * (1.0 + obj.abs()) {
                    obj = snapped;
                } else {
                    out.x[j] = saved;
                }
            }
        }
        out.objective = obj;
    }

    let capped = out.x.iter().any(|v| v.abs() >= COEF_CAP - 1e-9);
    let mut mu = Vec::with_capacity(k - 1);
    let mut alpha = Array2::zeros((m, k - 1));
    for kk in 0..k - 1 {
        let block = &out.x[kk * (m + 1)..(kk + 1) * (m + 1)];
        mu.push(block[0]);
        for mm in 0..m {
            alpha[[mm, kk]] = block[1 + mm];
        }
    }
    let mut w = Array2::zeros((n, k));
    let mut sc = Vec::with_capacity(k - 1);
    for i in 0..n {
        scores(&out.x, i, &mut sc);
        for (kk, v) in softmax_weights(&sc).into_iter().enumerate() {
            w[[i, kk]] = v;
        }
    }
    Ok(AdditiveMleFit {
        params: UnconstrainedParams {
            alpha,
            mu,
            log_sigma: Vec::new(),
            extra: Vec::new(),
        },
        pointwise: SimplexWeights::new(w)?,
        objective: out.objective,
        iters: out.iters,
        converged: out.converged,
        capped,
    })
}

pub(crate) struct AscentResult {
    pub x: Vec<f64>,
    /// Smooth part + penalty at the final iterate.
    pub objective: f64,
    pub iters: usize,
    pub converged: bool,
}

/// Projected/proximal gradient ASCENT with Armijo backtracking on the
/// composite objective F = f + h, where `f_and_grad` evaluates the smooth
/// part and `penalty` a concave quadratic-type part whose prox is folded
/// into `prox_project` (which receives the step size and must also apply
/// any box projection). Monotone in F; deterministic. Converged when the
/// prox-gradient residual ‖x₊−x‖/η drops below `gtol`, or when the
/// objective sits at the floating-point noise floor for several steps.
pub(crate) fn armijo_ascent(
    f_and_grad: &dyn Fn(&[f64], &mut [f64]) -> f64,
    penalty: &dyn Fn(&[f64]) -> f64,
    prox_project: &dyn Fn(&mut [f64]),
    x0: Vec<f64>,
    max_iters: usize,
    gtol: f64,
) -> AscentResult {
    // Fixed-step prox interface: callers that need a true step-dependent
    // prox use `proximal_armijo_ascent` below. Here prox_project is a plain
    // projection (independent of step size).
    proximal_armijo_ascent(
        f_and_grad,
        penalty,
        &|x: &mut [f64], _eta: f64| prox_project(x),
        x0,
        max_iters,
        gtol,
    )
}

/// See [`armijo_ascent`]; `prox` receives (iterate, step) and must apply the
/// scaled proximal map of the concave penalty plus any projection.
pub(crate) fn proximal_armijo_ascent(
    f_and_grad: &dyn Fn(&[f64], &mut [f64]) -> f64,
    penalty: &dyn Fn(&[f64]) -> f64,
    prox: &dyn Fn(&mut [f64], f64),
    x0: Vec<f64>,
    max_iters: usize,
    gtol: f64,
) -> AscentResult {
    let dim = x0.len();
    let mut x = x0;
    let mut grad = vec![0.0; dim];
    let mut f = f_and_grad(&x, &mut grad);
    let mut total = f + penalty(&x);
    let mut eta = 1.0;
    let mut iters = 0;
    let mut converged = false;
    let mut flat_steps = 0;
    if dim == 0 {
        return AscentResult {
            x,
            objective: total,
            iters: 0,
            converged: true,
        };
    }
    let mut cand = vec![0.0; dim];
    let mut cand_grad = vec![0.0; dim];
    for _ in 0..max_iters {
        iters += 1;
        // Backtrack until the prox-gradient sufficient-increase condition
        // f(x₊) ≥ f(x) + ∇f(x)ᵀ(x₊−x) − ‖x₊−x‖²/(2η) holds; it guarantees
        // F(x₊) ≥ F(x) + ‖x₊−x‖²/(2η) for the composite.
        let mut accepted = false;
        let mut f_new = f;
        let mut step_sq = 0.0;
        for _ in 0..80 {
            for i in 0..dim {
                cand[i] = x[i] + eta * grad[i];
            }
            prox(&mut cand, eta);
            step_sq = cand
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            if step_sq == 0.0 {
                accepted = true;
                f_new = f;
                break;
            }
            let lin: f64 = grad
                .iter()
                .zip(cand.iter().zip(&x))
                .map(|(g, (a, b))| g * (a - b))
                .sum();
            f_new = f_and_grad(&cand, &mut cand_grad);
            if f_new.is_finite() && f_new >= f + lin - step_sq / (2.0 * eta) {
                accepted = true;
                break;
            }
            eta *= 0.5;
            if eta < 1e-18 {
                break;
            }
        }
        if !accepted {
            break; // step underflow: objective noise floor reached
        }
        if step_sq == 0.0 {
            converged = true; // prox fixed point (e.g. fully projected)
            break;
        }
        std::mem::swap(&mut x, &mut cand);
        std::mem::swap(&mut grad, &mut cand_grad);
        f = f_new;
        let new_total = f + penalty(&x);
        let delta = new_total - total;
        total = new_total;
        // Prox-gradient displacement is the stationarity residual.
        let disp = (step_sq.sqrt()) / eta;
        if disp <= gtol {
            converged = true;
            break;
        }
        if delta.abs() <= 1e-15 * (1.0 + total.abs()) {
            flat_steps += 1;
            if flat_steps >= 5 {
                converged = true; // objective pinned at fp resolution
                break;
            }
        } else {
            flat_steps = 0;
        }
        eta = (eta * 1.5).min(1e6);
    }
    AscentResult {
        x,
        objective: total,
        iters,
        converged,
    }
}
