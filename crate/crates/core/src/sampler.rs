//! Hamiltonian Monte Carlo over a user-supplied differentiable log density,
//! with dual-averaging step-size adaptation and diagonal mass-matrix
//! estimation during warmup.
//!
//! Trajectories use a fixed leapfrog integrator with jittered length
//! (uniform on 1..=max_leapfrog) rather than a tree-building scheme; at the
//! problem sizes this crate targets the simpler integrator mixes well and
//! keeps the per-transition cost bounded. Chains are independent and run in
//! parallel; each derives its randomness from (seed, chain index), so output
//! is bit-identical for a given config regardless of thread scheduling.

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::diagnostics::{diagnose, DiagnosticsReport};
use crate::error::{Error, Result};

/// Differentiable log density. Implementations must be pure: `sample` calls
/// this concurrently from several chains.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Writes ∂ log p/∂x into `grad` and returns log p(x).
    fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Serialize)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws_per_chain: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub max_leapfrog: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            warmup: 500,
            draws_per_chain: 500,
            seed: 0,
            target_accept: 0.8,
            max_leapfrog: 64,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Invalid("need at least one chain".into()));
        }
        if self.warmup < 100 {
            return Err(Error::Invalid(format!(
                "warmup must be ≥ 100 for adaptation, got {}",
                self.warmup
            )));
        }
        if self.draws_per_chain == 0 {
            return Err(Error::Invalid("need at least one post-warmup draw".into()));
        }
        if !(0.6..=0.99).contains(&self.target_accept) {
            return Err(Error::Invalid(format!(
                "target_accept must be in [0.6, 0.99], got {}",
                self.target_accept
            )));
        }
        if self.max_leapfrog == 0 {
            return Err(Error::Invalid("max_leapfrog must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Per-chain transition statistics.
#[derive(Debug, Clone, Serialize)]
pub struct ChainStats {
    pub accept_rate: f64,
    pub divergences: usize,
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
}

#[derive(Debug)]
pub struct SampleOutput {
    /// chains × draws_per_chain × dim.
    pub draws: Array3<f64>,
    pub chain_stats: Vec<ChainStats>,
    pub diagnostics: DiagnosticsReport,
}

impl SampleOutput {
    pub fn total_divergences(&self) -> usize {
        self.chain_stats.iter().map(|c| c.divergences).sum()
    }

    /// Pooled draws as (chains·draws) × dim, chain-major.
    pub fn pooled(&self) -> Array2<f64> {
        let (c, n, d) = self.draws.dim();
        let mut out = Array2::zeros((c * n, d));
        for chain in 0..c {
            for i in 0..n {
                for p in 0..d {
                    out[[chain * n + i, p]] = self.draws[[chain, i, p]];
                }
            }
        }
        out
    }
}

/// Energy error above which a transition is declared divergent and rejected.
const DIVERGENCE_NATS: f64 = 1000.0;

/// Run HMC from `init`. Each chain jitters the init point slightly (its own
/// stream), adapts step size by dual averaging toward `target_accept`, and
/// estimates a diagonal mass matrix in the middle warmup window.
pub fn sample(target: &dyn LogDensity, init: &[f64], cfg: &SamplerConfig) -> Result<SampleOutput> {
    cfg.validate()?;
    let dim = target.dim();
    if init.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "init point has {} coordinates, target has {dim}",
            init.len()
        )));
    }
    let mut g0 = vec![0.0; dim];
    let lp0 = target.logp_and_grad(init, &mut g0);
    if !lp0.is_finite() || g0.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(
            "log density or gradient not finite at the initial point".into(),
        ));
    }

    let runs: Result<Vec<ChainRun>> = (0..cfg.chains)
        .into_par_iter()
        .map(|chain| run_chain(target, init, cfg, chain))
        .collect();
    let runs = runs?;

    let mut draws = Array3::zeros((cfg.chains, cfg.draws_per_chain, dim));
    let mut chain_stats = Vec::with_capacity(cfg.chains);
    for (c, run) in runs.into_iter().enumerate() {
        for i in 0..cfg.draws_per_chain {
            for p in 0..dim {
                draws[[c, i, p]] = run.draws[[i, p]];
            }
        }
        chain_stats.push(run.stats);
    }
    let divergences = chain_stats.iter().map(|s| s.divergences).sum();
    let diagnostics = diagnose(&draws, divergences);
    Ok(SampleOutput {
        draws,
        chain_stats,
        diagnostics,
    })
}

struct ChainRun {
    draws: Array2<f64>,
    stats: ChainStats,
}

/// Leapfrog integration in place; returns the final log density, or None as
/// soon as the trajectory leaves the finite range.
pub(crate) fn leapfrog(
    target: &dyn LogDensity,
    x: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    eps: f64,
    inv_mass: &[f64],
    steps: usize,
) -> Option<f64> {
    let mut logp = f64::NAN;
    for step in 0..steps {
        for (pi, gi) in p.iter_mut().zip(grad.iter()) {
            *pi += 0.5 * eps * gi;
        }
        for ((xi, pi), im) in x.iter_mut().zip(p.iter()).zip(inv_mass) {
            *xi += eps * pi * im;
            if !xi.is_finite() {
                return None;
            }
        }
        logp = target.logp_and_grad(x, grad);
        if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        for (pi, gi) in p.iter_mut().zip(grad.iter()) {
            *pi += 0.5 * eps * gi;
        }
        let _ = step;
    }
    Some(logp)
}

fn kinetic(p: &[f64], inv_mass: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_mass).map(|(pi, im)| pi * pi * im).sum::<f64>()
}

/// Doubling heuristic for the initial step size: find eps whose one-step
/// acceptance straddles 1/2.
fn find_initial_step(
    target: &dyn LogDensity,
    x: &[f64],
    inv_mass: &[f64],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let dim = x.len();
    let mut eps = 1.0f64;
    let mut p0 = vec![0.0; dim];
    for (pi, im) in p0.iter_mut().zip(inv_mass) {
        let z: f64 = rng.sample(StandardNormal);
        *pi = z / im.sqrt();
    }
    let mut grad = vec![0.0; dim];
    let lp0 = target.logp_and_grad(x, &mut grad);
    let h0 = -lp0 + kinetic(&p0, inv_mass);
    let log_ratio_at = |eps: f64| -> f64 {
        let mut xt = x.to_vec();
        let mut pt = p0.clone();
        let mut gt = grad.clone();
        match leapfrog(target, &mut xt, &mut pt, &mut gt, eps, inv_mass, 1) {
            Some(lp) => h0 - (-lp + kinetic(&pt, inv_mass)),
            None => f64::NEG_INFINITY,
        }
    };
    let up = log_ratio_at(eps) > (0.5f64).ln();
    for _ in 0..60 {
        eps = if up { eps * 2.0 } else { eps * 0.5 };
        let above = log_ratio_at(eps) > (0.5f64).ln();
        if above != up || !(1e-10..=1e6).contains(&eps) {
            break;
        }
    }
    eps.clamp(1e-10, 1e6)
}

/// Dual-averaging state (Nesterov primal averaging on log step size).
struct DualAverage {
    mu: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    m: f64,
}

impl DualAverage {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64) -> Self {
        DualAverage {
            mu: (10.0 * eps0).ln(),
            h_bar: 0.0,
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            m: 0.0,
        }
    }

    fn update(&mut self, accept_prob: f64, target: f64) {
        self.m += 1.0;
        let frac = 1.0 / (self.m + Self::T0);
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (target - accept_prob);
        self.log_eps = self.mu - self.m.sqrt() / Self::GAMMA * self.h_bar;
        let w = self.m.powf(-Self::KAPPA);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
    }

    fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    fn averaged(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

fn run_chain(
    target: &dyn LogDensity,
    init: &[f64],
    cfg: &SamplerConfig,
    chain: usize,
) -> Result<ChainRun> {
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64);

    let mut x: Vec<f64> = init
        .iter()
        .map(|v| v + rng.random_range(-0.1..0.1))
        .collect();
    let mut grad = vec![0.0; dim];
    let mut logp = target.logp_and_grad(&x, &mut grad);
    if !logp.is_finite() {
        // Jitter landed outside the support; fall back to the exact init.
        x.copy_from_slice(init);
        logp = target.logp_and_grad(&x, &mut grad);
    }

    let mut inv_mass = vec![1.0; dim];
    let mut da = DualAverage::new(find_initial_step(target, &x, &inv_mass, &mut rng));

    // Warmup windows: step-size only / mass + step / step-size refinement.
    let w1 = (0.15 * cfg.warmup as f64).round() as usize;
    let w2 = (0.75 * cfg.warmup as f64).round() as usize;
    let mut window_xs: Vec<Vec<f64>> = Vec::new();
    let mut warmup_divergences = 0usize;

    for m in 0..cfg.warmup {
        let eps = da.current();
        let (accept_prob, diverged) =
            transition(target, &mut x, &mut logp, &mut grad, eps, &inv_mass, cfg, &mut rng);
        if diverged {
            warmup_divergences += 1;
        }
        da.update(accept_prob, cfg.target_accept);
        if m >= w1 && m < w2 {
            window_xs.push(x.clone());
        }
        if m + 1 == w2 && !window_xs.is_empty() {
            // Regularized diagonal variance of the middle window, shrunk
            // toward unit scale like a weak prior on the mass matrix.
            let n = window_xs.len() as f64;
            for d in 0..dim {
                let mean = window_xs.iter().map(|v| v[d]).sum::<f64>() / n;
                let var = window_xs
                    .iter()
                    .map(|v| (v[d] - mean).powi(2))
                    .sum::<f64>()
                    / (n - 1.0).max(1.0);
                inv_mass[d] = (n / (n + 5.0)) * var + (5.0 / (n + 5.0)) * 1e-3;
                if !(inv_mass[d] > 0.0) || !inv_mass[d].is_finite() {
                    inv_mass[d] = 1.0;
                }
            }
            da = DualAverage::new(find_initial_step(target, &x, &inv_mass, &mut rng));
        }
    }
    if warmup_divergences == cfg.warmup {
        return Err(Error::Numerical(format!(
            "chain {chain}: every warmup transition diverged; the target may be \
             unbounded or the gradient inconsistent"
        )));
    }

    let eps = da.averaged().clamp(1e-12, 1e6);
    let mut draws = Array2::zeros((cfg.draws_per_chain, dim));
    let mut divergences = 0usize;
    let mut accept_sum = 0.0;
    for i in 0..cfg.draws_per_chain {
        let (accept_prob, diverged) =
            transition(target, &mut x, &mut logp, &mut grad, eps, &inv_mass, cfg, &mut rng);
        if diverged {
            divergences += 1;
        }
        accept_sum += accept_prob;
        for d in 0..dim {
            draws[[i, d]] = x[d];
        }
    }
    Ok(ChainRun {
        draws,
        stats: ChainStats {
            accept_rate: accept_sum / cfg.draws_per_chain as f64,
            divergences,
            step_size: eps,
            inv_mass,
        },
    })
}

/// One HMC transition; mutates (x, logp, grad) on acceptance and returns
/// (acceptance probability, diverged flag).
#[allow(clippy::too_many_arguments)]
fn transition(
    target: &dyn LogDensity,
    x: &mut Vec<f64>,
    logp: &mut f64,
    grad: &mut Vec<f64>,
    eps: f64,
    inv_mass: &[f64],
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> (f64, bool) {
    let dim = x.len();
    let mut p = vec![0.0; dim];
    for (pi, im) in p.iter_mut().zip(inv_mass) {
        let z: f64 = rng.sample(StandardNormal);
        *pi = z / im.sqrt();
    }
    let h0 = -*logp + kinetic(&p, inv_mass);
    let steps = rng.random_range(1..=cfg.max_leapfrog);

    let mut xt = x.clone();
    let mut gt = grad.clone();
    let lpt = leapfrog(target, &mut xt, &mut p, &mut gt, eps, inv_mass, steps);
    let (accept_prob, diverged, proposal) = match lpt {
        Some(lp) => {
            let h1 = -lp + kinetic(&p, inv_mass);
            let delta = h1 - h0;
            if !delta.is_finite() || delta > DIVERGENCE_NATS {
                (0.0, true, None)
            } else {
                ((-delta).exp().min(1.0), false, Some(lp))
            }
        }
        None => (0.0, true, None),
    };
    if let Some(lp) = proposal {
        if rng.random_range(0.0..1.0) < accept_prob {
            *x = xt;
            *grad = gt;
            *logp = lp;
        }
    }
    (accept_prob, diverged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

    /// N(mean, diag(vars)) target.
    struct DiagNormal {
        mean: Vec<f64>,
        vars: Vec<f64>,
    }

    impl LogDensity for DiagNormal {
        fn dim(&self) -> usize {
            self.mean.len()
        }
        fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            let mut lp = 0.0;
            for i in 0..x.len() {
                let d = x[i] - self.mean[i];
                lp -= 0.5 * d * d / self.vars[i];
                grad[i] = -d / self.vars[i];
            }
            lp
        }
    }

    /// 2-dim normal with unit variances and correlation rho.
    struct CorrNormal {
        rho: f64,
    }

    impl LogDensity for CorrNormal {
        fn dim(&self) -> usize {
            2
        }
        fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            let r = self.rho;
            let det = 1.0 - r * r;
            let q = (x[0] * x[0] - 2.0 * r * x[0] * x[1] + x[1] * x[1]) / det;
            grad[0] = -(x[0] - r * x[1]) / det;
            grad[1] = -(x[1] - r * x[0]) / det;
            -0.5 * q
        }
    }

    #[test]
    fn ten_dim_normal_moments() {
        let target = DiagNormal {
            mean: vec![0.0; 10],
            vars: vec![1.0; 10],
        };
        let cfg = SamplerConfig {
            seed: 42,
            draws_per_chain: 1000,
            ..Default::default()
        };
        let out = sample(&target, &[0.0; 10], &cfg).unwrap();
        assert!(out.diagnostics.healthy(), "{:?}", out.diagnostics.complaints());
        let pooled = out.pooled();
        let s = pooled.nrows() as f64;
        for p in 0..10 {
            let col = pooled.column(p);
            let mean = col.mean().unwrap();
            let se = 1.0 / s.sqrt();
            assert!(mean.abs() < 4.0 * se * 3.0, "param {p}: mean {mean}");
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1.0);
            assert!((var - 1.0).abs() < 0.1, "param {p}: var {var}");
        }
    }

    #[test]
    fn correlated_normal_recovers_rho() {
        let target = CorrNormal { rho: 0.9 };
        let cfg = SamplerConfig {
            seed: 7,
            draws_per_chain: 1000,
            ..Default::default()
        };
        let out = sample(&target, &[0.0, 0.0], &cfg).unwrap();
        let pooled = out.pooled();
        let a = pooled.column(0);
        let b = pooled.column(1);
        let (ma, mb) = (a.mean().unwrap(), b.mean().unwrap());
        let cov: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        let corr = cov / (va * vb).sqrt();
        assert!((corr - 0.9).abs() < 0.05, "corr {corr}");
    }

    #[test]
    fn same_seed_bit_identical() {
        let target = DiagNormal {
            mean: vec![1.0, -1.0],
            vars: vec![2.0, 0.5],
        };
        let cfg = SamplerConfig {
            seed: 9,
            warmup: 200,
            draws_per_chain: 100,
            ..Default::default()
        };
        let a = sample(&target, &[0.0, 0.0], &cfg).unwrap();
        let b = sample(&target, &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(a.draws, b.draws);
        let cfg2 = SamplerConfig { seed: 10, ..cfg };
        let c = sample(&target, &[0.0, 0.0], &cfg2).unwrap();
        assert_ne!(a.draws, c.draws);
    }

    #[test]
    fn mass_adaptation_handles_scale_separation() {
        let target = DiagNormal {
            mean: vec![0.0, 0.0],
            vars: vec![1.0, 100.0],
        };
        let cfg = SamplerConfig {
            seed: 3,
            warmup: 800,
            draws_per_chain: 1500,
            ..Default::default()
        };
        let out = sample(&target, &[0.0, 0.0], &cfg).unwrap();
        let pooled = out.pooled();
        let col = pooled.column(1);
        let mean = col.mean().unwrap();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / (pooled.nrows() - 1) as f64;
        assert!((var - 100.0).abs() / 100.0 < 0.15, "var {var}");
        // The adapted inverse mass should reflect the variance gap.
        for st in &out.chain_stats {
            assert!(st.inv_mass[1] / st.inv_mass[0] > 10.0, "{:?}", st.inv_mass);
        }
    }

    #[test]
    fn leapfrog_energy_error_is_second_order() {
        let target = DiagNormal {
            mean: vec![0.0, 0.0],
            vars: vec![1.0, 1.0],
        };
        let x0 = [0.7, -0.3];
        let p0 = [0.4, 1.1];
        let inv_mass = [1.0, 1.0];
        let energy_err = |eps: f64| -> f64 {
            let steps = (1.0 / eps).round() as usize;
            let mut x = x0.to_vec();
            let mut p = p0.to_vec();
            let mut g = vec![0.0; 2];
            let lp0 = target.logp_and_grad(&x, &mut g);
            let h0 = -lp0 + kinetic(&p, &inv_mass);
            let lp = leapfrog(&target, &mut x, &mut p, &mut g, eps, &inv_mass, steps).unwrap();
            let h1 = -lp + kinetic(&p, &inv_mass);
            (h1 - h0).abs()
        };
        let coarse = energy_err(0.2);
        let fine = energy_err(0.1);
        assert!(fine < coarse / 3.0, "coarse {coarse}, fine {fine}");
        assert!(fine > 0.0);
    }

    #[test]
    fn long_run_histogram_goodness_of_fit() {
        let target = DiagNormal {
            mean: vec![0.0],
            vars: vec![1.0],
        };
        let cfg = SamplerConfig {
            chains: 1,
            seed: 19,
            warmup: 500,
            draws_per_chain: 100_000,
            ..Default::default()
        };
        let out = sample(&target, &[0.0], &cfg).unwrap();
        let pooled = out.pooled();
        // Thin to weaken residual autocorrelation, then chi-square against
        // 20 equal-probability bins at the 1e-3 level (df 19 → 43.82).
        let thinned: Vec<f64> = pooled.column(0).iter().step_by(5).cloned().collect();
        let normal = NormalDist::new(0.0, 1.0).unwrap();
        let bins = 20usize;
        let mut counts = vec![0usize; bins];
        for v in &thinned {
            let u = normal.cdf(*v);
            let b = ((u * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let expected = thinned.len() as f64 / bins as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 43.82, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn nonfinite_init_rejected() {
        struct Bad;
        impl LogDensity for Bad {
            fn dim(&self) -> usize {
                1
            }
            fn logp_and_grad(&self, _x: &[f64], grad: &mut [f64]) -> f64 {
                grad[0] = 0.0;
                f64::NAN
            }
        }
        let err = sample(&Bad, &[0.0], &SamplerConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn config_validation() {
        let mut cfg = SamplerConfig {
            warmup: 50,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.warmup = 100;
        cfg.target_accept = 0.5;
        assert!(cfg.validate().is_err());
        cfg.target_accept = 0.8;
        assert!(cfg.validate().is_ok());
    }
}
