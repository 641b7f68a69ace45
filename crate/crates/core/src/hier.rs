//! Hierarchical stacking: pointwise model weights with partial pooling.
//!
//! The combination weight of model k at input x is softmax over unconstrained
//! scores w*_k(x) = μ_k + Σ_r α_rk b_r(x), with the last model pinned at 0.
//! The basis b collects one indicator per discrete cell followed by the
//! continuous feature columns; the coefficients α get one of five prior
//! structures (shared scale, per-group scales, per-feature local scales,
//! correlated rows, or a Gaussian process over the training inputs). All
//! scale-like parameters are sampled on the log scale with the Jacobian
//! folded into the target density, and coefficient blocks use non-centered
//! parameterizations so the sampler never sees the σ→0 funnel directly.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::{FeatureSet, LpdMatrix, SimplexWeights, UnconstrainedParams};
use crate::diagnostics::DiagnosticsReport;
use crate::error::{Error, Result};
use crate::optimize::proximal_armijo_ascent;
use crate::sampler::{self, ChainStats, LogDensity, SampleOutput, SamplerConfig};
use crate::simplex::{log_mix, softmax_weights};

/// Diagonal jitter added to every GP kernel before factorization.
pub const KERNEL_JITTER: f64 = 1e-8;
/// Tolerance for the unit-diagonal and symmetry checks on a correlation
/// matrix.
const OMEGA_TOL: f64 = 1e-8;

const LN_2PI: f64 = 1.8378770664093453;
/// ln(2/π), the half-normal normalization.
const LN_2_OVER_PI: f64 = -0.4515827052894548;

// ---------------------------------------------------------------------------
// Prior specification
// ---------------------------------------------------------------------------

/// Kernel for the GP prior over training inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// amplitude · exp(−d²/ρ²); the amplitude is a variance.
    SquaredExponential,
    /// amplitude · 1{x_i = x_j}; recovers the per-cell prior on discrete
    /// inputs (each distinct input acts as its own cell).
    ZeroOne,
}

/// Structure of the coefficient prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorKind {
    /// α_rk ~ N(0, σ_k²), one scale per non-reference model.
    Basic,
    /// α_rk ~ N(0, σ_{g(r),k}²) with per-group scales. Feature groups come
    /// from `FeatureSet::group_of_feature`; when cells are present they form
    /// their own group ahead of the feature groups.
    Grouped,
    /// α_rk ~ N(0, (σ_k λ_r)²) with local scales λ_r ~ InvGamma(a, b).
    FeatureDecomposed { inv_gamma_a: f64, inv_gamma_b: f64 },
    /// Rows of α correlated across the basis: α_{·k} ~ N(0, σ_k² Ω) with a
    /// fixed correlation matrix Ω over basis rows.
    Correlated { omega: Vec<Vec<f64>> },
    /// K−1 independent GPs over the training inputs; amplitudes get
    /// half-normal(0,1) hyperpriors and length-scales InvGamma(4,1).
    Gp { kernel: KernelKind },
}

/// Validated prior configuration. Construct through [`build_prior`] or the
/// convenience constructors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub kind: PriorKind,
    /// Scale of the N(μ₀, τ_μ²) hyperprior on the intercepts.
    pub tau_mu: f64,
    /// Scale of the half-normal hyperprior on every σ.
    pub tau_sigma: f64,
    /// Fixed intercept hyperprior location.
    pub mu0: f64,
    /// When set, an extra standard-normal parameter m₀ is sampled and
    /// m₀·τ_μ is added to every score, mirroring a published reference
    /// implementation that samples the shared location instead of fixing it.
    pub sample_mu0: bool,
}

impl PriorSpec {
    /// Shared-scale prior with default hyperparameters.
    pub fn basic() -> Self {
        PriorSpec {
            kind: PriorKind::Basic,
            tau_mu: 1.0,
            tau_sigma: 1.0,
            mu0: 0.0,
            sample_mu0: false,
        }
    }

    /// Replace τ_σ by √(1/n_basis), shrinking harder as the basis grows so
    /// the summed coefficient variance stays roughly constant.
    pub fn with_tau_sigma_scaled(mut self, n_basis: usize) -> Self {
        self.tau_sigma = (1.0 / (n_basis.max(1) as f64)).sqrt();
        self
    }

    pub fn with_mu0(mut self, mu0: f64) -> Self {
        self.mu0 = mu0;
        self
    }

    pub fn with_sampled_shared_mean(mut self) -> Self {
        self.sample_mu0 = true;
        self
    }

    /// Ω as a matrix, for the correlated kind.
    fn omega_matrix(&self) -> Option<Array2<f64>> {
        if let PriorKind::Correlated { omega } = &self.kind {
            let r = omega.len();
            let mut m = Array2::zeros((r, r));
            for (i, row) in omega.iter().enumerate() {
                if row.len() != r {
                    return None;
                }
                for (j, v) in row.iter().enumerate() {
                    m[[i, j]] = *v;
                }
            }
            Some(m)
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_mu", self.tau_mu), ("tau_sigma", self.tau_sigma)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.mu0.is_finite() {
            return Err(Error::NonFinite("mu0".into()));
        }
        match &self.kind {
            PriorKind::FeatureDecomposed {
                inv_gamma_a,
                inv_gamma_b,
            } => {
                if !(inv_gamma_a.is_finite() && *inv_gamma_a > 0.0)
                    || !(inv_gamma_b.is_finite() && *inv_gamma_b > 0.0)
                {
                    return Err(Error::Invalid(format!(
                        "inverse-gamma shapes must be positive, got ({inv_gamma_a}, {inv_gamma_b})"
                    )));
                }
            }
            PriorKind::Correlated { omega } => {
                let m = self.omega_matrix().ok_or_else(|| {
                    Error::DimensionMismatch(format!(
                        "correlation matrix must be square; got {} rows",
                        omega.len()
                    ))
                })?;
                if m.nrows() == 0 {
                    return Err(Error::Invalid("correlation matrix is empty".into()));
                }
                for i in 0..m.nrows() {
                    if (m[[i, i]] - 1.0).abs() > OMEGA_TOL {
                        return Err(Error::Invalid(format!(
                            "correlation matrix diagonal entry {} is {}, not 1",
                            i + 1,
                            m[[i, i]]
                        )));
                    }
                    for j in 0..i {
                        if (m[[i, j]] - m[[j, i]]).abs() > OMEGA_TOL {
                            return Err(Error::Invalid(format!(
                                "correlation matrix is not symmetric at ({}, {})",
                                i + 1,
                                j + 1
                            )));
                        }
                    }
                }
                if cholesky(&m).is_none() {
                    let lam = symmetric_smallest_eigenvalue(&m);
                    return Err(Error::Invalid(format!(
                        "correlation matrix is not positive definite; smallest eigenvalue {lam:.6}"
                    )));
                }
            }
            PriorKind::Basic | PriorKind::Grouped | PriorKind::Gp { .. } => {}
        }
        Ok(())
    }
}

/// Validate hyperparameters and assemble a [`PriorSpec`]. μ₀ is fixed at 0;
/// use the builder methods for the off-default variants.
pub fn build_prior(kind: PriorKind, tau_mu: f64, tau_sigma: f64) -> Result<PriorSpec> {
    let spec = PriorSpec {
        kind,
        tau_mu,
        tau_sigma,
        mu0: 0.0,
        sample_mu0: false,
    };
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Likelihood reweighting over time
// ---------------------------------------------------------------------------

/// Positive per-observation likelihood multipliers. The model applies the
/// normalized form n·π_i/Σπ so the total weight stays n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeWeights {
    pub pi: Vec<f64>,
    pub gamma: f64,
    pub horizon: f64,
}

impl TimeWeights {
    pub fn check(&self) -> Result<()> {
        if self.pi.is_empty() {
            return Err(Error::Invalid("time weights are empty".into()));
        }
        for (i, &p) in self.pi.iter().enumerate() {
            if !p.is_finite() || p <= 0.0 {
                return Err(Error::Invalid(format!(
                    "time weight {} is {p}; all must be positive",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// n·π_i/Σπ.
    pub fn normalized(&self) -> Vec<f64> {
        let n = self.pi.len() as f64;
        let total: f64 = self.pi.iter().sum();
        self.pi.iter().map(|p| n * p / total).collect()
    }
}

/// Quadratic recency weighting: π_i = 1 + γ − (1 − t_i/T)². Older
/// observations (small t) get down-weighted toward γ; the most recent get
/// 1 + γ. Large γ flattens the profile back to the unweighted likelihood.
pub fn time_reweight(t: &[f64], horizon: f64, gamma: f64) -> Result<TimeWeights> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::Invalid(format!(
            "time horizon must be positive, got {horizon}"
        )));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Invalid(format!(
            "gamma must be positive (the oldest observation keeps weight gamma), got {gamma}"
        )));
    }
    let mut pi = Vec::with_capacity(t.len());
    for (i, &ti) in t.iter().enumerate() {
        if !ti.is_finite() || ti < 0.0 || ti > horizon {
            return Err(Error::Invalid(format!(
                "time {} is {ti}; must lie in [0, {horizon}]",
                i + 1
            )));
        }
        let u = 1.0 - ti / horizon;
        pi.push(1.0 + gamma - u * u);
    }
    let tw = TimeWeights {
        pi,
        gamma,
        horizon,
    };
    tw.check()?;
    Ok(tw)
}

// ---------------------------------------------------------------------------
// Log posterior
// ---------------------------------------------------------------------------

/// Additive pieces of the joint log density. `total` is what the sampler
/// sees; the split exists so tests and reports can attribute mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPosteriorParts {
    /// Σ_i π̃_i log Σ_k w_k(x_i) p_ik.
    pub likelihood: f64,
    /// Standard-normal log densities of all non-centered coefficients.
    pub raw_effects: f64,
    /// Intercept hyperprior (and m₀ when sampled).
    pub mean_hyper: f64,
    /// Half-normal terms for σ and GP amplitudes.
    pub scale_hyper: f64,
    /// Inverse-gamma terms for local scales λ and GP length-scales.
    pub shape_hyper: f64,
    /// Log-Jacobians of every log-transformed scale.
    pub jacobian: f64,
}

impl LogPosteriorParts {
    fn zero() -> Self {
        LogPosteriorParts {
            likelihood: 0.0,
            raw_effects: 0.0,
            mean_hyper: 0.0,
            scale_hyper: 0.0,
            shape_hyper: 0.0,
            jacobian: 0.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.likelihood
            + self.raw_effects
            + self.mean_hyper
            + self.scale_hyper
            + self.shape_hyper
            + self.jacobian
    }

    /// Everything except the data term.
    pub fn prior_total(&self) -> f64 {
        self.total() - self.likelihood
    }
}

/// Parameter vector layout (offsets into the flat sampler coordinates).
#[derive(Debug, Clone)]
struct Layout {
    k1: usize,
    /// Basis rows covered by α (J cells + M features; n for the GP prior).
    r: usize,
    m0: Option<usize>,
    raw: usize,
    /// (offset, scale-group count); absent for the GP prior.
    sigma: Option<(usize, usize)>,
    lambda: Option<usize>,
    log_a: Option<usize>,
    log_rho: Option<usize>,
    dim: usize,
}

/// A stacking model bound to its data: evaluates the joint log density and
/// gradient in flat coordinates, scores new inputs, names parameters.
#[derive(Debug, Clone)]
pub struct HierModel {
    lpd: Option<LpdMatrix>,
    feats: Option<FeatureSet>,
    prior: PriorSpec,
    k: usize,
    pi_norm: Option<Vec<f64>>,
    /// Cell count (0 when the feature set has no cells).
    j: usize,
    m: usize,
    /// 0-based scale-group of each basis row (grouped prior; single group 0
    /// otherwise).
    row_group: Vec<usize>,
    chol_omega: Option<Array2<f64>>,
    /// GP coordinates: feature rows, or cell labels when there are none.
    coords: Option<Array2<f64>>,
    dist2: Option<Array2<f64>>,
    layout: Layout,
}

fn pi_normalized(tw: Option<&TimeWeights>, n: usize) -> Result<Option<Vec<f64>>> {
    match tw {
        None => Ok(None),
        Some(tw) => {
            tw.check()?;
            if tw.pi.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} time weights for {} observations",
                    tw.pi.len(),
                    n
                )));
            }
            Ok(Some(tw.normalized()))
        }
    }
}

impl HierModel {
    pub fn new(
        lpd: LpdMatrix,
        feats: FeatureSet,
        prior: PriorSpec,
        tw: Option<&TimeWeights>,
    ) -> Result<Self> {
        prior.validate()?;
        feats.check()?;
        if lpd.n() != feats.n() {
            return Err(Error::DimensionMismatch(format!(
                "log-density matrix has {} rows but feature set has {}",
                lpd.n(),
                feats.n()
            )));
        }
        let pi_norm = pi_normalized(tw, lpd.n())?;
        let k = lpd.k();
        let j = feats.n_cells().unwrap_or(0);
        let m = feats.m();
        let n = lpd.n();

        let (row_group, n_scale_groups) = match prior.kind {
            PriorKind::Grouped => {
                let mut groups = vec![0usize; j];
                let offset = if j > 0 { 1 } else { 0 };
                if m > 0 {
                    let labels = feats.group_of_feature.as_ref().ok_or_else(|| {
                        Error::Invalid(
                            "grouped prior requires group labels on the feature columns".into(),
                        )
                    })?;
                    let g_max = *labels.iter().max().unwrap();
                    groups.extend(labels.iter().map(|&g| g - 1 + offset));
                    (groups, g_max + offset)
                } else {
                    (groups, 1.max(offset))
                }
            }
            _ => (vec![0; j + m], 1),
        };

        let mut chol_omega = None;
        if let PriorKind::Correlated { .. } = prior.kind {
            let om = prior.omega_matrix().expect("validated correlated prior");
            if om.nrows() != j + m {
                return Err(Error::DimensionMismatch(format!(
                    "correlation matrix is {}×{} but the basis has {} rows ({} cells + {} features)",
                    om.nrows(),
                    om.ncols(),
                    j + m,
                    j,
                    m
                )));
            }
            chol_omega = Some(cholesky(&om).expect("validated positive definite"));
        }

        let (coords, dist2) = if let PriorKind::Gp { .. } = prior.kind {
            let c = gp_coords(&feats)?;
            let d = pairwise_dist2(&c, &c);
            (Some(c), Some(d))
        } else {
            (None, None)
        };

        let r = match prior.kind {
            PriorKind::Gp { .. } => n,
            _ => j + m,
        };
        let layout = Self::build_layout(&prior, k, r, n_scale_groups);
        Ok(HierModel {
            lpd: Some(lpd),
            feats: Some(feats),
            prior,
            k,
            pi_norm,
            j,
            m,
            row_group,
            chol_omega,
            coords,
            dist2,
            layout,
        })
    }

    /// Model with no data: the target density is the prior alone. The basis
    /// is abstract (n_basis rows, single scale group), so the GP kind — whose
    /// basis is tied to training inputs — is not available here.
    pub fn prior_only(prior: PriorSpec, n_basis: usize, k: usize) -> Result<Self> {
        prior.validate()?;
        if k < 2 {
            return Err(Error::Invalid(format!("need K ≥ 2 models, got {k}")));
        }
        if let PriorKind::Gp { .. } = prior.kind {
            return Err(Error::Invalid(
                "prior-only sampling is undefined for the gp prior; it needs data coordinates"
                    .into(),
            ));
        }
        let mut chol_omega = None;
        if let PriorKind::Correlated { .. } = prior.kind {
            let om = prior.omega_matrix().expect("validated correlated prior");
            if om.nrows() != n_basis {
                return Err(Error::DimensionMismatch(format!(
                    "correlation matrix is {}×{} but the basis has {} rows",
                    om.nrows(),
                    om.ncols(),
                    n_basis
                )));
            }
            chol_omega = Some(cholesky(&om).expect("validated positive definite"));
        }
        let layout = Self::build_layout(&prior, k, n_basis, 1);
        Ok(HierModel {
            lpd: None,
            feats: None,
            prior,
            k,
            pi_norm: None,
            j: 0,
            m: n_basis,
            row_group: vec![0; n_basis],
            chol_omega,
            coords: None,
            dist2: None,
            layout,
        })
    }

    fn build_layout(prior: &PriorSpec, k: usize, r: usize, n_scale_groups: usize) -> Layout {
        let k1 = k - 1;
        let mut off = k1;
        let m0 = if prior.sample_mu0 {
            let o = off;
            off += 1;
            Some(o)
        } else {
            None
        };
        let raw = off;
        off += r * k1;
        let mut sigma = None;
        let mut lambda = None;
        let mut log_a = None;
        let mut log_rho = None;
        match prior.kind {
            PriorKind::Gp { kernel } => {
                log_a = Some(off);
                off += k1;
                if kernel == KernelKind::SquaredExponential {
                    log_rho = Some(off);
                    off += k1;
                }
            }
            PriorKind::FeatureDecomposed { .. } => {
                sigma = Some((off, 1));
                off += k1;
                lambda = Some(off);
                off += r;
            }
            PriorKind::Grouped => {
                sigma = Some((off, n_scale_groups));
                off += n_scale_groups * k1;
            }
            PriorKind::Basic | PriorKind::Correlated { .. } => {
                sigma = Some((off, 1));
                off += k1;
            }
        }
        Layout {
            k1,
            r,
            m0,
            raw,
            sigma,
            lambda,
            log_a,
            log_rho,
            dim: off,
        }
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.lpd.as_ref().map_or(0, |l| l.n())
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    /// Column names for the flat parameter vector, in pack order.
    pub fn param_names(&self) -> Vec<String> {
        let lay = &self.layout;
        let mut names = Vec::with_capacity(lay.dim);
        for k in 0..lay.k1 {
            names.push(format!("mu[{}]", k + 1));
        }
        if lay.m0.is_some() {
            names.push("mu0_shared".into());
        }
        for r in 0..lay.r {
            for k in 0..lay.k1 {
                names.push(format!("raw[{},{}]", r + 1, k + 1));
            }
        }
        if let Some((_, groups)) = lay.sigma {
            for g in 0..groups {
                for k in 0..lay.k1 {
                    if groups == 1 {
                        names.push(format!("log_sigma[{}]", k + 1));
                    } else {
                        names.push(format!("log_sigma[{},{}]", g + 1, k + 1));
                    }
                }
            }
        }
        if lay.lambda.is_some() {
            for r in 0..lay.r {
                names.push(format!("log_lambda[{}]", r + 1));
            }
        }
        if lay.log_a.is_some() {
            for k in 0..lay.k1 {
                names.push(format!("log_amp[{}]", k + 1));
            }
        }
        if lay.log_rho.is_some() {
            for k in 0..lay.k1 {
                names.push(format!("log_len[{}]", k + 1));
            }
        }
        names
    }

    /// Flatten named parameters into sampler coordinates, validating shapes.
    pub fn pack(&self, params: &UnconstrainedParams) -> Result<Vec<f64>> {
        params.check()?;
        let lay = &self.layout;
        if params.alpha.dim() != (lay.r, lay.k1) {
            return Err(Error::DimensionMismatch(format!(
                "alpha is {}×{}, expected {}×{}",
                params.alpha.nrows(),
                params.alpha.ncols(),
                lay.r,
                lay.k1
            )));
        }
        if params.mu.len() != lay.k1 {
            return Err(Error::DimensionMismatch(format!(
                "{} intercepts for {} free models",
                params.mu.len(),
                lay.k1
            )));
        }
        let want_sigma = lay.sigma.map_or(0, |(_, g)| g * lay.k1);
        if params.log_sigma.len() != want_sigma {
            return Err(Error::DimensionMismatch(format!(
                "{} log-scale entries, expected {want_sigma}",
                params.log_sigma.len()
            )));
        }
        let want_extra = lay.m0.map_or(0, |_| 1)
            + lay.lambda.map_or(0, |_| lay.r)
            + lay.log_a.map_or(0, |_| lay.k1)
            + lay.log_rho.map_or(0, |_| lay.k1);
        if params.extra.len() != want_extra {
            return Err(Error::DimensionMismatch(format!(
                "{} extra entries, expected {want_extra} for this prior kind",
                params.extra.len()
            )));
        }
        let mut x = vec![0.0; lay.dim];
        x[..lay.k1].copy_from_slice(&params.mu);
        let mut extra = params.extra.iter();
        if let Some(o) = lay.m0 {
            x[o] = *extra.next().unwrap();
        }
        for r in 0..lay.r {
            for k in 0..lay.k1 {
                x[lay.raw + r * lay.k1 + k] = params.alpha[[r, k]];
            }
        }
        if let Some((o, _)) = lay.sigma {
            x[o..o + want_sigma].copy_from_slice(&params.log_sigma);
        }
        if let Some(o) = lay.lambda {
            for r in 0..lay.r {
                x[o + r] = *extra.next().unwrap();
            }
        }
        if let Some(o) = lay.log_a {
            for k in 0..lay.k1 {
                x[o + k] = *extra.next().unwrap();
            }
        }
        if let Some(o) = lay.log_rho {
            for k in 0..lay.k1 {
                x[o + k] = *extra.next().unwrap();
            }
        }
        Ok(x)
    }

    /// Inverse of [`HierModel::pack`].
    pub fn unpack(&self, x: &[f64]) -> Result<UnconstrainedParams> {
        let lay = &self.layout;
        if x.len() != lay.dim {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinates, expected {}",
                x.len(),
                lay.dim
            )));
        }
        let mut alpha = Array2::zeros((lay.r, lay.k1));
        for r in 0..lay.r {
            for k in 0..lay.k1 {
                alpha[[r, k]] = x[lay.raw + r * lay.k1 + k];
            }
        }
        let log_sigma = lay
            .sigma
            .map(|(o, g)| x[o..o + g * lay.k1].to_vec())
            .unwrap_or_default();
        let mut extra = Vec::new();
        if let Some(o) = lay.m0 {
            extra.push(x[o]);
        }
        if let Some(o) = lay.lambda {
            extra.extend_from_slice(&x[o..o + lay.r]);
        }
        if let Some(o) = lay.log_a {
            extra.extend_from_slice(&x[o..o + lay.k1]);
        }
        if let Some(o) = lay.log_rho {
            extra.extend_from_slice(&x[o..o + lay.k1]);
        }
        Ok(UnconstrainedParams {
            alpha,
            mu: x[..lay.k1].to_vec(),
            log_sigma,
            extra,
        })
    }

    /// Effective (centered) coefficient matrix for the non-GP kinds.
    fn coef_matrix(&self, x: &[f64]) -> Array2<f64> {
        let lay = &self.layout;
        let raw = &x[lay.raw..lay.raw + lay.r * lay.k1];
        let mut coef = Array2::zeros((lay.r, lay.k1));
        match &self.prior.kind {
            PriorKind::Basic => {
                let (so, _) = lay.sigma.unwrap();
                for r in 0..lay.r {
                    for k in 0..lay.k1 {
                        coef[[r, k]] = x[so + k].exp() * raw[r * lay.k1 + k];
                    }
                }
            }
            PriorKind::Grouped => {
                let (so, _) = lay.sigma.unwrap();
                for r in 0..lay.r {
                    let g = self.row_group[r];
                    for k in 0..lay.k1 {
                        coef[[r, k]] = x[so + g * lay.k1 + k].exp() * raw[r * lay.k1 + k];
                    }
                }
            }
            PriorKind::FeatureDecomposed { .. } => {
                let (so, _) = lay.sigma.unwrap();
                let lo = lay.lambda.unwrap();
                for r in 0..lay.r {
                    let lam = x[lo + r].exp();
                    for k in 0..lay.k1 {
                        coef[[r, k]] = x[so + k].exp() * lam * raw[r * lay.k1 + k];
                    }
                }
            }
            PriorKind::Correlated { .. } => {
                let (so, _) = lay.sigma.unwrap();
                let l = self.chol_omega.as_ref().unwrap();
                for k in 0..lay.k1 {
                    let sig = x[so + k].exp();
                    for r in 0..lay.r {
                        let mut acc = 0.0;
                        for c in 0..=r {
                            acc += l[[r, c]] * raw[c * lay.k1 + k];
                        }
                        coef[[r, k]] = sig * acc;
                    }
                }
            }
            PriorKind::Gp { .. } => unreachable!("GP uses latents, not a coefficient matrix"),
        }
        coef
    }

    /// Training kernel with jitter, from precomputed distances.
    pub(crate) fn kernel_train(&self, a: f64, rho: f64) -> Array2<f64> {
        let kind = match self.prior.kind {
            PriorKind::Gp { kernel } => kernel,
            _ => unreachable!(),
        };
        let d2 = self.dist2.as_ref().expect("gp model has distances");
        let n = d2.nrows();
        let mut km = Array2::zeros((n, n));
        match kind {
            KernelKind::SquaredExponential => {
                for (idx, v) in d2.indexed_iter() {
                    km[idx] = a * (-v / (rho * rho)).exp();
                }
            }
            KernelKind::ZeroOne => {
                for (idx, v) in d2.indexed_iter() {
                    km[idx] = if *v == 0.0 { a } else { 0.0 };
                }
            }
        }
        for i in 0..n {
            km[[i, i]] += KERNEL_JITTER;
        }
        km
    }

    /// Per-model Cholesky factors and latent score columns for the GP prior.
    /// None when a kernel is numerically invalid (treated as −∞ density).
    fn gp_latents(&self, x: &[f64]) -> Option<(Vec<Array2<f64>>, Array2<f64>)> {
        let lay = &self.layout;
        let n = lay.r;
        let mut ls = Vec::with_capacity(lay.k1);
        let mut lat = Array2::zeros((n, lay.k1));
        for k in 0..lay.k1 {
            let a = x[lay.log_a.unwrap() + k].exp();
            let rho = lay.log_rho.map_or(1.0, |o| x[o + k].exp());
            if !a.is_finite() || !rho.is_finite() || a <= 0.0 || rho <= 0.0 {
                return None;
            }
            let km = self.kernel_train(a, rho);
            let l = cholesky(&km)?;
            for i in 0..n {
                let mut acc = 0.0;
                for c in 0..=i {
                    acc += l[[i, c]] * x[lay.raw + c * lay.k1 + k];
                }
                lat[[i, k]] = acc;
            }
            ls.push(l);
        }
        Some((ls, lat))
    }

    /// Joint log density and (optionally) its gradient in flat coordinates.
    fn eval(&self, x: &[f64], mut grad: Option<&mut [f64]>) -> LogPosteriorParts {
        let mut parts = LogPosteriorParts::zero();
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        if x.iter().any(|v| !v.is_finite()) {
            parts.likelihood = f64::NEG_INFINITY;
            return parts;
        }
        let lay = &self.layout;
        let k1 = lay.k1;
        let mu = &x[..k1];
        let shift = lay.m0.map_or(0.0, |o| x[o] * self.prior.tau_mu);

        enum Coefs {
            Dense(Array2<f64>),
            Gp {
                ls: Vec<Array2<f64>>,
                lat: Array2<f64>,
            },
        }
        let coefs = match self.prior.kind {
            PriorKind::Gp { .. } => match self.gp_latents(x) {
                Some((ls, lat)) => Coefs::Gp { ls, lat },
                None => {
                    parts.likelihood = f64::NEG_INFINITY;
                    return parts;
                }
            },
            _ => Coefs::Dense(self.coef_matrix(x)),
        };

        // Data term.
        let mut u = Array2::<f64>::zeros((0, 0));
        let mut dsm = Array2::<f64>::zeros((0, 0));
        let mut dmu = vec![0.0; k1];
        if let Some(lpd) = &self.lpd {
            let n = lpd.n();
            let vals = lpd.values();
            let feats = self.feats.as_ref().expect("data model has features");
            let cells = feats.cell_index.as_deref();
            let fm = &feats.features;
            let want_grad = grad.is_some();
            if want_grad {
                match &coefs {
                    Coefs::Dense(_) => u = Array2::zeros((lay.r, k1)),
                    Coefs::Gp { .. } => dsm = Array2::zeros((n, k1)),
                }
            }
            let mut sc = vec![0.0; self.k];
            let mut ds = vec![0.0; k1];
            for i in 0..n {
                let pi = self.pi_norm.as_ref().map_or(1.0, |p| p[i]);
                for k in 0..k1 {
                    let mut s = mu[k] + shift;
                    match &coefs {
                        Coefs::Dense(c) => {
                            if let Some(cells) = cells {
                                s += c[[cells[i] - 1, k]];
                            }
                            for mm in 0..self.m {
                                s += c[[self.j + mm, k]] * fm[[i, mm]];
                            }
                        }
                        Coefs::Gp { lat, .. } => s += lat[[i, k]],
                    }
                    sc[k] = s;
                }
                sc[k1] = 0.0;
                let row = vals.row(i);
                let li = mix_row(
                    &sc,
                    row.as_slice().expect("contiguous lpd row"),
                    if want_grad { Some(&mut ds) } else { None },
                );
                parts.likelihood += pi * li;
                if want_grad {
                    for k in 0..k1 {
                        let d = pi * ds[k];
                        dmu[k] += d;
                        match &coefs {
                            Coefs::Dense(_) => {
                                if let Some(cells) = cells {
                                    u[[cells[i] - 1, k]] += d;
                                }
                                for mm in 0..self.m {
                                    u[[self.j + mm, k]] += d * fm[[i, mm]];
                                }
                            }
                            Coefs::Gp { .. } => dsm[[i, k]] = d,
                        }
                    }
                }
            }
        }

        if let Some(g) = grad.as_deref_mut() {
            for k in 0..k1 {
                g[k] += dmu[k];
            }
            if let Some(o) = lay.m0 {
                g[o] += self.prior.tau_mu * dmu.iter().sum::<f64>();
            }
            if self.lpd.is_some() {
                match &coefs {
                    Coefs::Dense(coef) => self.chain_dense(x, coef, &u, g),
                    Coefs::Gp { ls, .. } => self.chain_gp(x, ls, &dsm, g),
                }
            }
        }

        self.add_prior_terms(x, &mut parts, grad);
        parts
    }

    /// Chain likelihood score-gradients `u` (basis-projected) into raw
    /// coefficients and log-scales for the dense prior kinds.
    fn chain_dense(&self, x: &[f64], coef: &Array2<f64>, u: &Array2<f64>, g: &mut [f64]) {
        let lay = &self.layout;
        match &self.prior.kind {
            PriorKind::Basic => {
                let (so, _) = lay.sigma.unwrap();
                for k in 0..lay.k1 {
                    let sig = x[so + k].exp();
                    let mut gs = 0.0;
                    for r in 0..lay.r {
                        g[lay.raw + r * lay.k1 + k] += sig * u[[r, k]];
                        gs += u[[r, k]] * coef[[r, k]];
                    }
                    g[so + k] += gs;
                }
            }
            PriorKind::Grouped => {
                let (so, _) = lay.sigma.unwrap();
                for r in 0..lay.r {
                    let gidx = self.row_group[r];
                    for k in 0..lay.k1 {
                        let sig = x[so + gidx * lay.k1 + k].exp();
                        g[lay.raw + r * lay.k1 + k] += sig * u[[r, k]];
                        g[so + gidx * lay.k1 + k] += u[[r, k]] * coef[[r, k]];
                    }
                }
            }
            PriorKind::FeatureDecomposed { .. } => {
                let (so, _) = lay.sigma.unwrap();
                let lo = lay.lambda.unwrap();
                for r in 0..lay.r {
                    let lam = x[lo + r].exp();
                    let mut gl = 0.0;
                    for k in 0..lay.k1 {
                        let sig = x[so + k].exp();
                        g[lay.raw + r * lay.k1 + k] += sig * lam * u[[r, k]];
                        g[so + k] += u[[r, k]] * coef[[r, k]];
                        gl += u[[r, k]] * coef[[r, k]];
                    }
                    g[lo + r] += gl;
                }
            }
            PriorKind::Correlated { .. } => {
                let (so, _) = lay.sigma.unwrap();
                let l = self.chol_omega.as_ref().unwrap();
                for k in 0..lay.k1 {
                    let sig = x[so + k].exp();
                    let mut gs = 0.0;
                    // d/draw_c = σ Σ_r L[r,c] u_r (transpose product).
                    for c in 0..lay.r {
                        let mut acc = 0.0;
                        for r in c..lay.r {
                            acc += l[[r, c]] * u[[r, k]];
                        }
                        g[lay.raw + c * lay.k1 + k] += sig * acc;
                    }
                    for r in 0..lay.r {
                        gs += u[[r, k]] * coef[[r, k]];
                    }
                    g[so + k] += gs;
                }
            }
            PriorKind::Gp { .. } => unreachable!(),
        }
    }

    /// Chain per-row score gradients into GP latents and kernel
    /// hyperparameters via the differentiated Cholesky factor.
    fn chain_gp(&self, x: &[f64], ls: &[Array2<f64>], dsm: &Array2<f64>, g: &mut [f64]) {
        let lay = &self.layout;
        let n = lay.r;
        for k in 0..lay.k1 {
            let l = &ls[k];
            // dη = Lᵀ ds.
            for c in 0..n {
                let mut acc = 0.0;
                for r in c..n {
                    acc += l[[r, c]] * dsm[[r, k]];
                }
                g[lay.raw + c * lay.k1 + k] += acc;
            }
            let a = x[lay.log_a.unwrap() + k].exp();
            let rho = lay.log_rho.map_or(1.0, |o| x[o + k].exp());
            let km = self.kernel_train(a, rho);
            let eta: Vec<f64> = (0..n).map(|c| x[lay.raw + c * lay.k1 + k]).collect();
            // ∂K/∂log a = K − jitter·I (the kernel scales linearly in a).
            let mut dk_a = km.clone();
            for i in 0..n {
                dk_a[[i, i]] -= KERNEL_JITTER;
            }
            let dl_a = chol_diff(l, &dk_a);
            let mut acc_a = 0.0;
            for i in 0..n {
                let mut dv = 0.0;
                for c in 0..=i {
                    dv += dl_a[[i, c]] * eta[c];
                }
                acc_a += dsm[[i, k]] * dv;
            }
            g[lay.log_a.unwrap() + k] += acc_a;
            if let Some(o) = lay.log_rho {
                // ∂K/∂log ρ = K ∘ 2d²/ρ² (jitter excluded; its diagonal has
                // d² = 0 anyway for the squared-exponential kernel).
                let d2 = self.dist2.as_ref().unwrap();
                let mut dk_r = Array2::zeros((n, n));
                for (idx, v) in d2.indexed_iter() {
                    let base = if idx.0 == idx.1 {
                        km[idx] - KERNEL_JITTER
                    } else {
                        km[idx]
                    };
                    dk_r[idx] = base * 2.0 * v / (rho * rho);
                }
                let dl_r = chol_diff(l, &dk_r);
                let mut acc_r = 0.0;
                for i in 0..n {
                    let mut dv = 0.0;
                    for c in 0..=i {
                        dv += dl_r[[i, c]] * eta[c];
                    }
                    acc_r += dsm[[i, k]] * dv;
                }
                g[o + k] += acc_r;
            }
        }
    }

    /// Prior, hyperprior, and Jacobian terms plus their gradients.
    fn add_prior_terms(
        &self,
        x: &[f64],
        parts: &mut LogPosteriorParts,
        mut grad: Option<&mut [f64]>,
    ) {
        let lay = &self.layout;
        let pr = &self.prior;
        // Non-centered coefficients are standard normal.
        for idx in lay.raw..lay.raw + lay.r * lay.k1 {
            let v = x[idx];
            parts.raw_effects += -0.5 * v * v - 0.5 * LN_2PI;
            if let Some(g) = grad.as_deref_mut() {
                g[idx] += -v;
            }
        }
        for k in 0..lay.k1 {
            let d = x[k] - pr.mu0;
            parts.mean_hyper += -0.5 * d * d / (pr.tau_mu * pr.tau_mu)
                - pr.tau_mu.ln()
                - 0.5 * LN_2PI;
            if let Some(g) = grad.as_deref_mut() {
                g[k] += -d / (pr.tau_mu * pr.tau_mu);
            }
        }
        if let Some(o) = lay.m0 {
            let v = x[o];
            parts.mean_hyper += -0.5 * v * v - 0.5 * LN_2PI;
            if let Some(g) = grad.as_deref_mut() {
                g[o] += -v;
            }
        }
        if let Some((so, groups)) = lay.sigma {
            for idx in so..so + groups * lay.k1 {
                let ls = x[idx];
                let sig = ls.exp();
                parts.scale_hyper += 0.5 * LN_2_OVER_PI
                    - pr.tau_sigma.ln()
                    - 0.5 * sig * sig / (pr.tau_sigma * pr.tau_sigma);
                parts.jacobian += ls;
                if let Some(g) = grad.as_deref_mut() {
                    g[idx] += 1.0 - sig * sig / (pr.tau_sigma * pr.tau_sigma);
                }
            }
        }
        if let Some(lo) = lay.lambda {
            let (a, b) = match pr.kind {
                PriorKind::FeatureDecomposed {
                    inv_gamma_a,
                    inv_gamma_b,
                } => (inv_gamma_a, inv_gamma_b),
                _ => unreachable!(),
            };
            for idx in lo..lo + lay.r {
                let ll = x[idx];
                let lam = ll.exp();
                parts.shape_hyper += a * b.ln() - ln_gamma(a) - (a + 1.0) * ll - b / lam;
                parts.jacobian += ll;
                if let Some(g) = grad.as_deref_mut() {
                    g[idx] += -a + b / lam;
                }
            }
        }
        if let Some(ao) = lay.log_a {
            for idx in ao..ao + lay.k1 {
                let la = x[idx];
                let amp = la.exp();
                parts.scale_hyper += 0.5 * LN_2_OVER_PI - 0.5 * amp * amp;
                parts.jacobian += la;
                if let Some(g) = grad.as_deref_mut() {
                    g[idx] += 1.0 - amp * amp;
                }
            }
        }
        if let Some(ro) = lay.log_rho {
            // InvGamma(4, 1) keeps length-scales away from both 0 and ∞.
            for idx in ro..ro + lay.k1 {
                let lr = x[idx];
                let rho = lr.exp();
                parts.shape_hyper += -ln_gamma(4.0) - 5.0 * lr - 1.0 / rho;
                parts.jacobian += lr;
                if let Some(g) = grad.as_deref_mut() {
                    g[idx] += -4.0 + 1.0 / rho;
                }
            }
        }
    }

    /// n×K pointwise weights at the training inputs for one parameter
    /// vector. None if a GP kernel fails to factor.
    fn pointwise_weights(&self, x: &[f64]) -> Option<Array2<f64>> {
        let lpd = self.lpd.as_ref()?;
        let feats = self.feats.as_ref()?;
        let n = lpd.n();
        let lay = &self.layout;
        let mu = &x[..lay.k1];
        let shift = lay.m0.map_or(0.0, |o| x[o] * self.prior.tau_mu);
        let mut out = Array2::zeros((n, self.k));
        let mut sc = vec![0.0; lay.k1];
        match self.prior.kind {
            PriorKind::Gp { .. } => {
                let (_, lat) = self.gp_latents(x)?;
                for i in 0..n {
                    for k in 0..lay.k1 {
                        sc[k] = mu[k] + shift + lat[[i, k]];
                    }
                    let w = softmax_weights(&sc);
                    for k in 0..self.k {
                        out[[i, k]] = w[k];
                    }
                }
            }
            _ => {
                let coef = self.coef_matrix(x);
                let cells = feats.cell_index.as_deref();
                for i in 0..n {
                    for k in 0..lay.k1 {
                        let mut s = mu[k] + shift;
                        if let Some(cells) = cells {
                            s += coef[[cells[i] - 1, k]];
                        }
                        for mm in 0..self.m {
                            s += coef[[self.j + mm, k]] * feats.features[[i, mm]];
                        }
                        sc[k] = s;
                    }
                    let w = softmax_weights(&sc);
                    for k in 0..self.k {
                        out[[i, k]] = w[k];
                    }
                }
            }
        }
        Some(out)
    }
}

/// One observation's mixture log density given unconstrained scores
/// (reference score already zeroed in the last slot). When `ds` is given it
/// receives ∂/∂score_k = q_k − w_k for the free models.
fn mix_row(sc: &[f64], lpd_row: &[f64], ds: Option<&mut [f64]>) -> f64 {
    let kk = sc.len();
    let mut max_d = f64::NEG_INFINITY;
    let mut max_n = f64::NEG_INFINITY;
    for k in 0..kk {
        max_d = max_d.max(sc[k]);
        max_n = max_n.max(sc[k] + lpd_row[k]);
    }
    let mut sum_d = 0.0;
    let mut sum_n = 0.0;
    for k in 0..kk {
        sum_d += (sc[k] - max_d).exp();
        sum_n += (sc[k] + lpd_row[k] - max_n).exp();
    }
    let lse_d = max_d + sum_d.ln();
    let lse_n = max_n + sum_n.ln();
    if let Some(ds) = ds {
        for k in 0..kk - 1 {
            let q = (sc[k] + lpd_row[k] - lse_n).exp();
            let w = (sc[k] - lse_d).exp();
            ds[k] = q - w;
        }
    }
    lse_n - lse_d
}

impl LogDensity for HierModel {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(x, Some(grad)).total()
    }
}

/// Joint log density Σ_i π̃_i log Σ_k w_k(x_i) p_ik + log priors +
/// hyperpriors + Jacobians of the log-transformed scales.
///
/// `params.alpha` holds the raw non-centered coefficients (rows = J cells
/// followed by M features; training rows for the GP kind), `params.extra`
/// holds, in order: m₀ (if sampled), log λ (feature-decomposed), log
/// amplitudes and log length-scales (GP).
pub fn log_posterior(
    params: &UnconstrainedParams,
    lpd: &LpdMatrix,
    feats: &FeatureSet,
    prior: &PriorSpec,
    tw: Option<&TimeWeights>,
) -> Result<f64> {
    Ok(log_posterior_parts(params, lpd, feats, prior, tw)?.total())
}

/// As [`log_posterior`], split into its additive pieces.
pub fn log_posterior_parts(
    params: &UnconstrainedParams,
    lpd: &LpdMatrix,
    feats: &FeatureSet,
    prior: &PriorSpec,
    tw: Option<&TimeWeights>,
) -> Result<LogPosteriorParts> {
    let model = HierModel::new(lpd.clone(), feats.clone(), prior.clone(), tw)?;
    let x = model.pack(params)?;
    Ok(model.eval(&x, None))
}

/// Analytic gradient of [`log_posterior`] with respect to every
/// unconstrained coordinate, in the same named layout.
pub fn grad_log_posterior(
    params: &UnconstrainedParams,
    lpd: &LpdMatrix,
    feats: &FeatureSet,
    prior: &PriorSpec,
    tw: Option<&TimeWeights>,
) -> Result<UnconstrainedParams> {
    let model = HierModel::new(lpd.clone(), feats.clone(), prior.clone(), tw)?;
    let x = model.pack(params)?;
    let mut g = vec![0.0; model.dim()];
    let parts = model.eval(&x, Some(&mut g));
    if !parts.total().is_finite() {
        return Err(Error::NonFinite("log posterior".into()));
    }
    model.unpack(&g)
}

/// Log density of the prior alone on an abstract basis with `n_basis` rows;
/// what [`log_posterior`] degenerates to with no observations.
pub fn log_prior_only(
    params: &UnconstrainedParams,
    prior: &PriorSpec,
    n_basis: usize,
    k: usize,
) -> Result<f64> {
    let model = HierModel::prior_only(prior.clone(), n_basis, k)?;
    let x = model.pack(params)?;
    Ok(model.eval(&x, None).total())
}

// ---------------------------------------------------------------------------
// Fitting via MCMC
// ---------------------------------------------------------------------------

/// Posterior draws of the stacking parameters plus derived weights.
#[derive(Debug, Clone)]
pub struct WeightDraws {
    /// Pooled post-warmup draws, (chains·draws) × dim, chain-major.
    params: Array2<f64>,
    names: Vec<String>,
    model: HierModel,
    /// Posterior-mean pointwise weights at the training inputs.
    pub wbar: SimplexWeights,
    pub diagnostics: DiagnosticsReport,
    pub chain_stats: Vec<ChainStats>,
}

impl WeightDraws {
    fn from_output(model: HierModel, out: SampleOutput) -> Result<Self> {
        let params = out.pooled();
        let s = params.nrows();
        let n = model.n();
        let k = model.k;
        let mut acc = Array2::<f64>::zeros((n, k));
        for si in 0..s {
            let row = params.row(si);
            let w = model
                .pointwise_weights(row.as_slice().expect("contiguous draw"))
                .ok_or_else(|| Error::Numerical("kernel factorization failed on a stored draw".into()))?;
            acc += &w;
        }
        acc /= s as f64;
        let wbar = SimplexWeights::new(acc)?;
        Ok(WeightDraws {
            params,
            names: model.param_names(),
            model,
            wbar,
            diagnostics: out.diagnostics,
            chain_stats: out.chain_stats,
        })
    }

    /// Rebuild a draw set from stored samples, e.g. a draws table written by a
    /// previous fit. `draws` is chains × draws × dim so split-chain diagnostics
    /// can be recomputed; divergence counts are not recoverable from stored
    /// draws and are reported as zero.
    pub fn from_saved(
        lpd: &LpdMatrix,
        feats: &FeatureSet,
        prior: &PriorSpec,
        time_weights: Option<&TimeWeights>,
        draws: Array3<f64>,
        names: &[String],
    ) -> Result<Self> {
        let model = HierModel::new(lpd.clone(), feats.clone(), prior.clone(), time_weights)?;
        let expected = model.param_names();
        if names != expected.as_slice() {
            return Err(Error::Invalid(format!(
                "stored draw columns {:?} do not match the model parameters {:?}",
                names, expected
            )));
        }
        if draws.shape()[2] != model.dim() {
            return Err(Error::DimensionMismatch(format!(
                "stored draws have {} parameters, model needs {}",
                draws.shape()[2],
                model.dim()
            )));
        }
        if draws.shape()[0] == 0 || draws.shape()[1] == 0 {
            return Err(Error::Invalid("stored draw set is empty".into()));
        }
        let diagnostics = crate::diagnostics::diagnose(&draws, 0);
        let (c, d, p) = draws.dim();
        let params = draws
            .into_shape_with_order((c * d, p))
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        let s = params.nrows();
        let mut acc = Array2::<f64>::zeros((model.n(), model.k));
        for si in 0..s {
            let row = params.row(si);
            let w = model
                .pointwise_weights(row.as_slice().expect("contiguous draw"))
                .ok_or_else(|| Error::Numerical("kernel factorization failed on a stored draw".into()))?;
            acc += &w;
        }
        acc /= s as f64;
        Ok(WeightDraws {
            params,
            names: expected,
            model,
            wbar: SimplexWeights::new(acc)?,
            diagnostics,
            chain_stats: Vec::new(),
        })
    }

    pub fn n_draws(&self) -> usize {
        self.params.nrows()
    }

    pub fn dim(&self) -> usize {
        self.params.ncols()
    }

    pub fn k(&self) -> usize {
        self.model.k
    }

    /// Flat draw matrix, (chains·draws) × dim, chain-major.
    pub fn params(&self) -> &Array2<f64> {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn model(&self) -> &HierModel {
        &self.model
    }

    /// One draw in named layout.
    pub fn draw(&self, s: usize) -> Result<UnconstrainedParams> {
        if s >= self.params.nrows() {
            return Err(Error::Invalid(format!(
                "draw {s} out of range ({} draws)",
                self.params.nrows()
            )));
        }
        self.model
            .unpack(self.params.row(s).as_slice().expect("contiguous"))
    }

    /// Per-draw pointwise weights at the training inputs, S×n×K.
    pub fn pointwise_draws(&self) -> Result<Array3<f64>> {
        let s = self.params.nrows();
        let n = self.model.n();
        let k = self.model.k;
        let mut out = Array3::zeros((s, n, k));
        for si in 0..s {
            let w = self
                .model
                .pointwise_weights(self.params.row(si).as_slice().expect("contiguous"))
                .ok_or_else(|| Error::Numerical("kernel factorization failed on a stored draw".into()))?;
            out.index_axis_mut(ndarray::Axis(0), si).assign(&w);
        }
        Ok(out)
    }

    /// Posterior-mean weights at new inputs. `fallback_unseen` controls what
    /// happens to rows whose cell label never occurred in training: with the
    /// fallback they collapse to the intercept draws softmax(μ); without it
    /// they are an error.
    pub fn predict(&self, new_feats: &FeatureSet, fallback_unseen: bool) -> Result<SimplexWeights> {
        let model = &self.model;
        let lay = &model.layout;
        let n_new = new_feats.n();
        if n_new == 0 {
            return Err(Error::Invalid("no rows to predict".into()));
        }
        for ((i, mcol), v) in new_feats.features.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "feature at row {i}, column {} is {v}",
                    mcol + 1
                )));
            }
        }

        let gp = matches!(model.prior.kind, PriorKind::Gp { .. });
        let mut cross: Option<Array2<f64>> = None;
        let mut cell_slot: Vec<Option<usize>> = Vec::new();
        if gp {
            let c_new = gp_coords(new_feats)?;
            let c_train = model.coords.as_ref().expect("gp model has coordinates");
            if c_new.ncols() != c_train.ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "new inputs have {} coordinate columns, training had {}",
                    c_new.ncols(),
                    c_train.ncols()
                )));
            }
            cross = Some(pairwise_dist2(c_train, &c_new));
        } else {
            if new_feats.m() != model.m {
                return Err(Error::DimensionMismatch(format!(
                    "new inputs have {} feature columns, training had {}",
                    new_feats.m(),
                    model.m
                )));
            }
            if model.j > 0 {
                let cells = new_feats.cell_index.as_ref().ok_or_else(|| {
                    Error::Invalid("model was trained with cells but new inputs have none".into())
                })?;
                let mut unseen = Vec::new();
                for (i, &c) in cells.iter().enumerate() {
                    if c == 0 {
                        return Err(Error::Invalid(format!(
                            "cell label at row {} is 0; labels are 1-based",
                            i + 1
                        )));
                    }
                    if c <= model.j {
                        cell_slot.push(Some(c - 1));
                    } else {
                        unseen.push(c);
                        cell_slot.push(None);
                    }
                }
                if !unseen.is_empty() && !fallback_unseen {
                    unseen.sort_unstable();
                    unseen.dedup();
                    return Err(Error::Invalid(format!(
                        "cells {unseen:?} were never seen in training; enable the hierarchical-mean fallback to predict them from the intercepts"
                    )));
                }
            }
        }

        let s = self.params.nrows();
        let mut acc = Array2::<f64>::zeros((n_new, model.k));
        let mut sc = vec![0.0; lay.k1];
        for si in 0..s {
            let x = self.params.row(si);
            let x = x.as_slice().expect("contiguous");
            let mu = &x[..lay.k1];
            let shift = lay.m0.map_or(0.0, |o| x[o] * model.prior.tau_mu);
            if gp {
                let (ls, _) = model.gp_latents(x).ok_or_else(|| {
                    Error::Numerical("kernel factorization failed on a stored draw".into())
                })?;
                let cross_d2 = cross.as_ref().unwrap();
                let kernel = match model.prior.kind {
                    PriorKind::Gp { kernel } => kernel,
                    _ => unreachable!(),
                };
                // Conditional mean at x̃: k(X,x̃)ᵀ K⁻¹ g with g = Lη, so
                // K⁻¹g = L⁻ᵀη needs one triangular solve per model.
                let mut latent = Array2::zeros((n_new, lay.k1));
                for k in 0..lay.k1 {
                    let a = x[lay.log_a.unwrap() + k].exp();
                    let rho = lay.log_rho.map_or(1.0, |o| x[o + k].exp());
                    let eta: Vec<f64> = (0..lay.r).map(|c| x[lay.raw + c * lay.k1 + k]).collect();
                    let z = solve_lower_transpose(&ls[k], &eta);
                    for t in 0..n_new {
                        let mut gk = 0.0;
                        for i in 0..lay.r {
                            let kv = match kernel {
                                KernelKind::SquaredExponential => {
                                    a * (-cross_d2[[i, t]] / (rho * rho)).exp()
                                }
                                KernelKind::ZeroOne => {
                                    if cross_d2[[i, t]] == 0.0 {
                                        a
                                    } else {
                                        0.0
                                    }
                                }
                            };
                            gk += kv * z[i];
                        }
                        latent[[t, k]] = gk;
                    }
                }
                for t in 0..n_new {
                    for k in 0..lay.k1 {
                        sc[k] = mu[k] + shift + latent[[t, k]];
                    }
                    let w = softmax_weights(&sc);
                    for k in 0..model.k {
                        acc[[t, k]] += w[k];
                    }
                }
            } else {
                let coef = model.coef_matrix(x);
                for t in 0..n_new {
                    let unseen = model.j > 0 && cell_slot[t].is_none();
                    for k in 0..lay.k1 {
                        let mut sv = mu[k] + shift;
                        if !unseen {
                            if model.j > 0 {
                                sv += coef[[cell_slot[t].unwrap(), k]];
                            }
                            for mm in 0..model.m {
                                sv += coef[[model.j + mm, k]] * new_feats.features[[t, mm]];
                            }
                        }
                        sc[k] = sv;
                    }
                    let w = softmax_weights(&sc);
                    for k in 0..model.k {
                        acc[[t, k]] += w[k];
                    }
                }
            }
        }
        acc /= s as f64;
        SimplexWeights::new(acc)
    }
}

/// Divergence and mixing gates applied after sampling.
fn check_sample_health(out: &SampleOutput, cfg: &SamplerConfig, allow_poor_mixing: bool) -> Result<()> {
    let transitions = (cfg.chains * cfg.draws_per_chain).max(1);
    let frac = out.total_divergences() as f64 / transitions as f64;
    if frac > 0.10 {
        let suggest = ((cfg.target_accept + 1.0) / 2.0).min(0.99);
        return Err(Error::Diagnostics(format!(
            "{:.1}% divergent transitions (limit 10%); raise target_accept (e.g. {suggest:.2}), increase warmup, or rescale the data",
            100.0 * frac
        )));
    }
    if !allow_poor_mixing && !out.diagnostics.healthy() {
        return Err(Error::Diagnostics(format!(
            "sampler diagnostics failed: {}; rerun with more warmup/draws or use the unchecked fit to inspect the draws",
            out.diagnostics.complaints().join("; ")
        )));
    }
    Ok(())
}

fn fit_hierarchical_impl(
    lpd: &LpdMatrix,
    feats: &FeatureSet,
    prior: &PriorSpec,
    cfg: &SamplerConfig,
    tw: Option<&TimeWeights>,
    allow_poor_mixing: bool,
) -> Result<WeightDraws> {
    let model = HierModel::new(lpd.clone(), feats.clone(), prior.clone(), tw)?;
    let x0 = vec![0.0; model.dim()];
    let out = sampler::sample(&model, &x0, cfg)?;
    check_sample_health(&out, cfg, allow_poor_mixing)?;
    WeightDraws::from_output(model, out)
}

/// Sample the joint posterior of the stacking parameters with the built-in
/// HMC sampler and return draws plus posterior-mean pointwise weights.
/// Errors if more than 10% of transitions diverge or the split-R̂/ESS gates
/// fail; see [`fit_hierarchical_unchecked`] to inspect a poorly mixing fit.
pub fn fit_hierarchical(
    lpd: &LpdMatrix,
    feats: &FeatureSet,
    prior: &PriorSpec,
    cfg: &SamplerConfig,
    tw: Option<&TimeWeights>,
) -> Result<WeightDraws> {
    fit_hierarchical_impl(lpd, feats, prior, cfg, tw, false)
}

/// As [`fit_hierarchical`] but only the divergence gate is enforced; R̂ and
/// ESS complaints are left to the caller via `WeightDraws::diagnostics`.
pub fn fit_hierarchical_unchecked(
    lpd: &LpdMatrix,
    feats: &FeatureSet,
    prior: &PriorSpec,
    cfg: &SamplerConfig,
    tw: Option<&TimeWeights>,
) -> Result<WeightDraws> {
    fit_hierarchical_impl(lpd, feats, prior, cfg, tw, true)
}

/// Sample the prior alone (no data) on an abstract basis. Returns the raw
/// sampler output and the parameter names for its columns.
pub fn fit_prior_only(
    prior: &PriorSpec,
    n_basis: usize,
    k: usize,
    cfg: &SamplerConfig,
) -> Result<(SampleOutput, Vec<String>)> {
    let model = HierModel::prior_only(prior.clone(), n_basis, k)?;
    let x0 = vec![0.0; model.dim()];
    let out = sampler::sample(&model, &x0, cfg)?;
    check_sample_health(&out, cfg, false)?;
    let names = model.param_names();
    Ok((out, names))
}

/// Posterior-mean weights at new inputs; unseen cells are an error.
pub fn predict_weights(draws: &WeightDraws, new_feats: &FeatureSet) -> Result<SimplexWeights> {
    draws.predict(new_feats, false)
}

/// Posterior-mean weights at new inputs; rows in unseen cells fall back to
/// the intercept draws softmax(μ).
pub fn predict_weights_with_fallback(
    draws: &WeightDraws,
    new_feats: &FeatureSet,
) -> Result<SimplexWeights> {
    draws.predict(new_feats, true)
}

/// log Σ_k w_k exp(ld_k) with max-shift stability; the final combined
/// predictive log density of one observation.
pub fn combine_predictions(weights: &[f64], model_log_densities: &[f64]) -> f64 {
    debug_assert_eq!(weights.len(), model_log_densities.len());
    log_mix(weights, model_log_densities)
}

// ---------------------------------------------------------------------------
// MAP fitting with fixed scales
// ---------------------------------------------------------------------------

/// Options for [`fit_map`]. The coefficient scale σ is held fixed, which is
/// what makes the posterior mode well defined: letting σ vary sends the
/// centered density to +∞ along σ→0 with the coefficients at their prior
/// mean.
#[derive(Debug, Clone)]
pub struct MapOptions {
    /// Fixed prior scale of the centered coefficients.
    pub sigma: f64,
    /// Intercept prior scale; diffuse by default so the mode tracks the
    /// unpenalized optimum.
    pub tau_mu: f64,
    pub max_iters: usize,
    /// Stationarity tolerance on the proximal-gradient residual.
    pub tol: f64,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions {
            sigma: 1.0,
            tau_mu: 1e3,
            max_iters: 20_000,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapFit {
    /// Intercepts, length K−1.
    pub mu: Vec<f64>,
    /// Centered coefficients (σ·raw), basis rows × (K−1).
    pub coef: Array2<f64>,
    /// Pointwise weights at the training inputs.
    pub weights: SimplexWeights,
    /// Penalized objective (likelihood + Gaussian log priors).
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Basis dimensions shared by the model and the MAP fitter.
fn basis_dims(feats: &FeatureSet) -> (usize, usize) {
    (feats.n_cells().unwrap_or(0), feats.m())
}

/// Weighted likelihood and its gradient with respect to (μ, centered coef).
fn dense_likelihood(
    lpd: &LpdMatrix,
    feats: &FeatureSet,
    pi: Option<&[f64]>,
    z: &[f64],
    grad: Option<&mut [f64]>,
) -> f64 {
    let (j, m) = basis_dims(feats);
    let n = lpd.n();
    let k = lpd.k();
    let k1 = k - 1;
    let r = j + m;
    let vals = lpd.values();
    let cells = feats.cell_index.as_deref();
    let mut sc = vec![0.0; k];
    let mut ds = vec![0.0; k1];
    let mut obj = 0.0;
    let mut grad = grad;
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    for i in 0..n {
        let piv = pi.map_or(1.0, |p| p[i]);
        for kk in 0..k1 {
            let mut s = z[kk];
            if let Some(cells) = cells {
                s += z[k1 + (cells[i] - 1) * k1 + kk];
            }
            for mm in 0..m {
                s += z[k1 + (j + mm) * k1 + kk] * feats.features[[i, mm]];
            }
            sc[kk] = s;
        }
        sc[k1] = 0.0;
        let row = vals.row(i);
        let li = mix_row(
            &sc,
            row.as_slice().expect("contiguous lpd row"),
            grad.as_ref().map(|_| &mut ds[..]),
        );
        obj += piv * li;
        if let Some(g) = grad.as_deref_mut() {
            for kk in 0..k1 {
                let d = piv * ds[kk];
                g[kk] += d;
                if let Some(cells) = cells {
                    g[k1 + (cells[i] - 1) * k1 + kk] += d;
                }
                for mm in 0..m {
                    g[k1 + (j + mm) * k1 + kk] += d * feats.features[[i, mm]];
                }
            }
        }
    }
    let _ = r;
    obj
}

/// Penalized objective in centered coordinates (full Gaussian log densities,
/// normalization included). Grows without bound as σ→0 with the coefficients
/// at the prior mean, which is why [`fit_map`] keeps σ fixed.
pub fn centered_objective(
    lpd: &LpdMatrix,
    feats: &FeatureSet,
    sigma: f64,
    tau_mu: f64,
    mu: &[f64],
    coef: &Array2<f64>,
    tw: Option<&TimeWeights>,
) -> Result<f64> {
    let (j, m) = basis_dims(feats);
    let k1 = lpd.k() - 1;
    if mu.len() != k1 || coef.dim() != (j + m, k1) {
        return Err(Error::DimensionMismatch(
            "centered parameters do not match the basis".into(),
        ));
    }
    let pi = pi_normalized(tw, lpd.n())?;
    let mut z = Vec::with_capacity(k1 * (1 + j + m));
    z.extend_from_slice(mu);
    for r in 0..j + m {
        for k in 0..k1 {
            z.push(coef[[r, k]]);
        }
    }
    let lik = dense_likelihood(lpd, feats, pi.as_deref(), &z, None);
    let mut pen = 0.0;
    for v in mu {
        pen += -0.5 * v * v / (tau_mu * tau_mu) - tau_mu.ln() - 0.5 * LN_2PI;
    }
    for v in coef.iter() {
        pen += -0.5 * v * v / (sigma * sigma) - sigma.ln() - 0.5 * LN_2PI;
    }
    Ok(lik + pen)
}

/// Posterior mode over (μ, coefficients) with the coefficient scale held
/// fixed at `opts.sigma`, via proximal gradient ascent: the Gaussian prior
/// enters through its exact proximal map, so extreme scales (10⁻⁶ or 10⁶)
/// stay numerically stable. σ→0 recovers complete pooling, σ→∞ no pooling.
pub fn fit_map(
    lpd: &LpdMatrix,
    feats: &FeatureSet,
    opts: &MapOptions,
    tw: Option<&TimeWeights>,
) -> Result<MapFit> {
    if !(opts.sigma.is_finite() && opts.sigma > 0.0) {
        return Err(Error::Invalid(format!(
            "sigma must be positive, got {}",
            opts.sigma
        )));
    }
    if !(opts.tau_mu.is_finite() && opts.tau_mu > 0.0) {
        return Err(Error::Invalid(format!(
            "tau_mu must be positive, got {}",
            opts.tau_mu
        )));
    }
    feats.check()?;
    if lpd.n() != feats.n() {
        return Err(Error::DimensionMismatch(format!(
            "log-density matrix has {} rows but feature set has {}",
            lpd.n(),
            feats.n()
        )));
    }
    let pi = pi_normalized(tw, lpd.n())?;
    let (j, m) = basis_dims(feats);
    let k = lpd.k();
    let k1 = k - 1;
    let r = j + m;
    let dim = k1 * (1 + r);
    let sig2 = opts.sigma * opts.sigma;
    let tau2 = opts.tau_mu * opts.tau_mu;

    let f_and_grad = |z: &[f64], g: &mut [f64]| dense_likelihood(lpd, feats, pi.as_deref(), z, Some(g));
    let penalty = |z: &[f64]| {
        let mut pen = 0.0;
        for v in &z[..k1] {
            pen += -0.5 * v * v / tau2 - opts.tau_mu.ln() - 0.5 * LN_2PI;
        }
        for v in &z[k1..] {
            pen += -0.5 * v * v / sig2 - opts.sigma.ln() - 0.5 * LN_2PI;
        }
        pen
    };
    let prox = |z: &mut [f64], eta: f64| {
        let dm = 1.0 + eta / tau2;
        let dc = 1.0 + eta / sig2;
        for v in &mut z[..k1] {
            *v /= dm;
        }
        for v in &mut z[k1..] {
            *v /= dc;
        }
    };
    let out = proximal_armijo_ascent(
        &f_and_grad,
        &penalty,
        &prox,
        vec![0.0; dim],
        opts.max_iters,
        opts.tol,
    );

    let mu = out.x[..k1].to_vec();
    let mut coef = Array2::zeros((r, k1));
    for rr in 0..r {
        for kk in 0..k1 {
            coef[[rr, kk]] = out.x[k1 + rr * k1 + kk];
        }
    }
    let cells = feats.cell_index.as_deref();
    let mut w = Array2::zeros((lpd.n(), k));
    let mut sc = vec![0.0; k1];
    for i in 0..lpd.n() {
        for kk in 0..k1 {
            let mut s = mu[kk];
            if let Some(cells) = cells {
                s += coef[[cells[i] - 1, kk]];
            }
            for mm in 0..m {
                s += coef[[j + mm, kk]] * feats.features[[i, mm]];
            }
            sc[kk] = s;
        }
        let row = softmax_weights(&sc);
        for kk in 0..k {
            w[[i, kk]] = row[kk];
        }
    }
    Ok(MapFit {
        mu,
        coef,
        weights: SimplexWeights::new(w)?,
        objective: out.objective,
        iterations: out.iters,
        converged: out.converged,
    })
}

// ---------------------------------------------------------------------------
// Small dense linear algebra
// ---------------------------------------------------------------------------

/// Lower-triangular Cholesky factor; None when the matrix is not positive
/// definite to working precision.
pub(crate) fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j2 in 0..=i {
            let mut s = a[[i, j2]];
            for c in 0..j2 {
                s -= l[[i, c]] * l[[j2, c]];
            }
            if i == j2 {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j2]] = s / l[[j2, j2]];
            }
        }
    }
    Some(l)
}

/// Solve Lᵀx = b for lower-triangular L.
fn solve_lower_transpose(l: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        for r in i + 1..n {
            let t = l[[r, i]] * x[r];
            x[i] -= t;
        }
        x[i] /= l[[i, i]];
    }
    x
}

/// Forward-mode derivative of the Cholesky factor: dL = L·Φ(L⁻¹ dK L⁻ᵀ)
/// where Φ keeps the lower triangle and halves the diagonal.
fn chol_diff(l: &Array2<f64>, dk: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    // X = L⁻¹ dK (forward substitution applied to each column).
    let mut xm = dk.clone();
    for col in 0..n {
        for i in 0..n {
            let mut s = xm[[i, col]];
            for c in 0..i {
                s -= l[[i, c]] * xm[[c, col]];
            }
            xm[[i, col]] = s / l[[i, i]];
        }
    }
    // M = X L⁻ᵀ ⇔ Mᵀ = L⁻¹ Xᵀ.
    let mut mt = xm.t().to_owned();
    for col in 0..n {
        for i in 0..n {
            let mut s = mt[[i, col]];
            for c in 0..i {
                s -= l[[i, c]] * mt[[c, col]];
            }
            mt[[i, col]] = s / l[[i, i]];
        }
    }
    let mut phi = mt.t().to_owned();
    for i in 0..n {
        phi[[i, i]] *= 0.5;
        for j2 in i + 1..n {
            phi[[i, j2]] = 0.0;
        }
    }
    l.dot(&phi)
}

/// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi rotations;
/// only used to report how far a correlation matrix is from valid.
fn symmetric_smallest_eigenvalue(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut m = a.clone();
    for _ in 0..200 {
        let mut p = 0;
        let mut q = 1;
        let mut off = 0.0;
        for i in 0..n {
            for j2 in i + 1..n {
                if m[[i, j2]].abs() > off {
                    off = m[[i, j2]].abs();
                    p = i;
                    q = j2;
                }
            }
        }
        if off < 1e-12 || n < 2 {
            break;
        }
        let apq = m[[p, q]];
        let tau = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
        let t = if tau >= 0.0 {
            1.0 / (tau + (1.0 + tau * tau).sqrt())
        } else {
            1.0 / (tau - (1.0 + tau * tau).sqrt())
        };
        let c = 1.0 / (1.0 + t * t).sqrt();
        let s = t * c;
        for i in 0..n {
            let mip = m[[i, p]];
            let miq = m[[i, q]];
            m[[i, p]] = c * mip - s * miq;
            m[[i, q]] = s * mip + c * miq;
        }
        for i in 0..n {
            let mpi = m[[p, i]];
            let mqi = m[[q, i]];
            m[[p, i]] = c * mpi - s * mqi;
            m[[q, i]] = s * mpi + c * mqi;
        }
    }
    let mut min = f64::INFINITY;
    for i in 0..n {
        min = min.min(m[[i, i]]);
    }
    min
}

/// GP coordinates: the feature columns, or the cell labels when the set is
/// purely discrete.
fn gp_coords(feats: &FeatureSet) -> Result<Array2<f64>> {
    if feats.m() > 0 {
        Ok(feats.features.clone())
    } else if let Some(cells) = &feats.cell_index {
        let mut c = Array2::zeros((cells.len(), 1));
        for (i, &v) in cells.iter().enumerate() {
            c[[i, 0]] = v as f64;
        }
        Ok(c)
    } else {
        Err(Error::Invalid(
            "gp prior needs input coordinates: continuous features or cell labels".into(),
        ))
    }
}

fn pairwise_dist2(xs: &Array2<f64>, ys: &Array2<f64>) -> Array2<f64> {
    let (nx, d) = xs.dim();
    let ny = ys.nrows();
    let mut out = Array2::zeros((nx, ny));
    for i in 0..nx {
        for j2 in 0..ny {
            let mut s = 0.0;
            for c in 0..d {
                let t = xs[[i, c]] - ys[[j2, c]];
                s += t * t;
            }
            out[[i, j2]] = s;
        }
    }
    out
}
