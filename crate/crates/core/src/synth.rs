//! Synthetic data generators at desk scale: draws matching the analytic
//! grid scenarios, a constructed discrete-cell generator whose per-cell
//! stacking optimum is known exactly, and a nonlinear regression toy with
//! heteroscedastic outliers.
//!
//! All generators are deterministic per seed (ChaCha8).

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSet, LpdMatrix};
use crate::error::{Error, Result};
use crate::simplex::softmax_full;
use crate::theory::{bernoulli_sqrt, spike_slab, Scenario};

/// Log density of the "hit" point mass in the two-point cell construction.
const CELL_LOG_HIGH: f64 = 0.0;
/// Log density of the "miss" point mass.
const CELL_LOG_LOW: f64 = -3.0;

/// Generator request as stored in config files and produced by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case")]
pub enum GenConfig {
    SpikeSlab {
        delta: f64,
        n: usize,
        seed: u64,
    },
    BernoulliSqrt {
        n: usize,
        seed: u64,
    },
    Cells {
        j: usize,
        k: usize,
        n_per_cell: Vec<usize>,
        effect_size: f64,
        seed: u64,
    },
    NealRegression {
        n: usize,
        seed: u64,
        #[serde(default = "default_outlier_prob")]
        outlier_prob: f64,
    },
}

fn default_outlier_prob() -> f64 {
    0.05
}

/// Draw from the two-uniform-mixtures example.
#[derive(Debug, Clone)]
pub struct SpikeSlabDraw {
    pub scenario: Scenario,
    pub lpd: LpdMatrix,
    pub y: Vec<f64>,
}

/// y ~ uniform(−3,1); lpd columns are the two mixture models' log densities
/// at the sampled points.
pub fn gen_spike_slab(delta: f64, n: usize, seed: u64) -> Result<SpikeSlabDraw> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Invalid(format!("delta must be in [0,1], got {delta}")));
    }
    if n == 0 {
        return Err(Error::Invalid("need n ≥ 1 draws".into()));
    }
    let scenario = spike_slab(delta, 2000)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Vec::with_capacity(n);
    let mut vals = Array2::zeros((n, 2));
    for i in 0..n {
        let yi: f64 = rng.random_range(-3.0..1.0);
        y.push(yi);
        let (d1, d2) = if yi < 0.0 {
            ((1.0 - delta) / 4.0, delta / 4.0)
        } else {
            (delta / 2.0, (1.0 - delta) / 2.0)
        };
        // δ at the ends of [0,1] puts zero density on one branch; the lpd
        // matrix stores −∞-free values only, so floor at a tiny density.
        vals[[i, 0]] = d1.max(f64::MIN_POSITIVE).ln();
        vals[[i, 1]] = d2.max(f64::MIN_POSITIVE).ln();
    }
    Ok(SpikeSlabDraw {
        scenario,
        lpd: LpdMatrix::from_values(vals)?,
        y,
    })
}

/// Draw from the Bernoulli(x) example with the constant-1/2 and √x models.
#[derive(Debug, Clone)]
pub struct BernoulliDraw {
    pub scenario: Scenario,
    pub lpd: LpdMatrix,
    pub x: Vec<f64>,
    pub y: Vec<u8>,
}

pub fn gen_bernoulli_sqrt(n: usize, seed: u64) -> Result<BernoulliDraw> {
    if n == 0 {
        return Err(Error::Invalid("need n ≥ 1 draws".into()));
    }
    let scenario = bernoulli_sqrt(10_000)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut vals = Array2::zeros((n, 2));
    for i in 0..n {
        let xi: f64 = rng.random_range(0.0..1.0);
        let yi = u8::from(rng.random_range(0.0..1.0) < xi);
        let s = xi.sqrt();
        let p2 = if yi == 1 { s } else { 1.0 - s };
        vals[[i, 0]] = 0.5f64.ln();
        vals[[i, 1]] = p2.max(f64::MIN_POSITIVE).ln();
        x.push(xi);
        y.push(yi);
    }
    Ok(BernoulliDraw {
        scenario,
        lpd: LpdMatrix::from_values(vals)?,
        x,
        y,
    })
}

/// Ground truth for the constructed cell generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellTruth {
    /// Per-cell population-optimal weights, J×K.
    pub weights: Vec<Vec<f64>>,
    pub log_dens_high: f64,
    pub log_dens_low: f64,
}

#[derive(Debug, Clone)]
pub struct CellsDraw {
    pub lpd: LpdMatrix,
    pub features: FeatureSet,
    pub truth: CellTruth,
}

/// Discrete-cell generator with exact per-cell optima. Each observation is a
/// two-point problem: the "hit" model has density e⁰, the rest e⁻³. Hitting
/// probabilities t are chosen by inverting the stationarity condition of the
/// population stacking objective,
///   t_k = (w*_k + c) / (1 + K c),  c = e⁻³ / (1 − e⁻³),
/// so the per-cell optimum is exactly the drawn w*. Target weights come
/// from softmax of N(0, effect_size²) scores; effect_size = 0 gives every
/// cell the uniform optimum.
pub fn gen_cells(
    j: usize,
    k: usize,
    n_per_cell: &[usize],
    effect_size: f64,
    seed: u64,
) -> Result<CellsDraw> {
    if j < 2 || k < 2 {
        return Err(Error::Invalid(format!(
            "need J ≥ 2 cells and K ≥ 2 models, got J={j}, K={k}"
        )));
    }
    if n_per_cell.len() != j {
        return Err(Error::DimensionMismatch(format!(
            "{} cell sizes for J={j} cells",
            n_per_cell.len()
        )));
    }
    if n_per_cell.iter().any(|&n| n == 0) {
        return Err(Error::Invalid("every cell needs at least one row".into()));
    }
    if !(effect_size.is_finite() && effect_size >= 0.0) {
        return Err(Error::Invalid(format!(
            "effect_size must be finite and ≥ 0, got {effect_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(j);
    for _ in 0..j {
        let scores: Vec<f64> = if effect_size == 0.0 {
            vec![0.0; k]
        } else {
            let dist = Normal::new(0.0, effect_size).expect("finite spread");
            (0..k).map(|_| dist.sample(&mut rng)).collect()
        };
        weights.push(softmax_full(&scores));
    }

    let low = CELL_LOG_LOW.exp();
    let c = low / (1.0 - low);
    let n_total: usize = n_per_cell.iter().sum();
    let mut vals = Array2::from_elem((n_total, k), CELL_LOG_LOW);
    let mut cells = Vec::with_capacity(n_total);
    let mut row = 0;
    for (cell, (&n_c, w_star)) in n_per_cell.iter().zip(&weights).enumerate() {
        let t: Vec<f64> = w_star
            .iter()
            .map(|w| (w + c) / (1.0 + k as f64 * c))
            .collect();
        let cat = WeightedIndex::new(&t).expect("positive probabilities");
        for _ in 0..n_c {
            let z = cat.sample(&mut rng);
            vals[[row, z]] = CELL_LOG_HIGH;
            cells.push(cell + 1);
            row += 1;
        }
    }
    Ok(CellsDraw {
        lpd: LpdMatrix::from_values(vals)?,
        features: FeatureSet::from_cells(cells),
        truth: CellTruth {
            weights,
            log_dens_high: CELL_LOG_HIGH,
            log_dens_low: CELL_LOG_LOW,
        },
    })
}

/// Two-point lpd rows at explicit per-row target weights (n×K), sharing the
/// cell construction above. The population optimum at any covariate value
/// equals the target weights there, which makes smoothly varying targets a
/// direct ground truth for input-dependent weight fits.
pub fn two_point_rows(targets: &Array2<f64>, seed: u64) -> Result<LpdMatrix> {
    let (n, k) = targets.dim();
    if n == 0 || k < 2 {
        return Err(Error::Invalid("need n ≥ 1 rows and K ≥ 2 models".into()));
    }
    let low = CELL_LOG_LOW.exp();
    let c = low / (1.0 - low);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Array2::from_elem((n, k), CELL_LOG_LOW);
    for i in 0..n {
        let row = targets.row(i);
        let s: f64 = row.iter().sum();
        if row.iter().any(|w| !w.is_finite() || *w < 0.0) || (s - 1.0).abs() > 1e-8 {
            return Err(Error::Invalid(format!(
                "target row {} is not a probability vector",
                i + 1
            )));
        }
        let t: Vec<f64> = row.iter().map(|w| (w + c) / (1.0 + k as f64 * c)).collect();
        let cat = WeightedIndex::new(&t).expect("positive probabilities");
        vals[[i, cat.sample(&mut rng)]] = CELL_LOG_HIGH;
    }
    LpdMatrix::from_values(vals)
}

/// Nonlinear regression toy with occasional high-noise outliers.
#[derive(Debug, Clone)]
pub struct NealDraw {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Noise-free regression function at each x.
    pub f: Vec<f64>,
    pub outlier: Vec<bool>,
}

pub fn neal_f(x: f64) -> f64 {
    0.3 + 0.4 * x + 0.5 * (2.7 * x).sin() + 1.1 / (1.0 + x * x)
}

/// x ~ N(0,1); y = f(x) + N(0, 0.1²) with probability 1−outlier_prob, else
/// y = f(x) + N(0, 1).
pub fn gen_neal_regression(n: usize, seed: u64, outlier_prob: f64) -> Result<NealDraw> {
    if n == 0 {
        return Err(Error::Invalid("need n ≥ 1 draws".into()));
    }
    if !(0.0..=1.0).contains(&outlier_prob) {
        return Err(Error::Invalid(format!(
            "outlier probability must be in [0,1], got {outlier_prob}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = NealDraw {
        x: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
        f: Vec::with_capacity(n),
        outlier: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let x: f64 = std_normal.sample(&mut rng);
        let f = neal_f(x);
        let is_outlier = rng.random_range(0.0..1.0) < outlier_prob;
        let sd = if is_outlier { 1.0 } else { 0.1 };
        let y = f + sd * std_normal.sample(&mut rng);
        out.x.push(x);
        out.y.push(y);
        out.f.push(f);
        out.outlier.push(is_outlier);
    }
    Ok(out)
}
