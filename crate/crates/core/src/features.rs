//! Hinge-feature construction for continuous inputs.
//!
//! Each continuous input dimension d is split at its sample median into two
//! nonnegative rectified features,
//!
//! ```text
//! f_{2d−1}(x) = max(x_d − med(x_d), 0)
//! f_{2d}(x)   = max(med(x_d) − x_d, 0)
//! ```
//!
//! the positive and negative parts of x_d − med(x_d). Their supports are
//! disjoint, each is monotone in the input tail it covers, and their
//! difference reconstructs x_d − med(x_d) exactly. Medians (and scale
//! factors, when standardizing) are recorded so that held-out inputs can be
//! mapped through the same hinges at prediction time.

use ndarray::Array2;

use crate::data::FeatureSet;
use crate::error::{Error, Result};

/// Frozen rectification parameters: apply the training-set hinges to new data.
#[derive(Debug, Clone, PartialEq)]
pub struct Rectifier {
    /// Per input dimension, the training median.
    pub medians: Vec<f64>,
    /// Per rectified column (2 per dimension), the divisor used for unit
    /// variance; all 1.0 when standardization is off.
    pub scales: Vec<f64>,
    /// Input dimensions whose column was constant: both hinges are all-zero.
    pub constant_dims: Vec<usize>,
    pub standardized: bool,
}

impl Rectifier {
    /// Rectify new rows with the stored medians and scales.
    pub fn apply(&self, x: &Array2<f64>) -> Result<FeatureSet> {
        let d = self.medians.len();
        if x.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "rectifier was built for {d} input dimensions, got {}",
                x.ncols()
            )));
        }
        let n = x.nrows();
        let mut f = Array2::zeros((n, 2 * d));
        for i in 0..n {
            for j in 0..d {
                let centered = x[[i, j]] - self.medians[j];
                f[[i, 2 * j]] = centered.max(0.0) / self.scales[2 * j];
                f[[i, 2 * j + 1]] = (-centered).max(0.0) / self.scales[2 * j + 1];
            }
        }
        let mut fs = FeatureSet::from_features(f);
        fs.standardized = self.standardized;
        fs.medians = self.medians.clone();
        fs.check()?;
        Ok(fs)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Build hinge features from an n×D matrix of continuous inputs. Returns the
/// feature bundle (2D columns) together with the frozen [`Rectifier`].
///
/// With `standardize` set, each nonconstant column is divided by its sample
/// standard deviation; constant input dimensions yield two all-zero columns
/// and are flagged in the rectifier rather than treated as errors.
pub fn rectify_features(x: &Array2<f64>, standardize: bool) -> Result<(FeatureSet, Rectifier)> {
    let (n, d) = x.dim();
    if n == 0 {
        return Err(Error::Invalid("cannot rectify an empty input matrix".into()));
    }
    for ((i, j), v) in x.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "input at row {i}, dimension {} is {v}",
                j + 1
            )));
        }
    }
    let medians: Vec<f64> = (0..d).map(|j| median(x.column(j).to_vec())).collect();
    let mut f = Array2::zeros((n, 2 * d));
    for i in 0..n {
        for j in 0..d {
            let centered = x[[i, j]] - medians[j];
            f[[i, 2 * j]] = centered.max(0.0);
            f[[i, 2 * j + 1]] = (-centered).max(0.0);
        }
    }
    let mut scales = vec![1.0; 2 * d];
    let mut constant_dims = Vec::new();
    for j in 0..d {
        let both_zero = (0..n).all(|i| f[[i, 2 * j]] == 0.0 && f[[i, 2 * j + 1]] == 0.0);
        if both_zero {
            constant_dims.push(j + 1);
        }
    }
    if standardize {
        for c in 0..2 * d {
            let col = f.column(c);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / (n as f64 - 1.0).max(1.0);
            if var > 0.0 {
                scales[c] = var.sqrt();
            }
        }
        for c in 0..2 * d {
            if scales[c] != 1.0 {
                f.column_mut(c).mapv_inplace(|v| v / scales[c]);
            }
        }
    }
    let rect = Rectifier {
        medians: medians.clone(),
        scales,
        constant_dims,
        standardized: standardize,
    };
    let mut fs = FeatureSet::from_features(f);
    fs.standardized = standardize;
    fs.medians = medians;
    fs.check()?;
    Ok((fs, rect))
}
