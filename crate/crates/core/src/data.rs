//! Domain types shared by every fitting path: the matrix of leave-one-out
//! log predictive densities, the input-feature bundle, and simplex weights.
//!
//! All log densities are in nats, and every score reported by this crate
//! stays in nats. Cell and group labels are 1-based in files (matching the
//! on-disk CSV layout) and are kept 1-based in memory; accessors that index
//! into matrices subtract 1 at the use site.

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// n×K matrix of log predictive densities, typically leave-one-out values
/// p_{k,−i} evaluated at the held-out observation. Entries must be finite:
/// a −∞ entry would silently pin a weight at zero, and NaN poisons the
/// objective, so both are rejected up front.
#[derive(Debug, Clone, PartialEq)]
pub struct LpdMatrix {
    values: Array2<f64>,
    obs_ids: Vec<String>,
}

impl LpdMatrix {
    /// Build and validate. Requires n ≥ 1, K ≥ 2, all entries finite, and
    /// one id per row.
    pub fn new(values: Array2<f64>, obs_ids: Vec<String>) -> Result<Self> {
        let (n, k) = values.dim();
        if n == 0 {
            return Err(Error::Invalid("log-density matrix has no rows".into()));
        }
        if k < 2 {
            return Err(Error::Invalid(format!(
                "need at least 2 candidate models, got K={k}"
            )));
        }
        if obs_ids.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} obs_ids for {} rows",
                obs_ids.len(),
                n
            )));
        }
        for ((i, k), v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "log density at row {i} (obs {}), model {} is {v}",
                    obs_ids[i],
                    k + 1
                )));
            }
        }
        Ok(Self { values, obs_ids })
    }

    /// Convenience constructor with synthetic ids "1".."n".
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let ids = (1..=values.nrows()).map(|i| i.to_string()).collect();
        Self::new(values, ids)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn obs_ids(&self) -> &[String] {
        &self.obs_ids
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    /// Rows restricted to one cell, in original order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut vals = Array2::zeros((rows.len(), self.k()));
        let mut ids = Vec::with_capacity(rows.len());
        for (out, &i) in rows.iter().enumerate() {
            vals.row_mut(out).assign(&self.values.row(i));
            ids.push(self.obs_ids[i].clone());
        }
        Self::new(vals, ids)
    }
}

/// Input features for input-dependent weights: an n×M design matrix of
/// basis functions f_m(x_i), an optional discrete cell label per row, and
/// optional feature-group labels used by the grouped prior.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// n×M basis matrix; M may be 0 when only cell labels are used.
    pub features: Array2<f64>,
    /// Optional per-row cell label in 1..=J.
    pub cell_index: Option<Vec<usize>>,
    /// Optional per-feature group label in 1..=G (length M).
    pub group_of_feature: Option<Vec<usize>>,
    /// Set when columns have been scaled to unit sample variance.
    pub standardized: bool,
    /// Medians of the original continuous inputs, stored by rectification so
    /// the same hinges can be applied to new data.
    pub medians: Vec<f64>,
}

impl FeatureSet {
    /// Feature bundle with no cells and no groups.
    pub fn from_features(features: Array2<f64>) -> Self {
        Self {
            features,
            cell_index: None,
            group_of_feature: None,
            standardized: false,
            medians: Vec::new(),
        }
    }

    /// Cell-only bundle (M = 0) for purely discrete inputs.
    pub fn from_cells(cell_index: Vec<usize>) -> Self {
        let n = cell_index.len();
        Self {
            features: Array2::zeros((n, 0)),
            cell_index: Some(cell_index),
            group_of_feature: None,
            standardized: false,
            medians: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn m(&self) -> usize {
        self.features.ncols()
    }

    /// Number of cells J (max label) if cell labels are present.
    pub fn n_cells(&self) -> Option<usize> {
        self.cell_index.as_ref().map(|c| c.iter().copied().max().unwrap_or(0))
    }

    /// Number of feature groups G (max label) if group labels are present.
    pub fn n_groups(&self) -> Option<usize> {
        self.group_of_feature
            .as_ref()
            .map(|g| g.iter().copied().max().unwrap_or(0))
    }

    /// Row indices belonging to each cell, 0-based cell order.
    pub fn rows_by_cell(&self) -> Result<Vec<Vec<usize>>> {
        let cells = self
            .cell_index
            .as_ref()
            .ok_or_else(|| Error::Invalid("feature set has no cell labels".into()))?;
        let j = self.n_cells().unwrap_or(0);
        let mut rows = vec![Vec::new(); j];
        for (i, &c) in cells.iter().enumerate() {
            rows[c - 1].push(i);
        }
        Ok(rows)
    }

    /// Structural checks: label ranges, no empty cells, group vector length,
    /// finite features, and the standardization flag's unit-variance claim.
    pub fn check(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::Invalid("feature set has no rows".into()));
        }
        for ((i, m), v) in self.features.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "feature at row {i}, column {} is {v}",
                    m + 1
                )));
            }
        }
        if let Some(cells) = &self.cell_index {
            if cells.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} cell labels for {} rows",
                    cells.len(),
                    n
                )));
            }
            if cells.iter().any(|&c| c == 0) {
                return Err(Error::Invalid("cell labels are 1-based; found 0".into()));
            }
            let j = *cells.iter().max().unwrap();
            let mut seen = vec![false; j];
            for &c in cells {
                seen[c - 1] = true;
            }
            let empty: Vec<usize> = (1..=j).filter(|&c| !seen[c - 1]).collect();
            if !empty.is_empty() {
                return Err(Error::EmptyCells(empty));
            }
        }
        if let Some(groups) = &self.group_of_feature {
            if groups.len() != self.m() {
                return Err(Error::DimensionMismatch(format!(
                    "{} group labels for {} features",
                    groups.len(),
                    self.m()
                )));
            }
            if groups.iter().any(|&g| g == 0) {
                return Err(Error::Invalid("group labels are 1-based; found 0".into()));
            }
        }
        if self.standardized {
            for (m, col) in self.features.columns().into_iter().enumerate() {
                let mean = col.sum() / n as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
                // All-zero columns (rectified constants) are exempt: there is
                // nothing to scale.
                if var > 0.0 && (var - 1.0).abs() > 1e-6 {
                    return Err(Error::Invalid(format!(
                        "standardized flag set but column {} has variance {var:.6}",
                        m + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Simplex weights: one row per observation (or a single shared row). Every
/// row is nonnegative and sums to 1 within 1e−10.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexWeights {
    w: Array2<f64>,
}

impl SimplexWeights {
    pub fn new(w: Array2<f64>) -> Result<Self> {
        for ((i, k), v) in w.indexed_iter() {
            if !v.is_finite() || *v < 0.0 || *v > 1.0 + 1e-12 {
                return Err(Error::Invalid(format!(
                    "weight at row {i}, model {} is {v}; must lie in [0,1]",
                    k + 1
                )));
            }
        }
        for (i, row) in w.rows().into_iter().enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::Invalid(format!(
                    "weight row {i} sums to {s:.12}, not 1"
                )));
            }
        }
        Ok(Self { w })
    }

    /// Single shared weight vector (complete pooling).
    pub fn single(w: Vec<f64>) -> Result<Self> {
        let k = w.len();
        Self::new(Array2::from_shape_vec((1, k), w).expect("shape"))
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn nrows(&self) -> usize {
        self.w.nrows()
    }

    pub fn k(&self) -> usize {
        self.w.ncols()
    }

    /// The shared vector, when there is exactly one row.
    pub fn as_single(&self) -> Option<Vec<f64>> {
        if self.w.nrows() == 1 {
            Some(self.w.row(0).to_vec())
        } else {
            None
        }
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.w.row(i)
    }
}

/// Unconstrained weight parameters produced by the additive fitters: scores
/// for the first K−1 models (model K is the softmax reference).
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedParams {
    /// M×(K−1) (or J×(K−1) for discrete cells) feature coefficients.
    pub alpha: Array2<f64>,
    /// Length-(K−1) intercepts.
    pub mu: Vec<f64>,
    /// Log scale parameters; layout depends on the prior in use.
    pub log_sigma: Vec<f64>,
    /// Prior-specific latents (local scales, GP latents, kernel hyperparameters).
    pub extra: Vec<f64>,
}

impl UnconstrainedParams {
    pub fn check(&self) -> Result<()> {
        let all_finite = self.alpha.iter().all(|v| v.is_finite())
            && self.mu.iter().all(|v| v.is_finite())
            && self.log_sigma.iter().all(|v| v.is_finite())
            && self.extra.iter().all(|v| v.is_finite());
        if all_finite {
            Ok(())
        } else {
            Err(Error::NonFinite("unconstrained parameter vector".into()))
        }
    }
}

/// Cross-check a log-density matrix against a feature bundle and return the
/// pair unchanged on success. Idempotent: validating twice is a no-op.
pub fn validate(lpd: LpdMatrix, feats: FeatureSet) -> Result<(LpdMatrix, FeatureSet)> {
    if lpd.n() != feats.n() {
        return Err(Error::DimensionMismatch(format!(
            "log-density matrix has {} rows but feature set has {}",
            lpd.n(),
            feats.n()
        )));
    }
    feats.check()?;
    Ok((lpd, feats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn lpd_2x2() -> LpdMatrix {
        LpdMatrix::from_values(array![[-1.0, -2.0], [-0.5, -0.7]]).unwrap()
    }

    #[test]
    fn rejects_single_model() {
        let err = LpdMatrix::from_values(array![[-1.0], [-2.0]]).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn rejects_non_finite_with_location() {
        let err =
            LpdMatrix::from_values(array![[-1.0, f64::INFINITY], [-0.5, -0.7]]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 0") && msg.contains("model 2"), "{msg}");
    }

    #[test]
    fn dimension_mismatch_names_both_sizes() {
        let feats = FeatureSet::from_features(Array2::zeros((9, 1)));
        let lpd = LpdMatrix::from_values(Array2::from_elem((10, 2), -1.0)).unwrap();
        let msg = validate(lpd, feats).unwrap_err().to_string();
        assert!(msg.contains("10") && msg.contains('9'), "{msg}");
    }

    #[test]
    fn empty_cell_reported_with_id() {
        let mut feats = FeatureSet::from_cells(vec![1, 1, 3]);
        feats.cell_index = Some(vec![1, 1, 3]); // cell 2 missing
        let err = feats.check().unwrap_err();
        match err {
            Error::EmptyCells(ids) => assert_eq!(ids, vec![2]),
            other => panic!("expected EmptyCells, got {other}"),
        }
    }

    #[test]
    fn validate_is_idempotent() {
        let feats = FeatureSet::from_cells(vec![1, 2]);
        let (l1, f1) = validate(lpd_2x2(), feats).unwrap();
        let (l2, f2) = validate(l1.clone(), f1.clone()).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(f1, f2);
    }

    #[test]
    fn simplex_rows_must_sum_to_one() {
        assert!(SimplexWeights::single(vec![0.6, 0.4]).is_ok());
        assert!(SimplexWeights::single(vec![0.6, 0.5]).is_err());
        assert!(SimplexWeights::single(vec![1.1, -0.1]).is_err());
    }
}
