//! File formats: CSV for matrices, JSON for fitted-weight reports.
//!
//! Layouts:
//! - log-density matrix: header `obs_id,M1,...,MK`, one row per observation;
//! - feature set: header `obs_id,cell,f1,...,fM` (the `cell` column is
//!   optional and 1-based);
//! - log-likelihood draws for one model: header `M<k>` repeated per
//!   observation id (`obs_id` columns), one row per posterior draw;
//! - weight report: JSON `{method, weights, objective, iters, converged}`.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSet, LpdMatrix, SimplexWeights};
use crate::error::{Error, Result};

/// Fitted-weight artifact written by every fitting method.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WeightsReport {
    /// "complete", "nopool", "additive_mle", or "hier".
    pub method: String,
    /// One row for complete pooling, J rows for per-cell, n rows pointwise.
    pub weights: Vec<Vec<f64>>,
    /// Total log-score objective at the reported weights, in nats.
    pub objective: f64,
    /// EM/gradient iterations or posterior draws, depending on method.
    pub iters: usize,
    pub converged: bool,
}

impl WeightsReport {
    pub fn from_simplex(
        method: &str,
        w: &SimplexWeights,
        objective: f64,
        iters: usize,
        converged: bool,
    ) -> Self {
        Self {
            method: method.to_string(),
            weights: w.matrix().rows().into_iter().map(|r| r.to_vec()).collect(),
            objective,
            iters,
            converged,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(f)?)
    }
}

/// Read a log-density matrix from `obs_id,M1,...,MK` CSV.
pub fn read_lpd_csv(path: &Path) -> Result<LpdMatrix> {
    let (values, ids) = read_density_columns_csv(path)?;
    LpdMatrix::new(values, ids)
}

/// Same layout as [`read_lpd_csv`] but without the K ≥ 2 requirement, for
/// consumers that accept degenerate single-model tables.
pub fn read_density_columns_csv(path: &Path) -> Result<(Array2<f64>, Vec<String>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || headers.get(0) != Some("obs_id") {
        return Err(Error::Invalid(format!(
            "{}: expected first header column `obs_id`, got {:?}",
            path.display(),
            headers.get(0)
        )));
    }
    let k = headers.len() - 1;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (row_no, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != k + 1 {
            return Err(Error::Invalid(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                row_no + 2,
                rec.len(),
                k + 1
            )));
        }
        ids.push(rec[0].to_string());
        for field in rec.iter().skip(1) {
            values.push(parse_f64(field, path, row_no + 2)?);
        }
    }
    let n = ids.len();
    let values = Array2::from_shape_vec((n, k), values)
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    Ok((values, ids))
}

/// Write a log-density matrix as `obs_id,M1,...,MK` CSV.
pub fn write_lpd_csv(lpd: &LpdMatrix, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    let mut header = vec!["obs_id".to_string()];
    header.extend((1..=lpd.k()).map(|k| format!("M{k}")));
    wtr.write_record(&header)?;
    for i in 0..lpd.n() {
        let mut rec = vec![lpd.obs_ids()[i].clone()];
        rec.extend(lpd.row(i).iter().map(|v| format_f64(*v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read a feature set from `obs_id,cell,f1,...,fM` CSV (`cell` optional).
pub fn read_features_csv(path: &Path) -> Result<FeatureSet> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || headers.get(0) != Some("obs_id") {
        return Err(Error::Invalid(format!(
            "{}: expected first header column `obs_id`, got {:?}",
            path.display(),
            headers.get(0)
        )));
    }
    let has_cell = headers.get(1) == Some("cell");
    let skip = if has_cell { 2 } else { 1 };
    let m = headers.len() - skip;
    let mut cells = Vec::new();
    let mut values = Vec::new();
    let mut n = 0usize;
    for (row_no, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::Invalid(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                row_no + 2,
                rec.len(),
                headers.len()
            )));
        }
        if has_cell {
            let c: usize = rec[1].parse().map_err(|_| {
                Error::Invalid(format!(
                    "{}: row {}: cell label {:?} is not a positive integer",
                    path.display(),
                    row_no + 2,
                    &rec[1]
                ))
            })?;
            cells.push(c);
        }
        for field in rec.iter().skip(skip) {
            values.push(parse_f64(field, path, row_no + 2)?);
        }
        n += 1;
    }
    let features = Array2::from_shape_vec((n, m), values)
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    let fs = FeatureSet {
        features,
        cell_index: if has_cell { Some(cells) } else { None },
        group_of_feature: None,
        standardized: false,
        medians: Vec::new(),
    };
    fs.check()?;
    Ok(fs)
}

/// Write a feature set as `obs_id,cell,f1,...,fM` CSV, using ids "1..n".
pub fn write_features_csv(fs: &FeatureSet, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    let mut header = vec!["obs_id".to_string()];
    if fs.cell_index.is_some() {
        header.push("cell".to_string());
    }
    header.extend((1..=fs.m()).map(|m| format!("f{m}")));
    wtr.write_record(&header)?;
    for i in 0..fs.n() {
        let mut rec = vec![(i + 1).to_string()];
        if let Some(cells) = &fs.cell_index {
            rec.push(cells[i].to_string());
        }
        rec.extend(fs.features.row(i).iter().map(|v| format_f64(*v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read an S×n matrix of per-draw log likelihoods for one model. The header
/// carries the observation ids; each subsequent row is one posterior draw.
pub fn read_loglik_draws_csv(path: &Path) -> Result<(Array2<f64>, Vec<String>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let n = headers.len();
    if n == 0 {
        return Err(Error::Invalid(format!("{}: empty header", path.display())));
    }
    let ids: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    let mut values = Vec::new();
    let mut s = 0usize;
    for (row_no, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != n {
            return Err(Error::Invalid(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                row_no + 2,
                rec.len(),
                n
            )));
        }
        for field in rec.iter() {
            values.push(parse_f64(field, path, row_no + 2)?);
        }
        s += 1;
    }
    if s == 0 {
        return Err(Error::Invalid(format!("{}: no draws", path.display())));
    }
    let values = Array2::from_shape_vec((s, n), values)
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    Ok((values, ids))
}

/// Write an S×n log-likelihood draw matrix with observation ids as header.
pub fn write_loglik_draws_csv(draws: &Array2<f64>, ids: &[String], path: &Path) -> Result<()> {
    if ids.len() != draws.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} ids for {} observation columns",
            ids.len(),
            draws.ncols()
        )));
    }
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(ids)?;
    for row in draws.rows() {
        wtr.write_record(row.iter().map(|v| format_f64(*v)))?;
    }
    wtr.flush()?;
    Ok(())
}

fn parse_f64(field: &str, path: &Path, row: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        Error::Invalid(format!(
            "{}: row {row}: {field:?} is not a number",
            path.display()
        ))
    })
}

/// Round-trip-exact float formatting.
fn format_f64(v: f64) -> String {
    let mut buf = ryu_style(v);
    if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") && !buf.contains("NaN") {
        buf.push_str(".0");
    }
    buf
}

fn ryu_style(v: f64) -> String {
    // {:?} on f64 produces the shortest representation that round-trips.
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("stacking-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn lpd_csv_round_trip_is_exact() {
        let lpd = LpdMatrix::from_values(array![
            [-1.234567890123456, -2.0],
            [-0.1, -0.30000000000000004]
        ])
        .unwrap();
        let path = tmpdir().join("lpd_rt.csv");
        write_lpd_csv(&lpd, &path).unwrap();
        let back = read_lpd_csv(&path).unwrap();
        assert_eq!(lpd, back);
    }

    #[test]
    fn features_csv_round_trip_with_cells() {
        let fs = FeatureSet {
            features: array![[0.5, -1.5], [2.25, 0.0], [1.0, 3.5]],
            cell_index: Some(vec![1, 2, 1]),
            group_of_feature: None,
            standardized: false,
            medians: Vec::new(),
        };
        let path = tmpdir().join("feat_rt.csv");
        write_features_csv(&fs, &path).unwrap();
        let back = read_features_csv(&path).unwrap();
        assert_eq!(fs.features, back.features);
        assert_eq!(fs.cell_index, back.cell_index);
    }

    #[test]
    fn rejects_missing_obs_id_header() {
        let path = tmpdir().join("bad_header.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "id,M1,M2").unwrap();
        writeln!(f, "1,-1.0,-2.0").unwrap();
        assert!(read_lpd_csv(&path).is_err());
    }

    #[test]
    fn rejects_ragged_rows() {
        let path = tmpdir().join("ragged.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "obs_id,M1,M2").unwrap();
        writeln!(f, "1,-1.0").unwrap();
        assert!(read_lpd_csv(&path).is_err());
    }

    #[test]
    fn weights_report_json_round_trip() {
        let report = WeightsReport {
            method: "complete".into(),
            weights: vec![vec![0.755, 0.245]],
            objective: -1.7754,
            iters: 321,
            converged: true,
        };
        let path = tmpdir().join("weights_rt.json");
        report.write_json(&path).unwrap();
        let back = WeightsReport::read_json(&path).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn loglik_draws_round_trip() {
        let draws = array![[-1.0, -2.0, -3.0], [-1.5, -2.5, -3.5]];
        let ids = vec!["1".to_string(), "2".to_string(), "3".to_string()];
        let path = tmpdir().join("ll_rt.csv");
        write_loglik_draws_csv(&draws, &ids, &path).unwrap();
        let (back, back_ids) = read_loglik_draws_csv(&path).unwrap();
        assert_eq!(draws, back);
        assert_eq!(ids, back_ids);
    }
}
