//! Convergence diagnostics for multi-chain MCMC output: rank-normalized
//! split R-hat, bulk effective sample size, and tail effective sample size
//! from quantile-exceedance indicators.
//!
//! All routines take a chains×draws matrix for one scalar parameter. Chains
//! are split in half first, so within-chain drift registers as disagreement
//! between sequences; values are then transformed to normal scores through
//! their pooled average ranks, which makes the statistics invariant to
//! monotone reparameterization and tolerant of heavy tails.

use ndarray::{s, Array2, Array3, ArrayView2};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

/// Diagnostics for one scalar parameter.
#[derive(Debug, Clone, Serialize)]
pub struct ParamDiagnostics {
    /// Rank-normalized split R-hat; `None` with fewer than 2 chains or
    /// fewer than 4 draws per chain.
    pub rhat: Option<f64>,
    pub ess_bulk: f64,
    pub ess_tail: f64,
}

/// Summary across all parameters of a sampling run.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub params: Vec<ParamDiagnostics>,
    pub divergences: usize,
    pub total_draws: usize,
    pub max_rhat: Option<f64>,
    pub min_ess_bulk: f64,
    pub min_ess_tail: f64,
}

impl DiagnosticsReport {
    /// Mixing thresholds used throughout: R-hat below 1.01, bulk ESS above
    /// 100, and at most 10% divergent transitions.
    pub fn healthy(&self) -> bool {
        self.complaints().is_empty()
    }

    pub fn complaints(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(r) = self.max_rhat {
            if !(r < 1.01) {
                out.push(format!("max R-hat {r:.4} ≥ 1.01"));
            }
        }
        if !(self.min_ess_bulk > 100.0) {
            out.push(format!("min bulk ESS {:.1} ≤ 100", self.min_ess_bulk));
        }
        if self.total_draws > 0 && self.divergences * 10 > self.total_draws {
            out.push(format!(
                "{} of {} transitions diverged",
                self.divergences, self.total_draws
            ));
        }
        out
    }
}

/// Run every per-parameter diagnostic on a chains×draws×dim draw block.
pub fn diagnose(draws: &Array3<f64>, divergences: usize) -> DiagnosticsReport {
    let (chains, n, dim) = draws.dim();
    let mut params = Vec::with_capacity(dim);
    for p in 0..dim {
        let m = draws.slice(s![.., .., p]).to_owned();
        params.push(ParamDiagnostics {
            rhat: rhat(m.view()),
            ess_bulk: ess_bulk(m.view()),
            ess_tail: ess_tail(m.view()),
        });
    }
    let max_rhat = params
        .iter()
        .filter_map(|p| p.rhat)
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))));
    let min_ess_bulk = params
        .iter()
        .map(|p| p.ess_bulk)
        .fold(f64::INFINITY, f64::min);
    let min_ess_tail = params
        .iter()
        .map(|p| p.ess_tail)
        .fold(f64::INFINITY, f64::min);
    DiagnosticsReport {
        params,
        divergences,
        total_draws: chains * n,
        max_rhat,
        min_ess_bulk,
        min_ess_tail,
    }
}

/// Rank-normalized split R-hat, the max of the statistic on normal scores
/// of the draws and of their folded (absolute-deviation-from-median) form.
/// `None` when fewer than 2 chains or fewer than 4 draws per chain.
pub fn rhat(chains: ArrayView2<'_, f64>) -> Option<f64> {
    let (m, n) = chains.dim();
    if m < 2 || n < 4 {
        return None;
    }
    let bulk = rhat_basic(&rank_normalize(&split_halves(chains)));
    let med = pooled_median(chains);
    let folded = chains.mapv(|v| (v - med).abs());
    let tail = rhat_basic(&rank_normalize(&split_halves(folded.view())));
    Some(bulk.max(tail))
}

/// Bulk ESS: Geyer initial-monotone-sequence estimate on the normal scores
/// of the split chains.
pub fn ess_bulk(chains: ArrayView2<'_, f64>) -> f64 {
    let split = split_halves(chains);
    if split.ncols() < 4 {
        return f64::NAN;
    }
    ess_basic(&rank_normalize(&split))
}

/// Tail ESS: the smaller of the ESS of the 5% and 95% quantile exceedance
/// indicators. NaN when a tail is empty (degenerate draws).
pub fn ess_tail(chains: ArrayView2<'_, f64>) -> f64 {
    let mut pooled: Vec<f64> = chains.iter().cloned().collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
    let s = pooled.len();
    let q = |p: f64| pooled[((p * (s - 1) as f64).floor() as usize).min(s - 1)];
    let lo = q(0.05);
    let hi = q(0.95);
    let e_lo = ess_basic(&split_halves(chains.mapv(|v| f64::from(v <= lo)).view()));
    let e_hi = ess_basic(&split_halves(chains.mapv(|v| f64::from(v <= hi)).view()));
    e_lo.min(e_hi)
}

/// Split every chain into halves (dropping a trailing odd draw), doubling
/// the number of sequences.
fn split_halves(chains: ArrayView2<'_, f64>) -> Array2<f64> {
    let (m, n) = chains.dim();
    let half = n / 2;
    let mut out = Array2::zeros((2 * m, half));
    for j in 0..m {
        for i in 0..half {
            out[[2 * j, i]] = chains[[j, i]];
            out[[2 * j + 1, i]] = chains[[j, half + i]];
        }
    }
    out
}

/// Pooled average ranks (ties share their mean rank) mapped through the
/// normal quantile function with the Blom offset (r − 3/8)/(S + 1/4).
fn rank_normalize(seqs: &Array2<f64>) -> Array2<f64> {
    let (m, n) = seqs.dim();
    let s = m * n;
    let flat: Vec<f64> = seqs.iter().cloned().collect();
    let mut idx: Vec<usize> = (0..s).collect();
    idx.sort_by(|&a, &b| flat[a].partial_cmp(&flat[b]).expect("finite draws"));
    let mut rank = vec![0.0; s];
    let mut start = 0;
    while start < s {
        let mut end = start + 1;
        while end < s && flat[idx[end]] == flat[idx[start]] {
            end += 1;
        }
        // Ranks are 1-based; a run of equal values gets the run's mean rank.
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            rank[i] = avg;
        }
        start = end;
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let z: Vec<f64> = rank
        .iter()
        .map(|r| normal.inverse_cdf((r - 0.375) / (s as f64 + 0.25)))
        .collect();
    Array2::from_shape_vec((m, n), z).expect("shape preserved")
}

fn pooled_median(chains: ArrayView2<'_, f64>) -> f64 {
    let mut v: Vec<f64> = chains.iter().cloned().collect();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
    let s = v.len();
    if s % 2 == 1 {
        v[s / 2]
    } else {
        0.5 * (v[s / 2 - 1] + v[s / 2])
    }
}

/// Classic split R-hat on prepared sequences: sqrt(var_plus / W) with
/// var_plus = (n−1)/n·W + B/n. Zero within-variance is either perfect
/// agreement (1.0) or frozen disagreeing chains (infinity).
fn rhat_basic(seqs: &Array2<f64>) -> f64 {
    let (m, n) = seqs.dim();
    let means: Vec<f64> = (0..m).map(|j| seqs.row(j).mean().expect("nonempty")).collect();
    let vars: Vec<f64> = (0..m)
        .map(|j| {
            let mu = means[j];
            seqs.row(j).iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64
        })
        .collect();
    let w = vars.iter().sum::<f64>() / m as f64;
    let grand = means.iter().sum::<f64>() / m as f64;
    let b_over_n =
        means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1) as f64;
    if w == 0.0 {
        return if b_over_n == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = w * (n - 1) as f64 / n as f64 + b_over_n;
    (var_plus / w).sqrt()
}

/// Geyer initial-monotone-positive-sequence ESS on prepared sequences:
/// τ = −1 + 2·Σ paired autocorrelation sums (pairs truncated at the first
/// non-positive one and forced non-increasing), ESS = mn/τ.
fn ess_basic(seqs: &Array2<f64>) -> f64 {
    let (m, n) = seqs.dim();
    if n < 4 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..m).map(|j| seqs.row(j).mean().expect("nonempty")).collect();
    // Biased (1/n) autocovariances, as the ratio estimator expects.
    let acov = |j: usize, t: usize| -> f64 {
        let row = seqs.row(j);
        let mu = means[j];
        (0..n - t)
            .map(|i| (row[i] - mu) * (row[i + t] - mu))
            .sum::<f64>()
            / n as f64
    };
    let mean_var = (0..m).map(|j| acov(j, 0)).sum::<f64>() / m as f64 * n as f64
        / (n - 1) as f64;
    let mut var_plus = mean_var * (n - 1) as f64 / n as f64;
    if m > 1 {
        let grand = means.iter().sum::<f64>() / m as f64;
        var_plus +=
            means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1) as f64;
    }
    if var_plus == 0.0 {
        return f64::NAN;
    }
    let rho = |t: usize| -> f64 {
        let mean_acov = (0..m).map(|j| acov(j, t)).sum::<f64>() / m as f64;
        1.0 - (mean_var - mean_acov) / var_plus
    };
    let mut sum_pairs = 0.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let pair = rho(t) + rho(t + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum_pairs += pair;
        prev = pair;
        t += 2;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / ((m * n) as f64).log10());
    (m * n) as f64 / tau
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Normal as NormalDist;

    fn iid_chains(m: usize, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = NormalDist::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((m, n), |_| dist.sample(&mut rng))
    }

    #[test]
    fn iid_chains_look_converged() {
        let chains = iid_chains(4, 1000, 1);
        let r = rhat(chains.view()).unwrap();
        assert!((r - 1.0).abs() < 0.01, "rhat {r}");
        let e = ess_bulk(chains.view());
        assert!(e > 2500.0, "bulk ess {e}");
        let et = ess_tail(chains.view());
        assert!(et > 800.0, "tail ess {et}");
    }

    #[test]
    fn identical_chains_of_iid_draws() {
        let one = iid_chains(1, 500, 2);
        let mut chains = Array2::zeros((4, 500));
        for j in 0..4 {
            chains.row_mut(j).assign(&one.row(0));
        }
        let r = rhat(chains.view()).unwrap();
        assert!((r - 1.0).abs() < 0.01, "rhat {r}");
    }

    #[test]
    fn frozen_disagreeing_chains_blow_up() {
        let mut chains = Array2::zeros((2, 100));
        chains.row_mut(0).fill(0.0);
        chains.row_mut(1).fill(5.0);
        let r = rhat(chains.view()).unwrap();
        // Rank means of identical values can differ by an ulp, so W may be
        // ~1e−32 instead of exactly 0; either way the statistic explodes.
        assert!(r > 1e3, "rhat {r}");
    }

    #[test]
    fn all_identical_draws_are_flat_not_divergent() {
        let chains = Array2::from_elem((3, 50), 2.5);
        assert_eq!(rhat(chains.view()).unwrap(), 1.0);
        assert!(ess_tail(chains.view()).is_nan());
    }

    #[test]
    fn single_chain_has_no_rhat() {
        let chains = iid_chains(1, 100, 3);
        assert!(rhat(chains.view()).is_none());
        // ESS still defined through splitting.
        assert!(ess_bulk(chains.view()) > 10.0);
    }

    #[test]
    fn ar1_ess_matches_analytic_rate() {
        let phi: f64 = 0.9;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dist = NormalDist::new(0.0, (1.0 - phi * phi).sqrt()).unwrap();
        let (m, n) = (4, 5000);
        let mut chains = Array2::zeros((m, n));
        for j in 0..m {
            let mut x = 0.0;
            for i in 0..n {
                x = phi * x + dist.sample(&mut rng);
                chains[[j, i]] = x;
            }
        }
        let expected = (m * n) as f64 * (1.0 - phi) / (1.0 + phi);
        let e = ess_bulk(chains.view());
        assert!(
            (e - expected).abs() / expected < 0.3,
            "ess {e}, expected {expected}"
        );
        let r = rhat(chains.view()).unwrap();
        assert!(r < 1.01, "rhat {r}");
    }

    #[test]
    fn rank_normalization_is_monotone_invariant() {
        let chains = iid_chains(4, 400, 7);
        let warped = chains.mapv(|v| v.exp());
        let a = ess_bulk(chains.view());
        let b = ess_bulk(warped.view());
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        let ra = rhat(chains.view()).unwrap();
        let rb = rhat(warped.view()).unwrap();
        // Folding uses the median, which commutes with monotone maps only
        // approximately; bulk ranks are exactly invariant.
        assert!((ra - rb).abs() < 0.005, "{ra} vs {rb}");
    }

    #[test]
    fn diagnose_summarizes_across_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dist = NormalDist::new(0.0, 1.0).unwrap();
        let draws = Array3::from_shape_fn((4, 500, 3), |_| dist.sample(&mut rng));
        let rep = diagnose(&draws, 0);
        assert_eq!(rep.params.len(), 3);
        assert!(rep.healthy(), "{:?}", rep.complaints());
        assert_eq!(rep.total_draws, 2000);

        let rep = diagnose(&draws, 500);
        assert!(!rep.healthy());
        assert!(rep.complaints()[0].contains("diverged"));
    }
}
