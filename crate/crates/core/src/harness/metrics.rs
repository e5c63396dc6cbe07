//! Calibration and detection metrics.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp_posterior::PredictiveDist;

/// `0.5 log(2 pi var) + (y - mean)^2 / (2 var)`.
pub fn gaussian_nll(y: f64, dist: &PredictiveDist) -> f64 {
    0.5 * (2.0 * PI * dist.variance).ln() + (y - dist.mean).powi(2) / (2.0 * dist.variance)
}

/// Mean per-point NLL.
pub fn mean_nll(ys: &[f64], dists: &[PredictiveDist]) -> f64 {
    assert_eq!(ys.len(), dists.len());
    ys.iter().zip(dists).map(|(y, d)| gaussian_nll(*y, d)).sum::<f64>() / ys.len().max(1) as f64
}

pub fn rmse(ys: &[f64], preds: &[f64]) -> f64 {
    assert_eq!(ys.len(), preds.len());
    (ys.iter().zip(preds).map(|(y, p)| (y - p).powi(2)).sum::<f64>() / ys.len().max(1) as f64).sqrt()
}

/// Probability that a random OOD score exceeds a random ID score, ties
/// counting one half (Mann-Whitney via average ranks).
pub fn auroc(scores_id: &[f64], scores_ood: &[f64]) -> Result<f64> {
    if scores_id.is_empty() || scores_ood.is_empty() {
        return Err(Error::InvalidConfig("auroc needs nonempty score lists".into()));
    }
    let mut all: Vec<(f64, bool)> = scores_id.iter().map(|&s| (s, false)).chain(scores_ood.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_ood = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based; tied block i..=j shares the average rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_ood += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let n_ood = scores_ood.len() as f64;
    let n_id = scores_id.len() as f64;
    Ok((rank_sum_ood - n_ood * (n_ood + 1.0) / 2.0) / (n_id * n_ood))
}

/// Mean and standard error (sample std over `sqrt(n)`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, se: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, se, n }
    }
}

impl std::fmt::Display for MeanSe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.se)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}
