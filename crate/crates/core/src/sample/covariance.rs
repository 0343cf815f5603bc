use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::{PanelDataset, RegressionFit};
use crate::error::{Error, Result};

/// Which observations may share arbitrarily correlated errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CovarianceSpec {
    BankClustered,
    TimeClustered,
}

impl CovarianceSpec {
    pub fn name(self) -> &'static str {
        match self {
            CovarianceSpec::BankClustered => "bank",
            CovarianceSpec::TimeClustered => "time",
        }
    }
}

/// Dense cluster index per row: bank indices, or quarters renumbered from 0.
pub fn cluster_labels(data: &PanelDataset, spec: CovarianceSpec) -> Vec<usize> {
    match spec {
        CovarianceSpec::BankClustered => data.banks().to_vec(),
        CovarianceSpec::TimeClustered => {
            let index: BTreeMap<i64, usize> = data
                .times()
                .iter()
                .copied()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .enumerate()
                .map(|(i, t)| (t, i))
                .collect();
            data.times().iter().map(|t| index[t]).collect()
        }
    }
}

fn scores(fit: &RegressionFit, design: &DMatrix<f64>, weights: &[f64]) -> Result<DMatrix<f64>> {
    if design.nrows() != fit.residuals.len() || weights.len() != design.nrows() {
        return Err(Error::invalid("covariance inputs do not match the fitted design"));
    }
    let mut s = design.clone();
    for (i, mut row) in s.row_iter_mut().enumerate() {
        row *= weights[i] * fit.residuals[i];
    }
    Ok(s)
}

/// Cluster-robust sandwich `B (sum_g s_g s_g') B` with `B = (X'WX)^-1`,
/// scaled by `G/(G-1) * (N-1)/(N-K)`.
pub fn clustered_covariance(
    fit: &RegressionFit,
    design: &DMatrix<f64>,
    weights: &[f64],
    clusters: &[usize],
) -> Result<DMatrix<f64>> {
    let s = scores(fit, design, weights)?;
    if clusters.len() != s.nrows() {
        return Err(Error::invalid("one cluster label per row is required"));
    }
    let k = s.ncols();
    let mut sums: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
    for (i, &g) in clusters.iter().enumerate() {
        *sums.entry(g).or_insert_with(|| DVector::zeros(k)) += s.row(i).transpose();
    }
    let g = sums.len();
    if g < 2 {
        return Err(Error::TooFewClusters(g));
    }
    let mut meat = DMatrix::zeros(k, k);
    for v in sums.values() {
        meat.ger(1.0, v, v, 1.0);
    }
    let n = s.nrows() as f64;
    let factor = (g as f64 / (g as f64 - 1.0)) * ((n - 1.0) / (n - k as f64).max(1.0));
    Ok(&fit.bread * meat * &fit.bread * factor)
}

/// Newey-West rule-of-thumb lag `floor(4 (T/100)^(2/9))`.
pub fn newey_west_bandwidth(t: usize) -> usize {
    (4.0 * (t as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize
}

/// Serial-correlation-robust covariance with independent banks: a Bartlett
/// kernel over each bank's time-ordered scores, summed across banks, scaled
/// by `N/(N-K)`.
///
/// Used in place of bank clustering when every coefficient belongs to a
/// single bank; there the bank-clustered meat is identically zero because
/// each bank's scores sum to zero.
pub fn per_bank_hac_covariance(
    fit: &RegressionFit,
    design: &DMatrix<f64>,
    weights: &[f64],
    banks: &[usize],
    times: &[i64],
    bandwidth: Option<usize>,
) -> Result<DMatrix<f64>> {
    let s = scores(fit, design, weights)?;
    let k = s.ncols();
    let mut by_bank: BTreeMap<usize, Vec<(i64, usize)>> = BTreeMap::new();
    for i in 0..s.nrows() {
        by_bank.entry(banks[i]).or_default().push((times[i], i));
    }
    let mut meat = DMatrix::zeros(k, k);
    for rows in by_bank.values_mut() {
        rows.sort_unstable();
        let lmax = bandwidth.unwrap_or_else(|| newey_west_bandwidth(rows.len()));
        let v: Vec<DVector<f64>> = rows.iter().map(|&(_, i)| s.row(i).transpose()).collect();
        for a in &v {
            meat.ger(1.0, a, a, 1.0);
        }
        for lag in 1..=lmax.min(v.len().saturating_sub(1)) {
            let kernel = 1.0 - lag as f64 / (lmax as f64 + 1.0);
            let mut gamma = DMatrix::zeros(k, k);
            for t in lag..v.len() {
                gamma.ger(1.0, &v[t], &v[t - lag], 1.0);
            }
            meat += (&gamma + gamma.transpose()) * kernel;
        }
    }
    let n = s.nrows() as f64;
    let factor = n / (n - k as f64).max(1.0);
    Ok(&fit.bread * meat * &fit.bread * factor)
}
