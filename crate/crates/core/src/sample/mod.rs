//! Finite-sample panel estimators and tests.

mod covariance;
mod io;
mod panel;
mod wald;
mod wls;

pub use covariance::{cluster_labels, clustered_covariance, newey_west_bandwidth, per_bank_hac_covariance, CovarianceSpec};
pub use io::{read_panel_csv, read_panel_file, write_panel_csv, TimeFormat};
pub use panel::{
    ar_panel_fit, centered_dummies, fit_panel, fit_panel_clustered, heterogeneity_test, panel_design, pooled_vs_feo_test,
    relative_prediction_differences, ArLag, HeterogeneityTarget, PanelFit, PanelMode, PooledVsFeo,
    RelativeDifferences, CONST_LABEL, LAG_LABEL, RELATIVE_DIFF_FLOOR,
};
pub use wald::{wald_linear_restrictions, WaldResult};
pub use wls::{weighted_least_squares, RegressionFit};

use std::collections::{BTreeMap, HashSet};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Long-format panel: one row per (bank, quarter).
///
/// Banks are stored as indices into `bank_ids`; features as an `n x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    bank_ids: Vec<String>,
    feature_names: Vec<String>,
    banks: Vec<usize>,
    times: Vec<i64>,
    response: Vec<f64>,
    features: DMatrix<f64>,
    weights: Vec<f64>,
}

impl PanelDataset {
    /// Build from rows whose banks are already indices into `bank_ids`.
    pub fn from_indexed(
        bank_ids: Vec<String>,
        feature_names: Vec<String>,
        banks: Vec<usize>,
        times: Vec<i64>,
        response: Vec<f64>,
        features: DMatrix<f64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let n = banks.len();
        if times.len() != n || response.len() != n || weights.len() != n || features.nrows() != n {
            return Err(Error::invalid("panel columns have different lengths"));
        }
        if features.ncols() != feature_names.len() {
            return Err(Error::invalid(format!(
                "{} feature columns but {} feature names",
                features.ncols(),
                feature_names.len()
            )));
        }
        if let Some(&b) = banks.iter().find(|&&b| b >= bank_ids.len()) {
            return Err(Error::BankOutOfRange {
                index: b,
                n: bank_ids.len(),
            });
        }
        if let Some(i) = weights.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidWeights(format!("row {i} has weight {}", weights[i])));
        }
        if response.iter().chain(features.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("panel contains non-finite values"));
        }
        let mut seen = HashSet::with_capacity(n);
        for (b, t) in banks.iter().zip(&times) {
            if !seen.insert((*b, *t)) {
                return Err(Error::invalid(format!(
                    "duplicate row for bank `{}` at time {t}",
                    bank_ids[*b]
                )));
            }
        }
        Ok(Self {
            bank_ids,
            feature_names,
            banks,
            times,
            response,
            features,
            weights,
        })
    }

    /// Build from string bank ids; banks are indexed in sorted id order.
    pub fn new(
        bank_ids: &[String],
        feature_names: Vec<String>,
        times: Vec<i64>,
        response: Vec<f64>,
        features: DMatrix<f64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let index: BTreeMap<&str, usize> = bank_ids
            .iter()
            .map(String::as_str)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect();
        let names = index.keys().map(|s| s.to_string()).collect();
        let banks = bank_ids.iter().map(|id| index[id.as_str()]).collect();
        Self::from_indexed(names, feature_names, banks, times, response, features, weights)
    }

    pub fn len(&self) -> usize {
        self.banks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    pub fn n_banks(&self) -> usize {
        self.bank_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn bank_ids(&self) -> &[String] {
        &self.bank_ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn banks(&self) -> &[usize] {
        &self.banks
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn feature_row(&self, i: usize) -> Vec<f64> {
        self.features.row(i).iter().copied().collect()
    }

    /// Column index of a named feature.
    pub fn feature_index(&self, name: &str) -> Result<usize> {
        self.feature_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("no feature named `{name}`")))
    }

    /// Each bank's share of total weight.
    pub fn weight_shares(&self) -> Vec<f64> {
        let mut totals = vec![0.0; self.n_banks()];
        for (b, w) in self.banks.iter().zip(&self.weights) {
            totals[*b] += w;
        }
        let sum: f64 = totals.iter().sum();
        totals.iter().map(|t| t / sum).collect()
    }

    pub fn rows_per_bank(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_banks()];
        for b in &self.banks {
            counts[*b] += 1;
        }
        counts
    }

    /// Keep the listed rows (in the given order). Banks left without rows are dropped.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut used: Vec<usize> = rows.iter().map(|&i| self.banks[i]).collect();
        used.sort_unstable();
        used.dedup();
        let remap: BTreeMap<usize, usize> = used.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let mut features = DMatrix::zeros(rows.len(), self.dim());
        for (r, &i) in rows.iter().enumerate() {
            features.set_row(r, &self.features.row(i));
        }
        Self::from_indexed(
            used.iter().map(|&b| self.bank_ids[b].clone()).collect(),
            self.feature_names.clone(),
            rows.iter().map(|&i| remap[&self.banks[i]]).collect(),
            rows.iter().map(|&i| self.times[i]).collect(),
            rows.iter().map(|&i| self.response[i]).collect(),
            features,
            rows.iter().map(|&i| self.weights[i]).collect(),
        )
    }

    /// Replace the weight column.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::from_indexed(
            self.bank_ids.clone(),
            self.feature_names.clone(),
            self.banks.clone(),
            self.times.clone(),
            self.response.clone(),
            self.features.clone(),
            weights,
        )
    }

    /// Weighted mean of the response.
    pub fn weighted_mean_response(&self) -> f64 {
        let total: f64 = self.weights.iter().sum();
        self.response.iter().zip(&self.weights).map(|(y, w)| y * w).sum::<f64>() / total
    }
}
