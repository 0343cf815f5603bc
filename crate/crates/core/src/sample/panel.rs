use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use super::covariance::{cluster_labels, clustered_covariance, per_bank_hac_covariance, CovarianceSpec};
use super::wald::{wald_linear_restrictions, WaldResult};
use super::wls::{weighted_least_squares, RegressionFit};
use super::PanelDataset;
use crate::error::{Error, Result};
use crate::model::{BankTerms, ForecasterKind, LinearForecaster};

/// Rows whose response is smaller than this in magnitude are left out of
/// relative prediction differences.
pub const RELATIVE_DIFF_FLOOR: f64 = 1e-12;

pub const CONST_LABEL: &str = "const";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PanelMode {
    Pooled,
    FixedEffects,
}

impl PanelMode {
    pub fn name(self) -> &'static str {
        match self {
            PanelMode::Pooled => "pooled",
            PanelMode::FixedEffects => "feo",
        }
    }
}

/// Centred dummies `1{s = i} - p_i` for every bank in `bank_order` except the last.
pub fn centered_dummies(row_banks: &[String], bank_order: &[String], shares: &[f64]) -> Result<DMatrix<f64>> {
    if bank_order.len() != shares.len() || bank_order.is_empty() {
        return Err(Error::invalid("one share per bank is required"));
    }
    let index: HashMap<&str, usize> = bank_order.iter().enumerate().map(|(i, b)| (b.as_str(), i)).collect();
    let rows = row_banks
        .iter()
        .map(|b| index.get(b.as_str()).copied().ok_or_else(|| Error::UnknownBank(b.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(dummy_block(&rows, shares))
}

fn dummy_block(rows: &[usize], shares: &[f64]) -> DMatrix<f64> {
    let cols = shares.len() - 1;
    DMatrix::from_fn(rows.len(), cols, |r, i| if rows[r] == i { 1.0 } else { 0.0 } - shares[i])
}

/// Design matrix and column labels for a pooled or fixed-effects panel fit.
///
/// Fixed-effects columns are `const`, one centred dummy per bank except the
/// last (`fe:<bank>`), then the features.
pub fn panel_design(data: &PanelDataset, mode: PanelMode) -> (DMatrix<f64>, Vec<String>) {
    let n = data.len();
    let d = data.dim();
    let dummies = match mode {
        PanelMode::Pooled => DMatrix::zeros(n, 0),
        PanelMode::FixedEffects => dummy_block(data.banks(), &data.weight_shares()),
    };
    let m = dummies.ncols();
    let mut design = DMatrix::zeros(n, 1 + m + d);
    design.column_mut(0).fill(1.0);
    design.columns_mut(1, m).copy_from(&dummies);
    design.columns_mut(1 + m, d).copy_from(data.features());
    let mut labels = vec![CONST_LABEL.to_string()];
    if mode == PanelMode::FixedEffects {
        let ids = data.bank_ids();
        labels.extend(ids[..ids.len() - 1].iter().map(|b| format!("fe:{b}")));
    }
    labels.extend(data.feature_names().iter().cloned());
    (design, labels)
}

/// A panel regression together with the industry forecaster it implies.
#[derive(Debug, Clone)]
pub struct PanelFit {
    pub forecaster: LinearForecaster,
    pub fit: RegressionFit,
    /// Estimated (and discarded) fixed effects, reference bank omitted.
    pub fixed_effects: Option<DVector<f64>>,
    pub mode: PanelMode,
}

impl PanelFit {
    pub fn slope(&self) -> &DVector<f64> {
        &self.forecaster.slope
    }

    /// Column index of feature `j` in the regression design.
    pub fn feature_column(&self, j: usize) -> usize {
        self.fit.coefficients.len() - self.forecaster.dim() + j
    }
}

/// Pooled regression on `(1, X)` or fixed-effects regression on
/// `(1, U, X)` with centred dummies `U`; the fixed effects are discarded in
/// the returned forecaster but reported alongside it.
pub fn fit_panel(data: &PanelDataset, mode: PanelMode) -> Result<PanelFit> {
    if data.is_empty() {
        return Err(Error::Empty("panel".into()));
    }
    let mut warnings = Vec::new();
    if mode == PanelMode::FixedEffects {
        if data.n_banks() < 2 {
            return Err(Error::TooFewBanks {
                need: 2,
                found: data.n_banks(),
            });
        }
        for (b, count) in data.rows_per_bank().iter().enumerate() {
            if *count < 2 {
                warnings.push(format!(
                    "bank `{}` has {count} observation(s); its slope is not identified within bank",
                    data.bank_ids()[b]
                ));
            }
        }
    }
    let (design, labels) = panel_design(data, mode);
    let y = DVector::from_column_slice(data.response());
    let mut fit = weighted_least_squares(&design, &y, data.weights(), &labels)?;
    fit.warnings = warnings;

    let d = data.dim();
    let k = fit.coefficients.len();
    let slope = fit.coefficients.rows(k - d, d).into_owned();
    let intercept = fit.coefficients[0];
    let (forecaster, fixed_effects) = match mode {
        PanelMode::Pooled => (
            LinearForecaster::linear(ForecasterKind::Pooled, intercept, slope, data.n_banks()),
            None,
        ),
        PanelMode::FixedEffects => {
            let delta = fit.coefficients.rows(1, data.n_banks() - 1).into_owned();
            let f = LinearForecaster {
                kind: ForecasterKind::Feo,
                intercept,
                slope,
                n_banks: data.n_banks(),
                per_bank: BankTerms::FixedEffects {
                    delta: delta.clone(),
                    shares: data.weight_shares(),
                    reference: data.n_banks() - 1,
                },
            };
            (f, Some(delta))
        }
    };
    Ok(PanelFit {
        forecaster,
        fit,
        fixed_effects,
        mode,
    })
}

/// [`fit_panel`] with a cluster-robust covariance attached.
pub fn fit_panel_clustered(data: &PanelDataset, mode: PanelMode, spec: CovarianceSpec) -> Result<PanelFit> {
    let mut pf = fit_panel(data, mode)?;
    let (design, _) = panel_design(data, mode);
    let clusters = cluster_labels(data, spec);
    pf.fit.covariance = Some(clustered_covariance(&pf.fit, &design, data.weights(), &clusters)?);
    Ok(pf)
}

/// Parameter whose equality across banks is tested.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeterogeneityTarget {
    Intercepts,
    /// Slope on feature `j`.
    Slope(usize),
}

/// Wald test that one parameter is equal across banks in the unrestricted
/// model with a separate regression per bank (block-diagonal design).
///
/// Time clustering uses the usual cluster sandwich. Bank clustering would be
/// degenerate here, since each bank's scores sum to zero within its own
/// block, so it is replaced by a per-bank Newey-West covariance that keeps
/// the same dependence assumption (arbitrary serial correlation within bank,
/// independence across banks).
pub fn heterogeneity_test(data: &PanelDataset, target: HeterogeneityTarget, spec: CovarianceSpec) -> Result<WaldResult> {
    let nb = data.n_banks();
    if nb < 2 {
        return Err(Error::TooFewBanks { need: 2, found: nb });
    }
    let d = data.dim();
    let offset = match target {
        HeterogeneityTarget::Intercepts => 0,
        HeterogeneityTarget::Slope(j) if j < d => 1 + j,
        HeterogeneityTarget::Slope(j) => {
            return Err(Error::invalid(format!("feature index {j} out of range for {d} features")))
        }
    };
    let block = 1 + d;
    let n = data.len();
    let mut design = DMatrix::zeros(n, nb * block);
    for i in 0..n {
        let c = data.banks()[i] * block;
        design[(i, c)] = 1.0;
        for j in 0..d {
            design[(i, c + 1 + j)] = data.features()[(i, j)];
        }
    }
    let labels: Vec<String> = data
        .bank_ids()
        .iter()
        .flat_map(|b| {
            std::iter::once(format!("{b}:{CONST_LABEL}"))
                .chain(data.feature_names().iter().map(move |f| format!("{b}:{f}")))
        })
        .collect();
    let y = DVector::from_column_slice(data.response());
    let fit = weighted_least_squares(&design, &y, data.weights(), &labels)?;
    let cov = match spec {
        CovarianceSpec::TimeClustered => {
            clustered_covariance(&fit, &design, data.weights(), &cluster_labels(data, spec))?
        }
        CovarianceSpec::BankClustered => {
            per_bank_hac_covariance(&fit, &design, data.weights(), data.banks(), data.times(), None)?
        }
    };
    let last = (nb - 1) * block + offset;
    let mut restrictions = DMatrix::zeros(nb - 1, nb * block);
    for s in 0..nb - 1 {
        restrictions[(s, s * block + offset)] = 1.0;
        restrictions[(s, last)] = -1.0;
    }
    wald_linear_restrictions(&fit.coefficients, &restrictions, &DVector::zeros(nb - 1), &cov)
}

/// Joint test of equal pooled and FEO slopes on one feature.
#[derive(Debug, Clone)]
pub struct PooledVsFeo {
    pub feature: String,
    pub beta_pool: f64,
    pub beta_f: f64,
    pub se_pool: f64,
    pub se_f: f64,
    /// `beta_F - beta_Pool`.
    pub diff_f_minus_pool: f64,
    /// `beta_Pool - beta_F`.
    pub diff_pool_minus_f: f64,
    pub wald: WaldResult,
}

/// Stack the pooled and fixed-effects regressions on a duplicated response
/// and test `beta_Pool,j = beta_F,j` with a covariance clustered per `spec`
/// (both copies of a row fall in the same cluster).
pub fn pooled_vs_feo_test(data: &PanelDataset, feature: usize, spec: CovarianceSpec) -> Result<PooledVsFeo> {
    let d = data.dim();
    if feature >= d {
        return Err(Error::invalid(format!("feature index {feature} out of range for {d} features")));
    }
    if data.n_banks() < 2 {
        return Err(Error::TooFewBanks {
            need: 2,
            found: data.n_banks(),
        });
    }
    let (xp, lp) = panel_design(data, PanelMode::Pooled);
    let (xf, lf) = panel_design(data, PanelMode::FixedEffects);
    let n = data.len();
    let (kp, kf) = (xp.ncols(), xf.ncols());
    let mut design = DMatrix::zeros(2 * n, kp + kf);
    design.view_mut((0, 0), (n, kp)).copy_from(&xp);
    design.view_mut((n, kp), (n, kf)).copy_from(&xf);
    let labels: Vec<String> = lp
        .iter()
        .map(|l| format!("pool:{l}"))
        .chain(lf.iter().map(|l| format!("feo:{l}")))
        .collect();
    let y1 = data.response();
    let y = DVector::from_iterator(2 * n, y1.iter().chain(y1).copied());
    let weights: Vec<f64> = data.weights().iter().chain(data.weights()).copied().collect();
    let fit = weighted_least_squares(&design, &y, &weights, &labels)?;
    let base = cluster_labels(data, spec);
    let clusters: Vec<usize> = base.iter().chain(&base).copied().collect();
    let cov = clustered_covariance(&fit, &design, &weights, &clusters)?;

    let ip = kp - d + feature;
    let jf = kp + kf - d + feature;
    let mut restriction = DMatrix::zeros(1, kp + kf);
    restriction[(0, ip)] = 1.0;
    restriction[(0, jf)] = -1.0;
    let wald = wald_linear_restrictions(&fit.coefficients, &restriction, &DVector::zeros(1), &cov)?;
    let (bp, bf) = (fit.coefficients[ip], fit.coefficients[jf]);
    Ok(PooledVsFeo {
        feature: data.feature_names()[feature].clone(),
        beta_pool: bp,
        beta_f: bf,
        se_pool: cov[(ip, ip)].max(0.0).sqrt(),
        se_f: cov[(jf, jf)].max(0.0).sqrt(),
        diff_f_minus_pool: bf - bp,
        diff_pool_minus_f: bp - bf,
        wald,
    })
}

/// Summary of `|(yhat_A - yhat_B) / y|` over rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeDifferences {
    pub mean: f64,
    pub median: f64,
    /// One entry per row; `None` where `|y|` fell below the floor.
    pub per_row: Vec<Option<f64>>,
    pub excluded: usize,
}

pub fn relative_prediction_differences(
    data: &PanelDataset,
    fa: &LinearForecaster,
    fb: &LinearForecaster,
) -> Result<RelativeDifferences> {
    let per_row = (0..data.len())
        .map(|i| {
            let y = data.response()[i];
            if y.abs() < RELATIVE_DIFF_FLOOR {
                return Ok(None);
            }
            let x = data.feature_row(i);
            let s = Some(data.banks()[i]);
            let (a, b) = (fa.forecast(&x, s)?, fb.forecast(&x, s)?);
            Ok(Some(((a - b) / y).abs()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut kept: Vec<f64> = per_row.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::Empty("rows with nonzero response".into()));
    }
    let excluded = per_row.len() - kept.len();
    let mean = kept.iter().sum::<f64>() / kept.len() as f64;
    kept.sort_by(f64::total_cmp);
    let m = kept.len();
    let median = if m % 2 == 1 {
        kept[m / 2]
    } else {
        0.5 * (kept[m / 2 - 1] + kept[m / 2])
    };
    Ok(RelativeDifferences {
        mean,
        median,
        per_row,
        excluded,
    })
}

/// Lagged-response regressor for autoregressive panel fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArLag {
    /// `y_{t-1}`.
    OneQuarter,
    /// Mean of `y_{t-1}, ..., y_{t-4}`.
    FourQuarterAverage,
}

pub const LAG_LABEL: &str = "lag_response";

/// Regress the response on its own lag (per `lag`) plus the features, with
/// an intercept (pooled) or bank fixed effects. Rows without a complete lag
/// are dropped.
pub fn ar_panel_fit(data: &PanelDataset, lag: ArLag, mode: PanelMode) -> Result<PanelFit> {
    let index: HashMap<(usize, i64), usize> = (0..data.len())
        .map(|i| ((data.banks()[i], data.times()[i]), i))
        .collect();
    let span: i64 = match lag {
        ArLag::OneQuarter => 1,
        ArLag::FourQuarterAverage => 4,
    };
    let mut rows = Vec::new();
    let mut lags = Vec::new();
    for i in 0..data.len() {
        let (b, t) = (data.banks()[i], data.times()[i]);
        let past: Option<Vec<f64>> = (1..=span)
            .map(|l| index.get(&(b, t - l)).map(|&j| data.response()[j]))
            .collect();
        if let Some(v) = past {
            rows.push(i);
            lags.push(v.iter().sum::<f64>() / span as f64);
        }
    }
    if rows.is_empty() {
        return Err(Error::Empty("panel after lag construction".into()));
    }
    let kept = data.select_rows(&rows)?;
    let d = kept.dim();
    let mut features = DMatrix::zeros(rows.len(), d + 1);
    features.set_column(0, &DVector::from_vec(lags));
    features.columns_mut(1, d).copy_from(kept.features());
    let mut names = vec![LAG_LABEL.to_string()];
    names.extend(kept.feature_names().iter().cloned());
    let lagged = PanelDataset::from_indexed(
        kept.bank_ids().to_vec(),
        names,
        kept.banks().to_vec(),
        kept.times().to_vec(),
        kept.response().to_vec(),
        features,
        kept.weights().to_vec(),
    )?;
    fit_panel(&lagged, mode)
}
