//! Additive models fitted by backfitting, with optional bank offsets.

mod smoothers;

pub use smoothers::{
    Basis, CubicSplinePenalized, Linear, PreparedSmoother, RunningMeanBins, SmoothFunction, Smoother, SplineBasis,
    DOF_TOL, MAX_INTERIOR_KNOTS,
};

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};
use crate::sample::{weighted_least_squares, PanelDataset};

/// One additive term: a smoother applied to one feature column.
#[derive(Debug, Clone)]
pub struct TermSpec {
    pub label: String,
    pub feature: usize,
    pub smoother: Arc<dyn Smoother>,
}

impl TermSpec {
    pub fn new(label: impl Into<String>, feature: usize, smoother: impl Smoother + 'static) -> Self {
        Self {
            label: label.into(),
            feature,
            smoother: Arc::new(smoother),
        }
    }
}

/// One term of every feature column, each smoothed by a penalized spline
/// with `dof` degrees of freedom.
pub fn spline_terms(data: &PanelDataset, dof: f64) -> Vec<TermSpec> {
    data.feature_names()
        .iter()
        .enumerate()
        .map(|(j, name)| TermSpec::new(name.clone(), j, CubicSplinePenalized(dof)))
        .collect()
}

/// Linear terms on every feature column.
pub fn linear_terms(data: &PanelDataset) -> Vec<TermSpec> {
    data.feature_names()
        .iter()
        .enumerate()
        .map(|(j, name)| TermSpec::new(name.clone(), j, Linear))
        .collect()
}

/// Append the product of two feature columns as a new feature.
pub fn with_product_feature(data: &PanelDataset, a: usize, b: usize, name: &str) -> Result<PanelDataset> {
    let d = data.dim();
    if a >= d || b >= d {
        return Err(Error::invalid("product feature refers to a missing column"));
    }
    let n = data.len();
    let mut features = DMatrix::zeros(n, d + 1);
    features.columns_mut(0, d).copy_from(data.features());
    for i in 0..n {
        features[(i, d)] = data.features()[(i, a)] * data.features()[(i, b)];
    }
    let mut names = data.feature_names().to_vec();
    names.push(name.to_string());
    PanelDataset::from_indexed(
        data.bank_ids().to_vec(),
        names,
        data.banks().to_vec(),
        data.times().to_vec(),
        data.response().to_vec(),
        features,
        data.weights().to_vec(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackfitOptions {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for BackfitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_sweeps: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FittedTerm {
    pub label: String,
    pub feature: usize,
    pub smoother: String,
    pub dof: f64,
    pub function: SmoothFunction,
    /// Centered term values at the training rows.
    pub fitted: DVector<f64>,
}

/// Result of backfitting `y = f0 + sum_j f_j(x_j) [+ f(bank)] + e`.
#[derive(Debug, Clone)]
pub struct AdditiveModel {
    pub f0: f64,
    pub terms: Vec<FittedTerm>,
    /// Centered bank offsets indexed like `bank_ids`, when fitted.
    pub bank_offsets: Option<Vec<f64>>,
    pub bank_ids: Vec<String>,
    pub converged: bool,
    pub sweeps: usize,
    pub max_change_last_sweep: f64,
    /// Weighted SSR after each sweep.
    pub ssr_history: Vec<f64>,
    /// Weighted SSR plus roughness penalties after each sweep.
    pub objective_history: Vec<f64>,
    pub ssr: f64,
    pub n_obs: usize,
}

impl AdditiveModel {
    /// `f0 + sum_j f_j(x_j)`: bank offsets are not used.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.f0 + self.terms.iter().map(|t| t.function.eval(x[t.feature])).sum::<f64>()
    }

    /// Prediction with the bank offset added back.
    pub fn predict_with_offset(&self, x: &[f64], bank: usize) -> Result<f64> {
        let offsets = self.bank_offsets.as_ref().ok_or(Error::invalid("model has no bank offsets"))?;
        let o = offsets.get(bank).ok_or(Error::BankOutOfRange {
            index: bank,
            n: offsets.len(),
        })?;
        Ok(self.predict(x) + o)
    }

    /// Model degrees of freedom excluding the constant.
    pub fn model_dof(&self) -> f64 {
        let offsets = self.bank_offsets.as_ref().map_or(0, |o| o.len().saturating_sub(1));
        self.terms.iter().map(|t| t.dof).sum::<f64>() + offsets as f64
    }

    /// `N - 1 - model dof`.
    pub fn residual_dof(&self) -> f64 {
        self.n_obs as f64 - 1.0 - self.model_dof()
    }

    /// Per-row predictions without offsets.
    pub fn fitted_without_offsets(&self) -> DVector<f64> {
        let n = self.n_obs;
        self.terms
            .iter()
            .fold(DVector::from_element(n, self.f0), |acc, t| acc + &t.fitted)
    }

    /// Per-row bank offsets (zeros when none were fitted).
    pub fn row_offsets(&self, data: &PanelDataset) -> DVector<f64> {
        match &self.bank_offsets {
            Some(o) => DVector::from_iterator(data.len(), data.banks().iter().map(|&b| o[b])),
            None => DVector::zeros(data.len()),
        }
    }
}

fn weighted_rms(v: &DVector<f64>, w: &DVector<f64>, total: f64) -> f64 {
    (v.iter().zip(w.iter()).map(|(a, b)| b * a * a).sum::<f64>() / total).sqrt()
}

/// Cyclic backfitting of `terms` (and optionally bank offsets) on the panel.
pub fn backfit(
    data: &PanelDataset,
    terms: &[TermSpec],
    include_bank_offsets: bool,
    opts: BackfitOptions,
) -> Result<AdditiveModel> {
    if terms.is_empty() {
        return Err(Error::invalid("an additive model needs at least one term"));
    }
    if !(opts.tol > 0.0) || opts.max_sweeps == 0 {
        return Err(Error::invalid("backfitting needs tol > 0 and at least one sweep"));
    }
    if let Some(t) = terms.iter().find(|t| t.feature >= data.dim()) {
        return Err(Error::invalid(format!("term `{}` refers to missing feature {}", t.label, t.feature)));
    }
    if include_bank_offsets && data.n_banks() < 2 {
        return Err(Error::TooFewBanks {
            need: 2,
            found: data.n_banks(),
        });
    }
    let n = data.len();
    let w = DVector::from_column_slice(data.weights());
    let total = w.sum();
    let y = DVector::from_column_slice(data.response());
    let f0 = y.dot(&w) / total;

    let prepared: Vec<PreparedSmoother> = terms
        .iter()
        .map(|t| {
            let x: Vec<f64> = data.features().column(t.feature).iter().copied().collect();
            t.smoother.prepare(&x, data.weights())
        })
        .collect::<Result<_>>()?;
    let mut fitted: Vec<DVector<f64>> = vec![DVector::zeros(n); terms.len()];
    let mut functions: Vec<Option<SmoothFunction>> = vec![None; terms.len()];
    let shares = data.weight_shares();
    let mut offsets = vec![0.0; data.n_banks()];
    let mut row_offsets = DVector::zeros(n);

    let mut ssr_history = Vec::new();
    let mut objective_history = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    let mut max_change = f64::INFINITY;
    let base = y.add_scalar(-f0);
    let mut total_fit: DVector<f64> = DVector::zeros(n);

    while sweeps < opts.max_sweeps {
        sweeps += 1;
        max_change = 0.0_f64;
        for (j, p) in prepared.iter().enumerate() {
            let partial = &base - (&total_fit - &fitted[j]) - &row_offsets;
            let (f, new) = p.smooth(partial.as_slice());
            max_change = max_change.max(weighted_rms(&(&new - &fitted[j]), &w, total));
            total_fit += &new - &fitted[j];
            fitted[j] = new;
            functions[j] = Some(f);
        }
        if include_bank_offsets {
            let partial = &base - &total_fit;
            let mut sums = vec![(0.0, 0.0); data.n_banks()];
            for i in 0..n {
                let s = &mut sums[data.banks()[i]];
                s.0 += w[i] * partial[i];
                s.1 += w[i];
            }
            let means: Vec<f64> = sums.iter().map(|(a, b)| a / b).collect();
            let center: f64 = means.iter().zip(&shares).map(|(m, p)| m * p).sum();
            offsets = means.iter().map(|m| m - center).collect();
            let new = DVector::from_iterator(n, data.banks().iter().map(|&b| offsets[b]));
            max_change = max_change.max(weighted_rms(&(&new - &row_offsets), &w, total));
            row_offsets = new;
        }
        let resid = &base - &total_fit - &row_offsets;
        let ssr: f64 = resid.iter().zip(w.iter()).map(|(e, wi)| wi * e * e).sum();
        if !ssr.is_finite() || !max_change.is_finite() {
            return Err(Error::NonFinite {
                context: "backfitting".into(),
                sweep: sweeps,
            });
        }
        let penalty: f64 = prepared
            .iter()
            .zip(&functions)
            .map(|(p, f)| p.penalty_value(&f.as_ref().expect("fitted this sweep").coefficients))
            .sum();
        ssr_history.push(ssr);
        objective_history.push(ssr + penalty);
        if max_change < opts.tol {
            converged = true;
            break;
        }
    }

    let fitted_terms = terms
        .iter()
        .zip(functions)
        .zip(fitted)
        .map(|((spec, f), values)| FittedTerm {
            label: spec.label.clone(),
            feature: spec.feature,
            smoother: spec.smoother.label(),
            dof: spec.smoother.dof(),
            function: f.expect("at least one sweep ran"),
            fitted: values,
        })
        .collect();
    Ok(AdditiveModel {
        f0,
        terms: fitted_terms,
        bank_offsets: include_bank_offsets.then_some(offsets),
        bank_ids: data.bank_ids().to_vec(),
        converged,
        sweeps,
        max_change_last_sweep: max_change,
        ssr: *ssr_history.last().expect("at least one sweep ran"),
        ssr_history,
        objective_history,
        n_obs: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GamMode {
    Pooled,
    /// Bank offsets fitted, then dropped from the forecaster.
    Feo,
}

/// Pooled additive model, or one with bank offsets that are kept for
/// reporting but excluded from [`AdditiveModel::predict`].
pub fn fit_gam(data: &PanelDataset, mode: GamMode, terms: &[TermSpec], opts: BackfitOptions) -> Result<AdditiveModel> {
    backfit(data, terms, mode == GamMode::Feo, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FTest {
    pub f: f64,
    pub dof1: f64,
    pub dof2: f64,
    pub p_value: f64,
}

/// Nested-model F test. Effective dof of each term is its nominal dof; the
/// residual dof of the larger model is `N - 1 - sum(dof) - (S - 1 if offsets)`.
pub fn nested_f_test(small: &AdditiveModel, big: &AdditiveModel, data: &PanelDataset) -> Result<FTest> {
    if small.n_obs != data.len() || big.n_obs != data.len() {
        return Err(Error::invalid("models were not fitted on this dataset"));
    }
    let nested_terms = small
        .terms
        .iter()
        .all(|t| big.terms.iter().any(|b| b.label == t.label && b.feature == t.feature));
    if !nested_terms || (small.bank_offsets.is_some() && big.bank_offsets.is_none()) {
        return Err(Error::invalid("the smaller model's terms are not a subset of the larger model's"));
    }
    let scale = small.ssr.abs().max(1.0);
    let excess = big.ssr - small.ssr;
    if excess > 1e-8 * scale {
        return Err(Error::NotNested { excess });
    }
    let dof1 = big.model_dof() - small.model_dof();
    let dof2 = big.residual_dof();
    if dof2 <= 0.0 {
        return Err(Error::invalid("no residual degrees of freedom left in the larger model"));
    }
    if dof1 <= 0.0 {
        return Ok(FTest {
            f: 0.0,
            dof1: 0.0,
            dof2,
            p_value: 1.0,
        });
    }
    let f = ((small.ssr - big.ssr).max(0.0) / dof1) / (big.ssr / dof2);
    let p_value = if f == 0.0 {
        1.0
    } else {
        FisherSnedecor::new(dof1, dof2)
            .map_err(|e| Error::invalid(e.to_string()))?
            .sf(f)
            .clamp(0.0, 1.0)
    };
    Ok(FTest { f, dof1, dof2, p_value })
}

/// Sample misdirection diagnostics for an additive FEO fit and an
/// adjusted forecast `yhat_F + gamma`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonlinearMisdirection {
    pub mse_feo: f64,
    pub mse_gamma: f64,
    /// Per feature: `cov(yhat_F - y, x - within-bank mean of x)`.
    pub residual_feature_cov: Vec<f64>,
    /// `cov(gamma, linear projection of the bank offset on the features)`.
    pub cov_a: f64,
    /// `cov(within-bank mean of gamma, bank offset)`.
    pub cov_b: f64,
}

fn weighted_cov(a: &DVector<f64>, b: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let total = w.sum();
    let ma = a.dot(w) / total;
    let mb = b.dot(w) / total;
    a.iter()
        .zip(b.iter())
        .zip(w.iter())
        .map(|((x, y), wi)| wi * (x - ma) * (y - mb))
        .sum::<f64>()
        / total
}

fn within_bank_mean(v: &DVector<f64>, data: &PanelDataset) -> DVector<f64> {
    let mut sums = vec![(0.0, 0.0); data.n_banks()];
    for (i, &b) in data.banks().iter().enumerate() {
        sums[b].0 += data.weights()[i] * v[i];
        sums[b].1 += data.weights()[i];
    }
    DVector::from_iterator(data.len(), data.banks().iter().map(|&b| sums[b].0 / sums[b].1))
}

pub fn nonlinear_misdirection_check(
    data: &PanelDataset,
    feo: &AdditiveModel,
    gamma: &[f64],
) -> Result<NonlinearMisdirection> {
    if feo.bank_offsets.is_none() {
        return Err(Error::invalid("misdirection check needs a fit with bank offsets"));
    }
    if gamma.len() != data.len() || feo.n_obs != data.len() {
        return Err(Error::invalid("one adjustment per dataset row is required"));
    }
    let w = DVector::from_column_slice(data.weights());
    let total = w.sum();
    let y = DVector::from_column_slice(data.response());
    let g = DVector::from_column_slice(gamma);
    let pred = feo.fitted_without_offsets();
    let err = &pred - &y;
    let mse = |e: &DVector<f64>| e.iter().zip(w.iter()).map(|(a, b)| b * a * a).sum::<f64>() / total;
    let mse_feo = mse(&err);
    let mse_gamma = mse(&(&err + &g));

    let residual_feature_cov = (0..data.dim())
        .map(|j| {
            let x = data.features().column(j).into_owned();
            let centered = &x - within_bank_mean(&x, data);
            weighted_cov(&err, &centered, &w)
        })
        .collect();

    let offsets = feo.row_offsets(data);
    let mut design = DMatrix::zeros(data.len(), 1 + data.dim());
    design.column_mut(0).fill(1.0);
    design.columns_mut(1, data.dim()).copy_from(data.features());
    let labels: Vec<String> = std::iter::once("const".to_string())
        .chain(data.feature_names().iter().cloned())
        .collect();
    let proj = weighted_least_squares(&design, &offsets, data.weights(), &labels)?;
    let projected = &offsets - &proj.residuals;
    let cov_a = weighted_cov(&g, &projected, &w);
    let cov_b = weighted_cov(&within_bank_mean(&g, data), &offsets, &w);
    Ok(NonlinearMisdirection {
        mse_feo,
        mse_gamma,
        residual_feature_cov,
        cov_a,
        cov_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::{fit_panel, PanelMode};
    use approx::assert_abs_diff_eq;

    fn panel(n_per_bank: usize, offsets: &[f64]) -> PanelDataset {
        let nb = offsets.len();
        let n = n_per_bank * nb;
        let mut x = DMatrix::zeros(n, 2);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let b = i / n_per_bank;
            let t = (i % n_per_bank) as f64;
            let x1 = (0.37 * t + b as f64).sin() + 0.2 * b as f64;
            let x2 = (1.3 * t).cos();
            x[(i, 0)] = x1;
            x[(i, 1)] = x2;
            y.push(offsets[b] + 1.5 * x1 - 0.5 * x2 + 0.1 * (7.1 * t).sin());
        }
        let ids = (0..nb).map(|b| format!("b{b}")).collect();
        PanelDataset::from_indexed(
            ids,
            vec!["x1".into(), "x2".into()],
            (0..n).map(|i| i / n_per_bank).collect(),
            (0..n).map(|i| (i % n_per_bank) as i64).collect(),
            y,
            x,
            (0..n).map(|i| 1.0 + (i % 5) as f64 * 0.25).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_linear_term_is_least_squares() {
        let data = panel(40, &[0.0, 0.0]);
        let one = data.select_rows(&(0..80).collect::<Vec<_>>()).unwrap();
        let terms = [TermSpec::new("x1", 0, Linear)];
        let m = backfit(&one, &terms, false, BackfitOptions::default()).unwrap();
        assert!(m.converged);
        let (design, _) = crate::sample::panel_design(&one, PanelMode::Pooled);
        let x1 = design.columns(0, 2).into_owned();
        let fit = weighted_least_squares(
            &x1,
            &DVector::from_column_slice(one.response()),
            one.weights(),
            &["c".into(), "x1".into()],
        )
        .unwrap();
        assert_abs_diff_eq!(m.terms[0].function.coefficients[1], fit.coefficients[1], epsilon = 1e-10);
        for i in 0..one.len() {
            let pred = m.predict(&one.feature_row(i));
            assert_abs_diff_eq!(pred, one.response()[i] - fit.residuals[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn linear_feo_gam_matches_fixed_effects() {
        let data = panel(60, &[0.0, 1.0, -0.5]);
        let opts = BackfitOptions {
            tol: 1e-12,
            max_sweeps: 2000,
        };
        let m = fit_gam(&data, GamMode::Feo, &linear_terms(&data), opts).unwrap();
        assert!(m.converged);
        let fe = fit_panel(&data, PanelMode::FixedEffects).unwrap();
        for i in 0..data.len() {
            let x = data.feature_row(i);
            assert_abs_diff_eq!(m.predict(&x), fe.forecaster.forecast(&x, None).unwrap(), epsilon = 1e-8);
        }
        for w in m.ssr_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-10);
        }
        let mean_pred: f64 = m.fitted_without_offsets().iter().zip(data.weights()).map(|(a, b)| a * b).sum::<f64>()
            / data.weights().iter().sum::<f64>();
        assert_abs_diff_eq!(mean_pred, data.weighted_mean_response(), epsilon = 1e-10);
        let shares = data.weight_shares();
        let centered: f64 = m.bank_offsets.as_ref().unwrap().iter().zip(&shares).map(|(o, p)| o * p).sum();
        assert_abs_diff_eq!(centered, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn orthogonal_terms_converge_in_two_sweeps() {
        // x1 and x2 weighted-orthogonal and centered by construction
        let x1 = [1.0, -1.0, 1.0, -1.0];
        let x2 = [1.0, 1.0, -1.0, -1.0];
        let y = [3.0, 0.5, 1.0, -2.0];
        let mut f = DMatrix::zeros(4, 2);
        for i in 0..4 {
            f[(i, 0)] = x1[i];
            f[(i, 1)] = x2[i];
        }
        let data = PanelDataset::from_indexed(
            vec!["a".into()],
            vec!["x1".into(), "x2".into()],
            vec![0; 4],
            vec![0, 1, 2, 3],
            y.to_vec(),
            f,
            vec![1.0; 4],
        )
        .unwrap();
        let m = backfit(&data, &linear_terms(&data), false, BackfitOptions::default()).unwrap();
        assert!(m.converged);
        assert_eq!(m.sweeps, 2);
        assert_abs_diff_eq!(m.terms[0].function.coefficients[1], 1.375, epsilon = 1e-12);
        assert_abs_diff_eq!(m.terms[1].function.coefficients[1], 1.125, epsilon = 1e-12);
    }

    #[test]
    fn non_convergence_is_reported() {
        let data = panel(30, &[0.0, 2.0]);
        let opts = BackfitOptions {
            tol: 1e-14,
            max_sweeps: 1,
        };
        let m = backfit(&data, &linear_terms(&data), true, opts).unwrap();
        assert!(!m.converged);
        assert_eq!(m.sweeps, 1);
    }

    #[test]
    fn f_test_edge_cases() {
        let data = panel(40, &[0.0, 2.0, -1.0]);
        let opts = BackfitOptions::default();
        let terms = linear_terms(&data);
        let small = backfit(&data, &terms, false, opts).unwrap();
        let same = nested_f_test(&small, &small, &data).unwrap();
        assert_eq!((same.f, same.p_value), (0.0, 1.0));
        let big = backfit(&data, &terms, true, opts).unwrap();
        let t = nested_f_test(&small, &big, &data).unwrap();
        assert_eq!(t.dof1, 2.0);
        assert_abs_diff_eq!(t.dof2, data.len() as f64 - 1.0 - 2.0 - 2.0);
        assert!(t.p_value < 0.01);
        assert!(nested_f_test(&big, &small, &data).is_err());
    }

    #[test]
    fn misdirection_examples() {
        let data = panel(50, &[0.0, 1.5, -1.0]);
        let opts = BackfitOptions {
            tol: 1e-12,
            max_sweeps: 2000,
        };
        let m = fit_gam(&data, GamMode::Feo, &linear_terms(&data), opts).unwrap();
        let zero = nonlinear_misdirection_check(&data, &m, &vec![0.0; data.len()]).unwrap();
        assert_eq!(zero.mse_feo, zero.mse_gamma);
        assert_eq!((zero.cov_a, zero.cov_b), (0.0, 0.0));
        let scale = 1.0;
        for c in &zero.residual_feature_cov {
            assert!(c.abs() < 1e-6 * scale);
        }
        let gamma: Vec<f64> = m.row_offsets(&data).iter().copied().collect();
        let res = nonlinear_misdirection_check(&data, &m, &gamma).unwrap();
        assert!(res.mse_gamma < res.mse_feo);
        assert!(res.cov_b > 0.0);
        let pooled = fit_gam(&data, GamMode::Pooled, &linear_terms(&data), opts).unwrap();
        assert!(nonlinear_misdirection_check(&data, &pooled, &gamma).is_err());
    }

    #[test]
    fn product_feature_is_appended() {
        let data = panel(5, &[0.0, 1.0]);
        let p = with_product_feature(&data, 0, 1, "x1*x2").unwrap();
        assert_eq!(p.dim(), 3);
        assert_eq!(p.feature_names()[2], "x1*x2");
        assert_abs_diff_eq!(p.features()[(3, 2)], data.features()[(3, 0)] * data.features()[(3, 1)]);
    }
}
