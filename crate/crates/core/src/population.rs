//! Exact population-level aggregation of bank models into industry models.
//!
//! Every estimator here is a closed form in the population moments; the
//! sample estimators in [`crate::sample`] converge to these.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    centered_dummy_row, mixture_sample_mean_loss, population_moments, w_matrix, BankModel,
    BankPopulation, BankTerms, ForecasterKind, LinearForecaster,
};

/// Pairwise cosine similarity above which standardized slopes count as proportional.
pub const PROPORTIONAL_COS_TOL: f64 = 1e-9;

/// Tolerance on the `X`/`V` cross-covariance in an interaction population.
pub const BLOCK_ORTHOGONALITY_TOL: f64 = 1e-10;

/// Pooled least-squares industry model (fairness through unawareness).
pub fn fit_pooled(pop: &BankPopulation) -> Result<LinearForecaster> {
    let m = population_moments(pop);
    let mut rhs = m.cov_alpha_mu.clone();
    for (p, b) in pop.iter() {
        rhs += w_matrix(b, &m.bar_mu) * &b.slope * p;
    }
    let slope = linalg::solve_spd(&m.var_x, &rhs, "var[X_S]")?;
    let intercept = m.mean_loss - slope.dot(&m.bar_mu);
    Ok(LinearForecaster::linear(ForecasterKind::Pooled, intercept, slope, pop.len()))
}

fn feo_slope(pop: &BankPopulation, within_cov: &DMatrix<f64>) -> Result<DVector<f64>> {
    let rhs = pop
        .iter()
        .fold(DVector::zeros(pop.dim()), |acc, (p, b)| acc + &b.feature_cov * &b.slope * p);
    linalg::solve_spd(within_cov, &rhs, "E[Sigma_S]")
}

/// Fixed effects estimated and then discarded: `beta_F = E[Sigma_S]^-1 E[Sigma_S beta_S]`.
///
/// The returned forecaster keeps the discarded effects (reference bank = last)
/// so the full projection can still be evaluated.
pub fn fit_feo(pop: &BankPopulation) -> Result<LinearForecaster> {
    let reference = pop.len() - 1;
    let dec = feo_decomposition(pop, reference)?;
    let m = population_moments(pop);
    let intercept = m.mean_loss - dec.beta_f.dot(&m.bar_mu);
    Ok(LinearForecaster {
        kind: ForecasterKind::Feo,
        intercept,
        slope: dec.beta_f,
        n_banks: pop.len(),
        per_bank: BankTerms::FixedEffects {
            delta: dec.delta,
            shares: pop.weights().to_vec(),
            reference,
        },
    })
}

/// Omitted-variable decomposition `beta_Pool = beta_F + Lambda delta`.
#[derive(Debug, Clone)]
pub struct FeoDecomposition {
    pub beta_f: DVector<f64>,
    /// Fixed effects for every bank except `reference_bank`, in bank order.
    pub delta: DVector<f64>,
    /// `var[X_S]^-1 cov[X_S, U(S)]`, `d x (n - 1)`.
    pub lambda: DMatrix<f64>,
    pub beta_pool: DVector<f64>,
    pub reference_bank: usize,
}

impl FeoDecomposition {
    /// `beta_F + Lambda delta`, which should reproduce `beta_pool`.
    pub fn recombined(&self) -> DVector<f64> {
        &self.beta_f + &self.lambda * &self.delta
    }
}

pub fn feo_decomposition(pop: &BankPopulation, reference_bank: usize) -> Result<FeoDecomposition> {
    let reference = pop.bank(reference_bank)?;
    let m = population_moments(pop);
    let beta_f = feo_slope(pop, &m.within_cov)?;
    let others: Vec<usize> = (0..pop.len()).filter(|&i| i != reference_bank).collect();

    let delta = DVector::from_iterator(
        others.len(),
        others.iter().map(|&s| {
            let b = &pop.banks()[s];
            b.mean_loss() - reference.mean_loss()
                - beta_f.dot(&(&b.feature_mean - &reference.feature_mean))
        }),
    );
    let mut cov_xu = DMatrix::zeros(pop.dim(), others.len());
    for (col, &i) in others.iter().enumerate() {
        let p = pop.weights()[i];
        cov_xu.set_column(col, &((&pop.banks()[i].feature_mean - &m.bar_mu) * p));
    }
    let lambda = linalg::solve_spd_matrix(&m.var_x, &cov_xu, "var[X_S]")?;
    let beta_pool = fit_pooled(pop)?.slope;
    Ok(FeoDecomposition {
        beta_f,
        delta,
        lambda,
        beta_pool,
        reference_bank,
    })
}

/// FEO slope applied to bank-demeaned features, `alpha_F + beta_F'(x - mu_s + bar_mu)`.
pub fn fit_seo(pop: &BankPopulation) -> Result<LinearForecaster> {
    let feo = fit_feo(pop)?;
    let m = population_moments(pop);
    Ok(LinearForecaster {
        kind: ForecasterKind::Seo,
        intercept: feo.intercept,
        slope: feo.slope,
        n_banks: pop.len(),
        per_bank: BankTerms::MeanAdjust {
            bank_means: pop.banks().iter().map(|b| b.feature_mean.clone()).collect(),
            bar_mu: m.bar_mu,
        },
    })
}

/// Per-bank standardization used by projection to fairness.
#[derive(Debug, Clone)]
pub struct PtfBank {
    pub mean: DVector<f64>,
    pub inv_sqrt_cov: DMatrix<f64>,
    /// `alpha_s + beta_s' mu_s`.
    pub alpha_o: f64,
    /// `Sigma_s^{1/2} beta_s`.
    pub beta_o: DVector<f64>,
}

/// Projection to fairness for Gaussian features.
#[derive(Debug, Clone)]
pub struct PtfForecaster {
    pub banks: Vec<PtfBank>,
    pub weights: Vec<f64>,
    pub bar_alpha_o: f64,
    pub bar_beta_o: DVector<f64>,
    /// `sum_i p_i ||beta_i^o||`.
    pub mean_slope_norm: f64,
    /// All standardized slopes point the same way.
    pub proportional: bool,
}

impl PtfForecaster {
    pub fn standardize(&self, x: &[f64], bank: usize) -> Result<DVector<f64>> {
        let b = self.banks.get(bank).ok_or(Error::BankOutOfRange {
            index: bank,
            n: self.banks.len(),
        })?;
        if x.len() != b.mean.len() {
            return Err(Error::invalid("feature vector length differs from population dimension"));
        }
        Ok(&b.inv_sqrt_cov * (DVector::from_column_slice(x) - &b.mean))
    }

    /// `sum p_i alpha_i^o + (sum p_i ||beta_i^o||) beta_s^o' z_s / ||beta_s^o||`.
    pub fn forecast(&self, x: &[f64], bank: usize) -> Result<f64> {
        let z = self.standardize(x, bank)?;
        let b = &self.banks[bank];
        Ok(self.bar_alpha_o + self.mean_slope_norm * b.beta_o.dot(&z) / b.beta_o.norm())
    }

    /// The simplified form `bar_alpha^o + bar_beta^o' z_s`, valid when `proportional`.
    pub fn forecast_proportional(&self, x: &[f64], bank: usize) -> Result<f64> {
        if !self.proportional {
            return Err(Error::invalid("standardized slopes are not proportional"));
        }
        let z = self.standardize(x, bank)?;
        Ok(self.bar_alpha_o + self.bar_beta_o.dot(&z))
    }
}

pub fn fit_ptf(pop: &BankPopulation) -> Result<PtfForecaster> {
    pop.require_gaussian("projection to fairness")?;
    let banks: Vec<PtfBank> = pop
        .banks()
        .iter()
        .map(|b| PtfBank {
            mean: b.feature_mean.clone(),
            inv_sqrt_cov: linalg::inv_sqrt_spd(&b.feature_cov),
            alpha_o: b.mean_loss(),
            beta_o: linalg::sqrt_spd(&b.feature_cov) * &b.slope,
        })
        .collect();
    if let Some(s) = banks.iter().position(|b| b.beta_o.norm() == 0.0) {
        return Err(Error::ZeroStandardizedSlope { bank: s });
    }
    let w = pop.weights();
    let bar_alpha_o = banks.iter().zip(w).map(|(b, p)| p * b.alpha_o).sum();
    let bar_beta_o = banks
        .iter()
        .zip(w)
        .fold(DVector::zeros(pop.dim()), |acc, (b, p)| acc + &b.beta_o * *p);
    let mean_slope_norm = banks.iter().zip(w).map(|(b, p)| p * b.beta_o.norm()).sum();
    let proportional = banks.iter().enumerate().all(|(i, a)| {
        banks[i + 1..].iter().all(|b| {
            let cos = a.beta_o.dot(&b.beta_o) / (a.beta_o.norm() * b.beta_o.norm());
            cos >= 1.0 - PROPORTIONAL_COS_TOL
        })
    });
    Ok(PtfForecaster {
        banks,
        weights: w.to_vec(),
        bar_alpha_o,
        bar_beta_o,
        mean_slope_norm,
        proportional,
    })
}

/// PTF wrapped as a bank-aware [`LinearForecaster`].
pub fn fit_ptf_forecaster(pop: &BankPopulation) -> Result<LinearForecaster> {
    let ptf = fit_ptf(pop)?;
    Ok(LinearForecaster {
        kind: ForecasterKind::Ptf,
        intercept: ptf.bar_alpha_o,
        slope: DVector::zeros(pop.dim()),
        n_banks: pop.len(),
        per_bank: BankTerms::Ptf(Box::new(ptf)),
    })
}

/// `E[Y_S | X_S = x]` for Gaussian bank feature laws (Bayes' rule over banks).
///
/// Posterior bank weights are formed from log densities with a max shift, so
/// points far in the tails do not underflow.
pub fn conditional_expectation_forecast(pop: &BankPopulation, x: &[f64]) -> Result<f64> {
    pop.require_gaussian("the conditional-expectation model")?;
    if x.len() != pop.dim() {
        return Err(Error::invalid("feature vector length differs from population dimension"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("feature vector must be finite"));
    }
    let xv = DVector::from_column_slice(x);
    let logs: Vec<f64> = pop
        .iter()
        .map(|(p, b)| {
            let chol = linalg::checked_cholesky(&b.feature_cov).ok_or(Error::NotPositiveDefinite {
                what: "feature covariance",
                bank: None,
            })?;
            Ok(p.ln() + linalg::gaussian_log_density(&xv, &b.feature_mean, &chol))
        })
        .collect::<Result<_>>()?;
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DensityUnderflow);
    }
    let (num, den) = logs
        .iter()
        .zip(pop.banks())
        .fold((0.0, 0.0), |(num, den), (l, b)| {
            let g = (l - max).exp();
            (num + g * b.predict(&xv), den + g)
        });
    Ok(num / den)
}

pub fn fit_cond_exp(pop: &BankPopulation) -> Result<LinearForecaster> {
    pop.require_gaussian("the conditional-expectation model")?;
    Ok(LinearForecaster {
        kind: ForecasterKind::CondExp,
        intercept: 0.0,
        slope: DVector::zeros(pop.dim()),
        n_banks: pop.len(),
        per_bank: BankTerms::Mixture(Box::new(pop.clone())),
    })
}

/// Convex combination of bank slopes with the zero-mean-error intercept.
///
/// `combo_weights = None` uses the population weights, giving the ATE.
pub fn fit_wate(pop: &BankPopulation, combo_weights: Option<&[f64]>) -> Result<LinearForecaster> {
    let w = combo_weights.unwrap_or(pop.weights());
    if w.len() != pop.len() {
        return Err(Error::InvalidWeights(format!(
            "{} combination weights for {} banks",
            w.len(),
            pop.len()
        )));
    }
    if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidWeights("combination weights must be nonnegative".into()));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidWeights(format!("combination weights sum to {total}, not 1")));
    }
    let slope = pop
        .banks()
        .iter()
        .zip(w)
        .fold(DVector::zeros(pop.dim()), |acc, (b, p)| acc + &b.slope * *p);
    let m = population_moments(pop);
    let intercept = m.mean_loss - slope.dot(&m.bar_mu);
    Ok(LinearForecaster::linear(ForecasterKind::Wate, intercept, slope, pop.len()))
}

/// A bank whose features split into a block `X` without bank interactions and
/// a block `V` with them.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionBank {
    pub intercept: f64,
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    pub x_mean: DVector<f64>,
    pub v_mean: DVector<f64>,
    /// Joint covariance of `(X, V)`; the off-diagonal block must vanish.
    pub cov: DMatrix<f64>,
    pub noise_var: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionPopulation {
    banks: Vec<InteractionBank>,
    weights: Vec<f64>,
    x_dim: usize,
    joint: BankPopulation,
}

impl InteractionPopulation {
    pub fn new(banks: Vec<InteractionBank>, weights: Vec<f64>, x_dim: usize) -> Result<Self> {
        let joint_banks = banks
            .iter()
            .enumerate()
            .map(|(s, b)| {
                if b.beta.len() != x_dim || b.x_mean.len() != x_dim {
                    return Err(Error::DimensionMismatch {
                        bank: s,
                        what: "X block",
                        expected: x_dim,
                        found: b.beta.len(),
                    });
                }
                let v_dim = b.gamma.len();
                if b.v_mean.len() != v_dim {
                    return Err(Error::DimensionMismatch {
                        bank: s,
                        what: "V block mean",
                        expected: v_dim,
                        found: b.v_mean.len(),
                    });
                }
                let cross = b.cov.view((0, x_dim), (x_dim, b.cov.ncols().saturating_sub(x_dim)));
                let scale = b.cov.diagonal().iter().fold(1.0_f64, |a, v| a.max(v.abs()));
                if cross.iter().any(|v| v.abs() > BLOCK_ORTHOGONALITY_TOL * scale) {
                    return Err(Error::invalid(format!(
                        "bank {s}: X and V blocks are correlated beyond tolerance"
                    )));
                }
                let mut slope = DVector::zeros(x_dim + v_dim);
                slope.rows_mut(0, x_dim).copy_from(&b.beta);
                slope.rows_mut(x_dim, v_dim).copy_from(&b.gamma);
                let mut mean = DVector::zeros(x_dim + v_dim);
                mean.rows_mut(0, x_dim).copy_from(&b.x_mean);
                mean.rows_mut(x_dim, v_dim).copy_from(&b.v_mean);
                Ok(BankModel::new(b.intercept, slope, mean, b.cov.clone(), b.noise_var))
            })
            .collect::<Result<Vec<_>>>()?;
        let joint = BankPopulation::new(joint_banks, weights.clone())?;
        Ok(Self {
            banks,
            weights,
            x_dim,
            joint,
        })
    }

    pub fn banks(&self) -> &[InteractionBank] {
        &self.banks
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn v_dim(&self) -> usize {
        self.joint.dim() - self.x_dim
    }

    /// The same banks as an ordinary population over the stacked features `(X, V)`.
    pub fn joint(&self) -> &BankPopulation {
        &self.joint
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionFeo {
    pub beta_f: DVector<f64>,
    pub gamma_f: DVector<f64>,
    pub intercept: f64,
}

/// FEO with bank interactions on the `V` block: `beta_F` as usual on `X`,
/// and the probability-weighted mean of the `gamma_s` on `V`.
pub fn fit_feo_with_interactions(ipop: &InteractionPopulation) -> Result<InteractionFeo> {
    let dx = ipop.x_dim();
    let beta_f = if dx == 0 {
        DVector::zeros(0)
    } else {
        let mut within = DMatrix::zeros(dx, dx);
        let mut rhs = DVector::zeros(dx);
        for (b, p) in ipop.banks().iter().zip(ipop.weights()) {
            let sx = b.cov.view((0, 0), (dx, dx));
            within += sx * *p;
            rhs += sx * &b.beta * *p;
        }
        linalg::solve_spd(&within, &rhs, "E[Sigma_S^X]")?
    };
    let gamma_f = ipop
        .banks()
        .iter()
        .zip(ipop.weights())
        .fold(DVector::zeros(ipop.v_dim()), |acc, (b, p)| acc + &b.gamma * *p);
    let joint = ipop.joint();
    let m = population_moments(joint);
    let mut slope = DVector::zeros(joint.dim());
    slope.rows_mut(0, dx).copy_from(&beta_f);
    slope.rows_mut(dx, gamma_f.len()).copy_from(&gamma_f);
    let intercept = mixture_sample_mean_loss(joint) - slope.dot(&m.bar_mu);
    Ok(InteractionFeo {
        beta_f,
        gamma_f,
        intercept,
    })
}

/// `U(s)` for every bank, reference bank last, as rows of an `n x (n - 1)` matrix.
pub fn centered_dummy_table(pop: &BankPopulation, reference: usize) -> DMatrix<f64> {
    let n = pop.len();
    let mut out = DMatrix::zeros(n, n - 1);
    for s in 0..n {
        out.set_row(s, &centered_dummy_row(s, pop.weights(), reference).transpose());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::population_mse;
    use crate::scenarios::{sim_a, sim_b, sim_b_all_interacted, sim_c, sim_d};
    use approx::assert_abs_diff_eq;

    fn identical_banks() -> BankPopulation {
        let b = BankModel::new(
            0.3,
            DVector::from_vec(vec![0.7, -0.2]),
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8]),
            0.2,
        );
        BankPopulation::new(vec![b.clone(), b.clone(), b], vec![0.5, 0.3, 0.2]).unwrap()
    }

    #[test]
    fn pooled_examples() {
        let f = fit_pooled(&sim_a()).unwrap();
        assert_abs_diff_eq!(f.slope[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(f.intercept, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(f.forecast(&[1.0], None).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(fit_pooled(&sim_b()).unwrap().slope[0], 2.5, epsilon = 1e-15);

        let same = identical_banks();
        let f = fit_pooled(&same).unwrap();
        assert_abs_diff_eq!(f.slope, same.banks()[0].slope, epsilon = 1e-12);
        assert_abs_diff_eq!(f.intercept, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn feo_examples() {
        let f = fit_feo(&sim_a()).unwrap();
        assert_abs_diff_eq!(f.slope[0], 0.0);
        assert_abs_diff_eq!(f.intercept, 0.5);
        assert_abs_diff_eq!(f.forecast(&[7.0], None).unwrap(), 0.5);
        assert_abs_diff_eq!(fit_feo(&sim_b()).unwrap().slope[0], 2.5, epsilon = 1e-15);
    }

    #[test]
    fn feo_with_common_covariance_is_ate() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let bank = |a: f64, b0: f64, b1: f64, m: f64| {
            BankModel::new(a, DVector::from_vec(vec![b0, b1]), DVector::from_vec(vec![m, -m]), cov.clone(), 0.1)
        };
        let pop = BankPopulation::new(
            vec![bank(0.0, 1.0, 2.0, 0.0), bank(1.0, -1.0, 0.5, 1.0), bank(2.0, 3.0, 1.0, 2.0)],
            vec![0.2, 0.3, 0.5],
        )
        .unwrap();
        let ate = fit_wate(&pop, None).unwrap();
        assert_abs_diff_eq!(fit_feo(&pop).unwrap().slope, ate.slope, epsilon = 1e-12);
    }

    #[test]
    fn singular_within_cov_is_reported() {
        // Nearly singular E[Sigma_S]: reject with a condition estimate.
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0 - 1e-13, 1.0 - 1e-13, 1.0]);
        let err = linalg::solve_spd(&cov, &DVector::zeros(2), "E[Sigma_S]").unwrap_err();
        match err {
            Error::Singular { condition, .. } => assert!(condition > 1e10),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decomposition_examples() {
        let dec = feo_decomposition(&sim_a(), 1).unwrap();
        assert_abs_diff_eq!(dec.delta[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(dec.lambda[(0, 0)], -0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(dec.recombined()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(dec.beta_pool[0], 0.25, epsilon = 1e-15);

        let dec = feo_decomposition(&identical_banks(), 2).unwrap();
        assert_abs_diff_eq!(dec.delta.norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dec.beta_pool, dec.beta_f, epsilon = 1e-12);

        assert_abs_diff_eq!(feo_decomposition(&sim_b(), 1).unwrap().delta[0], 0.0);
    }

    #[test]
    fn decomposition_identity_for_any_reference() {
        let pop = sim_c();
        for r in 0..pop.len() {
            let dec = feo_decomposition(&pop, r).unwrap();
            assert_abs_diff_eq!(dec.recombined(), dec.beta_pool, epsilon = 1e-12);
        }
        assert!(feo_decomposition(&pop, 2).is_err());
    }

    #[test]
    fn seo_examples() {
        let f = fit_seo(&sim_a()).unwrap();
        for x in [-3.0, 0.0, 5.0] {
            for s in 0..2 {
                assert_abs_diff_eq!(f.forecast(&[x], Some(s)).unwrap(), 0.5, epsilon = 1e-15);
            }
        }
        assert!(matches!(f.forecast(&[1.0], None), Err(Error::MissingBankIdentity { .. })));
        let f = fit_seo(&sim_b()).unwrap();
        assert_abs_diff_eq!(f.forecast(&[1.0], Some(0)).unwrap(), 2.5, epsilon = 1e-15);

        let same = identical_banks();
        let seo = fit_seo(&same).unwrap();
        let x = [0.3, -1.2];
        let want = same.banks()[0].predict(&DVector::from_column_slice(&x));
        assert_abs_diff_eq!(seo.forecast(&x, Some(1)).unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn ptf_examples() {
        let ptf = fit_ptf(&sim_c()).unwrap();
        assert!(ptf.proportional);
        assert_abs_diff_eq!(ptf.bar_alpha_o, 0.5);
        assert_abs_diff_eq!(ptf.banks[1].beta_o[0], 4.0, epsilon = 1e-14);
        assert_abs_diff_eq!(ptf.forecast(&[2.0], 0).unwrap(), 5.5, epsilon = 1e-14);
        assert_abs_diff_eq!(ptf.forecast(&[2.0], 1).unwrap(), 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(ptf.forecast_proportional(&[2.0], 1).unwrap(), 3.0, epsilon = 1e-14);

        let same = identical_banks();
        let ptf = fit_ptf(&same).unwrap();
        let x = [2.0, 0.5];
        let want = same.banks()[0].predict(&DVector::from_column_slice(&x));
        assert_abs_diff_eq!(ptf.forecast(&x, 2).unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn ptf_rejects_zero_slope_and_detects_opposite_signs() {
        let zero = BankPopulation::equally_weighted(vec![
            BankModel::scalar(0.0, 1.0, 0.0, 1.0, 0.0),
            BankModel::scalar(0.0, 0.0, 0.0, 1.0, 0.0),
        ])
        .unwrap();
        assert!(matches!(fit_ptf(&zero), Err(Error::ZeroStandardizedSlope { bank: 1 })));

        let opposite = BankPopulation::equally_weighted(vec![
            BankModel::scalar(0.0, 1.0, 0.0, 1.0, 0.0),
            BankModel::scalar(0.0, -2.0, 0.0, 1.0, 0.0),
        ])
        .unwrap();
        let ptf = fit_ptf(&opposite).unwrap();
        assert!(!ptf.proportional);
        assert!(ptf.forecast_proportional(&[0.0], 0).is_err());
    }

    /// Quantile-mapping construction `sum_i p_i F_i^{-1}(F_s(alpha_s + beta_s x))`
    /// with Gaussian distribution functions, independent of the closed form.
    fn quantile_mapping_oracle(pop: &BankPopulation, x: f64, s: usize) -> f64 {
        use statrs::distribution::{ContinuousCDF, Normal};
        let law = |b: &BankModel| {
            let sd = (b.slope[0] * b.slope[0] * b.feature_cov[(0, 0)]).sqrt();
            Normal::new(b.mean_loss(), sd).unwrap()
        };
        let own = &pop.banks()[s];
        let q = law(own).cdf(own.intercept + own.slope[0] * x);
        pop.iter().map(|(p, b)| p * law(b).inverse_cdf(q)).sum()
    }

    #[test]
    fn ptf_matches_quantile_mapping() {
        let pop = sim_c();
        let ptf = fit_ptf(&pop).unwrap();
        for x in [-2.0, -0.3, 0.0, 1.0, 2.0, 3.5] {
            for s in 0..2 {
                let oracle = quantile_mapping_oracle(&pop, x, s);
                assert_abs_diff_eq!(ptf.forecast(&[x], s).unwrap(), oracle, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn cond_exp_examples() {
        let pop = sim_a();
        assert_abs_diff_eq!(conditional_expectation_forecast(&pop, &[1.0]).unwrap(), 0.5, epsilon = 1e-15);
        // (phi(0) * 0 + phi(-2) * 1) / (phi(0) + phi(-2)) = 1 / (1 + e^2)
        let want = 1.0 / (1.0 + 2f64.exp());
        let got = conditional_expectation_forecast(&pop, &[0.0]).unwrap();
        assert_abs_diff_eq!(got, want, epsilon = 1e-15);
        assert_abs_diff_eq!(got, 0.11920, epsilon = 1e-5);
        // deep in the tail the shifted weights still resolve to bank 0
        assert_abs_diff_eq!(conditional_expectation_forecast(&pop, &[-60.0]).unwrap(), 0.0, epsilon = 1e-12);

        let same = identical_banks();
        let x = [0.1, 0.9];
        let want = same.banks()[0].predict(&DVector::from_column_slice(&x));
        assert_abs_diff_eq!(conditional_expectation_forecast(&same, &x).unwrap(), want, epsilon = 1e-12);

        let unspecified = pop.with_feature_law(crate::model::FeatureLaw::Unspecified);
        assert!(matches!(
            conditional_expectation_forecast(&unspecified, &[0.0]),
            Err(Error::NonGaussian(_))
        ));
    }

    #[test]
    fn wate_examples() {
        assert_abs_diff_eq!(fit_wate(&sim_b(), None).unwrap().slope[0], 2.0);
        assert_abs_diff_eq!(fit_wate(&sim_b(), Some(&[1.0, 0.0])).unwrap().slope[0], 1.0);
        let f = fit_wate(&sim_a(), None).unwrap();
        assert_abs_diff_eq!(f.slope[0], 0.0);
        assert_abs_diff_eq!(f.intercept, 0.5);
        assert!(fit_wate(&sim_b(), Some(&[0.7, 0.7])).is_err());
        assert!(fit_wate(&sim_b(), Some(&[1.5, -0.5])).is_err());
        assert!(fit_wate(&sim_b(), Some(&[1.0])).is_err());
    }

    #[test]
    fn interaction_examples() {
        let fit = fit_feo_with_interactions(&sim_d()).unwrap();
        assert_abs_diff_eq!(fit.beta_f[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.gamma_f[0], 2.0, epsilon = 1e-12);

        let all_v = fit_feo_with_interactions(&sim_b_all_interacted()).unwrap();
        assert_abs_diff_eq!(all_v.gamma_f[0], 2.0, epsilon = 1e-12);
        assert_eq!(all_v.beta_f.len(), 0);
    }

    #[test]
    fn interaction_without_v_block_is_feo() {
        let pop = sim_c();
        let banks = pop
            .banks()
            .iter()
            .map(|b| InteractionBank {
                intercept: b.intercept,
                beta: b.slope.clone(),
                gamma: DVector::zeros(0),
                x_mean: b.feature_mean.clone(),
                v_mean: DVector::zeros(0),
                cov: b.feature_cov.clone(),
                noise_var: b.noise_var,
            })
            .collect();
        let ipop = InteractionPopulation::new(banks, pop.weights().to_vec(), 1).unwrap();
        let fit = fit_feo_with_interactions(&ipop).unwrap();
        let feo = fit_feo(&pop).unwrap();
        assert_abs_diff_eq!(fit.beta_f, feo.slope, epsilon = 1e-14);
        assert_abs_diff_eq!(fit.intercept, feo.intercept, epsilon = 1e-14);
    }

    #[test]
    fn interaction_rejects_correlated_blocks() {
        let mut b = sim_d().banks()[0].clone();
        b.cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let other = sim_d().banks()[1].clone();
        assert!(InteractionPopulation::new(vec![b, other], vec![0.5, 0.5], 1).is_err());
    }

    #[test]
    fn pooled_minimizes_population_mse() {
        let pop = sim_c();
        let f = fit_pooled(&pop).unwrap();
        let best = population_mse(&pop, f.intercept, &f.slope);
        for eta in [-0.5, -0.01, 0.01, 0.3] {
            let slope = &f.slope + DVector::from_element(1, eta);
            let m = population_moments(&pop);
            let intercept = m.mean_loss - slope.dot(&m.bar_mu);
            assert!(population_mse(&pop, intercept, &slope) >= best);
        }
    }

    #[test]
    fn dummy_table_rows_are_centred() {
        let pop = sim_c();
        let u = centered_dummy_table(&pop, 1);
        assert_abs_diff_eq!(u[(0, 0)], 0.5);
        assert_abs_diff_eq!(u[(1, 0)], -0.5);
    }
}
