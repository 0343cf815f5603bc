//! Bank populations, their mixture moments, and industry forecasters.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::population::PtfForecaster;

/// Tolerance on the unit sum of population weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// One bank's true linear loss model `Y = alpha + beta'X + eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct BankModel {
    pub intercept: f64,
    pub slope: DVector<f64>,
    pub feature_mean: DVector<f64>,
    pub feature_cov: DMatrix<f64>,
    pub noise_var: f64,
}

impl BankModel {
    pub fn new(
        intercept: f64,
        slope: DVector<f64>,
        feature_mean: DVector<f64>,
        feature_cov: DMatrix<f64>,
        noise_var: f64,
    ) -> Self {
        Self {
            intercept,
            slope,
            feature_mean,
            feature_cov,
            noise_var,
        }
    }

    /// Scalar-feature bank: `(alpha, beta, mu, sigma^2, noise variance)`.
    pub fn scalar(intercept: f64, slope: f64, mean: f64, var: f64, noise_var: f64) -> Self {
        Self::new(
            intercept,
            DVector::from_element(1, slope),
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, var),
            noise_var,
        )
    }

    pub fn dim(&self) -> usize {
        self.slope.len()
    }

    /// `E[Y_s] = alpha_s + beta_s' mu_s`.
    pub fn mean_loss(&self) -> f64 {
        self.intercept + self.slope.dot(&self.feature_mean)
    }

    /// `alpha_s + beta_s' x`, the bank's own conditional mean.
    pub fn predict(&self, x: &DVector<f64>) -> f64 {
        self.intercept + self.slope.dot(x)
    }

    fn validate(&self, index: usize, d: usize) -> Result<()> {
        for (what, found) in [
            ("slope", self.slope.len()),
            ("feature_mean", self.feature_mean.len()),
            ("feature_cov rows", self.feature_cov.nrows()),
            ("feature_cov cols", self.feature_cov.ncols()),
        ] {
            if found != d {
                return Err(Error::DimensionMismatch {
                    bank: index,
                    what,
                    expected: d,
                    found,
                });
            }
        }
        if !(self.noise_var >= 0.0) {
            return Err(Error::invalid(format!(
                "bank {index}: noise variance must be nonnegative, got {}",
                self.noise_var
            )));
        }
        if !linalg::is_symmetric(&self.feature_cov, 1e-12)
            || linalg::checked_cholesky(&self.feature_cov).is_none()
        {
            return Err(Error::NotPositiveDefinite {
                what: "feature covariance",
                bank: Some(index),
            });
        }
        Ok(())
    }
}

/// How the features of every bank are distributed.
///
/// Projection to fairness and the conditional-expectation model are only
/// defined here for Gaussian features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureLaw {
    #[default]
    Gaussian,
    Unspecified,
}

/// Weighted collection of bank models; `weights[s]` is the probability of bank `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct BankPopulation {
    banks: Vec<BankModel>,
    weights: Vec<f64>,
    law: FeatureLaw,
}

impl BankPopulation {
    pub fn new(banks: Vec<BankModel>, weights: Vec<f64>) -> Result<Self> {
        if banks.len() < 2 {
            return Err(Error::TooFewBanks {
                need: 2,
                found: banks.len(),
            });
        }
        if weights.len() != banks.len() {
            return Err(Error::InvalidWeights(format!(
                "{} weights for {} banks",
                weights.len(),
                banks.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidWeights(format!("weight {w} is not strictly positive")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidWeights(format!("weights sum to {total}, not 1")));
        }
        let d = banks[0].dim();
        if d == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        for (i, b) in banks.iter().enumerate() {
            b.validate(i, d)?;
        }
        Ok(Self {
            banks,
            weights,
            law: FeatureLaw::Gaussian,
        })
    }

    /// Population with equal weights `1 / n`.
    pub fn equally_weighted(banks: Vec<BankModel>) -> Result<Self> {
        let n = banks.len().max(1);
        let mut weights = vec![1.0 / n as f64; banks.len()];
        // absorb rounding so the sum is 1 to machine precision
        if let Some(last) = weights.last_mut() {
            *last = 1.0 - (n - 1) as f64 / n as f64;
        }
        Self::new(banks, weights)
    }

    pub fn with_feature_law(mut self, law: FeatureLaw) -> Self {
        self.law = law;
        self
    }

    pub fn feature_law(&self) -> FeatureLaw {
        self.law
    }

    pub fn require_gaussian(&self, what: &'static str) -> Result<()> {
        match self.law {
            FeatureLaw::Gaussian => Ok(()),
            FeatureLaw::Unspecified => Err(Error::NonGaussian(what)),
        }
    }

    pub fn banks(&self) -> &[BankModel] {
        &self.banks
    }

    pub fn bank(&self, s: usize) -> Result<&BankModel> {
        self.banks.get(s).ok_or(Error::BankOutOfRange {
            index: s,
            n: self.banks.len(),
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.banks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.banks[0].dim()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &BankModel)> {
        self.weights.iter().copied().zip(self.banks.iter())
    }

    /// Copy with bank `s` replaced, re-validated. Used for perturbation studies.
    pub fn with_bank(&self, s: usize, bank: BankModel) -> Result<Self> {
        self.bank(s)?;
        let mut banks = self.banks.clone();
        banks[s] = bank;
        Ok(Self::new(banks, self.weights.clone())?.with_feature_law(self.law))
    }

    /// Copy with the bank list and weights permuted: new position `i` holds old bank `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::invalid("permutation length differs from bank count"));
        }
        let banks = perm.iter().map(|&i| self.bank(i).cloned()).collect::<Result<Vec<_>>>()?;
        let weights = perm.iter().map(|&i| self.weights[i]).collect();
        Ok(Self::new(banks, weights)?.with_feature_law(self.law))
    }
}

/// First and second moments of the bank mixture `X_S`, `Y_S`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationMoments {
    /// `E[X_S] = sum p_s mu_s`.
    pub bar_mu: DVector<f64>,
    /// `var[X_S] = E[W_S]`.
    pub var_x: DMatrix<f64>,
    /// `cov[alpha_S, mu_S]`.
    pub cov_alpha_mu: DVector<f64>,
    /// `E[Y_S]`.
    pub mean_loss: f64,
    /// `E[Sigma_S]`.
    pub within_cov: DMatrix<f64>,
}

impl PopulationMoments {
    /// `var[mu_S]`, the between-bank part of `var_x`.
    pub fn between_cov(&self) -> DMatrix<f64> {
        &self.var_x - &self.within_cov
    }
}

/// `W_s = Sigma_s + mu_s mu_s' - bar_mu mu_s'`.
pub fn w_matrix(bank: &BankModel, bar_mu: &DVector<f64>) -> DMatrix<f64> {
    let mu = &bank.feature_mean;
    &bank.feature_cov + mu * mu.transpose() - bar_mu * mu.transpose()
}

pub fn population_moments(pop: &BankPopulation) -> PopulationMoments {
    let d = pop.dim();
    let bar_mu = pop
        .iter()
        .fold(DVector::zeros(d), |acc, (p, b)| acc + &b.feature_mean * p);
    let mut var_x = DMatrix::zeros(d, d);
    let mut within_cov = DMatrix::zeros(d, d);
    let mut cov_alpha_mu = DVector::zeros(d);
    for (p, b) in pop.iter() {
        var_x += w_matrix(b, &bar_mu) * p;
        within_cov += &b.feature_cov * p;
        cov_alpha_mu += (&b.feature_mean - &bar_mu) * (p * b.intercept);
    }
    // E[W_S] is symmetric in exact arithmetic; remove rounding asymmetry.
    let var_x = (&var_x + var_x.transpose()) * 0.5;
    PopulationMoments {
        bar_mu,
        var_x,
        cov_alpha_mu,
        mean_loss: mixture_sample_mean_loss(pop),
        within_cov,
    }
}

/// `E[Y_S] = sum p_s (alpha_s + beta_s' mu_s)`.
pub fn mixture_sample_mean_loss(pop: &BankPopulation) -> f64 {
    pop.iter().map(|(p, b)| p * b.mean_loss()).sum()
}

/// Closed-form `E[(a + b'X_S - Y_S)^2]` for a linear rule applied to every bank.
pub fn population_mse(pop: &BankPopulation, intercept: f64, slope: &DVector<f64>) -> f64 {
    pop.iter()
        .map(|(p, b)| {
            let gap = slope - &b.slope;
            let mean_err = intercept + slope.dot(&b.feature_mean) - b.mean_loss();
            let spread = (gap.transpose() * &b.feature_cov * &gap)[(0, 0)];
            p * (mean_err * mean_err + spread + b.noise_var)
        })
        .sum()
}

/// Which aggregation produced a forecaster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ForecasterKind {
    Pooled,
    Feo,
    Seo,
    Ptf,
    Wate,
    CondExp,
}

impl ForecasterKind {
    pub fn name(self) -> &'static str {
        match self {
            ForecasterKind::Pooled => "pooled",
            ForecasterKind::Feo => "feo",
            ForecasterKind::Seo => "seo",
            ForecasterKind::Ptf => "ptf",
            ForecasterKind::Wate => "wate",
            ForecasterKind::CondExp => "cond_exp",
        }
    }

    /// Whether the forecast depends on which bank is being evaluated.
    pub fn requires_bank(self) -> bool {
        matches!(self, ForecasterKind::Seo | ForecasterKind::Ptf)
    }
}

impl std::fmt::Display for ForecasterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Bank-specific terms carried alongside the common intercept and slope.
#[derive(Debug, Clone)]
pub enum BankTerms {
    None,
    /// Discarded fixed effects `delta` (reference bank omitted) and the shares
    /// `p` used to centre the dummies.
    FixedEffects {
        delta: DVector<f64>,
        shares: Vec<f64>,
        reference: usize,
    },
    /// Per-bank feature means for the SEO mean adjustment.
    MeanAdjust {
        bank_means: Vec<DVector<f64>>,
        bar_mu: DVector<f64>,
    },
    Ptf(Box<PtfForecaster>),
    Mixture(Box<BankPopulation>),
}

/// A fitted industry model: `intercept + slope' x` plus optional bank terms.
///
/// For `CondExp` the intercept and slope are unused; evaluation goes through
/// the stored mixture.
#[derive(Debug, Clone)]
pub struct LinearForecaster {
    pub kind: ForecasterKind,
    pub intercept: f64,
    pub slope: DVector<f64>,
    pub n_banks: usize,
    pub per_bank: BankTerms,
}

impl LinearForecaster {
    pub fn linear(kind: ForecasterKind, intercept: f64, slope: DVector<f64>, n_banks: usize) -> Self {
        Self {
            kind,
            intercept,
            slope,
            n_banks,
            per_bank: BankTerms::None,
        }
    }

    pub fn dim(&self) -> usize {
        self.slope.len()
    }

    fn check_bank(&self, bank: Option<usize>) -> Result<Option<usize>> {
        match bank {
            Some(s) if s >= self.n_banks => Err(Error::BankOutOfRange {
                index: s,
                n: self.n_banks,
            }),
            other => Ok(other),
        }
    }

    fn require_bank(&self, bank: Option<usize>) -> Result<usize> {
        self.check_bank(bank)?.ok_or(Error::MissingBankIdentity {
            kind: self.kind.name(),
        })
    }

    /// Evaluate the forecast at features `x` for the (optional) bank index.
    pub fn forecast(&self, x: &[f64], bank: Option<usize>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "feature vector has length {}, forecaster expects {}",
                x.len(),
                self.dim()
            )));
        }
        let xv = DVector::from_column_slice(x);
        match (&self.kind, &self.per_bank) {
            (ForecasterKind::Seo, BankTerms::MeanAdjust { bank_means, bar_mu }) => {
                let s = self.require_bank(bank)?;
                Ok(self.intercept + self.slope.dot(&(xv - &bank_means[s] + bar_mu)))
            }
            (ForecasterKind::Ptf, BankTerms::Ptf(ptf)) => {
                let s = self.require_bank(bank)?;
                ptf.forecast(x, s)
            }
            (ForecasterKind::CondExp, BankTerms::Mixture(pop)) => {
                self.check_bank(bank)?;
                crate::population::conditional_expectation_forecast(pop, x)
            }
            (ForecasterKind::Seo | ForecasterKind::Ptf | ForecasterKind::CondExp, _) => Err(
                Error::invalid(format!("{} forecaster is missing its bank terms", self.kind)),
            ),
            _ => {
                self.check_bank(bank)?;
                Ok(self.intercept + self.slope.dot(&xv))
            }
        }
    }

    /// Evaluate with the fixed effects kept, `alpha + delta'U(s) + beta'x`.
    ///
    /// This is the full projection before the dummies are discarded.
    pub fn forecast_with_fixed_effects(&self, x: &[f64], bank: usize) -> Result<f64> {
        let BankTerms::FixedEffects {
            delta,
            shares,
            reference,
        } = &self.per_bank
        else {
            return Err(Error::invalid("forecaster carries no fixed effects"));
        };
        let s = self.require_bank(Some(bank))?;
        let base = self.forecast(x, None)?;
        let u = centered_dummy_row(s, shares, *reference);
        Ok(base + delta.dot(&u))
    }
}

/// Centred dummies `U_i(s) = 1{s = i} - p_i` for every bank except `reference`.
pub fn centered_dummy_row(bank: usize, shares: &[f64], reference: usize) -> DVector<f64> {
    DVector::from_iterator(
        shares.len() - 1,
        (0..shares.len())
            .filter(|&i| i != reference)
            .map(|i| if i == bank { 1.0 } else { 0.0 } - shares[i]),
    )
}

/// Read a scalar-feature population from CSV with columns
/// `bank,weight,alpha,beta,mu,var` and optionally `noise_var`.
///
/// Weights are normalized to sum to one; bank ids are returned in file order.
pub fn read_scalar_population<R: std::io::Read>(reader: R, source: &str) -> Result<(Vec<String>, BankPopulation)> {
    #[derive(serde::Deserialize)]
    struct Row {
        bank: String,
        weight: f64,
        alpha: f64,
        beta: f64,
        mu: f64,
        var: f64,
        #[serde(default)]
        noise_var: f64,
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut ids = Vec::new();
    let mut banks = Vec::new();
    let mut weights = Vec::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            path: source.to_string(),
            line: i + 2,
            message: e.to_string(),
        })?;
        ids.push(row.bank);
        weights.push(row.weight);
        banks.push(BankModel::scalar(row.alpha, row.beta, row.mu, row.var, row.noise_var));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::InvalidWeights(format!("population weights sum to {total}")));
    }
    let weights = weights.iter().map(|w| w / total).collect();
    Ok((ids, BankPopulation::new(banks, weights)?))
}
