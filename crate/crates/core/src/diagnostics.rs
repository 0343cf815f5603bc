//! Fairness diagnostics on populations: per-bank bias, cross-bank
//! sensitivities with their sign rules, misdirection, parity statistics and
//! convex-weight checks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    centered_dummy_row, population_moments, population_mse, BankModel, BankPopulation, ForecasterKind,
    LinearForecaster,
};
use crate::population::{conditional_expectation_forecast, feo_decomposition, fit_feo, fit_pooled};
use crate::simulation::mix_seed;

/// Gauss-Hermite nodes used for one-dimensional conditional-expectation bias.
pub const HERMITE_NODES: usize = 300;

/// Monte Carlo draws per bank for conditional-expectation bias when `d > 1`.
pub const COND_EXP_DRAWS: usize = 1_000_000;

/// Minimum samples per bank for parity statistics.
pub const MIN_PARITY_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    pub method: String,
    /// `E[Yhat(X_s) - Y_s]` per bank.
    pub per_bank: Vec<f64>,
    /// `sum_s p_s bias(s)`.
    pub weighted_sum: f64,
    /// Monte Carlo standard errors, when the bias was simulated.
    pub standard_errors: Option<Vec<f64>>,
}

/// Nodes and weights for `int f(t) exp(-t^2) dt` (Golub-Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn linear_bias(pop: &BankPopulation, slope: &DVector<f64>) -> Vec<f64> {
    let m = population_moments(pop);
    pop.banks()
        .iter()
        .map(|b| m.mean_loss - b.mean_loss() + slope.dot(&(&b.feature_mean - &m.bar_mu)))
        .collect()
}

fn cond_exp_bias(pop: &BankPopulation, seed: u64) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    if pop.dim() == 1 {
        let (nodes, weights) = gauss_hermite(HERMITE_NODES);
        let bias = pop
            .banks()
            .iter()
            .map(|b| {
                let sd = (2.0 * b.feature_cov[(0, 0)]).sqrt();
                let mut mean = 0.0;
                for (t, w) in nodes.iter().zip(&weights) {
                    mean += w * conditional_expectation_forecast(pop, &[b.feature_mean[0] + sd * t])?;
                }
                Ok(mean / std::f64::consts::PI.sqrt() - b.mean_loss())
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok((bias, None));
    }
    let results = pop
        .banks()
        .iter()
        .enumerate()
        .map(|(s, b)| {
            let root = linalg::sqrt_spd(&b.feature_cov);
            let (sum, sum_sq) = (0..COND_EXP_DRAWS)
                .into_par_iter()
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, s as u64, i as u64]));
                    let z = DVector::from_fn(pop.dim(), |_, _| StandardNormal.sample(&mut rng));
                    let x = &b.feature_mean + &root * z;
                    conditional_expectation_forecast(pop, x.as_slice()).map(|v| (v, v * v))
                })
                .try_reduce(|| (0.0, 0.0), |a, c| Ok((a.0 + c.0, a.1 + c.1)))?;
            let n = COND_EXP_DRAWS as f64;
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
            Ok((mean - b.mean_loss(), (var / n).sqrt()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (bias, se) = results.into_iter().unzip();
    Ok((bias, Some(se)))
}

/// Per-bank forecast bias `E[Yhat(X_s) - Y_s]` for one aggregation method.
///
/// `seed` is used only for the Monte Carlo conditional-expectation path.
pub fn population_bias(pop: &BankPopulation, method: ForecasterKind, seed: u64) -> Result<BiasReport> {
    let m = population_moments(pop);
    let (per_bank, standard_errors) = match method {
        ForecasterKind::Pooled => (linear_bias(pop, &fit_pooled(pop)?.slope), None),
        ForecasterKind::Feo => (linear_bias(pop, &fit_feo(pop)?.slope), None),
        ForecasterKind::Wate => (linear_bias(pop, &crate::population::fit_wate(pop, None)?.slope), None),
        ForecasterKind::Seo => (pop.banks().iter().map(|b| m.mean_loss - b.mean_loss()).collect(), None),
        ForecasterKind::Ptf => {
            pop.require_gaussian("projection to fairness")?;
            (pop.banks().iter().map(|b| m.mean_loss - b.mean_loss()).collect(), None)
        }
        ForecasterKind::CondExp => {
            pop.require_gaussian("the conditional-expectation model")?;
            cond_exp_bias(pop, seed)?
        }
    };
    let weighted_sum = per_bank.iter().zip(pop.weights()).map(|(b, p)| b * p).sum();
    Ok(BiasReport {
        method: method.name().to_string(),
        per_bank,
        weighted_sum,
        standard_errors,
    })
}

/// Aggregation rule whose sensitivities are analysed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum SensitivityMethod {
    Feo,
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum SensitivityParam {
    Mu,
    Alpha,
    Beta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum SensitivityTarget {
    /// Forecast at feature value `x`.
    Point(f64),
    /// `E[Yhat(X_l)]` for bank `l`.
    Mean(usize),
    /// `E[Yhat(X_l) - Y_l]` for bank `l`.
    Bias(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn holds_for(self, value: f64) -> bool {
        match self {
            Sign::Positive => value > 0.0,
            Sign::Negative => value < 0.0,
        }
    }
}

/// Sign classification of a derivative from the sufficient conditions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum SignRule {
    /// A sufficient condition holds strictly and fixes the sign.
    Determined { sign: Sign, condition: String },
    /// A rule exists for this case but its hypothesis does not hold strictly.
    NotApplicable { condition: String },
    NoSimpleRule,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub method: SensitivityMethod,
    pub parameter: SensitivityParam,
    pub bank: usize,
    pub target: SensitivityTarget,
    pub value: f64,
    pub sign_rule: SignRule,
}

/// Scalar population summaries used by the sensitivity formulas.
struct Scalar {
    p: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    mu: Vec<f64>,
    var: Vec<f64>,
    bar_mu: f64,
    bar_alpha: f64,
    /// `sum p_i sigma_i^2`.
    within: f64,
    /// `sum p_i W_i = sum p sigma^2 + var(mu)`.
    total: f64,
    beta_f: f64,
    beta_p: f64,
}

impl Scalar {
    fn new(pop: &BankPopulation) -> Result<Self> {
        if pop.dim() != 1 {
            return Err(Error::invalid(format!(
                "sensitivities are defined for a scalar feature, population has dimension {}",
                pop.dim()
            )));
        }
        let get = |f: fn(&BankModel) -> f64| pop.banks().iter().map(f).collect::<Vec<_>>();
        let p = pop.weights().to_vec();
        let alpha = get(|b| b.intercept);
        let beta = get(|b| b.slope[0]);
        let mu = get(|b| b.feature_mean[0]);
        let var = get(|b| b.feature_cov[(0, 0)]);
        let wsum = |v: &[f64]| v.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
        let bar_mu = wsum(&mu);
        let bar_alpha = wsum(&alpha);
        let within = wsum(&var);
        let total = within + mu.iter().zip(&p).map(|(m, q)| q * (m - bar_mu).powi(2)).sum::<f64>();
        let beta_f = var.iter().zip(&beta).zip(&p).map(|((v, b), q)| q * v * b).sum::<f64>() / within;
        let num: f64 = (0..p.len())
            .map(|i| p[i] * (alpha[i] * (mu[i] - bar_mu) + (var[i] + mu[i] * (mu[i] - bar_mu)) * beta[i]))
            .sum();
        Ok(Self {
            beta_p: num / total,
            p,
            alpha,
            beta,
            mu,
            var,
            bar_mu,
            bar_alpha,
            within,
            total,
            beta_f,
        })
    }

    /// `W_s = sigma_s^2 + mu_s (mu_s - bar_mu)`.
    fn w(&self, s: usize) -> f64 {
        self.var[s] + self.mu[s] * (self.mu[s] - self.bar_mu)
    }

    fn slope(&self, method: SensitivityMethod) -> f64 {
        match method {
            SensitivityMethod::Feo => self.beta_f,
            SensitivityMethod::Pooled => self.beta_p,
        }
    }

    /// Derivatives of the industry slope with respect to `(mu_s, alpha_s, beta_s)`.
    fn slope_derivative(&self, method: SensitivityMethod, param: SensitivityParam, s: usize) -> f64 {
        let ps = self.p[s];
        match (method, param) {
            (SensitivityMethod::Feo, SensitivityParam::Beta) => ps * self.var[s] / self.within,
            (SensitivityMethod::Feo, _) => 0.0,
            (SensitivityMethod::Pooled, SensitivityParam::Alpha) => ps * (self.mu[s] - self.bar_mu) / self.total,
            (SensitivityMethod::Pooled, SensitivityParam::Beta) => ps * self.w(s) / self.total,
            (SensitivityMethod::Pooled, SensitivityParam::Mu) => {
                let mean_mu_beta: f64 = (0..self.p.len()).map(|i| self.p[i] * self.mu[i] * self.beta[i]).sum();
                let dn = ps * (self.alpha[s] - self.bar_alpha) + ps * (2.0 * self.mu[s] - self.bar_mu) * self.beta[s]
                    - ps * mean_mu_beta;
                let dd = 2.0 * ps * (self.mu[s] - self.bar_mu);
                (dn - self.beta_p * dd) / self.total
            }
        }
    }

    /// Derivative of `E[Y_S]` and `bar_mu`.
    fn mean_loss_derivative(&self, param: SensitivityParam, s: usize) -> f64 {
        let ps = self.p[s];
        match param {
            SensitivityParam::Mu => ps * self.beta[s],
            SensitivityParam::Alpha => ps,
            SensitivityParam::Beta => ps * self.mu[s],
        }
    }
}

/// Analytic derivative of a forecast, mean forecast or bias with respect to
/// one bank parameter, and the sign rule that applies to it.
///
/// The industry forecast is `E[Y_S] + b (x - bar_mu)` with `b = beta_F` or
/// `beta_Pool`; means replace `x` by `mu_l`, and the bias subtracts `E[Y_l]`.
pub fn sensitivity(
    pop: &BankPopulation,
    method: SensitivityMethod,
    parameter: SensitivityParam,
    bank: usize,
    target: SensitivityTarget,
) -> Result<SensitivityReport> {
    let sc = Scalar::new(pop)?;
    let n = pop.len();
    let check = |i: usize| {
        if i < n {
            Ok(())
        } else {
            Err(Error::BankOutOfRange { index: i, n })
        }
    };
    check(bank)?;
    let (x, own, is_bias) = match target {
        SensitivityTarget::Point(x) => (x, None, false),
        SensitivityTarget::Mean(l) => {
            check(l)?;
            (sc.mu[l], Some(l), false)
        }
        SensitivityTarget::Bias(l) => {
            check(l)?;
            (sc.mu[l], Some(l), true)
        }
    };
    let same = own == Some(bank);
    let b = sc.slope(method);
    let mut value = sc.mean_loss_derivative(parameter, bank) + (x - sc.bar_mu) * sc.slope_derivative(method, parameter, bank);
    if parameter == SensitivityParam::Mu {
        // bar_mu moves with mu_s; a mean target at l = s also moves with mu_l
        value -= b * sc.p[bank];
        if same {
            value += b;
        }
    }
    if is_bias && same {
        value -= match parameter {
            SensitivityParam::Mu => sc.beta[bank],
            SensitivityParam::Alpha => 1.0,
            SensitivityParam::Beta => sc.mu[bank],
        };
    }
    let sign_rule = sign_rule(&sc, method, parameter, bank, target);
    Ok(SensitivityReport {
        method,
        parameter,
        bank,
        target,
        value,
        sign_rule,
    })
}

fn determined(sign: Sign, condition: &str) -> SignRule {
    SignRule::Determined {
        sign,
        condition: condition.to_string(),
    }
}

fn when(holds: bool, sign: Sign, condition: &str) -> SignRule {
    if holds {
        determined(sign, condition)
    } else {
        SignRule::NotApplicable {
            condition: condition.to_string(),
        }
    }
}

/// `iff`-style rule: positive when `v > 0`, negative when `v < 0`.
fn by_sign(v: f64, positive: &str, negative: &str) -> SignRule {
    if v > 0.0 {
        determined(Sign::Positive, positive)
    } else if v < 0.0 {
        determined(Sign::Negative, negative)
    } else {
        SignRule::NotApplicable {
            condition: positive.to_string(),
        }
    }
}

/// Sufficient conditions for the sign of each sensitivity.
///
/// Rules that rely on nonnegative `mu_s` or `beta` state so in their
/// condition and only fire when it holds. The FEO rule for the response of
/// a mean forecast (and another bank's bias) to `beta_s` carries the
/// variance weight `sigma_s^2 / sum p_i sigma_i^2`; it reduces to
/// `mu_s + mu_l > bar_mu` only when all feature variances are equal.
fn sign_rule(
    sc: &Scalar,
    method: SensitivityMethod,
    param: SensitivityParam,
    s: usize,
    target: SensitivityTarget,
) -> SignRule {
    use SensitivityMethod::*;
    use SensitivityParam::*;
    use SensitivityTarget::*;
    let mu_s = sc.mu[s];
    let gap = |v: f64| v - sc.bar_mu;
    let feo_beta_weight = |l: usize| mu_s + gap(sc.mu[l]) * sc.var[s] / sc.within;
    match (method, param, target) {
        (Feo, Mu, Point(_)) => by_sign(sc.beta[s] - sc.beta_f, "beta_s > beta_F", "beta_s < beta_F"),
        (Feo, Alpha, Point(_)) => determined(Sign::Positive, "always"),
        (Feo, Beta, Point(x)) => when(mu_s >= 0.0 && x > sc.bar_mu, Sign::Positive, "x > bar_mu and mu_s >= 0"),
        (Pooled, Mu, _) => SignRule::NoSimpleRule,
        (Pooled, Alpha, Point(x)) => when(
            (mu_s - sc.bar_mu) * gap(x) > 0.0,
            Sign::Positive,
            "(mu_s - bar_mu)(x - bar_mu) > 0",
        ),
        (Pooled, Beta, Point(x)) => when(
            mu_s >= 0.0 && sc.w(s) * gap(x) > 0.0,
            Sign::Positive,
            "[sigma_s^2 + mu_s(mu_s - bar_mu)](x - bar_mu) > 0 and mu_s >= 0",
        ),

        (Feo, Mu, Mean(l)) if l == s => when(
            sc.beta[s] >= 0.0 && sc.beta_f >= 0.0 && (sc.beta[s] > 0.0 || sc.beta_f > 0.0),
            Sign::Positive,
            "l = s with beta_s, beta_F >= 0 not both zero",
        ),
        (Feo, Mu, Mean(_)) => by_sign(sc.beta[s] - sc.beta_f, "beta_s > beta_F", "beta_s < beta_F"),
        (Feo, Alpha, Mean(_)) => determined(Sign::Positive, "always"),
        (Feo, Beta, Mean(l)) => by_sign(
            feo_beta_weight(l),
            "mu_s + (mu_l - bar_mu) sigma_s^2 / E[sigma_S^2] > 0",
            "mu_s + (mu_l - bar_mu) sigma_s^2 / E[sigma_S^2] < 0",
        ),
        (Pooled, Alpha, Mean(l)) if l == s => determined(Sign::Positive, "l = s"),
        (Pooled, Alpha, Mean(l)) | (Pooled, Alpha, Bias(l)) if l != s => when(
            gap(mu_s) * gap(sc.mu[l]) > 0.0,
            Sign::Positive,
            "(mu_s - bar_mu)(mu_l - bar_mu) > 0",
        ),
        (Pooled, Beta, Mean(l)) => when(
            mu_s >= 0.0 && sc.w(s) * gap(sc.mu[l]) > 0.0,
            Sign::Positive,
            "[sigma_s^2 + mu_s(mu_s - bar_mu)](mu_l - bar_mu) > 0 and mu_s >= 0",
        ),

        (Feo, Mu, Bias(l)) if l == s => by_sign(sc.beta_f - sc.beta[s], "beta_s < beta_F", "beta_s > beta_F"),
        (Feo, Mu, Bias(_)) => by_sign(sc.beta[s] - sc.beta_f, "beta_s > beta_F", "beta_s < beta_F"),
        (Feo, Alpha, Bias(l)) if l == s => determined(Sign::Negative, "l = s"),
        (Feo, Alpha, Bias(_)) => determined(Sign::Positive, "l != s"),
        (Feo, Beta, Bias(l)) if l == s => when(
            mu_s >= 0.0 && mu_s < sc.bar_mu,
            Sign::Negative,
            "l = s with 0 <= mu_s < bar_mu",
        ),
        (Feo, Beta, Bias(l)) => by_sign(
            feo_beta_weight(l),
            "mu_s + (mu_l - bar_mu) sigma_s^2 / E[sigma_S^2] > 0",
            "mu_s + (mu_l - bar_mu) sigma_s^2 / E[sigma_S^2] < 0",
        ),
        (Pooled, Alpha, Bias(_)) => SignRule::NoSimpleRule,
        (Pooled, Beta, Bias(l)) if l == s => SignRule::NoSimpleRule,
        (Pooled, Beta, Bias(l)) => when(
            mu_s >= 0.0 && sc.w(s) * gap(sc.mu[l]) > 0.0,
            Sign::Positive,
            "[sigma_s^2 + mu_s(mu_s - bar_mu)](mu_l - bar_mu) > 0 and mu_s >= 0",
        ),
        (Pooled, Alpha, Mean(_)) => unreachable!("covered by the l == s and l != s arms"),
    }
}

/// The quantity a sensitivity differentiates, evaluated through the
/// population fitting routines.
pub fn sensitivity_target_value(pop: &BankPopulation, method: SensitivityMethod, target: SensitivityTarget) -> Result<f64> {
    let f = match method {
        SensitivityMethod::Feo => fit_feo(pop)?,
        SensitivityMethod::Pooled => fit_pooled(pop)?,
    };
    match target {
        SensitivityTarget::Point(x) => f.forecast(&[x], None),
        SensitivityTarget::Mean(l) => f.forecast(pop.bank(l)?.feature_mean.as_slice(), None),
        SensitivityTarget::Bias(l) => {
            let b = pop.bank(l)?;
            Ok(f.forecast(b.feature_mean.as_slice(), None)? - b.mean_loss())
        }
    }
}

/// Central finite difference of [`sensitivity_target_value`] with step
/// `1e-6 * max(1, |parameter|)`.
pub fn finite_difference_sensitivity(
    pop: &BankPopulation,
    method: SensitivityMethod,
    parameter: SensitivityParam,
    bank: usize,
    target: SensitivityTarget,
) -> Result<f64> {
    let base = pop.bank(bank)?.clone();
    let current = match parameter {
        SensitivityParam::Mu => base.feature_mean[0],
        SensitivityParam::Alpha => base.intercept,
        SensitivityParam::Beta => base.slope[0],
    };
    let h = 1e-6 * current.abs().max(1.0);
    let at = |v: f64| {
        let mut b = base.clone();
        match parameter {
            SensitivityParam::Mu => b.feature_mean[0] = v,
            SensitivityParam::Alpha => b.intercept = v,
            SensitivityParam::Beta => b.slope[0] = v,
        }
        sensitivity_target_value(&pop.with_bank(bank, b)?, method, target)
    };
    Ok((at(current + h)? - at(current - h)?) / (2.0 * h))
}

/// Closed-form comparison of the FEO forecast with `E[Y_S] + (beta_F + gamma)'(x - bar_mu)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Misdirection {
    pub mse_feo: f64,
    pub mse_gamma: f64,
    /// `gamma' var[X_S] Lambda delta`.
    pub cov_i: f64,
    /// `sum_s p_s gamma'(mu_s - bar_mu) delta'U(s)`.
    pub cov_ii: f64,
}

impl Misdirection {
    /// A lower MSE than FEO must come with positive `cov_i` and `cov_ii`.
    pub fn implication_holds(&self) -> bool {
        !(self.mse_gamma < self.mse_feo) || (self.cov_i > 0.0 && self.cov_ii > 0.0)
    }
}

pub fn misdirection_check(pop: &BankPopulation, gamma: &DVector<f64>) -> Result<Misdirection> {
    if gamma.len() != pop.dim() {
        return Err(Error::invalid("gamma must have the population feature dimension"));
    }
    let reference = pop.len() - 1;
    let dec = feo_decomposition(pop, reference)?;
    let m = population_moments(pop);
    let mse_at = |slope: &DVector<f64>| population_mse(pop, m.mean_loss - slope.dot(&m.bar_mu), slope);
    let mse_feo = mse_at(&dec.beta_f);
    let mse_gamma = mse_at(&(&dec.beta_f + gamma));
    let cov_i = gamma.dot(&(&m.var_x * &dec.lambda * &dec.delta));
    let cov_ii = pop
        .banks()
        .iter()
        .enumerate()
        .map(|(s, b)| {
            let u = centered_dummy_row(s, pop.weights(), reference);
            pop.weights()[s] * gamma.dot(&(&b.feature_mean - &m.bar_mu)) * dec.delta.dot(&u)
        })
        .sum();
    Ok(Misdirection {
        mse_feo,
        mse_gamma,
        cov_i,
        cov_ii,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParityStats {
    pub per_bank_mean: Vec<f64>,
    pub per_bank_var: Vec<f64>,
    /// Largest two-sample Kolmogorov-Smirnov distance over bank pairs.
    pub max_ks: f64,
    /// `cov(Yhat, U_i(S))` for every bank but the last.
    pub weak_dp_cov: Vec<f64>,
    pub weak_dp_se: Vec<f64>,
}

/// Two-sample Kolmogorov-Smirnov distance between sorted samples.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let (mut i, mut j, mut d) = (0, 0, 0.0_f64);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Simulate `n_samples` feature draws per bank, evaluate the forecaster
/// with the bank's identity, and summarize how the forecast distribution
/// depends on the bank.
pub fn demographic_parity_stats(
    pop: &BankPopulation,
    forecaster: &LinearForecaster,
    n_samples: usize,
    seed: u64,
) -> Result<ParityStats> {
    pop.require_gaussian("parity simulation")?;
    if n_samples < MIN_PARITY_SAMPLES {
        return Err(Error::invalid(format!("need at least {MIN_PARITY_SAMPLES} samples per bank")));
    }
    let samples = pop
        .banks()
        .iter()
        .enumerate()
        .map(|(s, b)| {
            let root = linalg::sqrt_spd(&b.feature_cov);
            let mut v = (0..n_samples)
                .into_par_iter()
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, s as u64, i as u64]));
                    let z = DVector::from_fn(pop.dim(), |_, _| StandardNormal.sample(&mut rng));
                    let x = &b.feature_mean + &root * z;
                    forecaster.forecast(x.as_slice(), Some(s))
                })
                .collect::<Result<Vec<f64>>>()?;
            v.sort_by(f64::total_cmp);
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = n_samples as f64;
    let means: Vec<f64> = samples.iter().map(|v| v.iter().sum::<f64>() / n).collect();
    let vars: Vec<f64> = samples
        .iter()
        .zip(&means)
        .map(|(v, m)| v.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    let mut max_ks = 0.0_f64;
    for a in 0..samples.len() {
        for b in a + 1..samples.len() {
            max_ks = max_ks.max(ks_distance(&samples[a], &samples[b]));
        }
    }
    let p = pop.weights();
    let reference = pop.len() - 1;
    let u: Vec<DVector<f64>> = (0..pop.len()).map(|s| centered_dummy_row(s, p, reference)).collect();
    let (weak_dp_cov, weak_dp_se) = (0..pop.len() - 1)
        .map(|i| {
            // sum_s p_s U_i(s) = 0, so cov(Yhat, U_i) = sum_s p_s U_i(s) E[Yhat | s]
            let c: Vec<f64> = (0..pop.len()).map(|s| p[s] * u[s][i]).collect();
            let cov: f64 = c.iter().zip(&means).map(|(a, m)| a * m).sum();
            let se = c.iter().zip(&vars).map(|(a, v)| a * a * v / n).sum::<f64>().sqrt();
            (cov, se)
        })
        .unzip();
    Ok(ParityStats {
        per_bank_mean: means,
        per_bank_var: vars,
        max_ks,
        weak_dp_cov,
        weak_dp_se,
    })
}

/// Implicit weights on the bank slopes in the scalar FEO and pooled fits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexWeights {
    /// `p_s sigma_s^2 / sum p_i sigma_i^2`.
    pub feo_weights: Vec<f64>,
    pub feo_convex: bool,
    /// `p_s W_s / sum p_i W_i` with `W_s = sigma_s^2 + mu_s(mu_s - bar_mu)`.
    pub pooled_weights: Vec<f64>,
    pub pooled_convex: bool,
    /// `cov[alpha_S, mu_S] / var[X_S]`, the part of the pooled slope not
    /// carried by any bank slope.
    pub pooled_intercept_term: f64,
}

pub fn convex_weights_check(pop: &BankPopulation) -> Result<ConvexWeights> {
    let sc = Scalar::new(pop)?;
    let feo_weights: Vec<f64> = (0..sc.p.len()).map(|s| sc.p[s] * sc.var[s] / sc.within).collect();
    let pooled_weights: Vec<f64> = (0..sc.p.len()).map(|s| sc.p[s] * sc.w(s) / sc.total).collect();
    let convex = |w: &[f64]| w.iter().all(|v| *v >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() < 1e-12;
    let cov_alpha_mu: f64 = (0..sc.p.len()).map(|s| sc.p[s] * sc.alpha[s] * (sc.mu[s] - sc.bar_mu)).sum();
    Ok(ConvexWeights {
        feo_convex: convex(&feo_weights),
        pooled_convex: convex(&pooled_weights),
        feo_weights,
        pooled_weights,
        pooled_intercept_term: cov_alpha_mu / sc.total,
    })
}
