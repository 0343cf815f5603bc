//! Synthetic populations, simulated panels and a Monte Carlo harness.
//!
//! Every panel row draws from its own ChaCha stream keyed by
//! `(seed, bank, row)`, so output does not depend on thread scheduling.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{BankModel, BankPopulation};
use crate::sample::{fit_panel, PanelDataset, PanelMode};

/// Ridge added to `A A'` so sampled covariances are safely positive definite.
pub const COV_RIDGE: f64 = 1e-3;

/// Closed interval `[lo, hi]` for uniform parameter draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightScheme {
    #[default]
    Equal,
    /// Independent uniform(0.5, 1.5) draws, normalized.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_banks: usize,
    pub feature_dim: usize,
    pub rows_per_bank: usize,
    pub intercept: Range,
    pub slope: Range,
    pub mean: Range,
    /// Entries of the factor `A` in `Sigma = A A' + ridge I`.
    pub cov_factor: Range,
    pub noise_var: Range,
    pub weights: WeightScheme,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_banks: 4,
            feature_dim: 1,
            rows_per_bank: 200,
            intercept: Range::new(-1.0, 1.0),
            slope: Range::new(-1.0, 2.0),
            mean: Range::new(-1.0, 1.0),
            cov_factor: Range::new(-1.0, 1.0),
            noise_var: Range::new(0.1, 1.0),
            weights: WeightScheme::Equal,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_banks", self.n_banks),
            ("feature_dim", self.feature_dim),
            ("rows_per_bank", self.rows_per_bank),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        for (name, r) in [
            ("intercept", self.intercept),
            ("slope", self.slope),
            ("mean", self.mean),
            ("cov_factor", self.cov_factor),
            ("noise_var", self.noise_var),
        ] {
            if !(r.lo <= r.hi) || !r.lo.is_finite() || !r.hi.is_finite() {
                return Err(Error::invalid(format!("{name} range [{}, {}] is not ordered", r.lo, r.hi)));
            }
        }
        if self.noise_var.lo < 0.0 {
            return Err(Error::invalid("noise_var range must be nonnegative"));
        }
        Ok(())
    }
}

/// Draw a population with every parameter uniform over its configured range.
pub fn sample_population<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<BankPopulation> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let banks = (0..cfg.n_banks)
        .map(|_| {
            let intercept = cfg.intercept.draw(rng);
            let slope = DVector::from_fn(d, |_, _| cfg.slope.draw(rng));
            let mean = DVector::from_fn(d, |_, _| cfg.mean.draw(rng));
            let a = DMatrix::from_fn(d, d, |_, _| cfg.cov_factor.draw(rng));
            let cov = &a * a.transpose() + DMatrix::identity(d, d) * COV_RIDGE;
            BankModel::new(intercept, slope, mean, cov, cfg.noise_var.draw(rng))
        })
        .collect();
    let weights = match cfg.weights {
        WeightScheme::Equal => vec![1.0 / cfg.n_banks as f64; cfg.n_banks],
        WeightScheme::Random => {
            let raw: Vec<f64> = (0..cfg.n_banks).map(|_| rng.random_range(0.5..1.5)).collect();
            let total: f64 = raw.iter().sum();
            let mut w: Vec<f64> = raw.iter().map(|v| v / total).collect();
            // absorb rounding so the weights sum to one within tolerance
            let err: f64 = w.iter().sum::<f64>() - 1.0;
            w[0] -= err;
            w
        }
    };
    BankPopulation::new(banks, weights)
}

/// [`sample_population`] driven by a ChaCha stream seeded with `cfg.seed`.
pub fn seeded_population(cfg: &SimConfig) -> Result<BankPopulation> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x9090]));
    sample_population(cfg, &mut rng)
}

/// SplitMix64 finalizer; combines counters into well-spread stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9E37_79B9_7F4A_7C15_u64, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

/// Zero-padded bank labels that sort in bank order.
pub fn bank_labels(n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len().max(2);
    (0..n).map(|s| format!("b{s:0width$}")).collect()
}

pub fn feature_labels(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

/// Draw `rows_per_bank` observations from each bank: `X ~ N(mu_s, Sigma_s)`,
/// `eps ~ N(0, noise_s)`, `y = alpha_s + beta_s'X + eps`.
///
/// Row weights are `p_s * S`, so each bank carries its population share of
/// the total weight. Times run `0..rows_per_bank` within each bank.
pub fn simulate_panel(pop: &BankPopulation, rows_per_bank: usize, seed: u64) -> Result<PanelDataset> {
    if rows_per_bank == 0 {
        return Err(Error::invalid("rows_per_bank must be at least 1"));
    }
    let d = pop.dim();
    let nb = pop.len();
    let roots: Vec<DMatrix<f64>> = pop.banks().iter().map(|b| linalg::sqrt_spd(&b.feature_cov)).collect();
    let n = nb * rows_per_bank;
    let draws: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (s, r) = (i / rows_per_bank, i % rows_per_bank);
            let b = &pop.banks()[s];
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, s as u64, r as u64]));
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &b.feature_mean + &roots[s] * z;
            let eps: f64 = rng.sample::<f64, _>(StandardNormal) * b.noise_var.sqrt();
            (x.iter().copied().collect(), b.predict(&x) + eps)
        })
        .collect();
    let mut features = DMatrix::zeros(n, d);
    let mut response = Vec::with_capacity(n);
    for (i, (x, y)) in draws.into_iter().enumerate() {
        for j in 0..d {
            features[(i, j)] = x[j];
        }
        response.push(y);
    }
    let weights = (0..n).map(|i| pop.weights()[i / rows_per_bank] * nb as f64).collect();
    PanelDataset::from_indexed(
        bank_labels(nb),
        feature_labels(d),
        (0..n).map(|i| i / rows_per_bank).collect(),
        (0..n).map(|i| (i % rows_per_bank) as i64).collect(),
        response,
        features,
        weights,
    )
}

/// Sample estimators available to the Monte Carlo harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorId {
    Pooled,
    FixedEffects,
}

impl EstimatorId {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorId::Pooled => "pooled",
            EstimatorId::FixedEffects => "feo",
        }
    }

    fn mode(self) -> PanelMode {
        match self {
            EstimatorId::Pooled => PanelMode::Pooled,
            EstimatorId::FixedEffects => PanelMode::FixedEffects,
        }
    }
}

impl FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(EstimatorId::Pooled),
            "feo" | "fixed-effects" | "fixed_effects" => Ok(EstimatorId::FixedEffects),
            other => Err(Error::UnknownEstimator(other.to_string())),
        }
    }
}

/// Cross-replication summary; coefficients are `(intercept, slope...)`.
#[derive(Debug, Clone)]
pub struct MonteCarloSummary {
    pub mean: DVector<f64>,
    /// Standard error of `mean`: cross-replication SD over `sqrt(replications)`.
    pub se: DVector<f64>,
    pub replications: Vec<DVector<f64>>,
}

/// Fit `estimator` on `replications` independent panels of about `rows`
/// total rows (split evenly across banks).
pub fn monte_carlo_estimate(
    pop: &BankPopulation,
    estimator: EstimatorId,
    rows: usize,
    replications: usize,
    seed: u64,
) -> Result<MonteCarloSummary> {
    if replications < 2 {
        return Err(Error::invalid("at least two replications are needed for a standard error"));
    }
    let per_bank = rows.div_ceil(pop.len()).max(1);
    let estimates = (0..replications)
        .into_par_iter()
        .map(|r| {
            let panel = simulate_panel(pop, per_bank, mix_seed(&[seed, 0x5EED, r as u64]))?;
            let f = fit_panel(&panel, estimator.mode())?.forecaster;
            let mut v = DVector::zeros(1 + f.dim());
            v[0] = f.intercept;
            v.rows_mut(1, f.dim()).copy_from(&f.slope);
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    let k = estimates[0].len();
    let reps = replications as f64;
    let mean = estimates.iter().fold(DVector::zeros(k), |a, v| a + v) / reps;
    let var = estimates
        .iter()
        .fold(DVector::zeros(k), |a, v| a + (v - &mean).map(|e| e * e))
        / (reps - 1.0);
    let se = var.map(|v| (v / reps).sqrt());
    Ok(MonteCarloSummary {
        mean,
        se,
        replications: estimates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{fit_feo, fit_pooled};
    use crate::scenarios::sim_a;

    #[test]
    fn degenerate_ranges_give_the_range_point() {
        let cfg = SimConfig {
            n_banks: 3,
            feature_dim: 2,
            intercept: Range::point(0.5),
            slope: Range::point(1.5),
            mean: Range::point(-1.0),
            cov_factor: Range::point(0.0),
            noise_var: Range::point(0.2),
            ..SimConfig::default()
        };
        let pop = sample_population(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for b in pop.banks() {
            assert_eq!(b.intercept, 0.5);
            assert!(b.slope.iter().all(|v| *v == 1.5));
            assert_eq!(b.feature_cov, DMatrix::identity(2, 2) * COV_RIDGE);
        }
    }

    #[test]
    fn same_seed_same_population() {
        let cfg = SimConfig {
            weights: WeightScheme::Random,
            ..SimConfig::default()
        };
        let a = sample_population(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_population(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SimConfig {
            slope: Range::new(1.0, 0.0),
            ..SimConfig::default()
        };
        assert!(sample_population(&cfg, &mut rng).is_err());
        let cfg = SimConfig {
            feature_dim: 0,
            ..SimConfig::default()
        };
        assert!(sample_population(&cfg, &mut rng).is_err());
    }

    #[test]
    fn zero_noise_rows_are_exact() {
        let cfg = SimConfig {
            noise_var: Range::point(0.0),
            feature_dim: 2,
            ..SimConfig::default()
        };
        let pop = sample_population(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let panel = simulate_panel(&pop, 50, 11).unwrap();
        for i in 0..panel.len() {
            let b = &pop.banks()[panel.banks()[i]];
            let x = DVector::from_vec(panel.feature_row(i));
            assert!((panel.response()[i] - b.predict(&x)).abs() < 1e-12);
        }
    }

    #[test]
    fn panels_are_schedule_independent() {
        let pop = sim_a();
        let a = simulate_panel(&pop, 500, 42).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| simulate_panel(&pop, 500, 42).unwrap());
        assert_eq!(a, b);
        let c = simulate_panel(&pop, 500, 43).unwrap();
        assert_ne!(a.response(), c.response());
    }

    #[test]
    fn unknown_estimator_is_an_error() {
        assert_eq!("pooled".parse::<EstimatorId>().unwrap(), EstimatorId::Pooled);
        assert_eq!("feo".parse::<EstimatorId>().unwrap(), EstimatorId::FixedEffects);
        assert!(matches!("ridge".parse::<EstimatorId>(), Err(Error::UnknownEstimator(_))));
    }

    #[test]
    fn monte_carlo_recovers_sim_a() {
        let pop = sim_a();
        let pooled = monte_carlo_estimate(&pop, EstimatorId::Pooled, 20_000, 10, 5).unwrap();
        let feo = monte_carlo_estimate(&pop, EstimatorId::FixedEffects, 20_000, 10, 5).unwrap();
        let want_p = fit_pooled(&pop).unwrap();
        let want_f = fit_feo(&pop).unwrap();
        assert!((pooled.mean[1] - want_p.slope[0]).abs() < 4.0 * pooled.se[1]);
        assert!((feo.mean[1] - want_f.slope[0]).abs() < 4.0 * feo.se[1]);
    }

    #[test]
    fn zero_noise_monte_carlo_is_exact() {
        let banks = vec![
            BankModel::scalar(0.5, 2.0, 0.0, 1.0, 0.0),
            BankModel::scalar(0.5, 2.0, 1.0, 2.0, 0.0),
        ];
        let pop = BankPopulation::equally_weighted(banks).unwrap();
        let mc = monte_carlo_estimate(&pop, EstimatorId::FixedEffects, 1000, 4, 0).unwrap();
        assert!((mc.mean[1] - 2.0).abs() < 1e-8);
        assert!(mc.se[1] < 1e-8);
    }
}
