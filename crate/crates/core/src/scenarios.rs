//! Canonical scalar-feature populations with hand-checkable closed forms.
//!
//! * SIM-A: Simpson's paradox. No bank has a slope, but intercepts covary
//!   with feature means, so the pooled fit finds one anyway.
//! * SIM-B: equal means, heterogeneous slopes and feature variances.
//! * SIM-C: heterogeneous feature variances, used for projection to fairness.
//! * SIM-D: two uncorrelated feature blocks `X` and `V` for the interaction
//!   extension.
//!
//! All four use equal bank weights and noise variance [`FIXTURE_NOISE_VAR`].

use nalgebra::DVector;

use crate::model::{BankModel, BankPopulation};
use crate::population::{InteractionBank, InteractionPopulation};

pub const FIXTURE_NOISE_VAR: f64 = 0.25;

/// Scalar fixture by name: `sim-a`, `sim-b` or `sim-c`.
pub fn by_name(name: &str) -> Option<BankPopulation> {
    match name {
        "sim-a" => Some(sim_a()),
        "sim-b" => Some(sim_b()),
        "sim-c" => Some(sim_c()),
        _ => None,
    }
}

fn two_banks(a: BankModel, b: BankModel) -> BankPopulation {
    BankPopulation::new(vec![a, b], vec![0.5, 0.5]).expect("fixture population is valid")
}

/// `alpha = (0, 1)`, `beta = (0, 0)`, `mu = (0, 2)`, `sigma^2 = (1, 1)`.
pub fn sim_a() -> BankPopulation {
    two_banks(
        BankModel::scalar(0.0, 0.0, 0.0, 1.0, FIXTURE_NOISE_VAR),
        BankModel::scalar(1.0, 0.0, 2.0, 1.0, FIXTURE_NOISE_VAR),
    )
}

/// `alpha = (0, 0)`, `beta = (1, 3)`, `mu = (0, 0)`, `sigma^2 = (1, 3)`.
pub fn sim_b() -> BankPopulation {
    two_banks(
        BankModel::scalar(0.0, 1.0, 0.0, 1.0, FIXTURE_NOISE_VAR),
        BankModel::scalar(0.0, 3.0, 0.0, 3.0, FIXTURE_NOISE_VAR),
    )
}

/// Banks `(alpha, beta, mu, sigma^2) = (0, 1, 0, 1)` and `(1, 2, 0, 4)`.
pub fn sim_c() -> BankPopulation {
    two_banks(
        BankModel::scalar(0.0, 1.0, 0.0, 1.0, FIXTURE_NOISE_VAR),
        BankModel::scalar(1.0, 2.0, 0.0, 4.0, FIXTURE_NOISE_VAR),
    )
}

/// Scalar `X` and scalar `V`: `beta = (1, 1)`, `gamma = (1, 3)`, unit variances.
///
/// Intercepts and means differ across banks so the fixed effects matter.
pub fn sim_d() -> InteractionPopulation {
    let bank = |alpha: f64, gamma: f64, mu: f64, nu: f64| InteractionBank {
        intercept: alpha,
        beta: DVector::from_element(1, 1.0),
        gamma: DVector::from_element(1, gamma),
        x_mean: DVector::from_element(1, mu),
        v_mean: DVector::from_element(1, nu),
        cov: nalgebra::DMatrix::identity(2, 2),
        noise_var: FIXTURE_NOISE_VAR,
    };
    InteractionPopulation::new(vec![bank(0.0, 1.0, 0.0, 0.0), bank(1.0, 3.0, 2.0, 1.0)], vec![0.5, 0.5], 1)
        .expect("fixture population is valid")
}

/// SIM-B's slopes and variances with every feature in the interaction block.
pub fn sim_b_all_interacted() -> InteractionPopulation {
    let bank = |gamma: f64, var: f64| InteractionBank {
        intercept: 0.0,
        beta: DVector::zeros(0),
        gamma: DVector::from_element(1, gamma),
        x_mean: DVector::zeros(0),
        v_mean: DVector::zeros(1),
        cov: nalgebra::DMatrix::from_element(1, 1, var),
        noise_var: FIXTURE_NOISE_VAR,
    };
    InteractionPopulation::new(vec![bank(1.0, 1.0), bank(3.0, 3.0)], vec![0.5, 0.5], 0)
        .expect("fixture population is valid")
}
