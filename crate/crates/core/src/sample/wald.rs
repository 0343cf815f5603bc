use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::linalg;

/// Statistics within this distance below zero are rounding noise and clamp to zero.
const NEGATIVE_FLOOR: f64 = -1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

impl WaldResult {
    pub fn from_chi_square(statistic: f64, dof: usize) -> Result<Self> {
        if statistic < NEGATIVE_FLOOR || !statistic.is_finite() {
            return Err(Error::invalid(format!("Wald statistic {statistic} is not a valid chi-square value")));
        }
        let statistic = statistic.max(0.0);
        let p_value = if statistic == 0.0 {
            1.0
        } else {
            ChiSquared::new(dof as f64)
                .map_err(|e| Error::invalid(e.to_string()))?
                .sf(statistic)
                .clamp(0.0, 1.0)
        };
        Ok(Self {
            statistic,
            dof,
            p_value,
        })
    }
}

/// Wald test of `R theta = r`: `(R theta - r)' (R V R')^-1 (R theta - r)` against chi-square with `rows(R)` dof.
pub fn wald_linear_restrictions(
    theta: &DVector<f64>,
    restrictions: &DMatrix<f64>,
    r: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<WaldResult> {
    let q = restrictions.nrows();
    if q == 0 || restrictions.ncols() != theta.len() || r.len() != q || cov.shape() != (theta.len(), theta.len()) {
        return Err(Error::invalid("restriction matrix, target and covariance do not conform"));
    }
    let gap = restrictions * theta - r;
    let middle = restrictions * cov * restrictions.transpose();
    let middle = (&middle + middle.transpose()) * 0.5;
    let solved = linalg::solve_spd(&middle, &gap, "R V R'")?;
    WaldResult::from_chi_square(gap.dot(&solved), q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use statrs::distribution::Normal;

    #[test]
    fn satisfied_restriction_has_unit_p_value() {
        let theta = DVector::from_vec(vec![1.0, 1.0]);
        let rm = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let res = wald_linear_restrictions(&theta, &rm, &DVector::zeros(1), &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(res.statistic, 0.0);
        assert_eq!(res.p_value, 1.0);
        assert_eq!(res.dof, 1);
    }

    #[test]
    fn scalar_case_is_squared_t() {
        let theta = DVector::from_vec(vec![2.0]);
        let cov = DMatrix::from_element(1, 1, 0.64);
        let res = wald_linear_restrictions(&theta, &DMatrix::identity(1, 1), &DVector::from_element(1, 0.5), &cov)
            .unwrap();
        let z: f64 = 1.5 / 0.8;
        assert_abs_diff_eq!(res.statistic, z * z, epsilon = 1e-14);
        // two-sided normal p-value equals the chi-square(1) tail
        let normal = Normal::new(0.0, 1.0).unwrap();
        assert_abs_diff_eq!(res.p_value, 2.0 * normal.sf(z), epsilon = 1e-10);
    }

    #[test]
    fn two_restrictions_match_direct_evaluation() {
        let theta = DVector::from_vec(vec![1.0, 2.0, 0.5]);
        let rm = DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 0.0, 0.0, 1.0, -2.0]);
        let r = DVector::from_vec(vec![0.0, 0.5]);
        let cov = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.1, 0.4, 0.05, 0.0, 0.05, 0.3]);
        let res = wald_linear_restrictions(&theta, &rm, &r, &cov).unwrap();
        let gap = DVector::from_vec(vec![-1.0, 0.5]);
        // R V R' by hand: [[0.7, -0.2], [-0.2, 1.4]]
        let m = DMatrix::from_row_slice(2, 2, &[0.7, -0.2, -0.2, 1.4]);
        let want = (gap.transpose() * m.try_inverse().unwrap() * &gap)[0];
        assert_abs_diff_eq!(res.statistic, want, epsilon = 1e-12);
        assert_abs_diff_eq!(res.p_value, (-want / 2.0).exp(), epsilon = 1e-12);
    }

    #[test]
    fn invariant_to_restriction_reparameterization() {
        let theta = DVector::from_vec(vec![1.0, 2.0, 0.5]);
        let rm = DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 0.0, 0.0, 1.0, -2.0]);
        let r = DVector::from_vec(vec![0.3, 0.5]);
        let cov = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.1, 0.4, 0.05, 0.0, 0.05, 0.3]);
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -0.5, 3.0]);
        let base = wald_linear_restrictions(&theta, &rm, &r, &cov).unwrap();
        let moved = wald_linear_restrictions(&theta, &(&a * &rm), &(&a * &r), &cov).unwrap();
        assert_abs_diff_eq!(base.statistic, moved.statistic, epsilon = 1e-8);
    }

    #[test]
    fn singular_middle_matrix_errors() {
        let theta = DVector::from_vec(vec![1.0, 2.0]);
        let rm = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        assert!(wald_linear_restrictions(&theta, &rm, &DVector::zeros(1), &cov).is_err());
    }
}
