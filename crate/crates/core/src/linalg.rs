//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative pivot tolerance for the positive-definiteness check.
pub const PD_PIVOT_TOL: f64 = 1e-10;

/// Cholesky factor of a symmetric matrix, rejecting near-zero pivots.
///
/// A pivot `l_ii^2` below `PD_PIVOT_TOL * max_i a_ii` counts as a failure,
/// so numerically singular matrices are rejected along with indefinite ones.
pub fn checked_cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return None;
    }
    let scale = m.diagonal().iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
    if !(scale > 0.0) || m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let chol = m.clone().cholesky()?;
    let l = chol.l_dirty();
    let ok = (0..m.nrows()).all(|i| l[(i, i)] * l[(i, i)] > PD_PIVOT_TOL * scale);
    ok.then_some(chol)
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.iter().fold(1.0_f64, |a, &v| a.max(v.abs()));
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * scale))
}

/// Ratio of extreme absolute eigenvalues of a symmetric matrix.
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &v| (lo.min(v.abs()), hi.max(v.abs())));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solve `m x = b` for symmetric positive definite `m`.
pub fn solve_spd(m: &DMatrix<f64>, b: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    let chol = checked_cholesky(m).ok_or_else(|| Error::Singular {
        what,
        condition: condition_estimate(m),
    })?;
    Ok(chol.solve(b))
}

pub fn solve_spd_matrix(
    m: &DMatrix<f64>,
    b: &DMatrix<f64>,
    what: &'static str,
) -> Result<DMatrix<f64>> {
    let chol = checked_cholesky(m).ok_or_else(|| Error::Singular {
        what,
        condition: condition_estimate(m),
    })?;
    Ok(chol.solve(b))
}

pub fn inverse_spd(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let chol = checked_cholesky(m).ok_or_else(|| Error::Singular {
        what,
        condition: condition_estimate(m),
    })?;
    Ok(chol.inverse())
}

/// Symmetric matrix power `m^p` via the spectral decomposition.
pub fn symmetric_power(m: &DMatrix<f64>, p: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).powf(p));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

pub fn sqrt_spd(m: &DMatrix<f64>) -> DMatrix<f64> {
    symmetric_power(m, 0.5)
}

pub fn inv_sqrt_spd(m: &DMatrix<f64>) -> DMatrix<f64> {
    symmetric_power(m, -0.5)
}

/// Log density of `N(mean, cov)` at `x`, given the Cholesky factor of `cov`.
pub fn gaussian_log_density(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    chol: &Cholesky<f64, nalgebra::Dyn>,
) -> f64 {
    let d = x.len() as f64;
    let diff = x - mean;
    let z = chol.l().solve_lower_triangular(&diff).expect("triangular solve");
    let log_det: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = sqrt_spd(&m);
        assert_abs_diff_eq!(&r * &r, m, epsilon = 1e-12);
        let ri = inv_sqrt_spd(&m);
        assert_abs_diff_eq!(&ri * &m * &ri, DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn cholesky_rejects_singular_and_indefinite() {
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(checked_cholesky(&singular).is_none());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(checked_cholesky(&indefinite).is_none());
        assert!(checked_cholesky(&DMatrix::identity(3, 3)).is_some());
    }

    #[test]
    fn log_density_matches_scalar_formula() {
        let cov = DMatrix::from_element(1, 1, 4.0);
        let chol = checked_cholesky(&cov).unwrap();
        let got = gaussian_log_density(&DVector::from_element(1, 3.0), &DVector::from_element(1, 1.0), &chol);
        let want = -0.5 * (2.0 * std::f64::consts::PI * 4.0).ln() - 0.5 * 4.0 / 4.0;
        assert_abs_diff_eq!(got, want, epsilon = 1e-14);
    }
}
