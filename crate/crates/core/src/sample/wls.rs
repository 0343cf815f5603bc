use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative size of a QR pivot below which a column counts as dependent.
const RANK_TOL: f64 = 1e-10;

/// Result of a weighted least-squares fit.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    pub coefficients: DVector<f64>,
    /// Unweighted residuals `y - Xb`.
    pub residuals: DVector<f64>,
    pub labels: Vec<String>,
    /// `sum w e^2`.
    pub ssr: f64,
    /// Residual degrees of freedom `n - k`.
    pub dof: usize,
    /// `(X'WX)^-1`.
    pub bread: DMatrix<f64>,
    pub covariance: Option<DMatrix<f64>>,
    pub warnings: Vec<String>,
}

impl RegressionFit {
    pub fn n_obs(&self) -> usize {
        self.residuals.len()
    }

    pub fn coefficient(&self, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| l == label).map(|i| self.coefficients[i])
    }

    /// Standard errors from the attached covariance, if any.
    pub fn standard_errors(&self) -> Option<DVector<f64>> {
        self.covariance.as_ref().map(|c| c.diagonal().map(|v| v.max(0.0).sqrt()))
    }
}

/// Minimize `sum w_i (y_i - x_i'b)^2` through a QR factorization of the
/// `sqrt(w)`-scaled design.
pub fn weighted_least_squares(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    weights: &[f64],
    labels: &[String],
) -> Result<RegressionFit> {
    let (n, k) = design.shape();
    if response.len() != n || weights.len() != n || labels.len() != k {
        return Err(Error::invalid("design, response, weights and labels disagree in size"));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} rows cannot identify {k} coefficients")));
    }
    if let Some(i) = weights.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidWeights(format!("row {i} has weight {}", weights[i])));
    }
    let sw = DVector::from_iterator(n, weights.iter().map(|w| w.sqrt()));
    let mut scaled = design.clone();
    for (mut row, s) in scaled.row_iter_mut().zip(sw.iter()) {
        row *= *s;
    }
    let col_norms: Vec<f64> = scaled.column_iter().map(|c| c.norm()).collect();
    let mut rhs = response.component_mul(&sw);

    let qr = scaled.qr();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)].abs() <= RANK_TOL * col_norms[j] || col_norms[j] == 0.0 {
            return Err(Error::RankDeficient {
                column: labels[j].clone(),
            });
        }
    }
    qr.q_tr_mul(&mut rhs);
    let qty = rhs.rows(0, k).into_owned();
    let r = r.columns(0, k).rows(0, k).into_owned();
    let coefficients = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient {
            column: labels[k - 1].clone(),
        })?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .expect("triangular factor checked nonsingular");
    let bread = &r_inv * r_inv.transpose();

    let residuals = response - design * &coefficients;
    let ssr = residuals
        .iter()
        .zip(weights)
        .map(|(e, w)| w * e * e)
        .sum();
    Ok(RegressionFit {
        coefficients,
        residuals,
        labels: labels.to_vec(),
        ssr,
        dof: n - k,
        bread,
        covariance: None,
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn labels(k: usize) -> Vec<String> {
        (0..k).map(|j| format!("c{j}")).collect()
    }

    #[test]
    fn intercept_only_is_weighted_mean() {
        let x = DMatrix::from_element(3, 1, 1.0);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let fit = weighted_least_squares(&x, &y, &[1.0; 3], &labels(1)).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 2.0, epsilon = 1e-14);
        let fit = weighted_least_squares(&x, &y, &[1.0, 1.0, 2.0], &labels(1)).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 2.25, epsilon = 1e-14);
    }

    #[test]
    fn exact_fit_has_zero_residuals() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 5.0]);
        let y = DVector::from_vec(vec![1.0, 3.0, 5.0, 11.0]);
        let fit = weighted_least_squares(&x, &y, &[1.0, 2.0, 3.0, 4.0], &labels(2)).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.coefficients[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.ssr, 0.0, epsilon = 1e-20);
        assert_eq!(fit.dof, 2);
    }

    #[test]
    fn matches_normal_equations_and_orthogonality() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.3, 1.0, -1.2, 1.0, 2.0, 1.0, 0.7, 1.0, 1.1]);
        let y = DVector::from_vec(vec![0.2, -0.4, 1.9, 0.1, 1.4]);
        let w = [0.5, 1.5, 1.0, 2.0, 0.25];
        let fit = weighted_least_squares(&x, &y, &w, &labels(2)).unwrap();
        let wm = DMatrix::from_diagonal(&DVector::from_column_slice(&w));
        let xtwx = x.transpose() * &wm * &x;
        let direct = xtwx.clone().try_inverse().unwrap() * x.transpose() * &wm * &y;
        assert_abs_diff_eq!(fit.coefficients, direct, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.bread, xtwx.try_inverse().unwrap(), epsilon = 1e-12);
        let score = x.transpose() * &wm * &fit.residuals;
        assert_abs_diff_eq!(score.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn names_the_dependent_column() {
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 1.0, 1.0, 3.0, 1.0, 1.0, 4.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let names = vec!["const".to_string(), "x".to_string(), "dup".to_string()];
        match weighted_least_squares(&x, &y, &[1.0; 3], &names) {
            Err(Error::RankDeficient { column }) => assert_eq!(column, "dup"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_short_designs_and_bad_weights() {
        let x = DMatrix::from_element(1, 2, 1.0);
        let y = DVector::from_element(1, 1.0);
        assert!(weighted_least_squares(&x, &y, &[1.0], &labels(2)).is_err());
        let x = DMatrix::from_element(2, 1, 1.0);
        let y = DVector::from_element(2, 1.0);
        assert!(weighted_least_squares(&x, &y, &[1.0, -1.0], &labels(1)).is_err());
    }
}
