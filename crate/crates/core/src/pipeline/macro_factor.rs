use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{open, Quarter};
use crate::error::{Error, Result};

/// Column whose loading is made positive when fixing the component's sign.
pub const UNEMPLOYMENT_COLUMN: &str = "unemployment_change";

/// Quarter-indexed macro series without gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroTable {
    quarters: Vec<Quarter>,
    columns: Vec<String>,
    /// `quarters x columns`.
    values: DMatrix<f64>,
}

impl MacroTable {
    pub fn new(quarters: Vec<Quarter>, columns: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != quarters.len() || values.ncols() != columns.len() {
            return Err(Error::invalid("macro table shape does not match its labels"));
        }
        if quarters.is_empty() || columns.is_empty() {
            return Err(Error::Empty("macro table".into()));
        }
        if let Some(w) = quarters.windows(2).find(|w| w[1].index() != w[0].index() + 1) {
            return Err(Error::invalid(format!("macro quarters jump from {} to {}", w[0], w[1])));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("macro table contains missing or non-finite values"));
        }
        Ok(Self {
            quarters,
            columns,
            values,
        })
    }

    pub fn quarters(&self) -> &[Quarter] {
        &self.quarters
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// CSV with a `quarter` column followed by numeric columns; rows may come
    /// in any order but must cover a contiguous range.
    pub fn from_reader<R: Read>(reader: R, source: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.get(0) != Some("quarter") {
            return Err(Error::Parse {
                path: source.to_string(),
                line: 1,
                message: "first column must be `quarter`".into(),
            });
        }
        let columns: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut rows: Vec<(Quarter, Vec<f64>)> = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let parse_err = |message: String| Error::Parse {
                path: source.to_string(),
                line,
                message,
            };
            let rec = rec?;
            let q: Quarter = rec[0].parse().map_err(|e: Error| parse_err(e.to_string()))?;
            let vals = rec
                .iter()
                .skip(1)
                .map(|f| f.parse::<f64>().map_err(|_| parse_err(format!("`{f}` is not a number"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push((q, vals));
        }
        rows.sort_by_key(|r| r.0);
        let quarters = rows.iter().map(|r| r.0).collect();
        let values = DMatrix::from_fn(rows.len(), columns.len(), |i, j| rows[i].1[j]);
        Self::new(quarters, columns, values)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_reader(open(path)?, &path.display().to_string())
    }
}

/// First principal component of the standardized macro columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroFactor {
    pub columns: Vec<String>,
    /// Unit-norm loadings on the standardized columns.
    pub loadings: DVector<f64>,
    /// Largest eigenvalue of the correlation matrix.
    pub eigenvalue: f64,
    pub means: DVector<f64>,
    pub sds: DVector<f64>,
    /// Component scores divided by `sqrt(eigenvalue)`, for every quarter in
    /// the table; standardization and loadings are frozen at the fit range.
    pub series: BTreeMap<Quarter, f64>,
}

/// Fit the component on `fit_range` (inclusive; whole table when `None`)
/// and extend it to all quarters. The loading on `sign_column` is made
/// positive.
pub fn macro_pc1(table: &MacroTable, fit_range: Option<(Quarter, Quarter)>, sign_column: &str) -> Result<MacroFactor> {
    let (lo, hi) = fit_range.unwrap_or((table.quarters[0], *table.quarters.last().unwrap()));
    let rows: Vec<usize> = (0..table.quarters.len())
        .filter(|&i| (lo..=hi).contains(&table.quarters[i]))
        .collect();
    if rows.len() < 3 {
        return Err(Error::invalid(format!("fit range {lo}..{hi} covers fewer than 3 quarters of macro data")));
    }
    let sign_index = table
        .columns
        .iter()
        .position(|c| c == sign_column)
        .ok_or_else(|| Error::invalid(format!("macro table has no `{sign_column}` column")))?;
    let p = table.columns.len();
    let n = rows.len() as f64;
    let fit = DMatrix::from_fn(rows.len(), p, |i, j| table.values[(rows[i], j)]);
    let means = DVector::from_fn(p, |j, _| fit.column(j).sum() / n);
    let sds = DVector::from_fn(p, |j, _| {
        (fit.column(j).iter().map(|v| (v - means[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    if sds.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Singular {
            what: "macro correlation matrix (zero-variance column)",
            condition: f64::INFINITY,
        });
    }
    let z = DMatrix::from_fn(rows.len(), p, |i, j| (fit[(i, j)] - means[j]) / sds[j]);
    let corr = z.transpose() * &z / (n - 1.0);
    let eig = SymmetricEigen::new(corr);
    let top = eig.eigenvalues.imax();
    let eigenvalue = eig.eigenvalues[top];
    let mut loadings: DVector<f64> = eig.eigenvectors.column(top).into_owned();
    loadings /= loadings.norm();
    let anchor = if loadings[sign_index] != 0.0 {
        loadings[sign_index]
    } else {
        loadings.iter().copied().find(|v| *v != 0.0).unwrap_or(1.0)
    };
    if anchor < 0.0 {
        loadings.neg_mut();
    }
    let scale = eigenvalue.sqrt();
    let series = table
        .quarters
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let score: f64 = (0..p).map(|j| loadings[j] * (table.values[(i, j)] - means[j]) / sds[j]).sum();
            (*q, score / scale)
        })
        .collect();
    Ok(MacroFactor {
        columns: table.columns.clone(),
        loadings,
        eigenvalue,
        means,
        sds,
        series,
    })
}

fn pc_range(pc: &[f64], ratio: f64) -> Result<(f64, f64)> {
    if !(ratio > 1.0) || !ratio.is_finite() {
        return Err(Error::invalid(format!("stress weight ratio must exceed 1, got {ratio}")));
    }
    let min = pc.iter().copied().fold(f64::INFINITY, f64::min);
    let max = pc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) || !(max - min).is_finite() {
        return Err(Error::invalid("stress factor is constant over the sample"));
    }
    Ok((min, max))
}

/// `ln(ratio) / (max - min)` of the factor over the sample.
pub fn stress_lambda(pc: &[f64], ratio: f64) -> Result<f64> {
    let (min, max) = pc_range(pc, ratio)?;
    Ok(ratio.ln() / (max - min))
}

/// `exp(lambda pc) * loans`, rescaled so the least stressed quarter gets
/// weight `loans`; the most stressed gets exactly `ratio * loans`.
pub fn stress_weights(pc: &[f64], loans: &[f64], ratio: f64) -> Result<Vec<f64>> {
    if pc.len() != loans.len() {
        return Err(Error::invalid("stress factor and loans have different lengths"));
    }
    let (min, max) = pc_range(pc, ratio)?;
    Ok(pc
        .iter()
        .zip(loans)
        .map(|(v, l)| ratio.powf((v - min) / (max - min)) * l)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn table(cols: &[&str], values: DMatrix<f64>) -> MacroTable {
        let quarters = (0..values.nrows() as i64).map(|i| Quarter::from_index(8000 + i)).collect();
        MacroTable::new(quarters, cols.iter().map(|c| c.to_string()).collect(), values).unwrap()
    }

    #[test]
    fn correlated_columns() {
        let x = DVector::from_vec(vec![1.0, 3.0, 2.0, 5.0, 4.0]);
        let both = DMatrix::from_fn(5, 2, |i, j| if j == 0 { x[i] } else { 2.0 * x[i] + 1.0 });
        let f = macro_pc1(&table(&["a", "b"], both), None, "b").unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(f.loadings[0], h, epsilon = 1e-12);
        assert_abs_diff_eq!(f.loadings[1], h, epsilon = 1e-12);
        let anti = DMatrix::from_fn(5, 2, |i, j| if j == 0 { x[i] } else { -x[i] });
        let f = macro_pc1(&table(&["a", "unemp"], anti), None, "unemp").unwrap();
        assert_abs_diff_eq!(f.loadings[0], -h, epsilon = 1e-12);
        assert_abs_diff_eq!(f.loadings[1], h, epsilon = 1e-12);
    }

    #[test]
    fn series_standardized_on_fit_range_and_extended() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = DMatrix::from_fn(40, 3, |_, _| StandardNormal.sample(&mut rng));
        let t = table(&["a", "b", "c"], v);
        let range = (t.quarters()[0], t.quarters()[29]);
        let f = macro_pc1(&t, Some(range), "a").unwrap();
        assert_abs_diff_eq!(f.loadings.norm(), 1.0, epsilon = 1e-12);
        assert!(f.loadings[0] > 0.0);
        let fit: Vec<f64> = f.series.range(range.0..=range.1).map(|(_, v)| *v).collect();
        let mean = fit.iter().sum::<f64>() / 30.0;
        let var = fit.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 29.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-10);
        assert_eq!(f.series.len(), 40);
    }

    #[test]
    fn independent_columns_have_unit_top_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = DMatrix::from_fn(10_000, 7, |_, _| StandardNormal.sample(&mut rng));
        let f = macro_pc1(&table(&["a", "b", "c", "d", "e", "f", "g"], v), None, "a").unwrap();
        assert!((f.eigenvalue - 1.0).abs() < 0.1, "{}", f.eigenvalue);
    }

    #[test]
    fn degenerate_inputs() {
        let v = DMatrix::from_fn(5, 2, |i, j| if j == 0 { i as f64 } else { 1.0 });
        assert!(matches!(macro_pc1(&table(&["a", "b"], v.clone()), None, "a"), Err(Error::Singular { .. })));
        assert!(macro_pc1(&table(&["a", "b"], v), None, "zzz").is_err());
        let gap = vec![Quarter::from_index(1), Quarter::from_index(3)];
        assert!(MacroTable::new(gap, vec!["a".into()], DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn macro_csv_sorted_and_checked() {
        let text = "quarter,a,b\n2001-Q2,2,3\n2001-Q1,1,5\n";
        let t = MacroTable::from_reader(text.as_bytes(), "mem").unwrap();
        assert_eq!(t.quarters()[0].to_string(), "2001-Q1");
        assert_eq!(t.values()[(0, 1)], 5.0);
        let bad = "quarter,a\n2001-Q1,x\n";
        assert!(matches!(MacroTable::from_reader(bad.as_bytes(), "mem"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn stress_weight_examples() {
        let lambda = stress_lambda(&[-2.0, 8.0, 3.0], 2.0).unwrap();
        assert_abs_diff_eq!(lambda, std::f64::consts::LN_2 / 10.0, epsilon = 1e-15);
        let w = stress_weights(&[-2.0, 8.0, 3.0], &[1.0, 1.0, 1.0], 2.0).unwrap();
        assert_eq!(w[1] / w[0], 2.0);
        // proportional to exp(lambda pc)
        assert_abs_diff_eq!(w[2] / w[0], (lambda * 5.0).exp(), epsilon = 1e-15);
        let doubled = stress_weights(&[-2.0, 8.0, 3.0], &[2.0, 2.0, 2.0], 2.0).unwrap();
        for (a, b) in doubled.iter().zip(&w) {
            assert_eq!(*a, 2.0 * b);
        }
        assert!(stress_weights(&[0.0, 1.0], &[1.0, 1.0], 1.0).is_err());
        assert!(stress_weights(&[1.0, 1.0], &[1.0, 1.0], 2.0).is_err());
    }
}
