//! Plain-text tables: six-significant-digit numbers, fixed column order,
//! LF line endings and a provenance header line.

use sha2::{Digest, Sha256};

use crate::additive::{fit_gam, nested_f_test, spline_terms, BackfitOptions, GamMode};
use crate::diagnostics::{sensitivity, SensitivityMethod, SensitivityParam, SensitivityTarget, Sign, SignRule};
use crate::error::{Error, Result};
use crate::model::BankPopulation;
use crate::sample::{
    fit_panel_clustered, heterogeneity_test, pooled_vs_feo_test, relative_prediction_differences, CovarianceSpec,
    HeterogeneityTarget, PanelDataset, PanelMode,
};

pub const TOOL_NAME: &str = "fairagg";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// `%.6g`-style rendering: six significant digits, trailing zeros removed,
/// exponent form below `1e-4` and from `1e6` on.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    } else {
        trim_zeros(&format!("{x:.*}", (5 - exp) as usize)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Header line carrying the tool version, seed and a SHA-256 of the
/// configuration text.
pub fn header(seed: u64, config_text: &str) -> String {
    let hash = hex::encode(Sha256::digest(config_text.as_bytes()));
    format!("# {TOOL_NAME} {VERSION} seed={seed} config={hash}")
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => fmt_num(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: impl Into<String>, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// `# table: <name>` followed by CSV.
    pub fn render(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).expect("in-memory write");
        }
        let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells");
        format!("# table: {}\n{body}", self.name)
    }
}

/// Header line then tables separated by blank lines.
pub fn render_document(header: &str, tables: &[Table]) -> String {
    let body: Vec<String> = tables.iter().map(Table::render).collect();
    format!("{header}\n{}", body.join("\n"))
}

fn prefixed(prefix: &str, mut tables: Vec<Table>) -> Vec<Table> {
    if !prefix.is_empty() {
        for t in &mut tables {
            t.name = format!("{prefix}/{}", t.name);
        }
    }
    tables
}

/// Pooled and FEO coefficients with clustered standard errors.
pub fn coefficient_tables(data: &PanelDataset, spec: CovarianceSpec) -> Result<Vec<Table>> {
    let mut t = Table::new("coefficients", &["model", "term", "estimate", "std_error"]);
    for mode in [PanelMode::Pooled, PanelMode::FixedEffects] {
        let pf = fit_panel_clustered(data, mode, spec)?;
        let se = pf.fit.standard_errors().ok_or(Error::invalid("covariance missing"))?;
        for (j, label) in pf.fit.labels.iter().enumerate() {
            t.push(vec![mode.name().into(), label.as_str().into(), pf.fit.coefficients[j].into(), se[j].into()]);
        }
    }
    Ok(vec![t])
}

/// Pooled-versus-FEO slope comparison per feature (difference is
/// `beta_Pool - beta_F`) and relative prediction differences.
pub fn compare_tables(data: &PanelDataset, spec: CovarianceSpec) -> Result<Vec<Table>> {
    let mut coef = Table::new(
        "pooled_vs_feo",
        &["feature", "beta_pool", "beta_feo", "diff", "se_pool", "se_feo", "wald", "p_value"],
    );
    for j in 0..data.dim() {
        let c = pooled_vs_feo_test(data, j, spec)?;
        coef.push(vec![
            c.feature.into(),
            c.beta_pool.into(),
            c.beta_f.into(),
            c.diff_pool_minus_f.into(),
            c.se_pool.into(),
            c.se_f.into(),
            c.wald.statistic.into(),
            c.wald.p_value.into(),
        ]);
    }
    let pooled = fit_panel_clustered(data, PanelMode::Pooled, spec)?;
    let feo = fit_panel_clustered(data, PanelMode::FixedEffects, spec)?;
    let rel = relative_prediction_differences(data, &pooled.forecaster, &feo.forecaster)?;
    Ok(vec![coef, relative_table(rel.mean, rel.median, data.len() - rel.excluded, rel.excluded)])
}

fn relative_table(mean: f64, median: f64, rows: usize, excluded: usize) -> Table {
    let mut t = Table::new("relative_differences", &["statistic", "value"]);
    t.push(vec!["mean".into(), mean.into()]);
    t.push(vec!["median".into(), median.into()]);
    t.push(vec!["rows".into(), rows.into()]);
    t.push(vec!["excluded".into(), excluded.into()]);
    t
}

/// [`compare_tables`] for several panels, table names prefixed by key.
pub fn compare_tables_by_key<'a>(
    panels: impl IntoIterator<Item = (&'a str, &'a PanelDataset)>,
    spec: CovarianceSpec,
) -> Result<Vec<Table>> {
    let mut out = Vec::new();
    for (key, data) in panels {
        out.extend(prefixed(key, compare_tables(data, spec)?));
    }
    Ok(out)
}

/// Equality tests for intercepts and each slope under both covariance specs.
pub fn heterogeneity_table(data: &PanelDataset) -> Result<Table> {
    let mut t = Table::new("heterogeneity", &["covariance", "parameter", "statistic", "dof", "p_value"]);
    let mut targets = vec![("intercept".to_string(), HeterogeneityTarget::Intercepts)];
    targets.extend(
        data.feature_names()
            .iter()
            .enumerate()
            .map(|(j, n)| (format!("slope:{n}"), HeterogeneityTarget::Slope(j))),
    );
    for spec in [CovarianceSpec::BankClustered, CovarianceSpec::TimeClustered] {
        for (name, target) in &targets {
            let w = heterogeneity_test(data, *target, spec)?;
            t.push(vec![spec.name().into(), name.as_str().into(), w.statistic.into(), w.dof.into(), w.p_value.into()]);
        }
    }
    Ok(t)
}

/// Derivatives of point forecasts at `points`, and of mean forecasts and
/// biases at every bank, with respect to every bank parameter.
pub fn sensitivity_table(pop: &BankPopulation, points: &[f64], bank_ids: &[String]) -> Result<Table> {
    let mut t = Table::new(
        "sensitivity",
        &["method", "parameter", "bank", "target", "at", "value", "rule", "sign", "condition"],
    );
    let mut targets: Vec<(SensitivityTarget, &str, String)> =
        points.iter().map(|x| (SensitivityTarget::Point(*x), "point", fmt_num(*x))).collect();
    for l in 0..pop.len() {
        targets.push((SensitivityTarget::Mean(l), "mean", bank_ids[l].clone()));
    }
    for l in 0..pop.len() {
        targets.push((SensitivityTarget::Bias(l), "bias", bank_ids[l].clone()));
    }
    for (method, mname) in [(SensitivityMethod::Feo, "feo"), (SensitivityMethod::Pooled, "pooled")] {
        for (param, pname) in [
            (SensitivityParam::Mu, "mu"),
            (SensitivityParam::Alpha, "alpha"),
            (SensitivityParam::Beta, "beta"),
        ] {
            for s in 0..pop.len() {
                for (target, tname, at) in &targets {
                    let r = sensitivity(pop, method, param, s, *target)?;
                    let (rule, sign, condition) = match r.sign_rule {
                        SignRule::Determined { sign, condition } => {
                            ("determined", if sign == Sign::Positive { "+" } else { "-" }, condition)
                        }
                        SignRule::NotApplicable { condition } => ("not_applicable", "", condition),
                        SignRule::NoSimpleRule => ("no_simple_rule", "", String::new()),
                    };
                    t.push(vec![
                        mname.into(),
                        pname.into(),
                        bank_ids[s].as_str().into(),
                        (*tname).into(),
                        at.as_str().into(),
                        r.value.into(),
                        rule.into(),
                        sign.into(),
                        condition.into(),
                    ]);
                }
            }
        }
    }
    Ok(t)
}

/// Pooled and FEO spline GAMs: fit summaries, the nested F test, the bank
/// offsets and relative prediction differences.
pub fn gam_tables(data: &PanelDataset, dof: f64, opts: BackfitOptions) -> Result<Vec<Table>> {
    let terms = spline_terms(data, dof);
    let pooled = fit_gam(data, GamMode::Pooled, &terms, opts)?;
    let feo = fit_gam(data, GamMode::Feo, &terms, opts)?;
    let mut models = Table::new(
        "gam_models",
        &["model", "ssr", "model_dof", "residual_dof", "sweeps", "converged"],
    );
    for (name, m) in [("pooled", &pooled), ("feo", &feo)] {
        models.push(vec![
            name.into(),
            m.ssr.into(),
            m.model_dof().into(),
            m.residual_dof().into(),
            m.sweeps.into(),
            m.converged.into(),
        ]);
    }
    let f = nested_f_test(&pooled, &feo, data)?;
    let mut ftab = Table::new("f_test", &["f", "dof1", "dof2", "p_value"]);
    ftab.push(vec![f.f.into(), f.dof1.into(), f.dof2.into(), f.p_value.into()]);
    let mut offsets = Table::new("bank_offsets", &["bank", "offset"]);
    for (id, o) in feo.bank_ids.iter().zip(feo.bank_offsets.as_deref().unwrap_or_default()) {
        offsets.push(vec![id.as_str().into(), (*o).into()]);
    }
    let a = pooled.fitted_without_offsets();
    let b = feo.fitted_without_offsets();
    let mut kept: Vec<f64> = (0..data.len())
        .filter(|&i| data.response()[i].abs() >= crate::sample::RELATIVE_DIFF_FLOOR)
        .map(|i| ((a[i] - b[i]) / data.response()[i]).abs())
        .collect();
    let excluded = data.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::Empty("rows with a nonzero response".into()));
    }
    kept.sort_by(f64::total_cmp);
    let m = kept.len();
    let mean = kept.iter().sum::<f64>() / m as f64;
    let median = if m % 2 == 1 {
        kept[m / 2]
    } else {
        0.5 * (kept[m / 2 - 1] + kept[m / 2])
    };
    Ok(vec![models, ftab, offsets, relative_table(mean, median, m, excluded)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        let cases = [
            (0.0, "0"),
            (-0.0, "0"),
            (1.0, "1"),
            (0.25, "0.25"),
            (-2.5, "-2.5"),
            (1.0 / 3.0, "0.333333"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (999999.5, "1e+06"),
            (0.000099999996, "0.0001"),
            (2.0f64.sqrt() * 1e-300, "1.41421e-300"),
            (f64::NAN, "NaN"),
            (f64::NEG_INFINITY, "-inf"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_num(x), want, "{x}");
        }
    }

    #[test]
    fn header_hashes_config() {
        let h = header(7, "");
        assert_eq!(
            h,
            format!(
                "# fairagg {VERSION} seed=7 config=e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
            )
        );
        assert_ne!(header(7, "a=1"), h);
    }

    #[test]
    fn table_rendering() {
        let mut t = Table::new("demo", &["name", "value"]);
        t.push(vec!["a,b".into(), 0.5.into()]);
        t.push(vec![Cell::Empty, 3usize.into()]);
        let doc = render_document("# h", &[t.clone(), t]);
        assert_eq!(
            doc,
            "# h\n# table: demo\nname,value\n\"a,b\",0.5\n,3\n\n# table: demo\nname,value\n\"a,b\",0.5\n,3\n"
        );
    }
}
