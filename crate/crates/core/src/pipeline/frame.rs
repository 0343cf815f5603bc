use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;

use super::{ExclusionReport, MacroFactor, Quarter, RateRow};
use crate::error::{Error, Result};
use crate::pipeline::stress_weights;
use crate::sample::PanelDataset;

pub const PAST_DUE_FEATURE: &str = "past_due_rate";
pub const MACRO_FEATURE: &str = "macro_pc";
pub const ALLOWANCE_FEATURE: &str = "allowance_rate";

pub const MISSING_LAGGED_FEATURE: &str = "missing_lagged_feature";
pub const MISSING_MACRO: &str = "missing_macro";
pub const NONPOSITIVE_LOANS: &str = "nonpositive_loans";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameOptions {
    /// Quarters between features and response.
    pub lag: usize,
    /// Weight of the most stressed quarter relative to the least stressed.
    pub stress_ratio: f64,
    pub include_macro: bool,
    pub include_allowance: bool,
}

impl Default for FrameOptions {
    fn default() -> Self {
        Self {
            lag: 4,
            stress_ratio: 2.0,
            include_macro: true,
            include_allowance: false,
        }
    }
}

/// Regress the loss rate at `t` on features at `t - lag` for one category.
///
/// Rows are dropped and counted when a lagged feature or the macro factor at
/// `t` is missing, or when current loans are not positive. Weights are
/// [`stress_weights`] of the factor at `t` over the retained rows.
/// Times in the returned panel are quarter indices.
pub fn build_regression_frame(
    rows: &[RateRow],
    category: &str,
    factor: &MacroFactor,
    opts: &FrameOptions,
) -> Result<(PanelDataset, ExclusionReport)> {
    let mut report = ExclusionReport::default();
    let lag = opts.lag as i64;
    let rows: Vec<&RateRow> = rows.iter().filter(|r| r.category == category).collect();
    let by_key: HashMap<(&str, Quarter), &RateRow> =
        rows.iter().map(|r| ((r.bank_id.as_str(), r.quarter), *r)).collect();

    let mut names = vec![PAST_DUE_FEATURE.to_string()];
    if opts.include_macro {
        names.push(MACRO_FEATURE.to_string());
    }
    if opts.include_allowance {
        names.push(ALLOWANCE_FEATURE.to_string());
    }

    let mut ids = Vec::new();
    let mut times = Vec::new();
    let mut response = Vec::new();
    let mut features: Vec<f64> = Vec::new();
    let mut pc_now = Vec::new();
    let mut loans = Vec::new();
    let mut ordered = rows.clone();
    ordered.sort_by(|a, b| (&a.bank_id, a.quarter).cmp(&(&b.bank_id, b.quarter)));
    for r in ordered {
        let then = r.quarter.offset(-lag);
        let Some(&pc) = factor.series.get(&r.quarter) else {
            report.add(MISSING_MACRO, 1);
            continue;
        };
        let lagged = by_key.get(&(r.bank_id.as_str(), then));
        let pc_then = factor.series.get(&then);
        let mut x = Vec::with_capacity(names.len());
        let complete = match lagged {
            Some(l) => {
                x.push(l.past_due_rate);
                let macro_ok = !opts.include_macro || pc_then.map(|v| x.push(*v)).is_some();
                let allowance_ok = !opts.include_allowance || l.allowance_rate.map(|v| x.push(v)).is_some();
                macro_ok && allowance_ok
            }
            None => false,
        };
        if !complete {
            report.add(MISSING_LAGGED_FEATURE, 1);
            continue;
        }
        let Some(l) = r.loans.filter(|l| *l > 0.0) else {
            report.add(NONPOSITIVE_LOANS, 1);
            continue;
        };
        ids.push(r.bank_id.clone());
        times.push(r.quarter.index());
        response.push(r.loss_rate);
        features.extend(x);
        pc_now.push(pc);
        loans.push(l);
    }
    if ids.is_empty() {
        return Err(Error::Empty(format!("regression frame for category `{category}`")));
    }
    let weights = stress_weights(&pc_now, &loans, opts.stress_ratio)?;
    let d = names.len();
    let x = DMatrix::from_row_slice(ids.len(), d, &features);
    let data = PanelDataset::new(&ids, names, times, response, x, weights)?;
    Ok((data, report))
}

/// Frames for every category present in `rows`, keyed by category.
pub fn build_all_frames(
    rows: &[RateRow],
    factor: &MacroFactor,
    opts: &FrameOptions,
) -> Result<BTreeMap<String, (PanelDataset, ExclusionReport)>> {
    super::categories(rows)
        .into_iter()
        .map(|c| build_regression_frame(rows, &c, factor, opts).map(|f| (c, f)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn factor(quarters: std::ops::Range<i64>) -> MacroFactor {
        MacroFactor {
            columns: vec!["u".into()],
            loadings: DVector::from_element(1, 1.0),
            eigenvalue: 1.0,
            means: DVector::zeros(1),
            sds: DVector::from_element(1, 1.0),
            series: quarters.map(|q| (Quarter::from_index(q), (q % 5) as f64)).collect(),
        }
    }

    fn bank(id: &str, quarters: std::ops::Range<i64>) -> Vec<RateRow> {
        quarters
            .map(|q| RateRow {
                bank_id: id.into(),
                category: "cc".into(),
                quarter: Quarter::from_index(q),
                loss_rate: 0.01 * q as f64,
                past_due_rate: 0.001 * q as f64,
                allowance_rate: Some(0.02),
                loans: Some(100.0),
            })
            .collect()
    }

    #[test]
    fn lag_zero_keeps_complete_panel() {
        let mut rows = bank("a", 0..8);
        rows.extend(bank("b", 0..8));
        let opts = FrameOptions {
            lag: 0,
            ..FrameOptions::default()
        };
        let (data, report) = build_regression_frame(&rows, "cc", &factor(0..8), &opts).unwrap();
        assert_eq!(data.len(), 16);
        assert!(report.counts.is_empty());
        assert_eq!(data.features()[(3, 0)], 0.003);
        assert_eq!(data.features()[(3, 1)], 3.0);
    }

    #[test]
    fn lag_four_on_eight_quarters() {
        let rows = bank("a", 0..8);
        let (data, report) = build_regression_frame(&rows, "cc", &factor(0..8), &FrameOptions::default()).unwrap();
        assert_eq!(data.len(), 4);
        assert_eq!(report.count(MISSING_LAGGED_FEATURE), 4);
        // response at t = 4 pairs with features at t = 0
        assert_eq!(data.times()[0], 4);
        assert_eq!(data.response()[0], 0.04);
        assert_eq!(data.features()[(0, 0)], 0.0);
        assert_eq!(data.features()[(0, 1)], 0.0);
        let max = data.weights().iter().copied().fold(0.0, f64::max);
        let min = data.weights().iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(max / min, 2.0);
    }

    #[test]
    fn one_missing_lagged_row() {
        let mut rows = bank("a", 0..12);
        rows.retain(|r| r.quarter.index() != 5);
        let (data, report) = build_regression_frame(&rows, "cc", &factor(0..12), &FrameOptions::default()).unwrap();
        // t = 4..11 minus t = 5 itself, minus t = 9 whose lag is missing
        assert_eq!(data.len(), 6);
        assert_eq!(report.count(MISSING_LAGGED_FEATURE), 5);
        assert!(build_regression_frame(&rows, "fl", &factor(0..12), &FrameOptions::default()).is_err());
    }
}
