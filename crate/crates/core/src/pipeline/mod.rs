//! Raw bank-panel ingestion: loss, past-due and allowance rates, cleaning
//! filters, the macro stress factor and the lagged regression frame.

mod frame;
mod macro_factor;

pub use frame::{build_all_frames, build_regression_frame, MISSING_LAGGED_FEATURE, MISSING_MACRO, NONPOSITIVE_LOANS, FrameOptions, ALLOWANCE_FEATURE, MACRO_FEATURE, PAST_DUE_FEATURE};
pub use macro_factor::{macro_pc1, stress_lambda, stress_weights, MacroFactor, MacroTable, UNEMPLOYMENT_COLUMN};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::PanelDataset;

/// Calendar quarter, ordered and stepped through its linear index
/// `4 * year + (quarter - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Quarter(i64);

impl Quarter {
    pub fn new(year: i64, quarter: u8) -> Result<Self> {
        if !(1..=4).contains(&quarter) {
            return Err(Error::invalid(format!("quarter must be 1..=4, got {quarter}")));
        }
        Ok(Self(4 * year + i64::from(quarter) - 1))
    }

    pub fn from_index(index: i64) -> Self {
        Self(index)
    }

    pub fn index(self) -> i64 {
        self.0
    }

    pub fn year(self) -> i64 {
        self.0.div_euclid(4)
    }

    pub fn quarter(self) -> u8 {
        self.0.rem_euclid(4) as u8 + 1
    }

    pub fn offset(self, quarters: i64) -> Self {
        Self(self.0 + quarters)
    }
}

impl fmt::Display for Quarter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-Q{}", self.year(), self.quarter())
    }
}

impl FromStr for Quarter {
    type Err = Error;

    /// Parses `YYYY-Qn`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("`{s}` is not a quarter of the form YYYY-Qn"));
        let (year, q) = s.trim().split_once("-Q").ok_or_else(bad)?;
        if year.len() != 4 || q.len() != 1 {
            return Err(bad());
        }
        let year: i64 = year.parse().map_err(|_| bad())?;
        let q: u8 = q.parse().map_err(|_| bad())?;
        Quarter::new(year, q).map_err(|_| bad())
    }
}

/// One bank-quarter-category record of dollar amounts; missing fields are `None`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RawRow {
    pub bank_id: String,
    pub quarter: String,
    pub category: String,
    pub charge_offs: Option<f64>,
    pub recoveries: Option<f64>,
    pub loans: Option<f64>,
    pub past_due: Option<f64>,
    pub allowances: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub bank_id: String,
    pub quarter: Quarter,
    pub category: String,
    pub charge_offs: Option<f64>,
    pub recoveries: Option<f64>,
    pub loans: Option<f64>,
    pub past_due: Option<f64>,
    pub allowances: Option<f64>,
}

/// Raw panel keyed by `(bank_id, category, quarter)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawPanelTable {
    records: Vec<RawRecord>,
}

impl RawPanelTable {
    pub fn new(mut records: Vec<RawRecord>) -> Result<Self> {
        records.sort_by(|a, b| {
            (&a.bank_id, &a.category, a.quarter).cmp(&(&b.bank_id, &b.category, b.quarter))
        });
        for pair in records.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if (&a.bank_id, &a.category, a.quarter) == (&b.bank_id, &b.category, b.quarter) {
                return Err(Error::invalid(format!(
                    "duplicate record for bank `{}`, category `{}`, {}",
                    a.bank_id, a.category, a.quarter
                )));
            }
        }
        if let Some(r) = records.iter().find(|r| r.loans.is_some_and(|l| l < 0.0 || !l.is_finite())) {
            return Err(Error::invalid(format!(
                "bank `{}` {} {}: loans must be nonnegative",
                r.bank_id, r.category, r.quarter
            )));
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[RawRecord] {
        &self.records
    }

    pub fn from_reader<R: Read>(reader: R, source: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
        let mut records = Vec::new();
        for (i, row) in rdr.deserialize::<RawRow>().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| Error::Parse {
                path: source.to_string(),
                line,
                message: e.to_string(),
            })?;
            let quarter = row.quarter.parse().map_err(|e: Error| Error::Parse {
                path: source.to_string(),
                line,
                message: e.to_string(),
            })?;
            records.push(RawRecord {
                bank_id: row.bank_id,
                quarter,
                category: row.category,
                charge_offs: row.charge_offs,
                recoveries: row.recoveries,
                loans: row.loans,
                past_due: row.past_due,
                allowances: row.allowances,
            });
        }
        Self::new(records)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = open(path)?;
        Self::from_reader(file, &path.display().to_string())
    }
}

pub(crate) fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Rates for one bank, category and quarter.
#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub bank_id: String,
    pub category: String,
    pub quarter: Quarter,
    pub loss_rate: f64,
    pub past_due_rate: f64,
    /// Allowances over prior-quarter loans summed across categories.
    pub allowance_rate: Option<f64>,
    /// Current-quarter loans, used for observation weights.
    pub loans: Option<f64>,
}

/// Row counts per exclusion or adjustment rule.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ExclusionReport {
    #[serde(flatten)]
    pub counts: BTreeMap<String, usize>,
}

impl ExclusionReport {
    pub fn add(&mut self, rule: &str, n: usize) {
        *self.counts.entry(rule.to_string()).or_insert(0) += n;
    }

    pub fn count(&self, rule: &str) -> usize {
        self.counts.get(rule).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &ExclusionReport) {
        for (k, v) in &other.counts {
            self.add(k, *v);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub const MISSING_PRIOR_LOANS: &str = "missing_prior_loans";
pub const ZERO_PRIOR_LOANS: &str = "zero_prior_loans";
pub const MISSING_AMOUNTS: &str = "missing_amounts";
pub const LOSS_RATE_OUT_OF_RANGE: &str = "loss_rate_out_of_range";
pub const PAST_DUE_ABOVE_MAX: &str = "past_due_rate_above_max";
pub const SHORT_HISTORY: &str = "short_history";
pub const PAST_DUE_WINSORIZED: &str = "past_due_rate_winsorized";

/// Loss, past-due and allowance rates over prior-quarter loans.
///
/// Rows whose prior-quarter loans are missing or zero, or whose charge-offs,
/// recoveries or past-due amounts are missing, are dropped and counted.
pub fn compute_rates(raw: &RawPanelTable) -> (Vec<RateRow>, ExclusionReport) {
    let mut report = ExclusionReport::default();
    let loans: HashMap<(&str, &str, Quarter), Option<f64>> = raw
        .records()
        .iter()
        .map(|r| ((r.bank_id.as_str(), r.category.as_str(), r.quarter), r.loans))
        .collect();
    let mut total_loans: HashMap<(&str, Quarter), f64> = HashMap::new();
    for r in raw.records() {
        if let Some(l) = r.loans {
            *total_loans.entry((r.bank_id.as_str(), r.quarter)).or_insert(0.0) += l;
        }
    }
    let mut rows = Vec::with_capacity(raw.records().len());
    for r in raw.records() {
        let prior_q = r.quarter.offset(-1);
        let prior = match loans.get(&(r.bank_id.as_str(), r.category.as_str(), prior_q)) {
            Some(Some(l)) => *l,
            _ => {
                report.add(MISSING_PRIOR_LOANS, 1);
                continue;
            }
        };
        if prior == 0.0 {
            report.add(ZERO_PRIOR_LOANS, 1);
            continue;
        }
        let (Some(co), Some(rec), Some(pd)) = (r.charge_offs, r.recoveries, r.past_due) else {
            report.add(MISSING_AMOUNTS, 1);
            continue;
        };
        let allowance_rate = match (r.allowances, total_loans.get(&(r.bank_id.as_str(), prior_q))) {
            (Some(a), Some(&total)) if total > 0.0 => Some(a / total),
            _ => None,
        };
        rows.push(RateRow {
            bank_id: r.bank_id.clone(),
            category: r.category.clone(),
            quarter: r.quarter,
            loss_rate: (co - rec) / prior,
            past_due_rate: pd / prior,
            allowance_rate,
            loans: r.loans,
        });
    }
    (rows, report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CleanOptions {
    pub loss_rate_min: f64,
    pub loss_rate_max: f64,
    pub past_due_max: f64,
    /// Lower and upper winsorization probabilities for the past-due rate.
    pub winsor_lower: f64,
    pub winsor_upper: f64,
    /// Minimum quarters of history per bank and category.
    pub min_quarters: usize,
}

impl Default for CleanOptions {
    fn default() -> Self {
        Self {
            loss_rate_min: -0.5,
            loss_rate_max: 0.5,
            past_due_max: 0.2,
            winsor_lower: 0.05,
            winsor_upper: 0.95,
            min_quarters: 72,
        }
    }
}

/// Empirical quantile `x_(ceil(n p))` of sorted data (inverse of the
/// empirical CDF), so clamping at it is idempotent.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let k = ((n as f64 * p).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Apply the range filters, drop short histories, then winsorize the
/// past-due rate within each loan category.
///
/// Output rows are sorted by category, bank and quarter.
pub fn clean(rows: &[RateRow], opts: &CleanOptions) -> Result<(Vec<RateRow>, ExclusionReport)> {
    let mut report = ExclusionReport::default();
    let mut kept: Vec<RateRow> = Vec::with_capacity(rows.len());
    for r in rows {
        if !(opts.loss_rate_min..=opts.loss_rate_max).contains(&r.loss_rate) {
            report.add(LOSS_RATE_OUT_OF_RANGE, 1);
        } else if !(r.past_due_rate <= opts.past_due_max) {
            report.add(PAST_DUE_ABOVE_MAX, 1);
        } else {
            kept.push(r.clone());
        }
    }
    let mut history: HashMap<(&str, &str), usize> = HashMap::new();
    for r in &kept {
        *history.entry((r.category.as_str(), r.bank_id.as_str())).or_insert(0) += 1;
    }
    let long: HashMap<(String, String), bool> = history
        .into_iter()
        .map(|((c, b), n)| ((c.to_string(), b.to_string()), n >= opts.min_quarters))
        .collect();
    let before = kept.len();
    kept.retain(|r| long[&(r.category.clone(), r.bank_id.clone())]);
    report.add(SHORT_HISTORY, before - kept.len());
    if kept.is_empty() {
        return Err(Error::Empty("cleaned panel".into()));
    }
    kept.sort_by(|a, b| (&a.category, &a.bank_id, a.quarter).cmp(&(&b.category, &b.bank_id, b.quarter)));

    let mut start = 0;
    while start < kept.len() {
        let end = start + kept[start..].iter().take_while(|r| r.category == kept[start].category).count();
        let mut sorted: Vec<f64> = kept[start..end].iter().map(|r| r.past_due_rate).collect();
        sorted.sort_by(f64::total_cmp);
        let lo = empirical_quantile(&sorted, opts.winsor_lower);
        let hi = empirical_quantile(&sorted, opts.winsor_upper);
        let mut changed = 0;
        for r in &mut kept[start..end] {
            let v = r.past_due_rate.clamp(lo, hi);
            if v != r.past_due_rate {
                r.past_due_rate = v;
                changed += 1;
            }
        }
        report.add(PAST_DUE_WINSORIZED, changed);
        start = end;
    }
    Ok((kept, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub clean: CleanOptions,
    pub frame: FrameOptions,
    /// Quarters over which the macro factor is fitted; the whole table when `None`.
    pub fit_range: Option<(Quarter, Quarter)>,
    pub sign_column: String,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            clean: CleanOptions::default(),
            frame: FrameOptions::default(),
            fit_range: None,
            sign_column: UNEMPLOYMENT_COLUMN.to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub cleaned: Vec<RateRow>,
    /// Counts from rate computation, cleaning and frame construction.
    pub exclusions: ExclusionReport,
    pub factor: MacroFactor,
    /// One regression frame per loan category.
    pub frames: BTreeMap<String, PanelDataset>,
}

/// Rates, cleaning, macro factor and per-category regression frames.
pub fn run_pipeline(raw: &RawPanelTable, macro_table: &MacroTable, opts: &PipelineOptions) -> Result<PipelineOutput> {
    let (rates, mut exclusions) = compute_rates(raw);
    let (cleaned, report) = clean(&rates, &opts.clean)?;
    exclusions.merge(&report);
    let factor = macro_pc1(macro_table, opts.fit_range, &opts.sign_column)?;
    let mut frames = BTreeMap::new();
    for (category, (frame, report)) in build_all_frames(&cleaned, &factor, &opts.frame)? {
        exclusions.merge(&report);
        frames.insert(category, frame);
    }
    Ok(PipelineOutput {
        cleaned,
        exclusions,
        factor,
        frames,
    })
}

/// Distinct loan categories in sorted order.
pub fn categories(rows: &[RateRow]) -> Vec<String> {
    let mut c: Vec<String> = rows.iter().map(|r| r.category.clone()).collect();
    c.sort();
    c.dedup();
    c
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write rate rows as CSV with round-trip precision.
pub fn write_rates_csv<W: Write>(rows: &[RateRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["bank_id", "category", "quarter", "loss_rate", "past_due_rate", "allowance_rate", "loans"])?;
    for r in rows {
        w.write_record([
            r.bank_id.clone(),
            r.category.clone(),
            r.quarter.to_string(),
            r.loss_rate.to_string(),
            r.past_due_rate.to_string(),
            fmt_opt(r.allowance_rate),
            fmt_opt(r.loans),
        ])?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<rates>".into(),
        source,
    })
}

#[derive(Deserialize)]
struct RateCsvRow {
    bank_id: String,
    category: String,
    quarter: String,
    loss_rate: f64,
    past_due_rate: f64,
    allowance_rate: Option<f64>,
    loans: Option<f64>,
}

pub fn read_rates_csv<R: Read>(reader: R, source: &str) -> Result<Vec<RateRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
    rdr.deserialize::<RateCsvRow>()
        .enumerate()
        .map(|(i, row)| {
            let parse_err = |message: String| Error::Parse {
                path: source.to_string(),
                line: i + 2,
                message,
            };
            let row = row.map_err(|e| parse_err(e.to_string()))?;
            Ok(RateRow {
                quarter: row.quarter.parse().map_err(|e: Error| parse_err(e.to_string()))?,
                bank_id: row.bank_id,
                category: row.category,
                loss_rate: row.loss_rate,
                past_due_rate: row.past_due_rate,
                allowance_rate: row.allowance_rate,
                loans: row.loans,
            })
        })
        .collect()
}
