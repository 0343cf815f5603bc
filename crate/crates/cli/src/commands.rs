use std::io::Write;
use std::path::{Path, PathBuf};

use fairagg_core::additive::BackfitOptions;
use fairagg_core::model::{read_scalar_population, BankPopulation};
use fairagg_core::pipeline::{
    run_pipeline, write_rates_csv, CleanOptions, FrameOptions, MacroTable, PipelineOptions, Quarter, RawPanelTable,
};
use fairagg_core::report::{self, render_document, Cell, Table};
use fairagg_core::sample::{
    ar_panel_fit, read_panel_file, write_panel_csv, ArLag, CovarianceSpec, PanelDataset, PanelMode, TimeFormat,
};
use fairagg_core::simulation::{bank_labels, seeded_population, simulate_panel, Range, SimConfig, WeightScheme};
use fairagg_core::{scenarios, Error};

use crate::config::Settings;
use crate::CliError;

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Data(Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Write to `out` when set, else stdout.
fn emit(s: &Settings, content: &str) -> Result<(), CliError> {
    match s.raw("out") {
        Some(p) => std::fs::write(p, content).map_err(|e| io_err(Path::new(p), e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(content.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| io_err(Path::new("<stdout>"), e))
        }
    }
}

fn seed(s: &Settings) -> Result<u64, CliError> {
    s.get_or("seed", 0u64)
}

fn covariance(s: &Settings) -> Result<CovarianceSpec, CliError> {
    match s.raw("covariance").unwrap_or("bank") {
        "bank" => Ok(CovarianceSpec::BankClustered),
        "time" => Ok(CovarianceSpec::TimeClustered),
        other => Err(CliError::Usage(format!("covariance must be `bank` or `time`, got `{other}`"))),
    }
}

fn panel(s: &Settings) -> Result<PanelDataset, CliError> {
    Ok(read_panel_file(Path::new(s.require("panel")?))?)
}

fn document(s: &Settings, config_text: &str, tables: &[Table]) -> Result<String, CliError> {
    Ok(render_document(&report::header(seed(s)?, config_text), tables))
}

/// Population from `population` (a scalar CSV) or a named `scenario`.
fn population(s: &Settings, allow_random: bool) -> Result<(Vec<String>, BankPopulation), CliError> {
    if let Some(p) = s.raw("population") {
        let path = Path::new(p);
        let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        return Ok(read_scalar_population(file, p)?);
    }
    let name = s.raw("scenario").unwrap_or(if allow_random { "random" } else { "sim-a" });
    if let Some(pop) = scenarios::by_name(name) {
        return Ok((bank_labels(pop.len()), pop));
    }
    if name != "random" || !allow_random {
        return Err(CliError::Usage(format!("unknown scenario `{name}`")));
    }
    let mut cfg = SimConfig {
        seed: seed(s)?,
        ..SimConfig::default()
    };
    cfg.n_banks = s.get_or("n_banks", cfg.n_banks)?;
    cfg.feature_dim = s.get_or("feature_dim", cfg.feature_dim)?;
    for (key, slot) in [
        ("intercept", &mut cfg.intercept),
        ("slope", &mut cfg.slope),
        ("mean", &mut cfg.mean),
        ("cov_factor", &mut cfg.cov_factor),
        ("noise_var", &mut cfg.noise_var),
    ] {
        if let Some((lo, hi)) = s.range(key)? {
            *slot = Range::new(lo, hi);
        }
    }
    cfg.weights = match s.raw("weights").unwrap_or("equal") {
        "equal" => WeightScheme::Equal,
        "random" => WeightScheme::Random,
        other => return Err(CliError::Usage(format!("weights must be `equal` or `random`, got `{other}`"))),
    };
    let pop = seeded_population(&cfg)?;
    Ok((bank_labels(pop.len()), pop))
}

pub fn simulate(s: &Settings, config_text: &str) -> Result<(), CliError> {
    let (_, pop) = population(s, true)?;
    let rows = s.get_or("rows_per_bank", SimConfig::default().rows_per_bank)?;
    let data = simulate_panel(&pop, rows, seed(s)?)?;
    let mut buf = Vec::new();
    write_panel_csv(&data, &mut buf, TimeFormat::Integer)?;
    let body = String::from_utf8(buf).expect("csv output is utf-8");
    emit(s, &format!("{}\n{body}", report::header(seed(s)?, config_text)))
}

fn quarter(s: &Settings, key: &str) -> Result<Option<Quarter>, CliError> {
    s.raw(key)
        .map(|v| v.parse::<Quarter>().map_err(|e| CliError::Usage(format!("{key}: {e}"))))
        .transpose()
}

pub fn prepare(s: &Settings, config_text: &str) -> Result<(), CliError> {
    let raw = RawPanelTable::read(Path::new(s.require("raw")?))?;
    let macro_table = MacroTable::read(Path::new(s.require("macro")?))?;
    let out_dir = PathBuf::from(s.require("out_dir")?);
    let defaults = PipelineOptions::default();
    let fit_range = match (quarter(s, "fit_start")?, quarter(s, "fit_end")?) {
        (None, None) => None,
        (lo, hi) => Some((
            lo.unwrap_or(macro_table.quarters()[0]),
            hi.unwrap_or(*macro_table.quarters().last().expect("macro table is non-empty")),
        )),
    };
    let opts = PipelineOptions {
        clean: CleanOptions {
            min_quarters: s.get_or("min_quarters", defaults.clean.min_quarters)?,
            ..defaults.clean
        },
        frame: FrameOptions {
            lag: s.get_or("lag", defaults.frame.lag)?,
            stress_ratio: s.get_or("stress_ratio", defaults.frame.stress_ratio)?,
            include_macro: s.flag("include_macro", defaults.frame.include_macro)?,
            include_allowance: s.flag("include_allowance", defaults.frame.include_allowance)?,
        },
        fit_range,
        sign_column: s.raw("sign_column").unwrap_or(&defaults.sign_column).to_string(),
    };
    let out = run_pipeline(&raw, &macro_table, &opts)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    let write = |name: &str, bytes: &[u8]| -> Result<PathBuf, CliError> {
        let p = out_dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| io_err(&p, e))?;
        Ok(p)
    };
    let mut written = Vec::new();
    let mut buf = Vec::new();
    write_rates_csv(&out.cleaned, &mut buf)?;
    written.push(write("clean_rates.csv", &buf)?);
    written.push(write("exclusions.json", format!("{}\n", out.exclusions.to_json()?).as_bytes())?);

    let mut loadings = Table::new("loadings", &["column", "loading"]);
    for (c, l) in out.factor.columns.iter().zip(out.factor.loadings.iter()) {
        loadings.push(vec![c.as_str().into(), (*l).into()]);
    }
    let mut series = Table::new("macro_pc", &["quarter", "value"]);
    for (q, v) in &out.factor.series {
        series.push(vec![Cell::Text(q.to_string()), (*v).into()]);
    }
    written.push(write("macro_pc1.csv", document(s, config_text, &[loadings, series])?.as_bytes())?);
    for (category, frame) in &out.frames {
        let mut buf = Vec::new();
        write_panel_csv(frame, &mut buf, TimeFormat::Quarter)?;
        written.push(write(&format!("frame_{category}.csv"), &buf)?);
    }
    let listing: String = written.iter().map(|p| format!("{}\n", p.display())).collect();
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(listing.as_bytes())
        .map_err(|e| io_err(Path::new("<stdout>"), e))
}

pub fn fit(s: &Settings, config_text: &str) -> Result<(), CliError> {
    let spec = covariance(s)?;
    let data = panel(s)?;
    let tables = match s.raw("ar") {
        None => report::coefficient_tables(&data, spec)?,
        Some(v) => {
            let lag = match v {
                "one" => ArLag::OneQuarter,
                "four" => ArLag::FourQuarterAverage,
                other => return Err(CliError::Usage(format!("ar must be `one` or `four`, got `{other}`"))),
            };
            let mut t = Table::new("ar_coefficients", &["model", "term", "estimate"]);
            for mode in [PanelMode::Pooled, PanelMode::FixedEffects] {
                let pf = ar_panel_fit(&data, lag, mode)?;
                for (j, label) in pf.fit.labels.iter().enumerate() {
                    t.push(vec![mode.name().into(), label.as_str().into(), pf.fit.coefficients[j].into()]);
                }
            }
            vec![t]
        }
    };
    emit(s, &document(s, config_text, &tables)?)
}

pub fn compare(s: &Settings, config_text: &str) -> Result<(), CliError> {
    let spec = covariance(s)?;
    let data = panel(s)?;
    let tables = report::compare_tables(&data, spec)?;
    emit(s, &document(s, config_text, &tables)?)
}

pub fn test(s: &Settings, config_text: &str) -> Result<(), CliError> {
    let data = panel(s)?;
    let table = report::heterogeneity_table(&data)?;
    emit(s, &document(s, config_text, &[table])?)
}

pub fn sensitivity(s: &Settings, config_text: &str) -> Result<(), CliError> {
    let (ids, pop) = population(s, false)?;
    if pop.dim() != 1 {
        return Err(CliError::Data(Error::InvalidArgument("sensitivities need a scalar-feature population".into())));
    }
    let points = match s.list("points")? {
        Some(p) => p,
        None => pop.banks().iter().map(|b| b.feature_mean[0]).collect(),
    };
    let table = report::sensitivity_table(&pop, &points, &ids)?;
    emit(s, &document(s, config_text, &[table])?)
}

pub fn gam(s: &Settings, config_text: &str) -> Result<(), CliError> {
    let data = panel(s)?;
    let defaults = BackfitOptions::default();
    let opts = BackfitOptions {
        tol: s.get_or("tol", defaults.tol)?,
        max_sweeps: s.get_or("max_sweeps", defaults.max_sweeps)?,
    };
    let tables = report::gam_tables(&data, s.get_or("dof", 4.0)?, opts)?;
    emit(s, &document(s, config_text, &tables)?)
}
