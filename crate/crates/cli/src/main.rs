//! `fairagg`: simulate panels, prepare bank data, fit and compare industry
//! loss models, and report sensitivities and additive fits.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] fairagg_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }

    fn to_json(&self) -> String {
        use fairagg_core::Error as E;
        let mut v = json!({
            "error": match self { CliError::Usage(_) => "usage", CliError::Data(_) => "data" },
            "message": self.to_string().replace('\n', " "),
        });
        if let CliError::Data(E::Io { path, .. } | E::Parse { path, .. }) = self {
            v["path"] = json!(path);
        }
        v.to_string()
    }
}

#[derive(Debug, Parser)]
#[command(name = "fairagg", version, about = "Fair aggregation of bank loss models")]
struct Cli {
    /// Configuration file of `key = value` lines and `[subcommand]` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    seed: Option<String>,
    /// `bank` or `time`.
    #[arg(long)]
    covariance: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic panel drawn from a population.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// `sim-a`, `sim-b`, `sim-c` or `random`.
        #[arg(long)]
        scenario: Option<String>,
        /// Scalar population CSV (`bank,weight,alpha,beta,mu,var[,noise_var]`).
        #[arg(long)]
        population: Option<String>,
        #[arg(long)]
        n_banks: Option<String>,
        #[arg(long)]
        feature_dim: Option<String>,
        #[arg(long)]
        rows_per_bank: Option<String>,
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Turn raw bank and macro CSVs into cleaned rates and regression frames.
    Prepare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        raw: Option<String>,
        #[arg(long = "macro")]
        macro_file: Option<String>,
        #[arg(long)]
        out_dir: Option<String>,
        #[arg(long)]
        lag: Option<String>,
        #[arg(long)]
        stress_ratio: Option<String>,
        #[arg(long)]
        fit_start: Option<String>,
        #[arg(long)]
        fit_end: Option<String>,
    },
    /// Pooled and FEO coefficient table (or autoregressive fits with --ar).
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        panel: Option<String>,
        /// `one` or `four`.
        #[arg(long)]
        ar: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Pooled-versus-FEO slope tests and relative prediction differences.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        panel: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Heterogeneity tests for intercepts and slopes.
    Test {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        panel: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Cross-bank sensitivity derivatives with sign rules.
    Sensitivity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        population: Option<String>,
        #[arg(long)]
        scenario: Option<String>,
        /// Comma-separated feature values for point-forecast targets.
        #[arg(long)]
        points: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Pooled and FEO spline additive models with the nested F test.
    Gam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        panel: Option<String>,
        #[arg(long)]
        dof: Option<String>,
        #[arg(long)]
        tol: Option<String>,
        #[arg(long)]
        max_sweeps: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("FAIRAGG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("FAIRAGG_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let (text, source) = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| fairagg_core::Error::Io {
                path: p.display().to_string(),
                source,
            })?;
            (text, p.display().to_string())
        }
        None => (String::new(), String::new()),
    };
    let file = config::ConfigFile::parse(&text, &source)?;
    let common = |c: Common| vec![("seed", c.seed), ("covariance", c.covariance)];
    let resolve = |name: &str, c: Common, mut flags: Vec<(&'static str, Option<String>)>| {
        let mut all = common(c);
        all.append(&mut flags);
        config::Settings::resolve(&file, name, all)
    };
    match cli.command {
        Command::Simulate {
            common,
            scenario,
            population,
            n_banks,
            feature_dim,
            rows_per_bank,
            weights,
            out,
        } => {
            let s = resolve(
                "simulate",
                common,
                vec![
                    ("scenario", scenario),
                    ("population", population),
                    ("n_banks", n_banks),
                    ("feature_dim", feature_dim),
                    ("rows_per_bank", rows_per_bank),
                    ("weights", weights),
                    ("out", out),
                ],
            );
            commands::simulate(&s, &text)
        }
        Command::Prepare {
            common,
            raw,
            macro_file,
            out_dir,
            lag,
            stress_ratio,
            fit_start,
            fit_end,
        } => {
            let s = resolve(
                "prepare",
                common,
                vec![
                    ("raw", raw),
                    ("macro", macro_file),
                    ("out_dir", out_dir),
                    ("lag", lag),
                    ("stress_ratio", stress_ratio),
                    ("fit_start", fit_start),
                    ("fit_end", fit_end),
                ],
            );
            commands::prepare(&s, &text)
        }
        Command::Fit { common, panel, ar, out } => {
            let s = resolve("fit", common, vec![("panel", panel), ("ar", ar), ("out", out)]);
            commands::fit(&s, &text)
        }
        Command::Compare { common, panel, out } => {
            let s = resolve("compare", common, vec![("panel", panel), ("out", out)]);
            commands::compare(&s, &text)
        }
        Command::Test { common, panel, out } => {
            let s = resolve("test", common, vec![("panel", panel), ("out", out)]);
            commands::test(&s, &text)
        }
        Command::Sensitivity {
            common,
            population,
            scenario,
            points,
            out,
        } => {
            let s = resolve(
                "sensitivity",
                common,
                vec![("population", population), ("scenario", scenario), ("points", points), ("out", out)],
            );
            commands::sensitivity(&s, &text)
        }
        Command::Gam {
            common,
            panel,
            dof,
            tol,
            max_sweeps,
            out,
        } => {
            let s = resolve(
                "gam",
                common,
                vec![("panel", panel), ("dof", dof), ("tol", tol), ("max_sweeps", max_sweeps), ("out", out)],
            );
            commands::gam(&s, &text)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
