//! `key = value` configuration with optional `[subcommand]` sections.
//!
//! Flat keys apply to every subcommand that accepts them; section keys
//! apply to their subcommand only; command-line flags override both.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::CliError;

/// Keys accepted by every subcommand.
pub const GLOBAL_KEYS: &[&str] = &["seed", "covariance"];

pub const SUBCOMMAND_KEYS: &[(&str, &[&str])] = &[
    (
        "simulate",
        &[
            "scenario",
            "population",
            "n_banks",
            "feature_dim",
            "rows_per_bank",
            "intercept",
            "slope",
            "mean",
            "cov_factor",
            "noise_var",
            "weights",
            "out",
        ],
    ),
    (
        "prepare",
        &[
            "raw",
            "macro",
            "out_dir",
            "lag",
            "stress_ratio",
            "include_macro",
            "include_allowance",
            "fit_start",
            "fit_end",
            "sign_column",
            "min_quarters",
        ],
    ),
    ("fit", &["panel", "ar", "out"]),
    ("compare", &["panel", "out"]),
    ("test", &["panel", "out"]),
    ("sensitivity", &["population", "scenario", "points", "out"]),
    ("gam", &["panel", "dof", "tol", "max_sweeps", "out"]),
];

fn keys_for(command: &str) -> Vec<&'static str> {
    let own = SUBCOMMAND_KEYS
        .iter()
        .find(|(c, _)| *c == command)
        .map(|(_, k)| *k)
        .unwrap_or_default();
    GLOBAL_KEYS.iter().chain(own).copied().collect()
}

fn all_keys() -> Vec<&'static str> {
    let mut k: Vec<&str> = GLOBAL_KEYS
        .iter()
        .chain(SUBCOMMAND_KEYS.iter().flat_map(|(_, k)| k.iter()))
        .copied()
        .collect();
    k.sort();
    k.dedup();
    k
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    flat: BTreeMap<String, String>,
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn parse(text: &str, source: &str) -> Result<Self, CliError> {
        let mut cfg = ConfigFile::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |msg: String| CliError::Usage(format!("{source}:{}: {msg}", i + 1));
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SUBCOMMAND_KEYS.iter().any(|(c, _)| *c == name) {
                    let valid: Vec<&str> = SUBCOMMAND_KEYS.iter().map(|(c, _)| *c).collect();
                    return Err(err(format!("unknown section [{name}]; valid sections: {}", valid.join(", "))));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let value = value.trim();
            let value = ['"', '\'']
                .iter()
                .find_map(|q| value.strip_prefix(*q).and_then(|v| v.strip_suffix(*q)))
                .unwrap_or(value);
            let (key, value) = (key.trim().to_string(), value.to_string());
            let valid = match &section {
                Some(s) => keys_for(s),
                None => all_keys(),
            };
            if !valid.contains(&key.as_str()) {
                return Err(err(format!("unknown key `{key}`; valid keys: {}", valid.join(", "))));
            }
            let target = match &section {
                Some(s) => cfg.sections.entry(s.clone()).or_default(),
                None => &mut cfg.flat,
            };
            if target.insert(key.clone(), value).is_some() {
                return Err(err(format!("duplicate key `{key}`")));
            }
        }
        Ok(cfg)
    }
}

/// Effective settings for one subcommand.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    command: String,
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(file: &ConfigFile, command: &str, flags: Vec<(&str, Option<String>)>) -> Self {
        let valid = keys_for(command);
        let mut values: BTreeMap<String, String> = file
            .flat
            .iter()
            .filter(|(k, _)| valid.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        if let Some(s) = file.sections.get(command) {
            values.extend(s.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        for (k, v) in flags {
            debug_assert!(valid.contains(&k), "flag `{k}` is not a key of `{command}`");
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        }
        Self {
            command: command.to_string(),
            values,
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.raw(key)
            .map(|v| {
                v.parse::<T>().map_err(|_| {
                    CliError::Usage(format!("invalid value `{v}` for `{key}` in `{}`", self.command))
                })
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.raw(key)
            .ok_or_else(|| CliError::Usage(format!("`{}` needs `{key}` (flag --{} or config key)", self.command, key.replace('_', "-"))))
    }

    pub fn flag(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.raw(key) {
            None => Ok(default),
            Some("true" | "yes" | "1") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(v) => Err(CliError::Usage(format!("invalid boolean `{v}` for `{key}`"))),
        }
    }

    /// `lo,hi` or a single value.
    pub fn range(&self, key: &str) -> Result<Option<(f64, f64)>, CliError> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        let bad = || CliError::Usage(format!("invalid range `{v}` for `{key}`; expected `lo,hi` or a number"));
        let parts: Vec<f64> = v
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [x] => Ok(Some((x, x))),
            [lo, hi] => Ok(Some((lo, hi))),
            _ => Err(bad()),
        }
    }

    pub fn list(&self, key: &str) -> Result<Option<Vec<f64>>, CliError> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Usage(format!("invalid number `{p}` in `{key}`")))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }
}
