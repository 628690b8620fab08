//! Run configuration: one TOML file with an optional `[model]` table and a
//! `[run]` table of numeric settings, overridden by command-line flags.
//!
//! Defaults (the only place numeric defaults live):
//!
//! | key        | default                 | used by                              |
//! |------------|-------------------------|--------------------------------------|
//! | `seed`     | 0                       | every randomized subcommand          |
//! | `tol`      | 1e-10                   | Picard stopping tolerance            |
//! | `max_iter` | 200                     | Picard iteration limit               |
//! | `budget`   | 2^18 (`MFRBSDE_BUDGET`) | tree nodes / stopping rules          |
//! | `probes`   | 200                     | `validate`                           |
//! | `seeds`    | 100                     | `snell-oracle`                       |
//! | `paths`    | 10                      | `simulate`                           |
//! | `n`        | [2, 3]                  | `chaos-check`                        |
//! | `n_list`   | 16, 32, ..., 4096       | `lln-study`                          |
//! | `reps`     | 200                     | `lln-study`                          |
//! | `copies`   | 500                     | `sample-copies`                      |
//! | `stitch_h` | from the contraction    | `solve`, `stitch-check`              |
//!
//! Precedence is flag, then `[run]`, then the default. For the budget the
//! environment variable `MFRBSDE_BUDGET` replaces the built-in default.

use std::path::{Path, PathBuf};

use mfrbsde::models::{Model, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 200;
pub const DEFAULT_BUDGET: u64 = 1 << 18;
pub const DEFAULT_PROBES: usize = 200;
pub const DEFAULT_SEEDS: usize = 100;
pub const DEFAULT_PATHS: usize = 10;
pub const DEFAULT_CHAOS_N: [usize; 2] = [2, 3];
pub const DEFAULT_REPS: usize = 200;
pub const DEFAULT_COPIES: usize = 500;
pub const BUDGET_ENV: &str = "MFRBSDE_BUDGET";

pub fn default_n_list() -> Vec<usize> {
    (4..=12).map(|k| 1usize << k).collect()
}

/// The `[run]` table. Every key is optional.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub budget: Option<u64>,
    pub probes: Option<usize>,
    pub seeds: Option<usize>,
    pub paths: Option<usize>,
    pub n: Option<Vec<usize>>,
    pub n_list: Option<Vec<usize>>,
    pub reps: Option<usize>,
    pub copies: Option<usize>,
    pub stitch_h: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: Option<ModelConfig>,
    /// Path of a separate model file, relative to the config file.
    pub model_file: Option<PathBuf>,
    #[serde(default)]
    pub run: RunSection,
}

/// Fully resolved settings; recorded in the manifest and hashed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Settings {
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub budget: u64,
    pub probes: usize,
    pub seeds: usize,
    pub paths: usize,
    pub n: Vec<usize>,
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub copies: usize,
    pub stitch_h: Option<f64>,
}

/// Loaded configuration: the model (if any) and the raw file bytes.
pub struct Loaded {
    pub model: Option<ModelConfig>,
    pub run: RunSection,
    pub file_sha256: Option<String>,
}

pub fn load(path: Option<&Path>) -> Result<Loaded, CliError> {
    let Some(path) = path else {
        return Ok(Loaded { model: None, run: RunSection::default(), file_sha256: None });
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let file: ConfigFile =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let model = match (file.model, file.model_file) {
        (Some(_), Some(_)) => return Err(CliError::Usage("give either [model] or model_file, not both".into())),
        (Some(m), None) => Some(m),
        (None, Some(rel)) => {
            let full = path.parent().unwrap_or(Path::new(".")).join(rel);
            let text = std::fs::read_to_string(&full).map_err(|e| CliError::io(&full, e))?;
            Some(toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", full.display())))?)
        }
        (None, None) => None,
    };
    Ok(Loaded { model, run: file.run, file_sha256: Some(crate::manifest::sha256_hex(text.as_bytes())) })
}

pub fn build_model(config: Option<&ModelConfig>) -> Result<Model, CliError> {
    let config = config.ok_or_else(|| CliError::Usage("this subcommand needs a [model] table".into()))?;
    Ok(Model::new(config.clone())?)
}

fn env_budget() -> Result<Option<u64>, CliError> {
    match std::env::var(BUDGET_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{BUDGET_ENV} must be a positive integer, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

impl Settings {
    /// Merges flags over the file over the defaults and checks ranges.
    pub fn resolve(flags: &RunSection, file: &RunSection) -> Result<Self, CliError> {
        fn pick<T: Clone>(a: &Option<T>, b: &Option<T>) -> Option<T> {
            a.clone().or_else(|| b.clone())
        }
        let budget = match pick(&flags.budget, &file.budget) {
            Some(b) => b,
            None => env_budget()?.unwrap_or(DEFAULT_BUDGET),
        };
        let s = Settings {
            seed: pick(&flags.seed, &file.seed).unwrap_or(DEFAULT_SEED),
            tol: pick(&flags.tol, &file.tol).unwrap_or(DEFAULT_TOL),
            max_iter: pick(&flags.max_iter, &file.max_iter).unwrap_or(DEFAULT_MAX_ITER),
            budget,
            probes: pick(&flags.probes, &file.probes).unwrap_or(DEFAULT_PROBES),
            seeds: pick(&flags.seeds, &file.seeds).unwrap_or(DEFAULT_SEEDS),
            paths: pick(&flags.paths, &file.paths).unwrap_or(DEFAULT_PATHS),
            n: pick(&flags.n, &file.n).unwrap_or_else(|| DEFAULT_CHAOS_N.to_vec()),
            n_list: pick(&flags.n_list, &file.n_list).unwrap_or_else(default_n_list),
            reps: pick(&flags.reps, &file.reps).unwrap_or(DEFAULT_REPS),
            copies: pick(&flags.copies, &file.copies).unwrap_or(DEFAULT_COPIES),
            stitch_h: pick(&flags.stitch_h, &file.stitch_h),
        };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<(), CliError> {
        let bad = |what: &str| Err(CliError::Usage(what.to_string()));
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return bad("tol must be positive and finite");
        }
        if self.max_iter == 0 || self.budget == 0 {
            return bad("max_iter and budget must be positive");
        }
        if self.probes == 0 || self.seeds == 0 || self.paths == 0 || self.copies == 0 {
            return bad("probes, seeds, paths and copies must be positive");
        }
        if self.n.is_empty() || self.n.contains(&0) {
            return bad("n must list positive particle counts");
        }
        if self.n_list.is_empty() || self.n_list[0] == 0 || self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return bad("n_list must be positive and strictly increasing");
        }
        if self.reps < 2 {
            return bad("reps must be at least 2");
        }
        if self.stitch_h.is_some_and(|h| !(h > 0.0 && h.is_finite())) {
            return bad("stitch_h must be positive and finite");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let file = RunSection { seed: Some(3), reps: Some(50), ..Default::default() };
        let flags = RunSection { seed: Some(9), budget: Some(1000), ..Default::default() };
        let s = Settings::resolve(&flags, &file).unwrap();
        assert_eq!((s.seed, s.reps, s.budget, s.tol), (9, 50, 1000, DEFAULT_TOL));
        assert_eq!(s.n_list.first(), Some(&16));
        assert_eq!(s.n_list.last(), Some(&4096));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_ranges() {
        assert!(toml::from_str::<ConfigFile>("[run]\nreps = 3\nrep = 4\n").is_err());
        assert!(toml::from_str::<ConfigFile>("extra = 1\n").is_err());
        let bad = RunSection { n_list: Some(vec![16, 8]), ..Default::default() };
        assert!(Settings::resolve(&bad, &RunSection::default()).is_err());
        let bad = RunSection { tol: Some(0.0), ..Default::default() };
        assert!(Settings::resolve(&bad, &RunSection::default()).is_err());
    }
}
