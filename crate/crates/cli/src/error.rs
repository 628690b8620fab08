use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

/// Exit statuses of the driver.
pub mod exit {
    pub const OK: u8 = 0;
    pub const IO: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const REGIME: u8 = 3;
    pub const BUDGET: u8 = 4;
    pub const NUMERICAL: u8 = 5;
    /// A diagnostic ran to completion and its verdict was negative.
    pub const CHECK_FAILED: u8 = 6;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] mfrbsde::Error),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    /// The run finished but reports a negative verdict.
    #[error("{message}")]
    Verdict { code: u8, class: &'static str, message: String, detail: Value },
}

/// Machine-readable form of a nonzero exit, written as `refusal.json`.
#[derive(Debug, Serialize)]
pub struct Refusal {
    pub exit_code: u8,
    pub class: &'static str,
    pub message: String,
    pub detail: Value,
}

/// JSON numbers stop at `u64`; larger counts are written as strings.
fn big(x: u128) -> Value {
    u64::try_from(x).map(Value::from).unwrap_or_else(|_| Value::String(x.to_string()))
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn refusal(&self) -> Refusal {
        use mfrbsde::Error as E;
        let message = self.to_string();
        let (exit_code, class, detail) = match self {
            CliError::Usage(_) => (exit::CONFIG, "config", Value::Null),
            CliError::Io { path, .. } => (exit::IO, "io", json!({ "path": path })),
            CliError::Verdict { code, class, detail, .. } => (*code, *class, detail.clone()),
            CliError::Core(e) => match e {
                E::Config(_) | E::Domain(_) | E::Shape(_) => (exit::CONFIG, "config", Value::Null),
                E::GridTooCoarse { step, p0 } => (exit::CONFIG, "grid", json!({ "step": step, "p0": p0 })),
                E::Regime { condition, margin } => {
                    (exit::REGIME, "regime", json!({ "condition": condition, "margin": margin }))
                }
                E::Budget { what, required, budget } => {
                    (exit::BUDGET, "budget", json!({ "what": what, "required": big(*required), "budget": big(*budget) }))
                }
                E::NonConvergence { iterations, residual, trace } => (
                    exit::NUMERICAL,
                    "non-convergence",
                    json!({ "iterations": iterations, "residual": residual, "trace": trace }),
                ),
                E::ImplicitNotContractive { step, factor } => {
                    (exit::NUMERICAL, "implicit-step", json!({ "step": step, "factor": factor }))
                }
                E::Io(_) | E::Csv(_) | E::Json(_) => (exit::IO, "io", Value::Null),
            },
        };
        Refusal { exit_code, class, message, detail }
    }
}
