use thiserror::Error;

/// Errors raised by the solvers and simulators.
///
/// Each variant maps onto one refusal class of the command-line driver:
/// configuration problems, regime refusals, budget refusals and numerical
/// non-convergence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("grid too coarse at step {step}: no-jump probability {p0} is not positive")]
    GridTooCoarse { step: usize, p0: f64 },

    #[error("implicit step not contractive at step {step} (lipschitz * dA = {factor}), refine grid")]
    ImplicitNotContractive { step: usize, factor: f64 },

    #[error("no contraction regime: {condition} (margin {margin})")]
    Regime { condition: String, margin: f64 },

    #[error("budget exceeded: {what} requires {required}, budget is {budget}")]
    Budget {
        what: String,
        required: u128,
        budget: u128,
    },

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        trace: Vec<f64>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
