//! Obstacles `h(t, ω, y, μ)` and terminal conditions `ξ(ω)`.
//!
//! The path dependence enters through the per-mark jump counts of the
//! particle, summarized as `N = Σ_k n_k` and `X = Σ_k n_k x_k` where `x_k` is
//! the real embedding of mark `k`.

use serde::{Deserialize, Serialize};

use super::driver::MeasureForm;
use crate::error::{Error, Result};
use crate::measures::DiscreteLaw;

/// A lower barrier; `None` means no constraint at that point.
pub trait Obstacle: Send + Sync {
    fn eval(&self, t: f64, counts: &[u32], y: f64, mu: &DiscreteLaw) -> Option<f64>;

    /// `(γ₁, γ₂)`: Lipschitz constants in `y` and in `μ`.
    fn gammas(&self) -> (f64, f64);

    /// True when `h` ignores `y` and `μ`.
    fn is_frozen_free(&self) -> bool {
        self.gammas() == (0.0, 0.0)
    }
}

/// A terminal condition as a function of the jump counts.
pub trait Terminal: Send + Sync {
    fn eval(&self, counts: &[u32]) -> f64;

    /// `‖ξ‖_∞` when the family is bounded independently of the grid.
    fn sup_bound(&self) -> Option<f64> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObstacleFamily {
    /// No reflection.
    Inactive,
    Constant { level: f64 },
    /// `level + slope_t t + slope_x X + γ_y y + γ_m m(μ)`.
    Linear {
        #[serde(default)]
        level: f64,
        #[serde(default)]
        slope_t: f64,
        #[serde(default)]
        slope_x: f64,
        #[serde(default)]
        gamma_y: f64,
        #[serde(default)]
        gamma_m: f64,
        #[serde(default)]
        measure: MeasureForm,
    },
    /// `level + slope_t t + slope_x X + γ_y y − γ_w W_p(μ, δ_0)`.
    WassersteinShift {
        #[serde(default)]
        level: f64,
        #[serde(default)]
        slope_t: f64,
        #[serde(default)]
        slope_x: f64,
        #[serde(default)]
        gamma_y: f64,
        #[serde(default)]
        gamma_w: f64,
    },
}

/// Unknown keys are rejected by the flattened family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    #[serde(flatten)]
    pub family: ObstacleFamily,
    /// Declared `γ₁`; defaults to the analytic value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma1: Option<f64>,
    /// Declared `γ₂`; defaults to the analytic value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma2: Option<f64>,
}

impl ObstacleSpec {
    pub fn inactive() -> Self {
        ObstacleSpec { family: ObstacleFamily::Inactive, gamma1: None, gamma2: None }
    }
}

fn weighted_sum(counts: &[u32], values: &[f64]) -> f64 {
    counts.iter().zip(values).map(|(&n, v)| n as f64 * v).sum()
}

#[derive(Clone, Debug)]
pub struct ParamObstacle {
    pub family: ObstacleFamily,
    mark_values: Vec<f64>,
    order: u32,
    gammas: (f64, f64),
}

impl ParamObstacle {
    pub fn new(spec: &ObstacleSpec, mark_values: &[f64], order: u32) -> Result<Self> {
        let analytic = match &spec.family {
            ObstacleFamily::Inactive => (0.0, 0.0),
            ObstacleFamily::Constant { level } => {
                check_finite(&[*level])?;
                (0.0, 0.0)
            }
            ObstacleFamily::Linear { level, slope_t, slope_x, gamma_y, gamma_m, .. } => {
                check_finite(&[*level, *slope_t, *slope_x, *gamma_y, *gamma_m])?;
                (gamma_y.abs(), gamma_m.abs())
            }
            ObstacleFamily::WassersteinShift { level, slope_t, slope_x, gamma_y, gamma_w } => {
                check_finite(&[*level, *slope_t, *slope_x, *gamma_y, *gamma_w])?;
                (gamma_y.abs(), gamma_w.abs())
            }
        };
        let pick = |declared: Option<f64>, default: f64| -> Result<f64> {
            match declared {
                Some(g) if !(g.is_finite() && g >= 0.0) => {
                    Err(Error::Config(format!("declared obstacle constant must be nonnegative, got {g}")))
                }
                Some(g) => Ok(g),
                None => Ok(default),
            }
        };
        let gammas = (pick(spec.gamma1, analytic.0)?, pick(spec.gamma2, analytic.1)?);
        Ok(ParamObstacle { family: spec.family.clone(), mark_values: mark_values.to_vec(), order, gammas })
    }
}

fn check_finite(xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Config("obstacle coefficients must be finite".into()))
    }
}

impl Obstacle for ParamObstacle {
    fn eval(&self, t: f64, counts: &[u32], y: f64, mu: &DiscreteLaw) -> Option<f64> {
        match &self.family {
            ObstacleFamily::Inactive => None,
            ObstacleFamily::Constant { level } => Some(*level),
            ObstacleFamily::Linear { level, slope_t, slope_x, gamma_y, gamma_m, measure } => Some(
                level
                    + slope_t * t
                    + slope_x * weighted_sum(counts, &self.mark_values)
                    + gamma_y * y
                    + gamma_m * measure.apply(mu, self.order),
            ),
            ObstacleFamily::WassersteinShift { level, slope_t, slope_x, gamma_y, gamma_w } => Some(
                level + slope_t * t + slope_x * weighted_sum(counts, &self.mark_values) + gamma_y * y
                    - gamma_w * MeasureForm::Distance.apply(mu, self.order),
            ),
        }
    }

    fn gammas(&self) -> (f64, f64) {
        self.gammas
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TerminalSpec {
    Constant { value: f64 },
    /// `level + slope X_T`.
    Linear {
        #[serde(default)]
        level: f64,
        #[serde(default)]
        slope: f64,
    },
    /// `clamp(level + slope X_T, lo, hi)`.
    Clamped {
        #[serde(default)]
        level: f64,
        #[serde(default)]
        slope: f64,
        lo: f64,
        hi: f64,
    },
    /// `above` if `N_T ≥ threshold`, else `below`.
    Indicator { threshold: u32, above: f64, below: f64 },
}

#[derive(Clone, Debug)]
pub struct ParamTerminal {
    pub spec: TerminalSpec,
    mark_values: Vec<f64>,
}

impl ParamTerminal {
    pub fn new(spec: &TerminalSpec, mark_values: &[f64]) -> Result<Self> {
        let ok = match spec {
            TerminalSpec::Constant { value } => value.is_finite(),
            TerminalSpec::Linear { level, slope } => level.is_finite() && slope.is_finite(),
            TerminalSpec::Clamped { level, slope, lo, hi } => {
                [level, slope, lo, hi].iter().all(|x| x.is_finite()) && lo <= hi
            }
            TerminalSpec::Indicator { above, below, .. } => above.is_finite() && below.is_finite(),
        };
        if !ok {
            return Err(Error::Config(format!("invalid terminal specification {spec:?}")));
        }
        Ok(ParamTerminal { spec: spec.clone(), mark_values: mark_values.to_vec() })
    }
}

impl Terminal for ParamTerminal {
    fn eval(&self, counts: &[u32]) -> f64 {
        match &self.spec {
            TerminalSpec::Constant { value } => *value,
            TerminalSpec::Linear { level, slope } => level + slope * weighted_sum(counts, &self.mark_values),
            TerminalSpec::Clamped { level, slope, lo, hi } => {
                (level + slope * weighted_sum(counts, &self.mark_values)).clamp(*lo, *hi)
            }
            TerminalSpec::Indicator { threshold, above, below } => {
                if counts.iter().sum::<u32>() >= *threshold {
                    *above
                } else {
                    *below
                }
            }
        }
    }

    fn sup_bound(&self) -> Option<f64> {
        match &self.spec {
            TerminalSpec::Constant { value } => Some(value.abs()),
            TerminalSpec::Linear { slope, level } if *slope == 0.0 => Some(level.abs()),
            TerminalSpec::Linear { .. } => None,
            TerminalSpec::Clamped { lo, hi, .. } => Some(lo.abs().max(hi.abs())),
            TerminalSpec::Indicator { above, below, .. } => Some(above.abs().max(below.abs())),
        }
    }
}

/// Obstacle from a closure.
pub struct FnObstacle<F> {
    f: F,
    gammas: (f64, f64),
}

impl<F> FnObstacle<F>
where
    F: Fn(f64, &[u32], f64, &DiscreteLaw) -> Option<f64> + Send + Sync,
{
    pub fn new(gammas: (f64, f64), f: F) -> Self {
        FnObstacle { f, gammas }
    }
}

impl<F> Obstacle for FnObstacle<F>
where
    F: Fn(f64, &[u32], f64, &DiscreteLaw) -> Option<f64> + Send + Sync,
{
    fn eval(&self, t: f64, counts: &[u32], y: f64, mu: &DiscreteLaw) -> Option<f64> {
        (self.f)(t, counts, y, mu)
    }

    fn gammas(&self) -> (f64, f64) {
        self.gammas
    }
}

/// Terminal from a closure.
pub struct FnTerminal<F>(pub F);

impl<F> Terminal for FnTerminal<F>
where
    F: Fn(&[u32]) -> f64 + Send + Sync,
{
    fn eval(&self, counts: &[u32]) -> f64 {
        (self.0)(counts)
    }
}
