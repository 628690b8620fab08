//! Deterministic compensator clocks `t ↦ A(t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serialized description of a clock.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ClockSpec {
    /// `A(t) = t` (the Poisson framework).
    Identity,
    /// Linear interpolation of a monotone table.
    PiecewiseLinear { times: Vec<f64>, values: Vec<f64> },
    /// Shape-preserving (Fritsch–Carlson) cubic interpolation of a monotone table.
    MonotoneCubic { times: Vec<f64>, values: Vec<f64> },
}

#[derive(Clone, Debug)]
enum Repr {
    Identity,
    Linear { times: Vec<f64>, values: Vec<f64> },
    Cubic { times: Vec<f64>, values: Vec<f64>, slopes: Vec<f64> },
}

/// A validated clock on `[0, horizon]`: continuous, nondecreasing, `A(0) = 0`.
#[derive(Clone, Debug)]
pub struct Clock {
    repr: Repr,
    horizon: f64,
    spec: ClockSpec,
}

impl Clock {
    pub fn identity(horizon: f64) -> Result<Self> {
        Self::new(ClockSpec::Identity, horizon)
    }

    pub fn new(spec: ClockSpec, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive and finite, got {horizon}")));
        }
        let repr = match &spec {
            ClockSpec::Identity => Repr::Identity,
            ClockSpec::PiecewiseLinear { times, values } => {
                check_table(times, values, horizon)?;
                Repr::Linear { times: times.clone(), values: values.clone() }
            }
            ClockSpec::MonotoneCubic { times, values } => {
                check_table(times, values, horizon)?;
                Repr::Cubic {
                    times: times.clone(),
                    values: values.clone(),
                    slopes: pchip_slopes(times, values),
                }
            }
        };
        Ok(Clock { repr, horizon, spec })
    }

    pub fn spec(&self) -> &ClockSpec {
        &self.spec
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.repr, Repr::Identity)
    }

    /// `A(t)`, with `t` clamped to `[0, horizon]`.
    pub fn eval(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.horizon);
        match &self.repr {
            Repr::Identity => t,
            Repr::Linear { times, values } => {
                let k = segment(times, t);
                let w = (t - times[k]) / (times[k + 1] - times[k]);
                values[k] + w * (values[k + 1] - values[k])
            }
            Repr::Cubic { times, values, slopes } => {
                let k = segment(times, t);
                let h = times[k + 1] - times[k];
                let s = (t - times[k]) / h;
                let s2 = s * s;
                let s3 = s2 * s;
                let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
                let h10 = s3 - 2.0 * s2 + s;
                let h01 = -2.0 * s3 + 3.0 * s2;
                let h11 = s3 - s2;
                h00 * values[k] + h10 * h * slopes[k] + h01 * values[k + 1] + h11 * h * slopes[k + 1]
            }
        }
    }

    /// `A(T)`.
    pub fn total(&self) -> f64 {
        self.eval(self.horizon)
    }

    /// Generalized inverse `inf { t : A(t) >= s }`; `None` when `s > A(T)`.
    pub fn inverse(&self, s: f64) -> Option<f64> {
        if s <= 0.0 {
            return Some(0.0);
        }
        if s > self.total() {
            return None;
        }
        match &self.repr {
            Repr::Identity => Some(s),
            Repr::Linear { times, values } => {
                let k = values.partition_point(|&v| v < s).max(1) - 1;
                let (v0, v1) = (values[k], values[k + 1]);
                if v1 <= v0 {
                    return Some(times[k + 1].min(self.horizon));
                }
                Some((times[k] + (s - v0) / (v1 - v0) * (times[k + 1] - times[k])).min(self.horizon))
            }
            Repr::Cubic { .. } => {
                let (mut lo, mut hi) = (0.0, self.horizon);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.eval(mid) >= s {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                    if hi - lo <= f64::EPSILON * self.horizon {
                        break;
                    }
                }
                Some(hi)
            }
        }
    }
}

fn check_table(times: &[f64], values: &[f64], horizon: f64) -> Result<()> {
    if times.len() != values.len() || times.len() < 2 {
        return Err(Error::Config(format!(
            "clock table needs matching times/values with at least 2 entries (got {} and {})",
            times.len(),
            values.len()
        )));
    }
    if times.iter().chain(values).any(|x| !x.is_finite()) {
        return Err(Error::Config("clock table contains non-finite entries".into()));
    }
    if times[0] != 0.0 || values[0] != 0.0 {
        return Err(Error::Config("clock table must start at (0, 0)".into()));
    }
    if let Some(k) = times.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("clock times not strictly increasing at index {}", k + 1)));
    }
    if let Some(k) = values.windows(2).position(|w| w[1] < w[0]) {
        return Err(Error::Config(format!("clock values decrease at index {}: table must be monotone", k + 1)));
    }
    if *times.last().unwrap() < horizon {
        return Err(Error::Config(format!(
            "clock table ends at {} before the horizon {horizon}",
            times.last().unwrap()
        )));
    }
    Ok(())
}

fn segment(times: &[f64], t: f64) -> usize {
    let k = times.partition_point(|&x| x <= t);
    k.clamp(1, times.len() - 1) - 1
}

/// Fritsch–Carlson derivative estimates (the PCHIP recipe).
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    if n == 2 {
        return vec![delta[0]; 2];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        if delta[k - 1] * delta[k] > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
        }
    }
    d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() || d0 == 0.0 {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}
