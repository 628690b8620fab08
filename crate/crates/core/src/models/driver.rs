//! Drivers `f(t, y, u, μ)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{wasserstein, DiscreteLaw};

/// A BSDE driver evaluated at `(t, y, u, μ)` where `u[k]` is the jump size
/// for mark `k`.
pub trait Driver: Send + Sync {
    fn eval(&self, t: f64, y: f64, u: &[f64], mu: &DiscreteLaw) -> f64;

    /// Lipschitz constant in `(y, u, μ)` with `‖u‖_t = (Σ φ_k u_k²)^{1/2}`.
    fn lipschitz(&self) -> f64;
}

/// How a driver or obstacle reads the law argument.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureForm {
    /// The mean of `μ`.
    #[default]
    Mean,
    /// `W_p(μ, δ_0)` with the framework's order `p`.
    Distance,
}

impl MeasureForm {
    pub fn apply(self, mu: &DiscreteLaw, order: u32) -> f64 {
        match self {
            MeasureForm::Mean => mu.mean(),
            MeasureForm::Distance => {
                wasserstein(mu, &DiscreteLaw::dirac(0.0), order).expect("order validated at construction")
            }
        }
    }
}

/// Configured driver families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriverFamily {
    /// `a y + b Σ φ_k u_k + c m(μ) + d`.
    Linear {
        #[serde(default)]
        a: f64,
        #[serde(default)]
        b: f64,
        #[serde(default)]
        c: f64,
        #[serde(default)]
        d: f64,
        #[serde(default)]
        measure: MeasureForm,
    },
    /// `a tanh(y) + b min(Σ φ_k u_k, cap) + c m(μ) + d`.
    LipschitzSaturated {
        #[serde(default)]
        a: f64,
        #[serde(default)]
        b: f64,
        cap: f64,
        #[serde(default)]
        c: f64,
        #[serde(default)]
        d: f64,
        #[serde(default = "distance_form")]
        measure: MeasureForm,
    },
    /// `a y + c m(μ) + d + (θ/λ) j_λ(clamp(u, −M, M))` with `θ ∈ [0, 1]`.
    QuadraticExponential {
        #[serde(default)]
        a: f64,
        #[serde(default)]
        c: f64,
        #[serde(default)]
        d: f64,
        theta: f64,
        lambda: f64,
        u_bound: f64,
        #[serde(default)]
        measure: MeasureForm,
    },
}

fn distance_form() -> MeasureForm {
    MeasureForm::Distance
}

/// Driver section of a model file: family plus optional declared constants.
///
/// Unknown keys are rejected by the flattened family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverSpec {
    #[serde(flatten)]
    pub family: DriverFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared: Option<DeclaredDriverConstants>,
}

/// Constants a user may assert instead of the analytic defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredDriverConstants {
    /// `C_f` (or `λ` in the Poisson framework).
    pub lipschitz: Option<f64>,
    /// Bound on `α_t` in the growth envelope.
    pub growth_alpha: Option<f64>,
    /// `β` in the growth envelope.
    pub growth_beta: Option<f64>,
    /// `λ` inside `j_λ` in the growth envelope.
    pub growth_lambda: Option<f64>,
    /// Bound `M` used by the jump-comparison probe.
    pub u_bound: Option<f64>,
}

/// `j_λ(u) = Σ_k φ_k (e^{λ u_k} − λ u_k − 1)`.
pub fn j_lambda(lambda: f64, u: &[f64], weights: &[f64]) -> f64 {
    u.iter()
        .zip(weights)
        .map(|(&x, &w)| {
            let z = lambda * x;
            // expm1 keeps the difference accurate near zero.
            w * (z.exp_m1() - z)
        })
        .sum()
}

/// `‖u‖_t = (Σ_k φ_k u_k²)^{1/2}`.
pub fn u_norm(u: &[f64], weights: &[f64]) -> f64 {
    u.iter().zip(weights).map(|(x, w)| w * x * x).sum::<f64>().sqrt()
}

/// Runtime driver built from a [`DriverSpec`] and the intensity weights.
#[derive(Clone, Debug)]
pub struct ParamDriver {
    pub family: DriverFamily,
    weights: Vec<f64>,
    order: u32,
    lipschitz: f64,
    analytic_lipschitz: f64,
}

impl ParamDriver {
    pub fn new(spec: &DriverSpec, weights: &[f64], order: u32) -> Result<Self> {
        let phi = weights.iter().sum::<f64>();
        let analytic = match &spec.family {
            DriverFamily::Linear { a, b, c, d, .. } => {
                finite(&[*a, *b, *c, *d])?;
                a.abs().max(b.abs() * phi.sqrt()).max(c.abs())
            }
            DriverFamily::LipschitzSaturated { a, b, cap, c, d, .. } => {
                finite(&[*a, *b, *cap, *c, *d])?;
                a.abs().max(b.abs() * phi.sqrt()).max(c.abs())
            }
            DriverFamily::QuadraticExponential { a, c, d, theta, lambda, u_bound, .. } => {
                finite(&[*a, *c, *d, *theta, *lambda, *u_bound])?;
                if !(0.0..=1.0).contains(theta) {
                    return Err(Error::Config(format!("theta must lie in [0, 1], got {theta}")));
                }
                if *lambda <= 0.0 || *u_bound <= 0.0 {
                    return Err(Error::Config("lambda and u_bound must be positive".into()));
                }
                let lu = theta * (lambda * u_bound).exp_m1() * phi.sqrt();
                a.abs().max(lu).max(c.abs())
            }
        };
        let lipschitz = match spec.declared.as_ref().and_then(|d| d.lipschitz) {
            Some(l) if !(l.is_finite() && l >= 0.0) => {
                return Err(Error::Config(format!("declared lipschitz constant must be nonnegative, got {l}")))
            }
            Some(l) => l,
            None => analytic,
        };
        Ok(ParamDriver { family: spec.family.clone(), weights: weights.to_vec(), order, lipschitz, analytic_lipschitz: analytic })
    }

    pub fn analytic_lipschitz(&self) -> f64 {
        self.analytic_lipschitz
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Shape of `u ↦ f`.
    pub fn convexity(&self) -> Convexity {
        match &self.family {
            DriverFamily::Linear { .. } => Convexity::Affine,
            DriverFamily::LipschitzSaturated { b, .. } if *b == 0.0 => Convexity::Affine,
            DriverFamily::LipschitzSaturated { b, .. } if *b > 0.0 => Convexity::Concave,
            DriverFamily::LipschitzSaturated { .. } => Convexity::Convex,
            DriverFamily::QuadraticExponential { theta, .. } if *theta == 0.0 => Convexity::Affine,
            DriverFamily::QuadraticExponential { .. } => Convexity::Convex,
        }
    }

    /// Analytic `(α, β)` such that `−j_λ(−u)/λ − α − β(|y| + W_p(μ, δ_0)) ≤ f ≤ j_λ(u)/λ + α + β(|y| + W_p(μ, δ_0))`.
    pub fn analytic_growth(&self, growth_lambda: f64) -> (f64, f64) {
        let phi: f64 = self.weights.iter().sum();
        // sup_x { b x − (e^{λx} − λx − 1)/λ } = ((1+b) ln(1+b) − b)/λ for b > −1.
        let lin = |b: f64| {
            if b <= -1.0 {
                f64::INFINITY
            } else if b == 0.0 {
                0.0
            } else {
                ((1.0 + b) * (1.0 + b).ln() - b) / growth_lambda
            }
        };
        match &self.family {
            DriverFamily::Linear { a, b, c, d, .. } => (d.abs() + phi * lin(*b), a.abs().max(c.abs())),
            DriverFamily::LipschitzSaturated { a, b, cap, c, d, .. } => {
                (d.abs() + phi * lin(*b) + (b * cap).abs(), a.abs().max(c.abs()))
            }
            DriverFamily::QuadraticExponential { a, c, d, lambda, .. } => {
                // (1/λ) j_λ is increasing in λ, and clamping u only lowers j.
                let extra = if *lambda <= growth_lambda { 0.0 } else { f64::INFINITY };
                (d.abs() + extra, a.abs().max(c.abs()))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convexity {
    Affine,
    Convex,
    Concave,
}

fn finite(xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Config("driver coefficients must be finite".into()))
    }
}

impl Driver for ParamDriver {
    fn eval(&self, _t: f64, y: f64, u: &[f64], mu: &DiscreteLaw) -> f64 {
        match &self.family {
            DriverFamily::Linear { a, b, c, d, measure } => {
                let su: f64 = u.iter().zip(&self.weights).map(|(x, w)| x * w).sum();
                a * y + b * su + c * measure.apply(mu, self.order) + d
            }
            DriverFamily::LipschitzSaturated { a, b, cap, c, d, measure } => {
                let su: f64 = u.iter().zip(&self.weights).map(|(x, w)| x * w).sum();
                a * y.tanh() + b * su.min(*cap) + c * measure.apply(mu, self.order) + d
            }
            DriverFamily::QuadraticExponential { a, c, d, theta, lambda, u_bound, measure } => {
                let clamped: Vec<f64> = u.iter().map(|x| x.clamp(-u_bound, *u_bound)).collect();
                a * y + c * measure.apply(mu, self.order) + d + theta / lambda * j_lambda(*lambda, &clamped, &self.weights)
            }
        }
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
}

/// Driver from a closure, for tests and ad hoc experiments.
pub struct FnDriver<F> {
    f: F,
    lipschitz: f64,
}

impl<F> FnDriver<F>
where
    F: Fn(f64, f64, &[f64], &DiscreteLaw) -> f64 + Send + Sync,
{
    pub fn new(lipschitz: f64, f: F) -> Self {
        FnDriver { f, lipschitz }
    }
}

impl<F> Driver for FnDriver<F>
where
    F: Fn(f64, f64, &[f64], &DiscreteLaw) -> f64 + Send + Sync,
{
    fn eval(&self, t: f64, y: f64, u: &[f64], mu: &DiscreteLaw) -> f64 {
        (self.f)(t, y, u, mu)
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
}

/// The zero driver.
pub struct ZeroDriver;

impl Driver for ZeroDriver {
    fn eval(&self, _: f64, _: f64, _: &[f64], _: &DiscreteLaw) -> f64 {
        0.0
    }

    fn lipschitz(&self) -> f64 {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(family: DriverFamily) -> DriverSpec {
        DriverSpec { family, declared: None }
    }

    #[test]
    fn linear_driver_and_constant() {
        let d = ParamDriver::new(
            &spec(DriverFamily::Linear { a: 0.5, b: -2.0, c: 0.25, d: 1.0, measure: MeasureForm::Mean }),
            &[0.25],
            2,
        )
        .unwrap();
        let mu = DiscreteLaw::uniform(&[1.0, 3.0]).unwrap();
        assert_eq!(d.eval(0.0, 2.0, &[4.0], &mu), 0.5 * 2.0 - 2.0 * 0.25 * 4.0 + 0.25 * 2.0 + 1.0);
        assert_eq!(d.lipschitz(), 1.0);
    }

    #[test]
    fn declared_constant_overrides() {
        let mut s = spec(DriverFamily::Linear { a: 0.5, b: 0.0, c: 0.0, d: 0.0, measure: MeasureForm::Mean });
        s.declared = Some(DeclaredDriverConstants { lipschitz: Some(2.0), ..Default::default() });
        let d = ParamDriver::new(&s, &[1.0], 2).unwrap();
        assert_eq!(d.lipschitz(), 2.0);
        assert_eq!(d.analytic_lipschitz(), 0.5);
    }

    #[test]
    fn quadratic_requires_theta_in_unit_interval() {
        let s = spec(DriverFamily::QuadraticExponential {
            a: 0.0,
            c: 0.0,
            d: 0.0,
            theta: 1.5,
            lambda: 1.0,
            u_bound: 1.0,
            measure: MeasureForm::Mean,
        });
        assert!(ParamDriver::new(&s, &[1.0], 1).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let s: DriverSpec = toml::from_str("family = \"lipschitz-saturated\"\na = 0.2\nb = 0.5\ncap = 1.0\n").unwrap();
        assert!(matches!(s.family, DriverFamily::LipschitzSaturated { measure: MeasureForm::Distance, .. }));
        assert!(toml::from_str::<DriverSpec>("family = \"linear\"\nbogus = 1\n").is_err());
    }

    proptest! {
        #[test]
        fn j_lambda_nonnegative_and_zero_only_at_zero(
            u in prop::collection::vec(-3.0f64..3.0, 1..5),
            lambda in 0.1f64..3.0,
        ) {
            let w: Vec<f64> = (0..u.len()).map(|k| 0.5 + k as f64).collect();
            let j = j_lambda(lambda, &u, &w);
            prop_assert!(j >= 0.0);
            if u.iter().any(|x| *x != 0.0) {
                prop_assert!(j > 0.0);
            }
            prop_assert_eq!(j_lambda(lambda, &vec![0.0; u.len()], &w), 0.0);
        }
    }
}
