//! Constants of the fixed-point construction: `η`, `β`, the admissible step
//! and the contraction factor of the Picard map.

use serde::Serialize;

use super::Framework;
use crate::error::{Error, Result};
use crate::mpp::Clock;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractionParams {
    pub framework: Framework,
    pub lipschitz: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// `η = 1/C_f²`, absent when `C_f = 0`.
    pub eta: Option<f64>,
    /// `η C_f²`: 1 when `C_f > 0`, 0 otherwise.
    pub eta_cf2: f64,
    /// `β = C_f + 1/η`.
    pub beta: f64,
    /// `A(T)`.
    pub a_total: f64,
    pub horizon: f64,
    /// `γ₁² + γ₂² e^{2βA(T)}`.
    pub regime_quantity: f64,
    /// `1/2 − regime_quantity`.
    pub regime_margin: f64,
    /// `1/8 − (γ₁² + γ₂²)`.
    pub chaos_margin: f64,
    /// Largest admissible interval length (capped at the horizon).
    pub h_step: f64,
    /// Contraction factor on `[T − h_step, T]`.
    pub alpha: f64,
    /// Contraction factor on the whole horizon.
    pub alpha_full: f64,
    /// Sup-norm data of the bounded (Poisson) construction.
    pub poisson: Option<PoissonStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoissonStep {
    /// `(1 − γ₁ − γ₂) / (2λ)`; absent when `λ = 0`.
    pub step_bound: Option<f64>,
    /// Interval length used for stitching (strictly inside the bound, capped at `T`).
    pub h_step: f64,
    /// `γ₁ + γ₂ + 2λ h` at `h = h_step`.
    pub factor: f64,
    /// `γ₁ + γ₂ + 2λ T`.
    pub factor_full: f64,
}

impl ContractionParams {
    /// `η C_f² ∫_{a_lo}^{a_hi} e^{2βa} da + 2(γ₁² + γ₂² e^{2βA(T)})`.
    pub fn alpha_between(&self, a_lo: f64, a_hi: f64) -> f64 {
        self.eta_cf2 * exp_integral(self.beta, a_lo, a_hi) + 2.0 * self.regime_quantity
    }

    /// Sup-norm factor `γ₁ + γ₂ + 2λ h`.
    pub fn poisson_factor(&self, h: f64) -> f64 {
        self.gamma1 + self.gamma2 + 2.0 * self.lipschitz * h
    }
}

/// `∫_{a}^{b} e^{2βs} ds`.
pub fn exp_integral(beta: f64, a: f64, b: f64) -> f64 {
    if beta == 0.0 {
        b - a
    } else {
        ((2.0 * beta * b).exp() - (2.0 * beta * a).exp()) / (2.0 * beta)
    }
}

/// Computes the constants from `C_f`, `(γ₁, γ₂)` and the clock.
///
/// Refuses when `γ₁² + γ₂² e^{2βA(T)} ≥ 1/2` (MPP framework) or
/// `γ₁ + γ₂ ≥ 1` (Poisson framework).
pub fn contraction_params(framework: Framework, lipschitz: f64, gammas: (f64, f64), clock: &Clock) -> Result<ContractionParams> {
    let (g1, g2) = gammas;
    let cf = lipschitz;
    let (eta, eta_cf2) = if cf > 0.0 { (Some(1.0 / (cf * cf)), 1.0) } else { (None, 0.0) };
    let beta = cf + cf * cf;
    let horizon = clock.horizon();
    let a_total = clock.total();
    let regime_quantity = g1 * g1 + g2 * g2 * (2.0 * beta * a_total).exp();
    let regime_margin = 0.5 - regime_quantity;
    let chaos_margin = 0.125 - (g1 * g1 + g2 * g2);

    let poisson = if framework == Framework::Poisson {
        let slack = 1.0 - g1 - g2;
        if slack <= 0.0 {
            return Err(Error::Regime { condition: "gamma1 + gamma2 < 1".into(), margin: slack });
        }
        let step_bound = (cf > 0.0).then(|| slack / (2.0 * cf));
        let h = match step_bound {
            Some(b) if b <= horizon => b * (1.0 - 1e-9),
            _ => horizon,
        };
        Some(PoissonStep {
            step_bound,
            h_step: h,
            factor: g1 + g2 + 2.0 * cf * h,
            factor_full: g1 + g2 + 2.0 * cf * horizon,
        })
    } else {
        if regime_margin <= 0.0 {
            return Err(Error::Regime {
                condition: "gamma1^2 + gamma2^2 exp(2 beta A_T) < 1/2".into(),
                margin: regime_margin,
            });
        }
        None
    };

    let mut params = ContractionParams {
        framework,
        lipschitz: cf,
        gamma1: g1,
        gamma2: g2,
        eta,
        eta_cf2,
        beta,
        a_total,
        horizon,
        regime_quantity,
        regime_margin,
        chaos_margin,
        h_step: horizon,
        alpha: 0.0,
        alpha_full: 0.0,
        poisson,
    };
    let alpha_of = |h: f64| eta_cf2 * exp_integral(beta, clock.eval(horizon - h), a_total) + 2.0 * regime_quantity;
    params.alpha_full = alpha_of(horizon);
    if params.alpha_full >= 1.0 && regime_margin > 0.0 {
        // α(0) = 2·regime_quantity < 1 and α increases with h.
        let (mut lo, mut hi) = (0.0, horizon);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if alpha_of(mid) < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * horizon {
                break;
            }
        }
        params.h_step = lo;
    }
    params.alpha = alpha_of(params.h_step);
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpp::ClockSpec;
    use proptest::prelude::*;

    #[test]
    fn unit_lipschitz_identity_clock() {
        let clock = Clock::identity(0.25).unwrap();
        let p = contraction_params(Framework::Mpp, 1.0, (0.0, 0.0), &clock).unwrap();
        assert_eq!(p.eta, Some(1.0));
        assert_eq!(p.beta, 2.0);
        let expect = (1f64 - (-1f64).exp()) / 4.0 * 1f64.exp();
        assert!((p.alpha_full - expect).abs() < 1e-14);
        assert!(p.alpha_full < 1.0);
        assert_eq!(p.h_step, 0.25);
        for h in [0.05, 0.1, 0.2] {
            let a = p.alpha_between(clock.eval(0.25 - h), 0.25);
            assert!((a - ((1.0f64).exp() - (4.0 * (0.25 - h)).exp()) / 4.0).abs() < 1e-14);
        }
    }

    #[test]
    fn long_horizon_is_bisected() {
        let clock = Clock::identity(2.0).unwrap();
        let p = contraction_params(Framework::Mpp, 1.0, (0.1, 0.0), &clock).unwrap();
        assert!(p.h_step < 2.0);
        assert!(p.alpha < 1.0);
        let just_above = p.alpha_between(clock.eval(2.0 - p.h_step - 1e-9), 2.0);
        assert!(just_above >= 1.0 - 1e-6);
    }

    #[test]
    fn driver_free_case() {
        let clock = Clock::identity(3.0).unwrap();
        let p = contraction_params(Framework::Mpp, 0.0, (0.3, 0.2), &clock).unwrap();
        assert_eq!(p.beta, 0.0);
        assert_eq!(p.eta, None);
        assert!((p.alpha_full - 2.0 * (0.09 + 0.04)).abs() < 1e-15);
        assert_eq!(p.h_step, 3.0);
    }

    #[test]
    fn poisson_step() {
        let clock = Clock::identity(1.0).unwrap();
        let p = contraction_params(Framework::Poisson, 1.0, (0.0, 0.0), &clock).unwrap();
        let ps = p.poisson.unwrap();
        assert_eq!(ps.step_bound, Some(0.5));
        assert!(ps.h_step < 0.5 && ps.factor < 1.0);
        assert_eq!(ps.factor_full, 2.0);
    }

    #[test]
    fn regime_refusal_and_margins() {
        let clock = Clock::identity(1.0).unwrap();
        let err = contraction_params(Framework::Mpp, 0.0, (0.8, 0.0), &clock).unwrap_err();
        assert!(matches!(err, Error::Regime { margin, .. } if (margin + 0.14).abs() < 1e-12));
        let p = contraction_params(Framework::Mpp, 0.0, (0.3, 0.3), &clock).unwrap();
        assert!((p.chaos_margin + 0.055).abs() < 1e-15);
        let p = contraction_params(Framework::Mpp, 0.0, (0.2, 0.2), &clock).unwrap();
        assert!((p.chaos_margin - 0.045).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn step_is_monotone_in_gammas(
            cf in 0.0f64..3.0,
            g1 in 0.0f64..0.4,
            g2 in 0.0f64..0.3,
            d1 in 0.0f64..0.1,
            d2 in 0.0f64..0.1,
            horizon in 0.1f64..3.0,
        ) {
            let clock = Clock::new(
                ClockSpec::PiecewiseLinear { times: vec![0.0, horizon], values: vec![0.0, 0.3 * horizon] },
                horizon,
            ).unwrap();
            let base = contraction_params(Framework::Mpp, cf, (g1, g2), &clock);
            let more = contraction_params(Framework::Mpp, cf, (g1 + d1, g2 + d2), &clock);
            if let (Ok(b), Ok(m)) = (base, more) {
                prop_assert!(m.h_step <= b.h_step);
            }
        }
    }
}
