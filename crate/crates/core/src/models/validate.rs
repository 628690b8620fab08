//! Sampled checks of the standing assumptions on a concrete model.

use rand::Rng;
use serde::Serialize;

use super::driver::{j_lambda, u_norm, Convexity, Driver};
use super::obstacle::{Obstacle, Terminal};
use super::{ContractionParams, Framework, Model};
use crate::measures::{wasserstein, DiscreteLaw};
use crate::rng;

/// Absolute slack allowed in sampled inequalities.
const PROBE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Positive when the inequality holds with room to spare.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, margin: Option<f64>, detail: String) -> Self {
        Check { name: name.into(), passed, margin, detail }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub framework: Framework,
    pub probes: usize,
    pub seed: u64,
    pub lipschitz: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Largest observed `|Δf| / (|Δy| + ‖Δu‖ + W(μ₁, μ₂))`.
    pub observed_lipschitz: f64,
    pub convexity: Convexity,
    pub checks: Vec<Check>,
    pub contraction: Option<ContractionParams>,
    pub all_passed: bool,
}

impl ValidationReport {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn random_law<R: Rng>(rng: &mut R, scale: f64) -> DiscreteLaw {
    let k = rng.random_range(1..=4);
    DiscreteLaw::from_weighted((0..k).map(|_| (rng.random_range(-scale..scale), rng.random_range(0.05..1.0))))
        .expect("finite random law")
}

fn shifted(mu: &DiscreteLaw, d: f64) -> DiscreteLaw {
    DiscreteLaw::from_weighted(mu.atoms().iter().map(|x| x + d).zip(mu.probs().iter().copied())).expect("finite shift")
}

/// Probes the standing assumptions in the MPP framework, or their bounded
/// Poisson counterparts, on `probes` random points drawn from stream `seed`.
///
/// Failures are recorded as report entries; the function never errors.
pub fn validate_assumptions(model: &Model, probes: usize, seed: u64) -> ValidationReport {
    let mut rng = rng::stream(seed, 0);
    let order = model.framework.order();
    let weights = model.kernel.weights().to_vec();
    let m = weights.len();
    let driver = &model.driver;
    let obstacle = &model.obstacle;
    let cf = driver.lipschitz();
    let (g1, g2) = obstacle.gammas();
    let declared = model.config.driver.declared.clone().unwrap_or_default();
    let u_bound = declared.u_bound.unwrap_or(match &driver.family {
        super::DriverFamily::QuadraticExponential { u_bound, .. } => *u_bound,
        _ => 3.0,
    });
    let horizon = model.clock.horizon();
    let scale = 5.0;
    let mut checks = Vec::new();

    checks.push(Check::new(
        "clock",
        model.clock.total().is_finite(),
        None,
        format!("A continuous and nondecreasing by construction, A(T) = {}", model.clock.total()),
    ));

    // Lipschitz probes in (y, u, μ), including axis directions where the
    // linear families attain their constant.
    let mut worst_excess = f64::NEG_INFINITY;
    let mut observed: f64 = 0.0;
    for i in 0..probes {
        let t = rng.random_range(0.0..=horizon);
        let y1 = rng.random_range(-scale..scale);
        let u1: Vec<f64> = (0..m).map(|_| rng.random_range(-u_bound..u_bound)).collect();
        let mu1 = random_law(&mut rng, scale);
        let (y2, u2, mu2) = match i % 4 {
            0 => (rng.random_range(-scale..scale), u1.clone(), mu1.clone()),
            1 => {
                let d = rng.random_range(-1.0..1.0);
                (y1, u1.iter().map(|x| x + d).collect(), mu1.clone())
            }
            2 => (y1, u1.clone(), shifted(&mu1, rng.random_range(-2.0..2.0))),
            _ => (
                rng.random_range(-scale..scale),
                (0..m).map(|_| rng.random_range(-u_bound..u_bound)).collect(),
                random_law(&mut rng, scale),
            ),
        };
        let df = (driver.eval(t, y1, &u1, &mu1) - driver.eval(t, y2, &u2, &mu2)).abs();
        let du: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| a - b).collect();
        let dist = (y1 - y2).abs() + u_norm(&du, &weights) + wasserstein(&mu1, &mu2, order).unwrap_or(f64::NAN);
        if dist > 0.0 {
            observed = observed.max(df / dist);
        }
        worst_excess = worst_excess.max(df - cf * dist * (1.0 + PROBE_TOL) - PROBE_TOL);
    }
    checks.push(Check::new(
        "driver lipschitz",
        worst_excess <= 0.0,
        Some(-worst_excess),
        format!("declared constant {cf}, largest observed quotient {observed}"),
    ));

    // Growth envelope.
    let growth_lambda = declared.growth_lambda.unwrap_or(match &driver.family {
        super::DriverFamily::QuadraticExponential { lambda, .. } => *lambda,
        _ => 1.0,
    });
    let (alpha_a, beta_a) = driver.analytic_growth(growth_lambda);
    let alpha = declared.growth_alpha.unwrap_or(alpha_a);
    let beta = declared.growth_beta.unwrap_or(beta_a);
    let mut growth_excess = f64::NEG_INFINITY;
    if alpha.is_finite() && beta.is_finite() {
        for _ in 0..probes {
            let t = rng.random_range(0.0..=horizon);
            let y = rng.random_range(-scale..scale);
            let u: Vec<f64> = (0..m).map(|_| rng.random_range(-u_bound..u_bound)).collect();
            let neg: Vec<f64> = u.iter().map(|x| -x).collect();
            let mu = random_law(&mut rng, scale);
            let w = wasserstein(&mu, &DiscreteLaw::dirac(0.0), order).unwrap_or(f64::NAN);
            let f = driver.eval(t, y, &u, &mu);
            let env = alpha + beta * (y.abs() + w);
            let upper = j_lambda(growth_lambda, &u, &weights) / growth_lambda + env;
            let lower = -j_lambda(growth_lambda, &neg, &weights) / growth_lambda - env;
            growth_excess = growth_excess.max(f - upper).max(lower - f);
        }
    }
    checks.push(Check::new(
        "driver growth",
        alpha.is_finite() && beta.is_finite() && growth_excess <= PROBE_TOL,
        alpha.is_finite().then_some(-growth_excess),
        format!("alpha = {alpha}, beta = {beta}, lambda = {growth_lambda}"),
    ));

    // Convexity or concavity in u along random chords.
    let convexity = driver.convexity();
    let mut shape_excess: f64 = 0.0;
    for _ in 0..probes {
        let t = rng.random_range(0.0..=horizon);
        let y = rng.random_range(-scale..scale);
        let mu = random_law(&mut rng, scale);
        let a: Vec<f64> = (0..m).map(|_| rng.random_range(-u_bound..u_bound)).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.random_range(-u_bound..u_bound)).collect();
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, z)| 0.5 * (x + z)).collect();
        let chord = 0.5 * (driver.eval(t, y, &a, &mu) + driver.eval(t, y, &b, &mu));
        let fm = driver.eval(t, y, &mid, &mu);
        let gap = match convexity {
            Convexity::Convex => fm - chord,
            Convexity::Concave => chord - fm,
            Convexity::Affine => (fm - chord).abs(),
        };
        shape_excess = shape_excess.max(gap);
    }
    checks.push(Check::new(
        "driver convexity",
        shape_excess <= PROBE_TOL,
        Some(-shape_excess),
        format!("{convexity:?} in u"),
    ));

    // Obstacle Lipschitz probes.
    let mut h_excess = f64::NEG_INFINITY;
    for i in 0..probes {
        let t = rng.random_range(0.0..=horizon);
        let counts: Vec<u32> = (0..m).map(|_| rng.random_range(0..4)).collect();
        let y1 = rng.random_range(-scale..scale);
        let mu1 = random_law(&mut rng, scale);
        let (y2, mu2) = match i % 3 {
            0 => (rng.random_range(-scale..scale), mu1.clone()),
            1 => (y1, shifted(&mu1, rng.random_range(-2.0..2.0))),
            _ => (rng.random_range(-scale..scale), random_law(&mut rng, scale)),
        };
        if let (Some(a), Some(b)) = (obstacle.eval(t, &counts, y1, &mu1), obstacle.eval(t, &counts, y2, &mu2)) {
            let bound = g1 * (y1 - y2).abs() + g2 * wasserstein(&mu1, &mu2, order).unwrap_or(f64::NAN);
            h_excess = h_excess.max((a - b).abs() - bound * (1.0 + PROBE_TOL) - PROBE_TOL);
        }
    }
    let h_excess = if h_excess == f64::NEG_INFINITY { 0.0 } else { h_excess };
    checks.push(Check::new(
        "obstacle lipschitz",
        h_excess <= 0.0,
        Some(-h_excess),
        format!("gamma1 = {g1}, gamma2 = {g2}"),
    ));

    // Tree-based checks: h(t, 0, δ_0) on the grid and ξ ≥ h(T, ξ, L[ξ]).
    match model.tree() {
        Ok(tree) => {
            let d0 = DiscreteLaw::dirac(0.0);
            let mut h0_sup: f64 = 0.0;
            let mut h0_finite = true;
            for v in 0..tree.node_count() {
                if let Some(h) = obstacle.eval(tree.time_of(v), tree.counts(v, 0), 0.0, &d0) {
                    h0_finite &= h.is_finite();
                    h0_sup = h0_sup.max(h.abs());
                }
            }
            checks.push(Check::new(
                if model.framework == Framework::Mpp { "obstacle at zero" } else { "obstacle bounded" },
                h0_finite,
                None,
                format!("sup |h(t, 0, delta_0)| over the grid = {h0_sup}"),
            ));
            let xi: Vec<(f64, f64)> = tree.leaves().map(|v| (model.terminal.eval(tree.counts(v, 0)), tree.reach(v))).collect();
            let law = DiscreteLaw::from_weighted(xi.iter().copied());
            let mut dom_margin = f64::INFINITY;
            if let Ok(law) = law {
                for (v, (x, _)) in tree.leaves().zip(&xi) {
                    if let Some(h) = obstacle.eval(horizon, tree.counts(v, 0), *x, &law) {
                        dom_margin = dom_margin.min(x - h);
                    }
                }
            }
            checks.push(Check::new(
                "terminal dominates obstacle",
                dom_margin >= 0.0,
                dom_margin.is_finite().then_some(dom_margin),
                "xi >= h(T, xi, law of xi) on every leaf".into(),
            ));
            let p0 = (0..tree.steps()).map(|i| tree.branch_probs(i)[0]).fold(f64::INFINITY, f64::min);
            let max_da = tree.d_a().iter().copied().fold(0.0, f64::max);
            checks.push(Check::new(
                "grid",
                p0 > 0.0 && cf * max_da < 1.0,
                Some((1.0 - cf * max_da).min(p0)),
                format!("min no-jump probability {p0}, lipschitz * max dA = {}", cf * max_da),
            ));
        }
        Err(e) => checks.push(Check::new("grid", false, None, e.to_string())),
    }

    // Linear bound in u with C_0 = C_f.
    let mut h5_excess = f64::NEG_INFINITY;
    for _ in 0..probes {
        let t = rng.random_range(0.0..=horizon);
        let mu = random_law(&mut rng, scale);
        let u: Vec<f64> = (0..m).map(|_| rng.random_range(-u_bound..u_bound)).collect();
        let diff = driver.eval(t, 0.0, &u, &mu) - driver.eval(t, 0.0, &vec![0.0; m], &mu);
        let n = cf * u_norm(&u, &weights);
        let excess = match convexity {
            Convexity::Convex => -n - diff,
            Convexity::Concave => diff - n,
            Convexity::Affine => diff.abs() - n,
        };
        h5_excess = h5_excess.max(excess);
    }
    checks.push(Check::new("linear bound in u", h5_excess <= PROBE_TOL, Some(-h5_excess), format!("C_0 = {cf}")));

    // A_γ: coordinatewise secant slopes reproduce f(u1) − f(u2) exactly;
    // record their range relative to 1 ∧ |x_k|.
    let mut c_lo = f64::INFINITY;
    let mut c_hi = f64::NEG_INFINITY;
    let mut zero_scale_violation = false;
    for _ in 0..probes {
        let t = rng.random_range(0.0..=horizon);
        let y = rng.random_range(-u_bound..u_bound);
        let mu = random_law(&mut rng, scale);
        let u1: Vec<f64> = (0..m).map(|_| rng.random_range(-u_bound..u_bound)).collect();
        let u2: Vec<f64> = (0..m).map(|_| rng.random_range(-u_bound..u_bound)).collect();
        let mut z = u2.clone();
        let mut prev = driver.eval(t, y, &z, &mu);
        for k in 0..m {
            z[k] = u1[k];
            let next = driver.eval(t, y, &z, &mu);
            let du = u1[k] - u2[k];
            if weights[k] > 0.0 && du != 0.0 {
                let gamma = (next - prev) / (weights[k] * du);
                let s = model.marks.values[k].abs().min(1.0);
                if s == 0.0 {
                    zero_scale_violation |= gamma.abs() > PROBE_TOL;
                } else {
                    c_lo = c_lo.min(gamma / s);
                    c_hi = c_hi.max(gamma / s);
                }
            }
            prev = next;
        }
    }
    let (c1, c2) = if c_lo.is_finite() { (c_lo, c_hi.max(f64::MIN_POSITIVE)) } else { (0.0, f64::MIN_POSITIVE) };
    checks.push(Check::new(
        "A-gamma",
        c1 > -1.0 && !zero_scale_violation,
        Some(c1 + 1.0),
        format!("secant slopes within [{c1} (1 ^ |x|), {c2} (1 ^ |x|)] for |y|, |u| <= {u_bound}"),
    ));

    // Regime conditions.
    let q8 = g1 * g1 + g2 * g2;
    checks.push(Check::new(
        "convergence gamma condition",
        q8 < 0.125,
        Some(0.125 - q8),
        format!("gamma1^2 + gamma2^2 = {q8} against 1/8"),
    ));
    let contraction = model.contraction();
    match (&contraction, model.framework) {
        (Ok(p), Framework::Mpp) => checks.push(Check::new(
            "contraction regime",
            p.regime_margin > 0.0,
            Some(p.regime_margin),
            format!("gamma1^2 + gamma2^2 exp(2 beta A_T) = {} against 1/2", p.regime_quantity),
        )),
        (Ok(p), Framework::Poisson) => {
            let ps = p.poisson.as_ref().expect("poisson data present");
            checks.push(Check::new(
                "contraction regime",
                ps.factor < 1.0,
                Some(1.0 - ps.factor),
                format!("gamma1 + gamma2 + 2 lambda h = {} at h = {}", ps.factor, ps.h_step),
            ))
        }
        (Err(e), _) => {
            let margin = match e {
                crate::Error::Regime { margin, .. } => Some(*margin),
                _ => None,
            };
            checks.push(Check::new("contraction regime", false, margin, e.to_string()))
        }
    }
    if model.framework == Framework::Poisson {
        let d0 = DiscreteLaw::dirac(0.0);
        let f0 = (0..=16)
            .map(|i| driver.eval(horizon * i as f64 / 16.0, 0.0, &vec![0.0; m], &d0).abs())
            .fold(0.0, f64::max);
        checks.push(Check::new("driver bounded at zero", f0.is_finite(), None, format!("sup |f(t, 0, 0, delta_0)| = {f0}")));
        let bound = model.terminal.sup_bound();
        checks.push(Check::new(
            "terminal bounded",
            bound.is_some(),
            None,
            match bound {
                Some(b) => format!("|xi| <= {b}"),
                None => "terminal family is unbounded".into(),
            },
        ));
    }

    let all_passed = checks.iter().all(|c| c.passed);
    ValidationReport {
        framework: model.framework,
        probes,
        seed,
        lipschitz: cf,
        gamma1: g1,
        gamma2: g2,
        observed_lipschitz: observed,
        convexity,
        checks,
        contraction: contraction.ok(),
        all_passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{
        DriverFamily, DriverSpec, MeasureForm, ModelConfig, ObstacleFamily, ObstacleSpec, TerminalSpec,
    };
    use crate::mpp::{ClockSpec, IntensityKernel, TreeKind};

    fn model(driver: DriverFamily, gammas: (f64, f64)) -> Model {
        Model::new(ModelConfig {
            framework: Framework::Mpp,
            horizon: 1.0,
            steps: 8,
            tree: TreeKind::Recombining,
            marks: None,
            clock: ClockSpec::Identity,
            kernel: IntensityKernel::new(vec![0.4, 0.6]).unwrap(),
            driver: DriverSpec { family: driver, declared: None },
            obstacle: ObstacleSpec {
                family: ObstacleFamily::Linear {
                    level: -2.0,
                    slope_t: 0.0,
                    slope_x: 0.0,
                    gamma_y: gammas.0,
                    gamma_m: gammas.1,
                    measure: MeasureForm::Mean,
                },
                gamma1: None,
                gamma2: None,
            },
            terminal: TerminalSpec::Clamped { level: 0.0, slope: 0.5, lo: 0.0, hi: 2.0 },
        })
        .unwrap()
    }

    #[test]
    fn linear_driver_passes_tightly() {
        let m = model(DriverFamily::Linear { a: 0.3, b: 0.5, c: -0.2, d: 0.1, measure: MeasureForm::Mean }, (0.2, 0.2));
        let r = validate_assumptions(&m, 2000, 1);
        assert!(r.all_passed, "{:#?}", r.checks);
        assert!((r.observed_lipschitz - r.lipschitz).abs() < 1e-9, "{} vs {}", r.observed_lipschitz, r.lipschitz);
        let c = r.check("convergence gamma condition").unwrap();
        assert!((c.margin.unwrap() - 0.045).abs() < 1e-15);
    }

    #[test]
    fn out_of_regime_gammas_are_flagged() {
        let m = model(DriverFamily::Linear { a: 0.0, b: 0.0, c: 0.0, d: 0.0, measure: MeasureForm::Mean }, (0.3, 0.3));
        let r = validate_assumptions(&m, 100, 2);
        let c = r.check("convergence gamma condition").unwrap();
        assert!(!c.passed);
        assert!((c.margin.unwrap() + 0.055).abs() < 1e-12);
        assert!(!r.all_passed);
    }

    #[test]
    fn understated_constant_is_caught() {
        let mut cfg = model(DriverFamily::Linear { a: 1.0, b: 0.0, c: 0.0, d: 0.0, measure: MeasureForm::Mean }, (0.0, 0.0)).config;
        cfg.driver.declared = Some(crate::models::DeclaredDriverConstants { lipschitz: Some(0.5), ..Default::default() });
        let r = validate_assumptions(&Model::new(cfg).unwrap(), 200, 3);
        assert!(!r.check("driver lipschitz").unwrap().passed);
    }

    #[test]
    fn other_families_pass() {
        for fam in [
            DriverFamily::LipschitzSaturated { a: 0.4, b: 0.6, cap: 1.0, c: 0.3, d: 0.2, measure: MeasureForm::Distance },
            DriverFamily::QuadraticExponential {
                a: 0.2,
                c: 0.1,
                d: 0.0,
                theta: 0.5,
                lambda: 1.0,
                u_bound: 1.0,
                measure: MeasureForm::Mean,
            },
        ] {
            let r = validate_assumptions(&model(fam, (0.1, 0.1)), 1000, 4);
            assert!(r.all_passed, "{:#?}", r.checks);
        }
    }
}
