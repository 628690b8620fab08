//! Seeded random models for benchmarks and property checks.
//!
//! Every sampled model satisfies `ξ ≥ h(T, ξ, L[ξ])` on the tree (the
//! obstacle level is shifted down after the other coefficients are drawn)
//! and `C_f · max ΔA ≤ 1/2` (the driver is scaled down when needed).

use std::ops::RangeInclusive;

use rand::Rng;

use super::driver::{Driver, DriverFamily, DriverSpec, MeasureForm};
use super::obstacle::{Obstacle, ObstacleFamily, ObstacleSpec, Terminal, TerminalSpec};
use super::{Framework, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::measures::DiscreteLaw;
use crate::mpp::{uniform_grid, ClockSpec, IntensityKernel, TreeKind};
use crate::rng;

const SAMPLE_STREAM: u64 = 0x5a4d;
const MAX_IMPLICIT_FACTOR: f64 = 0.5;
const MAX_JUMP_PROBABILITY: f64 = 0.9;

#[derive(Clone, Debug)]
pub struct SampleOptions {
    pub framework: Framework,
    pub tree: TreeKind,
    pub steps: RangeInclusive<usize>,
    pub marks: RangeInclusive<usize>,
    /// Upper bound for each of `γ_y` and the measure coefficient.
    pub max_gamma: f64,
    /// Draw saturated and exponential drivers and Wasserstein-shift
    /// obstacles as well as the linear families.
    pub nonlinear: bool,
    /// Number of sources the model must support on a joint tree: the
    /// intensity is scaled down so that `sources · φ_tot · max ΔA ≤ 0.9`.
    pub sources: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            framework: Framework::Mpp,
            tree: TreeKind::Recombining,
            steps: 4..=10,
            marks: 1..=2,
            max_gamma: 0.25,
            nonlinear: true,
            sources: 1,
        }
    }
}

fn draw<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// The model number `seed` of the family described by `opts`.
pub fn random_model(seed: u64, opts: &SampleOptions) -> Result<Model> {
    if opts.steps.is_empty() || opts.marks.is_empty() || *opts.marks.start() == 0 || opts.sources == 0 {
        return Err(Error::Config("sample options need nonempty step and mark ranges".into()));
    }
    if !(opts.max_gamma > 0.0 && opts.max_gamma.is_finite()) {
        return Err(Error::Config(format!("max_gamma must be positive, got {}", opts.max_gamma)));
    }
    let mut r = rng::stream(seed, SAMPLE_STREAM);
    let m = r.random_range(opts.marks.clone());
    let weights: Vec<f64> = (0..m).map(|_| draw(&mut r, 0.3, 1.5)).collect();
    let horizon = draw(&mut r, 0.3, 1.0);
    let steps = r.random_range(opts.steps.clone());
    let clock = match opts.framework {
        Framework::Poisson => ClockSpec::Identity,
        Framework::Mpp => {
            let mid = draw(&mut r, 0.2, 0.8) * horizon;
            let a1 = draw(&mut r, 0.2, 1.2) * mid;
            let a2 = a1 + draw(&mut r, 0.2, 1.2) * (horizon - mid);
            ClockSpec::PiecewiseLinear { times: vec![0.0, mid, horizon], values: vec![0.0, a1, a2] }
        }
    };
    let family = if opts.nonlinear { r.random_range(0..3) } else { 0 };
    let measure = if r.random_bool(0.5) { MeasureForm::Mean } else { MeasureForm::Distance };
    let driver = match family {
        0 => DriverFamily::Linear {
            a: draw(&mut r, -0.8, 0.8),
            b: draw(&mut r, -0.5, 0.5),
            c: draw(&mut r, -0.8, 0.8),
            d: draw(&mut r, -0.3, 0.3),
            measure,
        },
        1 => DriverFamily::LipschitzSaturated {
            a: draw(&mut r, -0.8, 0.8),
            b: draw(&mut r, -0.5, 0.5),
            cap: draw(&mut r, 0.1, 1.0),
            c: draw(&mut r, -0.8, 0.8),
            d: draw(&mut r, -0.3, 0.3),
            measure,
        },
        _ => DriverFamily::QuadraticExponential {
            a: draw(&mut r, -0.8, 0.8),
            c: draw(&mut r, -0.8, 0.8),
            d: draw(&mut r, -0.3, 0.3),
            theta: draw(&mut r, 0.0, 1.0),
            lambda: draw(&mut r, 0.5, 2.0),
            u_bound: 2.0,
            measure,
        },
    };
    let gamma_y = draw(&mut r, 0.0, opts.max_gamma);
    let gamma_m = draw(&mut r, 0.0, opts.max_gamma);
    // Mostly decreasing in time so that the obstacle binds before T.
    let slope_t = draw(&mut r, -1.2, 0.3);
    let slope_x = draw(&mut r, -0.2, 0.2);
    let wasserstein = opts.nonlinear && r.random_bool(0.3);
    let obstacle_at = |level: f64| {
        let family = if wasserstein {
            ObstacleFamily::WassersteinShift { level, slope_t, slope_x, gamma_y, gamma_w: gamma_m }
        } else {
            ObstacleFamily::Linear { level, slope_t, slope_x, gamma_y, gamma_m, measure: MeasureForm::Mean }
        };
        ObstacleSpec { family, gamma1: None, gamma2: None }
    };
    let terminal = if r.random_bool(0.8) {
        TerminalSpec::Clamped { level: draw(&mut r, -0.2, 0.5), slope: draw(&mut r, 0.1, 0.8), lo: -0.2, hi: 1.5 }
    } else {
        TerminalSpec::Indicator { threshold: r.random_range(1..=2), above: draw(&mut r, 0.5, 1.5), below: 0.0 }
    };
    let headroom = draw(&mut r, 0.0, 0.15);
    let mut config = ModelConfig {
        framework: opts.framework,
        horizon,
        steps,
        tree: opts.tree,
        marks: None,
        clock,
        kernel: IntensityKernel::new(weights)?,
        driver: DriverSpec { family: driver, declared: None },
        obstacle: obstacle_at(0.0),
        terminal,
    };
    let probe = Model::new(config.clone())?;
    let grid = uniform_grid(horizon, steps);
    let max_da = grid.windows(2).map(|w| probe.clock.eval(w[1]) - probe.clock.eval(w[0])).fold(0.0, f64::max);
    let load = opts.sources as f64 * probe.kernel.total() * max_da / MAX_JUMP_PROBABILITY;
    if load > 1.0 {
        config.kernel = IntensityKernel::new(probe.kernel.weights().iter().map(|w| w / load).collect())?;
    }
    let probe = Model::new(config.clone())?;
    let excess = probe.driver.lipschitz() * max_da / MAX_IMPLICIT_FACTOR;
    if excess > 1.0 {
        scale_driver(&mut config.driver.family, 1.0 / excess);
    }
    let probe = Model::new(config.clone())?;
    let margin = terminal_margin(&probe)?;
    config.obstacle = obstacle_at(margin - headroom);
    Model::new(config)
}

fn scale_driver(family: &mut DriverFamily, s: f64) {
    match family {
        DriverFamily::Linear { a, b, c, .. } | DriverFamily::LipschitzSaturated { a, b, c, .. } => {
            *a *= s;
            *b *= s;
            *c *= s;
        }
        DriverFamily::QuadraticExponential { a, c, theta, .. } => {
            *a *= s;
            *c *= s;
            *theta *= s;
        }
    }
}

/// `min_leaf ξ − h(T, ξ, L[ξ])` on the model's tree (`+∞` without an obstacle).
pub fn terminal_margin(model: &Model) -> Result<f64> {
    let tree = model.tree_with(TreeKind::Recombining, 1, None)?;
    let xi: Vec<f64> = tree.leaves().map(|v| model.terminal.eval(tree.counts(v, 0))).collect();
    let law = DiscreteLaw::from_weighted(xi.iter().copied().zip(tree.leaves().map(|v| tree.reach(v))))?;
    let horizon = model.clock.horizon();
    Ok(tree
        .leaves()
        .zip(&xi)
        .filter_map(|(v, &x)| model.obstacle.eval(horizon, tree.counts(v, 0), x, &law).map(|h| x - h))
        .fold(f64::INFINITY, f64::min))
}
