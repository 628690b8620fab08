//! Marked point processes with compensator `φ_k dA_t`, their simulation and
//! exact scenario trees.

pub mod clock;
pub mod tree;

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use clock::{Clock, ClockSpec};
pub use tree::{NodeId, ScenarioTree, TreeBuilder, TreeKind};

use crate::error::{Error, Result};
use crate::rng;

/// Finite mark space `e_1..e_m` with a real embedding of every mark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkSpace {
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

impl MarkSpace {
    pub fn new(labels: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let space = MarkSpace { labels, values };
        space.validate()?;
        Ok(space)
    }

    /// Marks `e1..em` embedded as `1, …, m`.
    pub fn numbered(m: usize) -> Self {
        MarkSpace {
            labels: (1..=m).map(|k| format!("e{k}")).collect(),
            values: (1..=m).map(|k| k as f64).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Config("mark space needs at least one mark".into()));
        }
        if self.labels.len() != self.values.len() {
            return Err(Error::Config(format!(
                "mark space has {} labels but {} values",
                self.labels.len(),
                self.values.len()
            )));
        }
        for (i, l) in self.labels.iter().enumerate() {
            if self.labels[..i].contains(l) {
                return Err(Error::Config(format!("duplicate mark label {l:?}")));
            }
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("mark values must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Time-constant mark intensities `φ_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityKernel {
    weights: Vec<f64>,
}

impl IntensityKernel {
    /// Accepts any nonnegative weights, including all zeros.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("intensity kernel needs at least one weight".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("intensity weights must be finite and nonnegative: {weights:?}")));
        }
        Ok(IntensityKernel { weights })
    }

    /// Like [`IntensityKernel::new`] but also requires `φ_tot > 0`.
    pub fn nondegenerate(weights: Vec<f64>) -> Result<Self> {
        let k = Self::new(weights)?;
        if k.total() <= 0.0 {
            return Err(Error::Config("intensity kernel must have positive total mass".into()));
        }
        Ok(k)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub time: f64,
    pub mark: usize,
}

/// A sampled MPP path on `[0, horizon]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MppPath {
    pub horizon: f64,
    pub jumps: Vec<Jump>,
}

impl MppPath {
    /// `N_t`.
    pub fn count(&self, t: f64) -> usize {
        self.jumps.partition_point(|j| j.time <= t)
    }

    /// Number of jumps of each mark up to `t`.
    pub fn counts_by_mark(&self, t: f64, marks: usize) -> Vec<u32> {
        let mut c = vec![0; marks];
        for j in self.jumps.iter().take_while(|j| j.time <= t) {
            c[j.mark] += 1;
        }
        c
    }

    pub fn write_csv<W: Write>(&self, out: W, marks: &MarkSpace) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "mark"])?;
        for j in &self.jumps {
            w.write_record([format!("{}", j.time), marks.labels[j.mark].clone()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Time-changed unit Poisson process with `Λ(t) = φ_tot A(t)` and marks drawn
/// with probabilities `φ_k / φ_tot`.
pub fn simulate_mpp(kernel: &IntensityKernel, clock: &Clock, horizon: f64, seed: u64) -> Result<MppPath> {
    let mut rng = rng::stream(seed, 0);
    simulate_with(kernel, clock, horizon, &mut rng)
}

/// Independent paths, path `i` using stream `i` of `seed`.
pub fn simulate_batch(
    kernel: &IntensityKernel,
    clock: &Clock,
    horizon: f64,
    seed: u64,
    count: usize,
) -> Result<Vec<MppPath>> {
    (0..count)
        .into_par_iter()
        .map(|i| simulate_with(kernel, clock, horizon, &mut rng::stream(seed, i as u64)))
        .collect()
}

fn simulate_with<R: rand::Rng>(kernel: &IntensityKernel, clock: &Clock, horizon: f64, rng: &mut R) -> Result<MppPath> {
    if !(horizon > 0.0 && horizon <= clock.horizon()) {
        return Err(Error::Config(format!(
            "simulation horizon {horizon} must lie in (0, {}]",
            clock.horizon()
        )));
    }
    let total = kernel.total();
    let mut jumps = Vec::new();
    if total <= 0.0 {
        return Ok(MppPath { horizon, jumps });
    }
    let marks = WeightedIndex::new(kernel.weights()).map_err(|e| Error::Config(e.to_string()))?;
    let budget = total * clock.eval(horizon);
    let mut s = 0.0;
    loop {
        let e: f64 = Exp1.sample(rng);
        s += e;
        if s > budget {
            break;
        }
        let Some(time) = clock.inverse(s / total) else { break };
        if time > horizon {
            break;
        }
        if time <= 0.0 || jumps.last().is_some_and(|j: &Jump| j.time >= time) {
            // Two arrivals collapsed onto one float; discard the later one.
            continue;
        }
        jumps.push(Jump { time, mark: marks.sample(rng) });
    }
    Ok(MppPath { horizon, jumps })
}

/// Uniform grid `t_i = i T / M`.
pub fn uniform_grid(horizon: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| horizon * i as f64 / steps as f64).collect()
}

/// `Σ_jumps U − Σ_i ΔA_i Σ_k φ_k U_i(e_k)` for a sampled path.
///
/// `integrand[i][k]` applies to jumps in `(t_i, t_{i+1}]` with mark `k`.
pub fn compensated_integral(
    path: &MppPath,
    grid: &[f64],
    integrand: &[Vec<f64>],
    kernel: &IntensityKernel,
    clock: &Clock,
) -> Result<f64> {
    check_integrand(integrand, grid.len().saturating_sub(1), kernel.len())?;
    let mut jump_part = 0.0;
    for j in &path.jumps {
        if j.time > grid[grid.len() - 1] {
            break;
        }
        let step = grid.partition_point(|&t| t < j.time).clamp(1, grid.len() - 1) - 1;
        jump_part += integrand[step][j.mark];
    }
    let mut comp = 0.0;
    for (i, row) in integrand.iter().enumerate() {
        let da = clock.eval(grid[i + 1]) - clock.eval(grid[i]);
        comp += da * dot(kernel.weights(), row);
    }
    Ok(jump_part - comp)
}

/// Compensated integral along a branch sequence of a single-source tree.
pub fn compensated_integral_tree(tree: &ScenarioTree, branches: &[usize], integrand: &[Vec<f64>]) -> Result<f64> {
    check_integrand(integrand, tree.steps(), tree.marks())?;
    if branches.len() != tree.steps() {
        return Err(Error::Shape(format!("branch sequence has {} steps, tree {}", branches.len(), tree.steps())));
    }
    Ok(branches
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let jump = if b == 0 { 0.0 } else { integrand[i][(b - 1) % tree.marks()] };
            jump - tree.d_a()[i] * dot(tree.weights(), &integrand[i])
        })
        .sum())
}

/// Exact expectation over a full tree of a functional of the branch sequence.
pub fn tree_expectation<F: Fn(&[usize]) -> f64>(tree: &ScenarioTree, f: F) -> f64 {
    tree.leaves().map(|leaf| tree.reach(leaf) * f(&tree.branches_to(leaf))).sum()
}

fn check_integrand(integrand: &[Vec<f64>], steps: usize, marks: usize) -> Result<()> {
    if integrand.len() != steps || integrand.iter().any(|r| r.len() != marks) {
        return Err(Error::Shape(format!("integrand must be {steps} x {marks}")));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
