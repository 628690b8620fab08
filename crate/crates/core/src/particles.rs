//! Interacting particle systems solved exactly on the joint scenario tree,
//! and iid copies of the mean-field solution sampled from its tree.

use std::collections::HashMap;

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::meanfield::{MfSolution, PicardOptions};
use crate::measures::DiscreteLaw;
use crate::models::{Model, Problem, ZeroDriver};
use crate::mpp::{NodeId, ScenarioTree, TreeKind};
use crate::rbsde::{self, frozen_obstacle, LawField, Residuals, SolutionTriple, Sweep};
use crate::rng;

/// Default limit on joint-tree leaves.
pub const DEFAULT_PARTICLE_BUDGET: u128 = 1 << 18;

const MAX_POLISH: usize = 60;

/// Converged `n`-particle system on a joint tree.
#[derive(Clone, Debug)]
pub struct ParticleSolution {
    pub tree: ScenarioTree,
    /// One triple per particle; `U` has `n · m` entries per node.
    pub particles: Vec<SolutionTriple>,
    /// `L_n[Y_v]` at every node.
    pub laws: Vec<DiscreteLaw>,
    pub iterations: usize,
    pub polish_sweeps: usize,
    pub residual: f64,
    pub trace: Vec<f64>,
}

impl ParticleSolution {
    pub fn n(&self) -> usize {
        self.particles.len()
    }

    /// Per-particle residuals of the system with the final empirical
    /// measures inserted and obstacles re-evaluated at the final values.
    pub fn residuals(&self, problem: &Problem<'_>) -> Vec<Residuals> {
        let tree = &self.tree;
        self.particles
            .iter()
            .enumerate()
            .map(|(i, sol)| {
                rbsde::residuals(sol, tree, problem.driver, LawField::Node(&self.laws), |v| {
                    problem.obstacle.eval(tree.time_of(v), tree.counts(v, i), sol.y[v], &self.laws[v])
                })
            })
            .collect()
    }

    /// Largest `|U^{i,j}|` over `j ≠ i`.
    pub fn cross_kernel_sup(&self) -> f64 {
        let m = self.tree.marks();
        let mut sup: f64 = 0.0;
        for (i, sol) in self.particles.iter().enumerate() {
            for v in 0..self.tree.node_count() {
                for (idx, x) in sol.u_at(v).iter().enumerate() {
                    if idx / m != i {
                        sup = sup.max(x.abs());
                    }
                }
            }
        }
        sup
    }
}

fn node_laws(tree: &ScenarioTree, ys: &[Vec<f64>]) -> Result<Vec<DiscreteLaw>> {
    let mut col = vec![0.0; ys.len()];
    (0..tree.node_count())
        .map(|v| {
            for (c, y) in col.iter_mut().zip(ys) {
                *c = y[v];
            }
            DiscreteLaw::uniform(&col)
        })
        .collect()
}

/// Builds the joint tree and runs the Picard iteration of the particle system.
pub fn solve_particle_system_exact(model: &Model, n: usize, kind: TreeKind, budget: u128, opts: &PicardOptions) -> Result<ParticleSolution> {
    if n == 0 {
        return Err(Error::Config("a particle system needs at least one particle".into()));
    }
    let tree = model.tree_with(kind, n, Some(budget))?;
    solve_particle_system_on(model, tree, opts)
}

/// Picard iteration on a prebuilt joint tree with one source per particle.
pub fn solve_particle_system_on(model: &Model, tree: ScenarioTree, opts: &PicardOptions) -> Result<ParticleSolution> {
    let problem = model.problem();
    let n = tree.sources();
    let steps = tree.steps();
    let terminals: Vec<Vec<f64>> = (0..n).map(|i| rbsde::terminal_values(&tree, i, problem.terminal)).collect();
    let d0 = DiscreteLaw::dirac(0.0);
    let mut ys: Vec<Vec<f64>> = terminals
        .iter()
        .enumerate()
        .map(|(i, xi)| {
            let s = rbsde::sweep(&Sweep {
                tree: &tree,
                source: i,
                driver: &ZeroDriver,
                laws: LawField::Fixed(&d0),
                obstacle: None,
                terminal: xi,
                lo: 0,
                hi: steps,
            })?;
            Ok(s.y)
        })
        .collect::<Result<_>>()?;
    let step = |ys: &[Vec<f64>]| -> Result<(Vec<SolutionTriple>, Vec<DiscreteLaw>)> {
        let laws = node_laws(&tree, ys)?;
        let field = LawField::Node(&laws);
        let sols = (0..n)
            .into_par_iter()
            .map(|i| {
                let h = frozen_obstacle(&tree, i, problem.obstacle, &ys[i], field, 0..steps);
                rbsde::sweep(&Sweep {
                    tree: &tree,
                    source: i,
                    driver: problem.driver,
                    laws: field,
                    obstacle: Some(&h),
                    terminal: &terminals[i],
                    lo: 0,
                    hi: steps,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((sols, laws))
    };
    let change = |a: &[Vec<f64>], b: &[SolutionTriple]| -> f64 {
        a.iter().zip(b).flat_map(|(y, s)| y.iter().zip(&s.y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
    };
    let mut trace = Vec::new();
    let mut iterations = 0;
    let (mut sols, mut residual) = loop {
        let (sols, _) = step(&ys)?;
        iterations += 1;
        let c = change(&ys, &sols);
        trace.push(c);
        for (y, s) in ys.iter_mut().zip(&sols) {
            y.copy_from_slice(&s.y);
        }
        if c < opts.tol {
            break (sols, c);
        }
        if iterations >= opts.max_iter {
            return Err(Error::NonConvergence { iterations, residual: c, trace });
        }
    };
    let mut polish = 0;
    if opts.polish {
        while residual > 0.0 && polish < MAX_POLISH {
            let (next, _) = step(&ys)?;
            let c = change(&ys, &next);
            polish += 1;
            for (y, s) in ys.iter_mut().zip(&next) {
                y.copy_from_slice(&s.y);
            }
            sols = next;
            if c >= residual {
                residual = c;
                break;
            }
            residual = c;
        }
    }
    let laws = node_laws(&tree, &ys)?;
    Ok(ParticleSolution { tree, particles: sols, laws, iterations, polish_sweeps: polish, residual, trace })
}

/// Node of the joint tree reached by relabelling sources with `perm`
/// (source `j` becomes `perm[j]`).
pub fn permuted_node(tree: &ScenarioTree, node: NodeId, perm: &[usize], index: &CountIndex) -> Option<NodeId> {
    let m = tree.marks();
    let n = tree.sources();
    let mut counts = vec![0u32; n * m];
    for j in 0..n {
        counts[perm[j] * m..(perm[j] + 1) * m].copy_from_slice(tree.counts(node, j));
    }
    match tree.kind() {
        TreeKind::Recombining => index.get(tree.level_of(node), &counts),
        TreeKind::Full => {
            let branches: Vec<usize> = tree
                .branches_to(node)
                .into_iter()
                .map(|b| if b == 0 { 0 } else { 1 + perm[(b - 1) / m] * m + (b - 1) % m })
                .collect();
            Some(tree.follow(&branches))
        }
    }
}

/// Largest deviation from exact label symmetry:
/// `Y^{perm(i)}(perm(v))` against `Y^i(v)` and likewise for `U` and `ΔK`.
/// Zero means the solution is bitwise exchangeable.
pub fn exchangeability_defect(sol: &ParticleSolution, perm: &[usize]) -> f64 {
    let tree = &sol.tree;
    let index = CountIndex::new(tree);
    let m = tree.marks();
    let mut worst: f64 = 0.0;
    for v in 0..tree.node_count() {
        let w = permuted_node(tree, v, perm, &index).expect("permuted node exists");
        for (i, s) in sol.particles.iter().enumerate() {
            let t = &sol.particles[perm[i]];
            let mut d = (s.y[v] - t.y[w]).abs().max((s.dk[v] - t.dk[w]).abs());
            if s.y[v].to_bits() != t.y[w].to_bits() || s.dk[v].to_bits() != t.dk[w].to_bits() {
                d = d.max(f64::MIN_POSITIVE);
            }
            for j in 0..sol.n() {
                for k in 0..m {
                    let a = s.u_at(v)[j * m + k];
                    let b = t.u_at(w)[perm[j] * m + k];
                    if a.to_bits() != b.to_bits() {
                        d = d.max((a - b).abs()).max(f64::MIN_POSITIVE);
                    }
                }
            }
            worst = worst.max(d);
        }
    }
    worst
}

/// Lookup of nodes by `(level, counts)`.
pub struct CountIndex {
    map: HashMap<(usize, Vec<u32>), NodeId>,
}

impl CountIndex {
    pub fn new(tree: &ScenarioTree) -> Self {
        let w = tree.sources() * tree.marks();
        let mut map = HashMap::with_capacity(tree.node_count());
        for i in 0..=tree.steps() {
            for v in tree.level(i) {
                let counts: Vec<u32> = (0..tree.sources()).flat_map(|j| tree.counts(v, j).to_vec()).collect();
                debug_assert_eq!(counts.len(), w);
                map.entry((i, counts)).or_insert(v);
            }
        }
        CountIndex { map }
    }

    pub fn get(&self, level: usize, counts: &[u32]) -> Option<NodeId> {
        self.map.get(&(level, counts.to_vec())).copied()
    }
}

/// `Ȳ^i` on the joint tree: the mean-field value at the single-tree node
/// with the counts of source `i`.
pub fn copy_values(mf: &MfSolution, joint: &ScenarioTree, source: usize) -> Result<Vec<f64>> {
    let index = CountIndex::new(&mf.tree);
    (0..joint.node_count())
        .map(|v| {
            let lvl = joint.level_of(v);
            index
                .get(lvl, joint.counts(v, source))
                .map(|w| mf.solution.y[w])
                .ok_or_else(|| Error::Shape(format!("no mean-field node for joint node {v}")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoupledError {
    pub n: usize,
    pub times: Vec<f64>,
    /// `E|Y^{i,n}_t − Ȳ^i_t|²` averaged over `i`.
    pub gap: Vec<f64>,
    pub sup: f64,
}

/// Exact per-time squared gap between particles and the copies driven by the
/// same noise.
pub fn coupled_error(ps: &ParticleSolution, mf: &MfSolution) -> Result<CoupledError> {
    let tree = &ps.tree;
    if tree.steps() != mf.tree.steps() || tree.grid() != mf.tree.grid() {
        return Err(Error::Shape("particle and mean-field trees use different grids".into()));
    }
    let n = ps.n();
    let copies: Vec<Vec<f64>> = (0..n).map(|i| copy_values(mf, tree, i)).collect::<Result<_>>()?;
    let gap: Vec<f64> = (0..=tree.steps())
        .map(|lvl| {
            tree.level(lvl)
                .map(|v| {
                    let s: f64 = (0..n).map(|i| (ps.particles[i].y[v] - copies[i][v]).powi(2)).sum();
                    tree.reach(v) * s / n as f64
                })
                .sum()
        })
        .collect();
    let sup = gap.iter().copied().fold(0.0, f64::max);
    Ok(CoupledError { n, times: tree.grid().to_vec(), gap, sup })
}

/// Samples one root-to-leaf path of a tree and returns its nodes.
pub fn sample_path<R: Rng>(tree: &ScenarioTree, rng: &mut R) -> Vec<NodeId> {
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let mut path = Vec::with_capacity(tree.steps() + 1);
    let mut v = 0;
    path.push(v);
    for i in 0..tree.steps() {
        let x: f64 = unit.sample(rng);
        let probs = tree.branch_probs(i);
        let mut acc = 0.0;
        let mut pick = probs.len() - 1;
        for (b, p) in probs.iter().enumerate() {
            acc += p;
            if x < acc {
                pick = b;
                break;
            }
        }
        v = tree.children(v)[pick];
        path.push(v);
    }
    path
}

/// `reps` independent batches of `n` iid copies of the mean-field `Y` on the
/// grid: `out[r][j][i] = Ȳ^j_{t_i}` in batch `r`.
pub fn sample_iid_copies(mf: &MfSolution, n: usize, reps: usize, seed: u64) -> Vec<Vec<Vec<f64>>> {
    (0..reps)
        .into_par_iter()
        .map(|r| {
            (0..n)
                .map(|j| {
                    let mut g = rng::stream2(seed, r as u64, j as u64);
                    sample_path(&mf.tree, &mut g).into_iter().map(|v| mf.solution.y[v]).collect()
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
}

/// Pearson statistic of `samples` against a discrete law (atoms matched
/// exactly; atoms with tiny expected counts are pooled into one cell).
pub fn chi_square(samples: &[f64], law: &DiscreteLaw) -> ChiSquare {
    let n = samples.len() as f64;
    let mut observed = vec![0usize; law.atoms().len()];
    for x in samples {
        if let Ok(k) = law.atoms().binary_search_by(|a| a.total_cmp(x)) {
            observed[k] += 1;
        }
    }
    let unmatched = samples.len() - observed.iter().sum::<usize>();
    let mut stat = 0.0;
    let mut cells = 0usize;
    let (mut pool_o, mut pool_e) = (unmatched as f64, 0.0);
    for (o, p) in observed.iter().zip(law.probs()) {
        let e = p * n;
        if e < 5.0 {
            pool_o += *o as f64;
            pool_e += e;
        } else {
            stat += (*o as f64 - e).powi(2) / e;
            cells += 1;
        }
    }
    if pool_e > 0.0 {
        stat += (pool_o - pool_e).powi(2) / pool_e;
        cells += 1;
    } else if pool_o > 0.0 {
        stat = f64::INFINITY;
    }
    ChiSquare { statistic: stat, dof: cells.saturating_sub(1) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meanfield::solve_mf_rbsde;
    use crate::models::{DriverFamily, DriverSpec, Framework, MeasureForm, ModelConfig, ObstacleFamily, ObstacleSpec, TerminalSpec};
    use crate::mpp::{ClockSpec, IntensityKernel};

    fn model(driver: DriverFamily, obstacle: ObstacleFamily, terminal: TerminalSpec, steps: usize, weights: &[f64]) -> Model {
        Model::new(ModelConfig {
            framework: Framework::Mpp,
            horizon: 0.6,
            steps,
            tree: TreeKind::Recombining,
            marks: None,
            clock: ClockSpec::Identity,
            kernel: IntensityKernel::new(weights.to_vec()).unwrap(),
            driver: DriverSpec { family: driver, declared: None },
            obstacle: ObstacleSpec { family: obstacle, gamma1: None, gamma2: None },
            terminal,
        })
        .unwrap()
    }

    fn interacting() -> Model {
        model(
            DriverFamily::Linear { a: 0.3, b: 0.4, c: 0.8, d: 0.1, measure: MeasureForm::Mean },
            ObstacleFamily::Linear { level: 0.3, slope_t: 0.0, slope_x: 0.0, gamma_y: 0.1, gamma_m: 0.2, measure: MeasureForm::Mean },
            TerminalSpec::Clamped { level: 0.0, slope: 0.7, lo: 0.0, hi: 1.0 },
            3,
            &[1.0],
        )
    }

    #[test]
    fn single_particle_matches_mean_field_for_measure_free_model() {
        let m = model(
            DriverFamily::Linear { a: 0.3, b: 0.4, c: 0.0, d: 0.1, measure: MeasureForm::Mean },
            ObstacleFamily::Constant { level: 0.35 },
            TerminalSpec::Linear { level: 0.0, slope: 0.5 },
            4,
            &[0.7, 0.5],
        );
        let opts = PicardOptions::default();
        let ps = solve_particle_system_exact(&m, 1, TreeKind::Recombining, 1 << 18, &opts).unwrap();
        let mf = solve_mf_rbsde(&m, &opts).unwrap();
        assert_eq!(ps.particles[0].y, mf.solution.y);
        let ce = coupled_error(&ps, &mf).unwrap();
        assert_eq!(ce.sup, 0.0);
    }

    #[test]
    fn measure_free_system_decouples() {
        let m = model(
            DriverFamily::Linear { a: 0.3, b: 0.4, c: 0.0, d: 0.1, measure: MeasureForm::Mean },
            ObstacleFamily::Constant { level: 0.35 },
            TerminalSpec::Linear { level: 0.0, slope: 0.5 },
            3,
            &[1.0],
        );
        let opts = PicardOptions::default();
        let ps = solve_particle_system_exact(&m, 3, TreeKind::Full, 1 << 18, &opts).unwrap();
        assert_eq!(ps.cross_kernel_sup(), 0.0);
        let mf = solve_mf_rbsde(&m, &opts).unwrap();
        assert_eq!(coupled_error(&ps, &mf).unwrap().sup, 0.0);
    }

    #[test]
    fn two_particles_match_hand_recursion() {
        // n = 2, M = 2, m = 1: each step either nobody jumps or exactly one
        // particle does; the empirical mean enters the driver.
        let (a, c) = (0.3, 0.8);
        let m = model(
            DriverFamily::Linear { a, b: 0.0, c, d: 0.0, measure: MeasureForm::Mean },
            ObstacleFamily::Inactive,
            TerminalSpec::Linear { level: 0.0, slope: 1.0 },
            2,
            &[1.0],
        );
        let ps = solve_particle_system_exact(&m, 2, TreeKind::Full, 1 << 18, &PicardOptions::default()).unwrap();
        let da = 0.3;
        // Values at a node depend on (N¹, N²) and the level; solve the 2x2
        // linear system Y^i = E^i + da (a Y^i + c (Y¹ + Y²)/2) directly.
        let solve = |e1: f64, e2: f64| {
            let (p, q) = (1.0 - da * (a + c / 2.0), da * c / 2.0);
            let det = p * p - q * q;
            ((p * e1 + q * e2) / det, (p * e2 + q * e1) / det)
        };
        let leaf = |n1: u32, n2: u32| (n1 as f64, n2 as f64);
        let node = |next: &dyn Fn(u32, u32) -> (f64, f64), n1: u32, n2: u32| {
            let (y0, z0) = next(n1, n2);
            let (y1, z1) = next(n1 + 1, n2);
            let (y2, z2) = next(n1, n2 + 1);
            let e1 = y0 + da * ((y1 - y0) + (y2 - y0));
            let e2 = z0 + da * ((z1 - z0) + (z2 - z0));
            solve(e1, e2)
        };
        let lvl1 = |n1: u32, n2: u32| node(&leaf, n1, n2);
        let (r1, r2) = node(&lvl1, 0, 0);
        assert!((ps.particles[0].y[0] - r1).abs() < 1e-13, "{} vs {r1}", ps.particles[0].y[0]);
        assert!((ps.particles[1].y[0] - r2).abs() < 1e-13);
        assert_eq!(ps.tree.leaves().len(), 9);
    }

    #[test]
    fn exchangeable_under_relabelling() {
        let m = interacting();
        let ps = solve_particle_system_exact(&m, 3, TreeKind::Full, 1 << 18, &PicardOptions::default()).unwrap();
        for perm in [[1, 0, 2], [2, 0, 1], [0, 2, 1]] {
            assert_eq!(exchangeability_defect(&ps, &perm), 0.0);
        }
        let lat = solve_particle_system_exact(&m, 3, TreeKind::Recombining, 1 << 18, &PicardOptions::default()).unwrap();
        assert_eq!(exchangeability_defect(&lat, &[2, 0, 1]), 0.0);
        assert_eq!(lat.particles[0].y[0], ps.particles[0].y[0]);
    }

    #[test]
    fn particle_system_residuals() {
        let m = interacting();
        let ps = solve_particle_system_exact(&m, 2, TreeKind::Full, 1 << 18, &PicardOptions::default()).unwrap();
        for r in ps.residuals(&m.problem()) {
            assert!(r.path < 1e-12 && r.obstacle_gap > -1e-12 && r.flat_off < 1e-12, "{r:?}");
        }
        assert!(ps.cross_kernel_sup() > 0.0);
    }

    #[test]
    fn budget_refusal() {
        let m = interacting();
        let err = solve_particle_system_exact(&m, 3, TreeKind::Full, 10, &PicardOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Budget { .. }), "{err}");
    }

    #[test]
    fn deterministic_copies_are_identical() {
        let m = model(
            DriverFamily::Linear { a: 0.3, b: 0.0, c: 0.2, d: 0.1, measure: MeasureForm::Mean },
            ObstacleFamily::Inactive,
            TerminalSpec::Constant { value: 1.0 },
            4,
            &[1.0],
        );
        let mf = solve_mf_rbsde(&m, &PicardOptions::default()).unwrap();
        let copies = sample_iid_copies(&mf, 5, 3, 9);
        for rep in &copies {
            for c in rep {
                assert_eq!(c, &copies[0][0]);
            }
        }
        assert_eq!(copies, sample_iid_copies(&mf, 5, 3, 9));
    }

    #[test]
    fn chi_square_cells() {
        let law = DiscreteLaw::from_weighted([(0.0, 0.5), (1.0, 0.5)]).unwrap();
        let samples = [0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let c = chi_square(&samples, &law);
        assert_eq!(c.dof, 1);
        assert_eq!(c.statistic, 0.0);
        assert_eq!(chi_square(&[2.0; 10], &law).statistic, f64::INFINITY);
    }
}
