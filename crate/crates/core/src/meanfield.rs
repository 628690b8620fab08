//! Picard solver for the mean-field reflected BSDE on a scenario tree.
//!
//! Each iteration freezes the node values `Y^(k)` inside the obstacle and
//! their exact level laws inside driver and obstacle, then solves a standard
//! reflected BSDE. Long horizons are handled by stitching windows of levels
//! on which the map contracts.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{DiscreteLaw, MeasureFlow};
use crate::models::{ContractionParams, Framework, Model, Problem, ZeroDriver};
use crate::mpp::ScenarioTree;
use crate::rbsde::{self, frozen_obstacle, LawField, Residuals, SolutionTriple, Sweep};

/// Starting point of the Picard loop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PicardInit {
    /// Terminal data propagated with `f ≡ 0` and no obstacle.
    #[default]
    TerminalExpectation,
    Zero,
    /// `h(t, counts, 0, δ_0)` where an obstacle exists, zero elsewhere.
    Obstacle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub init: PicardInit,
    /// Keep sweeping after convergence until the change stops shrinking.
    pub polish: bool,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions { tol: 1e-10, max_iter: 200, init: PicardInit::default(), polish: true }
    }
}

/// Changes below this sup-node size are dominated by rounding and are not
/// used to measure contraction ratios.
pub const RATIO_FLOOR: f64 = 1e-9;

const MAX_POLISH: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `max_v |Y^(k+1)_v − Y^(k)_v|`.
    pub sup_change: f64,
    /// The change in the contraction norm (squared weighted norm, or sup norm).
    pub norm_change: f64,
    /// `norm_change / previous norm_change`, when both are above the floor.
    pub ratio: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContractionNorm {
    /// `sup_τ E[e^{2βA_τ} |δY_τ|²]` over stopping times in the window.
    WeightedSquare,
    /// `max_v |δY_v|`.
    Sup,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractionReport {
    pub lo: usize,
    pub hi: usize,
    pub norm: ContractionNorm,
    /// Theoretical factor on this window.
    pub alpha: f64,
    pub max_ratio: Option<f64>,
    pub ratios_within_alpha: bool,
    /// `ceil(log(tol_N / N_1) / log α) + 1`, when `α < 1`, with `N_1` the
    /// first change in the contraction norm and `tol_N` the norm level that
    /// forces the sup-node change below `tol`.
    pub cap: Option<usize>,
    pub iterations: usize,
    pub within_cap: bool,
}

/// Converged mean-field solution on a tree.
#[derive(Clone, Debug)]
pub struct MfSolution {
    pub tree: ScenarioTree,
    pub framework: Framework,
    pub solution: SolutionTriple,
    /// Exact level laws of the final `Y`.
    pub flow: MeasureFlow,
    pub log: Vec<IterationRecord>,
    /// Picard sweeps until the change fell below `tol`, summed over windows.
    pub iterations: usize,
    pub polish_sweeps: usize,
    /// Last sup-node change.
    pub residual: f64,
    pub contraction: Vec<ContractionReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MfSummary {
    pub framework: Framework,
    pub root_y: f64,
    pub total_k_mass: f64,
    pub iterations: usize,
    pub polish_sweeps: usize,
    pub residual: f64,
    pub nodes: usize,
    pub steps: usize,
    pub contraction: Vec<ContractionReport>,
    pub log: Vec<IterationRecord>,
}

impl MfSolution {
    pub fn root(&self) -> f64 {
        self.solution.root()
    }

    pub fn summary(&self) -> MfSummary {
        MfSummary {
            framework: self.framework,
            root_y: self.root(),
            total_k_mass: self.solution.total_k_mass(&self.tree),
            iterations: self.iterations,
            polish_sweeps: self.polish_sweeps,
            residual: self.residual,
            nodes: self.tree.node_count(),
            steps: self.tree.steps(),
            contraction: self.contraction.clone(),
            log: self.log.clone(),
        }
    }

    /// Pathwise residuals with the converged flow inserted and the obstacle
    /// re-evaluated at the final `Y`.
    pub fn residuals(&self, problem: &Problem<'_>) -> Residuals {
        let laws = LawField::Level(&self.flow.laws);
        let tree = &self.tree;
        let y = &self.solution.y;
        rbsde::residuals(&self.solution, tree, problem.driver, laws, |v| {
            let i = tree.level_of(v);
            problem.obstacle.eval(tree.grid()[i], tree.counts(v, 0), y[v], &self.flow.laws[i])
        })
    }

    /// Applies the Picard map once more and returns the largest node change.
    pub fn fixed_point_residual(&self, problem: &Problem<'_>) -> Result<f64> {
        let next = picard_step(&self.tree, problem, &self.solution.y, &self.flow.laws, 0, self.tree.steps())?;
        Ok(sup_diff(&self.tree, &next.y, &self.solution.y, 0, self.tree.steps()))
    }
}

/// Exact law of `Y` at level `i`, weighting nodes by their probability.
pub fn level_law(tree: &ScenarioTree, y: &[f64], i: usize) -> Result<DiscreteLaw> {
    DiscreteLaw::from_weighted(tree.level(i).map(|v| (y[v], tree.reach(v))))
}

pub fn level_laws(tree: &ScenarioTree, y: &[f64]) -> Result<Vec<DiscreteLaw>> {
    (0..=tree.steps()).map(|i| level_law(tree, y, i)).collect()
}

/// `sup_τ E[e^{2βA_τ} d_τ²]` over stopping times with values in levels `[lo, hi]`.
pub fn weighted_square_norm(tree: &ScenarioTree, d: &[f64], beta: f64, lo: usize, hi: usize) -> f64 {
    let w = |i: usize| (2.0 * beta * tree.clock_values()[i]).exp();
    let mut s = vec![0.0; tree.node_count()];
    for v in tree.level(hi) {
        s[v] = w(hi) * d[v] * d[v];
    }
    for i in (lo..hi).rev() {
        let probs = tree.branch_probs(i);
        for v in tree.level(i) {
            let cont: f64 = tree.children(v).iter().zip(probs).map(|(&c, p)| p * s[c]).sum();
            s[v] = cont.max(w(i) * d[v] * d[v]);
        }
    }
    tree.level(lo).map(|v| tree.reach(v) * s[v]).sum()
}

fn sup_diff(tree: &ScenarioTree, a: &[f64], b: &[f64], lo: usize, hi: usize) -> f64 {
    (lo..=hi).flat_map(|i| tree.level(i)).map(|v| (a[v] - b[v]).abs()).fold(0.0, f64::max)
}

/// One application of the Picard map on levels `[lo, hi]`: `laws` must hold
/// the law of `y` at every level of the window (other levels are ignored).
fn picard_step(
    tree: &ScenarioTree,
    problem: &Problem<'_>,
    y: &[f64],
    laws: &[DiscreteLaw],
    lo: usize,
    hi: usize,
) -> Result<SolutionTriple> {
    let field = LawField::Level(laws);
    let obstacle = frozen_obstacle(tree, 0, problem.obstacle, y, field, lo..hi);
    rbsde::sweep(&Sweep {
        tree,
        source: 0,
        driver: problem.driver,
        laws: field,
        obstacle: Some(&obstacle),
        terminal: y,
        lo,
        hi,
    })
}

fn initial_values(tree: &ScenarioTree, problem: &Problem<'_>, y: &mut [f64], lo: usize, hi: usize, init: PicardInit) -> Result<()> {
    match init {
        PicardInit::TerminalExpectation => {
            let law = DiscreteLaw::dirac(0.0);
            let s = rbsde::sweep(&Sweep {
                tree,
                source: 0,
                driver: &ZeroDriver,
                laws: LawField::Fixed(&law),
                obstacle: None,
                terminal: y,
                lo,
                hi,
            })?;
            for v in (lo..hi).flat_map(|i| tree.level(i)) {
                y[v] = s.y[v];
            }
        }
        PicardInit::Zero => {
            for v in (lo..hi).flat_map(|i| tree.level(i)) {
                y[v] = 0.0;
            }
        }
        PicardInit::Obstacle => {
            let d0 = DiscreteLaw::dirac(0.0);
            for i in lo..hi {
                for v in tree.level(i) {
                    y[v] = problem.obstacle.eval(tree.grid()[i], tree.counts(v, 0), 0.0, &d0).unwrap_or(0.0);
                }
            }
        }
    }
    Ok(())
}

/// Contraction factor and norm used on a window.
fn window_alpha(params: Option<&ContractionParams>, tree: &ScenarioTree, lo: usize, hi: usize) -> Option<(ContractionNorm, f64, f64)> {
    let p = params?;
    match p.framework {
        Framework::Mpp => Some((
            ContractionNorm::WeightedSquare,
            p.alpha_between(tree.clock_values()[lo], tree.clock_values()[hi]),
            p.beta,
        )),
        Framework::Poisson => Some((ContractionNorm::Sup, p.poisson_factor(tree.grid()[hi] - tree.grid()[lo]), 0.0)),
    }
}

/// A norm level below which the sup-node change is under `tol`.
///
/// Stopping at a node `v` of level `i` shows that the weighted norm
/// dominates `reach(v) e^{2βA_i} d_v²`.
fn norm_tolerance(tree: &ScenarioTree, norm: ContractionNorm, beta: f64, lo: usize, hi: usize, tol: f64) -> f64 {
    match norm {
        ContractionNorm::Sup => tol,
        ContractionNorm::WeightedSquare => {
            let c = (lo..=hi)
                .flat_map(|i| tree.level(i).map(move |v| (i, v)))
                .map(|(i, v)| tree.reach(v) * (2.0 * beta * tree.clock_values()[i]).exp())
                .filter(|&c| c > 0.0)
                .fold(f64::INFINITY, f64::min);
            tol * tol * c
        }
    }
}

struct WindowOutcome {
    sol: SolutionTriple,
    log: Vec<IterationRecord>,
    iterations: usize,
    polish: usize,
    residual: f64,
    report: Option<ContractionReport>,
}

/// Picard iteration on levels `[lo, hi]`. `y` holds the data at level `hi`
/// (and the converged values of later windows); on return it holds the
/// solution on the window, and `laws` the matching level laws.
#[allow(clippy::too_many_arguments)]
fn solve_window(
    tree: &ScenarioTree,
    problem: &Problem<'_>,
    params: Option<&ContractionParams>,
    y: &mut [f64],
    laws: &mut [DiscreteLaw],
    lo: usize,
    hi: usize,
    opts: &PicardOptions,
) -> Result<WindowOutcome> {
    initial_values(tree, problem, y, lo, hi, opts.init)?;
    let alpha = window_alpha(params, tree, lo, hi);
    let norm_of = |d: &[f64]| match alpha {
        Some((ContractionNorm::WeightedSquare, _, beta)) => weighted_square_norm(tree, d, beta, lo, hi),
        _ => sup_diff(tree, d, &vec![0.0; d.len()], lo, hi),
    };
    let mut log = Vec::new();
    let mut prev_norm: Option<f64> = None;
    let mut first_gap = None;
    let mut iterations = 0;
    let mut diff = vec![0.0; tree.node_count()];
    let (mut sol, residual, converged) = loop {
        for i in lo..=hi {
            laws[i] = level_law(tree, y, i)?;
        }
        let sol = picard_step(tree, problem, y, laws, lo, hi)?;
        iterations += 1;
        let mut sup: f64 = 0.0;
        for v in (lo..=hi).flat_map(|i| tree.level(i)) {
            diff[v] = sol.y[v] - y[v];
            sup = sup.max(diff[v].abs());
        }
        let norm = norm_of(&diff);
        let ratio = match prev_norm {
            Some(p) if sup >= RATIO_FLOOR && p > 0.0 => Some(norm / p),
            _ => None,
        };
        log.push(IterationRecord { iteration: iterations, sup_change: sup, norm_change: norm, ratio });
        prev_norm = (sup >= RATIO_FLOOR).then_some(norm);
        first_gap.get_or_insert(norm);
        y.copy_from_slice(&sol.y);
        if sup < opts.tol {
            break (sol, sup, true);
        }
        if iterations >= opts.max_iter {
            break (sol, sup, false);
        }
    };
    if !converged {
        return Err(Error::NonConvergence {
            iterations,
            residual,
            trace: log.iter().map(|r| r.sup_change).collect(),
        });
    }
    let mut polish = 0;
    let mut residual = residual;
    if opts.polish {
        while residual > 0.0 && polish < MAX_POLISH {
            for i in lo..=hi {
                laws[i] = level_law(tree, y, i)?;
            }
            let next = picard_step(tree, problem, y, laws, lo, hi)?;
            let change = sup_diff(tree, &next.y, y, lo, hi);
            polish += 1;
            y.copy_from_slice(&next.y);
            sol = next;
            if change >= residual {
                residual = change;
                break;
            }
            residual = change;
        }
    }
    for i in lo..=hi {
        laws[i] = level_law(tree, y, i)?;
    }
    let report = alpha.map(|(norm, a, beta)| {
        let max_ratio = log.iter().filter_map(|r| r.ratio).fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
        let gap = first_gap.unwrap_or(0.0);
        let tol = norm_tolerance(tree, norm, beta, lo, hi, opts.tol);
        let cap = (a < 1.0 && a > 0.0).then(|| {
            if gap <= tol {
                1
            } else {
                ((tol / gap).ln() / a.ln()).ceil() as usize + 1
            }
        });
        let cap = if a == 0.0 { Some(2) } else { cap };
        ContractionReport {
            lo,
            hi,
            norm,
            alpha: a,
            max_ratio,
            ratios_within_alpha: max_ratio.is_none_or(|r| r <= a * (1.0 + 1e-9)),
            cap,
            iterations,
            within_cap: cap.is_none_or(|c| iterations <= c),
        }
    });
    Ok(WindowOutcome { sol, log, iterations, polish, residual, report })
}

fn solve_windows(model: &Model, tree: ScenarioTree, windows: &[(usize, usize)], opts: &PicardOptions) -> Result<MfSolution> {
    let problem = model.problem();
    let params = model.contraction().ok();
    let steps = tree.steps();
    let mut y = rbsde::terminal_values(&tree, 0, problem.terminal);
    let mut laws: Vec<DiscreteLaw> = vec![DiscreteLaw::dirac(0.0); steps + 1];
    let n = tree.node_count();
    let width = tree.sources() * tree.marks();
    let mut u = vec![0.0; n * width];
    let mut dk = vec![0.0; n];
    let mut obstacle = vec![None; n];
    let mut log = Vec::new();
    let mut contraction = Vec::new();
    let (mut iterations, mut polish, mut residual) = (0, 0, 0.0f64);
    for &(lo, hi) in windows {
        let out = solve_window(&tree, &problem, params.as_ref(), &mut y, &mut laws, lo, hi, opts)?;
        for v in (lo..hi).flat_map(|i| tree.level(i)) {
            u[v * width..(v + 1) * width].copy_from_slice(out.sol.u_at(v));
            dk[v] = out.sol.dk[v];
            obstacle[v] = out.sol.obstacle[v];
        }
        log.extend(out.log);
        contraction.extend(out.report);
        iterations += out.iterations;
        polish += out.polish;
        residual = residual.max(out.residual);
    }
    let solution = SolutionTriple { source: 0, width, marks: tree.marks(), y, u, dk, obstacle, lo: 0, hi: steps };
    let flow = MeasureFlow::new(tree.grid().to_vec(), laws)?;
    Ok(MfSolution {
        tree,
        framework: model.framework,
        solution,
        flow,
        log,
        iterations,
        polish_sweeps: polish,
        residual,
        contraction,
    })
}

/// Picard iteration over the whole horizon.
pub fn solve_mf_rbsde(model: &Model, opts: &PicardOptions) -> Result<MfSolution> {
    let tree = model.tree()?;
    solve_mf_rbsde_on(model, tree, opts)
}

/// As [`solve_mf_rbsde`] on a prebuilt single-source tree.
pub fn solve_mf_rbsde_on(model: &Model, tree: ScenarioTree, opts: &PicardOptions) -> Result<MfSolution> {
    let steps = tree.steps();
    solve_windows(model, tree, &[(0, steps)], opts)
}

/// Windows `[lo, hi]` of at most `h_step` time units each, latest first.
pub fn stitching_windows(tree: &ScenarioTree, h_step: f64) -> Vec<(usize, usize)> {
    let steps = tree.steps();
    let grid = tree.grid();
    let mut out = Vec::new();
    let mut hi = steps;
    while hi > 0 {
        let mut lo = hi - 1;
        while lo > 0 && grid[hi] - grid[lo - 1] <= h_step * (1.0 + 1e-12) {
            lo -= 1;
        }
        out.push((lo, hi));
        hi = lo;
    }
    out
}

/// Backward interval-by-interval solve with windows no longer than the
/// admissible step (or `h_step`, when given).
pub fn solve_with_stitching(model: &Model, h_step: Option<f64>, opts: &PicardOptions) -> Result<MfSolution> {
    let tree = model.tree()?;
    let h = match h_step {
        Some(h) => h,
        None => model.contraction()?.h_step,
    };
    if !(h > 0.0) {
        return Err(Error::Config(format!("stitching step must be positive, got {h}")));
    }
    let windows = stitching_windows(&tree, h);
    solve_windows(model, tree, &windows, opts)
}

/// Solves from two initializations and returns the largest node difference.
pub fn uniqueness_probe(model: &Model, opts: &PicardOptions) -> Result<f64> {
    let a = solve_mf_rbsde(model, &PicardOptions { init: PicardInit::Zero, ..*opts })?;
    let b = solve_mf_rbsde(model, &PicardOptions { init: PicardInit::Obstacle, ..*opts })?;
    Ok(sup_diff(&a.tree, &a.solution.y, &b.solution.y, 0, a.tree.steps()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundedRegimeReport {
    /// `max_v |Y_v|`.
    pub y_sup: f64,
    /// `max_{v,k} |U_v(e_k)|`.
    pub u_sup: f64,
    pub total_k_mass: f64,
    /// `u_sup ≤ 2 y_sup`.
    pub holds: bool,
}

pub fn bounded_regime_report(mf: &MfSolution) -> BoundedRegimeReport {
    let y_sup = mf.solution.y_sup(&mf.tree);
    let u_sup = mf.solution.u_sup(&mf.tree);
    BoundedRegimeReport {
        y_sup,
        u_sup,
        total_k_mass: mf.solution.total_k_mass(&mf.tree),
        holds: u_sup <= 2.0 * y_sup * (1.0 + 1e-12) + 1e-15,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IncrementRow {
    pub s: f64,
    pub t: f64,
    /// `E|Y_t − Y_s|^p`.
    pub moment: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegularityReport {
    pub p: f64,
    pub steps: usize,
    pub rows: Vec<IncrementRow>,
    /// `max E|Y_t − Y_s|^p / |t − s|`.
    pub c_increment: f64,
    /// `max E[|Y_s − Y_r|^p |Y_t − Y_s|^p] / |t − r|²` over `r < s < t`.
    pub c_product: f64,
}

/// Exact increment moments of `Y` computed from the tree transition law.
pub fn regularity_probe(mf: &MfSolution, p: f64) -> Result<RegularityReport> {
    let tree = &mf.tree;
    let y = &mf.solution.y;
    let m = tree.steps();
    if m < 7 {
        return Err(Error::Config(format!("regularity probe needs at least 8 grid points, got {}", m + 1)));
    }
    let n = tree.node_count();
    let grid = tree.grid();
    // cond[w·(m+1) + t] = E[|Y_t − Y_w|^p | w]; joint[r·n + w] = E[|Y_w − Y_r|^p ; at w].
    let mut cond = vec![0.0; n * (m + 1)];
    let mut joint = vec![0.0; (m + 1) * n];
    let mut dist = vec![0.0; n];
    for w in 0..n {
        let lw = tree.level_of(w);
        dist[w] = 1.0;
        for t in lw..=m {
            let mut acc = 0.0;
            for x in tree.level(t) {
                if dist[x] == 0.0 {
                    continue;
                }
                let inc = (y[x] - y[w]).abs().powf(p);
                acc += dist[x] * inc;
                joint[lw * n + x] += tree.reach(w) * dist[x] * inc;
                if t < m {
                    for (&c, q) in tree.children(x).iter().zip(tree.branch_probs(t)) {
                        dist[c] += dist[x] * q;
                    }
                }
                dist[x] = 0.0;
            }
            cond[w * (m + 1) + t] = acc;
        }
    }
    let mut rows = Vec::new();
    let mut c_increment: f64 = 0.0;
    for s in 0..m {
        for t in s + 1..=m {
            let moment: f64 = tree.level(s).map(|w| tree.reach(w) * cond[w * (m + 1) + t]).sum();
            let ratio = moment / (grid[t] - grid[s]);
            c_increment = c_increment.max(ratio);
            rows.push(IncrementRow { s: grid[s], t: grid[t], moment, ratio });
        }
    }
    let mut c_product: f64 = 0.0;
    for r in 0..m {
        for s in r + 1..m {
            for t in s + 1..=m {
                let e: f64 = tree.level(s).map(|w| joint[r * n + w] * cond[w * (m + 1) + t]).sum();
                c_product = c_product.max(e / (grid[t] - grid[r]).powi(2));
            }
        }
    }
    Ok(RegularityReport { p, steps: m, rows, c_increment, c_product })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DriverFamily, DriverSpec, MeasureForm, ModelConfig, ObstacleFamily, ObstacleSpec, TerminalSpec};
    use crate::mpp::{ClockSpec, IntensityKernel, TreeKind};

    fn config(driver: DriverFamily, obstacle: ObstacleFamily, terminal: TerminalSpec, horizon: f64, steps: usize) -> ModelConfig {
        ModelConfig {
            framework: Framework::Mpp,
            horizon,
            steps,
            tree: TreeKind::Recombining,
            marks: None,
            clock: ClockSpec::Identity,
            kernel: IntensityKernel::new(vec![1.0]).unwrap(),
            driver: DriverSpec { family: driver, declared: None },
            obstacle: ObstacleSpec { family: obstacle, gamma1: None, gamma2: None },
            terminal,
        }
    }

    fn linear(a: f64, b: f64, c: f64) -> DriverFamily {
        DriverFamily::Linear { a, b, c, d: 0.0, measure: MeasureForm::Mean }
    }

    #[test]
    fn measure_free_model_converges_in_one_iteration() {
        let cfg = config(
            linear(0.5, 0.3, 0.0),
            ObstacleFamily::Constant { level: 0.4 },
            TerminalSpec::Linear { level: 0.0, slope: 1.0 },
            1.0,
            6,
        );
        let model = Model::new(cfg).unwrap();
        let mf = solve_mf_rbsde(&model, &PicardOptions::default()).unwrap();
        assert_eq!(mf.iterations, 2);
        let tree = model.tree().unwrap();
        let xi = rbsde::terminal_values(&tree, 0, &model.terminal);
        let h = frozen_obstacle(&tree, 0, &model.obstacle, &xi, LawField::Fixed(&DiscreteLaw::dirac(0.0)), 0..6);
        let direct = rbsde::solve_rbsde_tree(&tree, &model.driver, LawField::Fixed(&DiscreteLaw::dirac(0.0)), &xi, &h).unwrap();
        assert_eq!(mf.solution.y, direct.y);
        assert_eq!(mf.log[1].sup_change, 0.0);
    }

    #[test]
    fn deterministic_terminal_mean_recursion() {
        let (a, c) = (0.4, 0.7);
        let cfg = config(linear(a, 0.0, c), ObstacleFamily::Inactive, TerminalSpec::Constant { value: 1.3 }, 1.0, 10);
        let model = Model::new(cfg).unwrap();
        let mf = solve_mf_rbsde(&model, &PicardOptions::default()).unwrap();
        let mut m = 1.3;
        let da = 0.1;
        for _ in 0..10 {
            m /= 1.0 - (a + c) * da;
        }
        assert!((mf.root() - m).abs() < 1e-10, "{} vs {m}", mf.root());
    }

    #[test]
    fn stitching_matches_single_shot() {
        let cfg = config(
            linear(0.6, 0.2, 0.5),
            ObstacleFamily::Linear { level: 0.2, slope_t: 0.0, slope_x: 0.1, gamma_y: 0.1, gamma_m: 0.1, measure: MeasureForm::Mean },
            TerminalSpec::Clamped { level: 0.0, slope: 0.5, lo: 0.0, hi: 1.5 },
            1.0,
            8,
        );
        let model = Model::new(cfg).unwrap();
        let one = solve_mf_rbsde(&model, &PicardOptions::default()).unwrap();
        let two = solve_with_stitching(&model, Some(0.5), &PicardOptions::default()).unwrap();
        assert_eq!(stitching_windows(&one.tree, 0.5), vec![(4, 8), (0, 4)]);
        assert!(sup_diff(&one.tree, &one.solution.y, &two.solution.y, 0, 8) < 1e-10);
        let (ka, kb) = (one.solution.total_k_mass(&one.tree), two.solution.total_k_mass(&two.tree));
        assert!((ka - kb).abs() < 1e-10);
        assert!(ka > 0.0);
        let whole = solve_with_stitching(&model, Some(2.0), &PicardOptions::default()).unwrap();
        assert_eq!(whole.solution.y, one.solution.y);
    }

    #[test]
    fn converged_solution_satisfies_system() {
        let cfg = config(
            linear(0.5, 0.4, 0.6),
            ObstacleFamily::Linear { level: 0.3, slope_t: -0.2, slope_x: 0.0, gamma_y: 0.2, gamma_m: 0.15, measure: MeasureForm::Mean },
            TerminalSpec::Linear { level: 0.0, slope: 0.8 },
            0.8,
            8,
        );
        let model = Model::new(cfg).unwrap();
        let mf = solve_mf_rbsde(&model, &PicardOptions::default()).unwrap();
        let r = mf.residuals(&model.problem());
        assert!(r.path < 1e-12 && r.obstacle_gap > -1e-12 && r.flat_off < 1e-12, "{r:?}");
        assert!(mf.fixed_point_residual(&model.problem()).unwrap() < 1e-10);
        let rep = &mf.contraction[0];
        assert!(rep.ratios_within_alpha && rep.within_cap, "{rep:?}");
        assert!(uniqueness_probe(&model, &PicardOptions::default()).unwrap() < 1e-9);
    }

    #[test]
    fn weighted_norm_of_constant() {
        let k = IntensityKernel::new(vec![1.0]).unwrap();
        let tree = ScenarioTree::builder(&k, &crate::mpp::Clock::identity(1.0).unwrap(), 4).kind(TreeKind::Recombining).build().unwrap();
        let d = vec![0.5; tree.node_count()];
        let got = weighted_square_norm(&tree, &d, 0.3, 0, 4);
        assert!((got - 0.25 * (0.6f64).exp()).abs() < 1e-15);
        assert!((weighted_square_norm(&tree, &d, 0.0, 1, 3) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn bounded_report_and_tight_u() {
        let mut cfg = config(
            linear(0.0, 0.0, 0.0),
            ObstacleFamily::Inactive,
            TerminalSpec::Indicator { threshold: 1, above: 1.0, below: -1.0 },
            0.1,
            1,
        );
        cfg.framework = Framework::Poisson;
        let model = Model::new(cfg).unwrap();
        let mf = solve_mf_rbsde(&model, &PicardOptions::default()).unwrap();
        let rep = bounded_regime_report(&mf);
        assert_eq!(rep.u_sup, 2.0);
        assert_eq!(rep.y_sup, 1.0);
        assert!(rep.holds);
    }

    #[test]
    fn regularity_of_constant_solution() {
        let mut cfg = config(linear(0.0, 0.0, 0.0), ObstacleFamily::Inactive, TerminalSpec::Constant { value: 2.0 }, 1.0, 8);
        cfg.framework = Framework::Poisson;
        let mf = solve_mf_rbsde(&Model::new(cfg).unwrap(), &PicardOptions::default()).unwrap();
        let r = regularity_probe(&mf, 2.0).unwrap();
        assert_eq!(r.c_increment, 0.0);
        assert_eq!(r.c_product, 0.0);
        assert_eq!(r.rows.len(), 36);
    }

    #[test]
    fn regularity_of_counting_process() {
                let mut cfg = config(
            linear(0.0, 0.0, 0.0),
            ObstacleFamily::Inactive,
            TerminalSpec::Linear { level: 0.0, slope: 1.0 },
            1.0,
            8,
        );
        cfg.framework = Framework::Poisson;
        let mf = solve_mf_rbsde(&Model::new(cfg).unwrap(), &PicardOptions::default()).unwrap();
        let r = regularity_probe(&mf, 2.0).unwrap();
        // Y_t = N_t + (T − t), so Y_t − Y_s = (N_t − N_s) − (t − s) is a centred
        // binomial with k = (t − s)/Δt trials of success probability Δt.
        let dt = 0.125;
        for row in &r.rows {
            assert!((row.moment - (row.t - row.s) * (1.0 - dt)).abs() < 1e-12, "{row:?}");
        }
        assert!((r.c_increment - (1.0 - dt)).abs() < 1e-12);
    }
}
