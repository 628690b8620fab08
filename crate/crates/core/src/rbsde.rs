//! Backward dynamic programming for (reflected) BSDEs on a scenario tree with
//! frozen law arguments, and the brute-force optimal-stopping oracle.
//!
//! At a node `v` at level `i` with no-jump child `c_0` and jump children
//! `c_{j,k}` the solver sets
//!
//! ```text
//! U_v^{j}(e_k) = Y_{c_{j,k}} − Y_{c_0}
//! Ỹ_v = Y_{c_0} + ΔA_i Σ_{j,k} φ_k U_v^{j}(e_k) + f(t_i, Ỹ_v, U_v^{s}, μ_v) ΔA_i
//! Y_v = max(Ỹ_v, h_v),   ΔK_v = Y_v − Y_{c_0} − ΔA_i Σ φ_k U_v^{j}(e_k) − f(t_i, Y_v, U_v^{s}, μ_v) ΔA_i
//! ```
//!
//! where `s` is the source whose equation is being solved. Along every edge
//! this gives `Y_v = Y_{c_b} + f ΔA_i + ΔK_v − ΔM_b` with the compensated
//! increment `ΔM_b = U_v^{b}·1{b ≠ 0} − ΔA_i Σ φ_k U_v^{j}(e_k)`.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::DiscreteLaw;
use crate::models::{Driver, Obstacle, Terminal};
use crate::mpp::{NodeId, ScenarioTree, TreeKind};

/// Law argument fed to the driver, frozen during a sweep.
#[derive(Clone, Copy)]
pub enum LawField<'a> {
    /// One law for every node.
    Fixed(&'a DiscreteLaw),
    /// One law per grid level (the mean-field flow).
    Level(&'a [DiscreteLaw]),
    /// One law per node (empirical measures of a particle system).
    Node(&'a [DiscreteLaw]),
}

impl<'a> LawField<'a> {
    pub fn at(&self, level: usize, node: NodeId) -> &'a DiscreteLaw {
        match *self {
            LawField::Fixed(l) => l,
            LawField::Level(ls) => &ls[level],
            LawField::Node(ls) => &ls[node],
        }
    }
}

/// Node-indexed `(Y, U, ΔK)` for one source, with the obstacle values used.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolutionTriple {
    pub source: usize,
    /// Number of `U` entries per node (`sources · marks`).
    pub width: usize,
    pub marks: usize,
    pub y: Vec<f64>,
    /// `U_v^{j}(e_k)` at `v·width + j·marks + k`; zero on leaves.
    pub u: Vec<f64>,
    /// Reflection increment at each node.
    pub dk: Vec<f64>,
    /// Frozen obstacle value at each node, if any.
    pub obstacle: Vec<Option<f64>>,
    /// Window of levels `[lo, hi]` covered; values outside are not meaningful.
    pub lo: usize,
    pub hi: usize,
}

impl SolutionTriple {
    pub fn root(&self) -> f64 {
        self.y[0]
    }

    pub fn u_at(&self, node: NodeId) -> &[f64] {
        &self.u[node * self.width..(node + 1) * self.width]
    }

    /// `U_v^{source}`, the argument passed to the driver.
    pub fn own_u(&self, node: NodeId) -> &[f64] {
        let off = node * self.width + self.source * self.marks;
        &self.u[off..off + self.marks]
    }

    /// `E[K_T − K_{t_lo}] = Σ_v P(v) ΔK_v`.
    pub fn total_k_mass(&self, tree: &ScenarioTree) -> f64 {
        (self.lo..self.hi).flat_map(|i| tree.level(i)).map(|v| tree.reach(v) * self.dk[v]).sum()
    }

    /// Cumulative `K` on a full tree: `K_root = 0`, `K_child = K_parent + ΔK_parent`.
    pub fn cumulative_k(&self, tree: &ScenarioTree) -> Option<Vec<f64>> {
        if tree.kind() != TreeKind::Full {
            return None;
        }
        let mut k = vec![0.0; tree.node_count()];
        for v in 1..tree.node_count() {
            let (p, _) = tree.parent(v).expect("non-root node has a parent");
            k[v] = k[p] + self.dk[p];
        }
        Some(k)
    }

    /// `max_v ‖U_v‖_∞` over the window.
    pub fn u_sup(&self, tree: &ScenarioTree) -> f64 {
        (self.lo..self.hi)
            .flat_map(|i| tree.level(i))
            .flat_map(|v| self.u_at(v).iter().map(|x| x.abs()))
            .fold(0.0, f64::max)
    }

    /// `max_v |Y_v|` over the window.
    pub fn y_sup(&self, tree: &ScenarioTree) -> f64 {
        (self.lo..=self.hi).flat_map(|i| tree.level(i)).map(|v| self.y[v].abs()).fold(0.0, f64::max)
    }

    /// Rows `(node, level, time, y, u_1..u_w, dk, k)`; `k` is empty on recombining trees.
    pub fn write_csv<W: Write>(&self, tree: &ScenarioTree, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["node".to_string(), "level".into(), "time".into(), "y".into()];
        for j in 0..self.width / self.marks {
            for k in 0..self.marks {
                header.push(if self.width == self.marks { format!("u_{}", k + 1) } else { format!("u_{}_{}", j + 1, k + 1) });
            }
        }
        header.extend(["dk".to_string(), "k".into()]);
        w.write_record(&header)?;
        let cum = self.cumulative_k(tree);
        for i in self.lo..=self.hi {
            for v in tree.level(i) {
                let mut row = vec![v.to_string(), i.to_string(), tree.grid()[i].to_string(), self.y[v].to_string()];
                row.extend(self.u_at(v).iter().map(|x| x.to_string()));
                row.push(self.dk[v].to_string());
                row.push(cum.as_ref().map(|k| k[v].to_string()).unwrap_or_default());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Terminal values `ξ(counts of source)` on the leaves, indexed by node.
pub fn terminal_values(tree: &ScenarioTree, source: usize, terminal: &dyn Terminal) -> Vec<f64> {
    let mut out = vec![f64::NAN; tree.node_count()];
    for v in tree.leaves() {
        out[v] = terminal.eval(tree.counts(v, source));
    }
    out
}

/// Inputs of one backward sweep over the levels `[lo, hi]`.
#[derive(Clone, Copy)]
pub struct Sweep<'a> {
    pub tree: &'a ScenarioTree,
    pub source: usize,
    pub driver: &'a dyn Driver,
    pub laws: LawField<'a>,
    /// Node-indexed obstacle; `None` switches reflection off.
    pub obstacle: Option<&'a [Option<f64>]>,
    /// Node-indexed values, read at level `hi`.
    pub terminal: &'a [f64],
    pub lo: usize,
    pub hi: usize,
}

impl<'a> Sweep<'a> {
    pub fn full(
        tree: &'a ScenarioTree,
        driver: &'a dyn Driver,
        laws: LawField<'a>,
        obstacle: Option<&'a [Option<f64>]>,
        terminal: &'a [f64],
    ) -> Self {
        Sweep { tree, source: 0, driver, laws, obstacle, terminal, lo: 0, hi: tree.steps() }
    }
}

/// Solves `y = e + da·g(y)` by fixed-point iteration, which contracts when
/// `lipschitz·da < 1`.
pub fn implicit_step<G: Fn(f64) -> f64>(e: f64, da: f64, lipschitz: f64, step: usize, g: G) -> Result<f64> {
    let factor = lipschitz * da;
    if factor >= 1.0 {
        return Err(Error::ImplicitNotContractive { step, factor });
    }
    if da == 0.0 {
        return Ok(e);
    }
    let mut y = e + da * g(e);
    for _ in 0..200 {
        let next = e + da * g(y);
        let diff = (next - y).abs();
        y = next;
        if diff <= f64::EPSILON * y.abs().max(1.0) {
            break;
        }
    }
    Ok(y)
}

/// `Σ_{j,k} φ_k U^{j}(e_k)` summed in sorted order, so that relabelling the
/// sources leaves the result bitwise unchanged.
pub fn compensator_sum(u: &[f64], weights: &[f64], buf: &mut Vec<f64>) -> f64 {
    let m = weights.len();
    buf.clear();
    buf.extend(u.iter().enumerate().map(|(idx, x)| weights[idx % m] * x));
    if buf.len() > m {
        buf.sort_by(f64::total_cmp);
    }
    buf.iter().sum()
}

/// One backward sweep: the discrete (reflected) BSDE on levels `[lo, hi]`.
/// Levels outside the window keep the values passed in `terminal`.
pub fn sweep(s: &Sweep<'_>) -> Result<SolutionTriple> {
    let tree = s.tree;
    if s.hi > tree.steps() || s.lo > s.hi {
        return Err(Error::Shape(format!("window [{}, {}] outside a tree of depth {}", s.lo, s.hi, tree.steps())));
    }
    if s.source >= tree.sources() {
        return Err(Error::Shape(format!("source {} on a tree with {} sources", s.source, tree.sources())));
    }
    let n = tree.node_count();
    let marks = tree.marks();
    let width = tree.sources() * marks;
    let weights = tree.weights();
    let lip = s.driver.lipschitz();
    if s.terminal.len() != n {
        return Err(Error::Shape(format!("terminal vector has {} entries for {n} nodes", s.terminal.len())));
    }
    let mut y = s.terminal.to_vec();
    let mut u = vec![0.0; n * width];
    let mut dk = vec![0.0; n];
    let mut obstacle = vec![None; n];
    for v in tree.level(s.hi) {
        if !y[v].is_finite() {
            return Err(Error::Domain(format!("terminal value at node {v} is not finite")));
        }
    }
    let mut buf = Vec::with_capacity(width);
    for i in (s.lo..s.hi).rev() {
        let t = tree.grid()[i];
        let da = tree.d_a()[i];
        for v in tree.level(i) {
            let ch = tree.children(v);
            let y0 = y[ch[0]];
            let uv = &mut u[v * width..(v + 1) * width];
            for (slot, &c) in uv.iter_mut().zip(&ch[1..]) {
                *slot = y[c] - y0;
            }
            let e = y0 + da * compensator_sum(uv, weights, &mut buf);
            let own = &uv[s.source * marks..(s.source + 1) * marks];
            let mu = s.laws.at(i, v);
            let yt = implicit_step(e, da, lip, i, |yy| s.driver.eval(t, yy, own, mu))?;
            let h = s.obstacle.and_then(|o| o[v]);
            obstacle[v] = h;
            match h {
                Some(h) if h > yt => {
                    // y − E − ΔA f(y) is increasing, so this is positive.
                    y[v] = h;
                    dk[v] = (h - e - da * s.driver.eval(t, h, own, mu)).max(0.0);
                }
                _ => y[v] = yt,
            }
            if !y[v].is_finite() {
                return Err(Error::Domain(format!("non-finite value at node {v}")));
            }
        }
    }
    Ok(SolutionTriple { source: s.source, width, marks, y, u, dk, obstacle, lo: s.lo, hi: s.hi })
}

/// Unreflected BSDE on the whole tree.
pub fn solve_bsde_tree(tree: &ScenarioTree, driver: &dyn Driver, laws: LawField<'_>, terminal: &[f64]) -> Result<SolutionTriple> {
    sweep(&Sweep::full(tree, driver, laws, None, terminal))
}

/// Reflected BSDE on the whole tree with a frozen node-indexed obstacle.
pub fn solve_rbsde_tree(
    tree: &ScenarioTree,
    driver: &dyn Driver,
    laws: LawField<'_>,
    terminal: &[f64],
    obstacle: &[Option<f64>],
) -> Result<SolutionTriple> {
    sweep(&Sweep::full(tree, driver, laws, Some(obstacle), terminal))
}

/// Node-indexed obstacle `h(t_v, counts, y_v, μ_v)` with frozen `y` and law.
pub fn frozen_obstacle(
    tree: &ScenarioTree,
    source: usize,
    obstacle: &dyn Obstacle,
    y: &[f64],
    laws: LawField<'_>,
    levels: std::ops::Range<usize>,
) -> Vec<Option<f64>> {
    let mut out = vec![None; tree.node_count()];
    for i in levels {
        let t = tree.grid()[i];
        for v in tree.level(i) {
            out[v] = obstacle.eval(t, tree.counts(v, source), y[v], laws.at(i, v));
        }
    }
    out
}

/// Residuals of the discrete system at a solution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Residuals {
    /// Largest one-edge residual of `Y_v = Y_c + fΔA + ΔK_v − ΔM`.
    pub edge: f64,
    /// Largest accumulated residual along any path suffix.
    pub path: f64,
    /// `min_v (Y_v − h_v)`; `+∞` without obstacle.
    pub obstacle_gap: f64,
    /// `max_v |(Y_v − h_v) ΔK_v|`.
    pub flat_off: f64,
    /// `min_v ΔK_v`.
    pub min_dk: f64,
}

/// Checks the pathwise equation, obstacle dominance and flat-off, where `h`
/// is re-evaluated by `obstacle_at` (pass the stored frozen values to check
/// the sweep itself, or a fresh evaluation to check a fixed point).
pub fn residuals<H>(sol: &SolutionTriple, tree: &ScenarioTree, driver: &dyn Driver, laws: LawField<'_>, obstacle_at: H) -> Residuals
where
    H: Fn(NodeId) -> Option<f64>,
{
    let weights = tree.weights();
    let marks = tree.marks();
    let mut r = Residuals { obstacle_gap: f64::INFINITY, min_dk: f64::INFINITY, ..Default::default() };
    let mut worst = vec![0.0f64; tree.node_count()];
    for i in (sol.lo..sol.hi).rev() {
        let t = tree.grid()[i];
        let da = tree.d_a()[i];
        for v in tree.level(i) {
            let uv = sol.u_at(v);
            let comp: f64 = uv.iter().enumerate().map(|(idx, x)| weights[idx % marks] * x).sum();
            let f = driver.eval(t, sol.y[v], sol.own_u(v), laws.at(i, v));
            let mut w: f64 = 0.0;
            for (b, &c) in tree.children(v).iter().enumerate() {
                let jump = if b == 0 { 0.0 } else { uv[b - 1] };
                let dm = jump - da * comp;
                let res = (sol.y[v] - (sol.y[c] + f * da + sol.dk[v] - dm)).abs();
                r.edge = r.edge.max(res);
                w = w.max(res + if i + 1 < sol.hi { worst[c] } else { 0.0 });
            }
            worst[v] = w;
            r.path = r.path.max(w);
            if let Some(h) = obstacle_at(v) {
                r.obstacle_gap = r.obstacle_gap.min(sol.y[v] - h);
                r.flat_off = r.flat_off.max(((sol.y[v] - h) * sol.dk[v]).abs());
            } else if sol.dk[v] != 0.0 {
                r.flat_off = f64::INFINITY;
            }
            r.min_dk = r.min_dk.min(sol.dk[v]);
        }
    }
    r
}

/// An adapted stopping rule on a full tree: stop at the first flagged node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StoppingRule {
    pub stop: Vec<bool>,
}

impl StoppingRule {
    /// Stop where the reflected solution sits on its obstacle.
    pub fn first_hit(sol: &SolutionTriple, tree: &ScenarioTree) -> Self {
        let mut stop = vec![false; tree.node_count()];
        for v in 0..tree.node_count() {
            stop[v] = tree.is_leaf(v) || matches!(sol.obstacle[v], Some(h) if sol.y[v] <= h);
        }
        StoppingRule { stop }
    }

    /// Nodes where some path stops (the frontier).
    pub fn frontier(&self, tree: &ScenarioTree) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![0];
        while let Some(v) = stack.pop() {
            if self.stop[v] || tree.is_leaf(v) {
                out.push(v);
            } else {
                stack.extend(tree.children(v).iter().rev());
            }
        }
        out.sort_unstable();
        out
    }
}

/// Number of adapted stopping rules (distinct frontiers) on a full tree,
/// allowing stops only where an obstacle exists; saturates at `u128::MAX`.
pub fn count_stopping_rules(tree: &ScenarioTree, obstacle: &[Option<f64>]) -> u128 {
    let mut r = vec![1u128; tree.node_count()];
    for i in (0..tree.steps()).rev() {
        for v in tree.level(i) {
            let prod = tree.children(v).iter().fold(1u128, |acc, &c| acc.saturating_mul(r[c]));
            r[v] = prod.saturating_add(u128::from(obstacle[v].is_some()));
        }
    }
    r[0]
}

/// Value of the nonlinear expectation of the payoff stopped by `rule`.
pub fn evaluate_rule(
    tree: &ScenarioTree,
    driver: &dyn Driver,
    laws: LawField<'_>,
    terminal: &[f64],
    obstacle: &[Option<f64>],
    stop: &[bool],
) -> Result<f64> {
    let weights = tree.weights();
    let m = tree.marks();
    let mut y = vec![f64::NAN; tree.node_count()];
    for v in tree.leaves() {
        y[v] = terminal[v];
    }
    let mut u = vec![0.0; m];
    let mut buf = Vec::new();
    for i in (0..tree.steps()).rev() {
        let t = tree.grid()[i];
        let da = tree.d_a()[i];
        for v in tree.level(i) {
            if stop[v] {
                y[v] = obstacle[v].ok_or_else(|| Error::Domain(format!("rule stops at node {v} without obstacle")))?;
                continue;
            }
            let ch = tree.children(v);
            for (k, slot) in u.iter_mut().enumerate() {
                *slot = y[ch[k + 1]] - y[ch[0]];
            }
            let e = y[ch[0]] + da * compensator_sum(&u, weights, &mut buf);
            let mu = laws.at(i, v);
            y[v] = implicit_step(e, da, driver.lipschitz(), i, |yy| driver.eval(t, yy, &u, mu))?;
        }
    }
    Ok(y[0])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SnellOracle {
    pub value: f64,
    pub rules: u128,
    /// A maximizing rule; ties favour stopping earlier.
    pub best: StoppingRule,
}

/// Maximizes the stopped nonlinear expectation over every adapted stopping
/// rule of a full single-source tree.
pub fn snell_bruteforce(
    tree: &ScenarioTree,
    driver: &dyn Driver,
    laws: LawField<'_>,
    terminal: &[f64],
    obstacle: &[Option<f64>],
    budget: u128,
) -> Result<SnellOracle> {
    if tree.kind() != TreeKind::Full || tree.sources() != 1 {
        return Err(Error::Config("the stopping oracle needs a full single-source tree".into()));
    }
    let rules = count_stopping_rules(tree, obstacle);
    if rules > budget {
        return Err(Error::Budget { what: "adapted stopping rules".into(), required: rules, budget });
    }
    // Frontiers of each subtree, stop-at-root first.
    let mut frontiers: Vec<Vec<Vec<NodeId>>> = vec![Vec::new(); tree.node_count()];
    for v in tree.leaves() {
        frontiers[v] = vec![vec![v]];
    }
    for i in (0..tree.steps()).rev() {
        for v in tree.level(i) {
            let mut list = Vec::new();
            if obstacle[v].is_some() {
                list.push(vec![v]);
            }
            let mut combos: Vec<Vec<NodeId>> = vec![Vec::new()];
            for &c in tree.children(v) {
                let mut next = Vec::with_capacity(combos.len() * frontiers[c].len());
                for a in &combos {
                    for b in &frontiers[c] {
                        let mut z = a.clone();
                        z.extend_from_slice(b);
                        next.push(z);
                    }
                }
                combos = next;
            }
            list.extend(combos);
            frontiers[v] = list;
        }
        for v in tree.level(i + 1) {
            frontiers[v] = Vec::new();
        }
    }
    let mut best: Option<(f64, Vec<bool>)> = None;
    let mut stop = vec![false; tree.node_count()];
    for f in &frontiers[0] {
        stop.iter_mut().for_each(|s| *s = false);
        for &v in f {
            stop[v] = true;
        }
        let val = evaluate_rule(tree, driver, laws, terminal, obstacle, &stop)?;
        if best.as_ref().is_none_or(|(b, _)| val > *b) {
            best = Some((val, stop.clone()));
        }
    }
    let (value, stop) = best.expect("at least the terminal rule exists");
    Ok(SnellOracle { value, rules, best: StoppingRule { stop } })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StabilityGap {
    /// `|Y¹_0 − Y²_0|²`.
    pub lhs: f64,
    /// `sup_τ E[e^{2βA_τ} |payoff¹_τ − payoff²_τ|²]` (the driver term vanishes for a shared driver).
    pub rhs: f64,
}

/// A priori estimate for two reflected problems sharing driver and law flow.
#[allow(clippy::too_many_arguments)]
pub fn stability_gap(
    tree: &ScenarioTree,
    driver: &dyn Driver,
    laws: LawField<'_>,
    beta: f64,
    terminal1: &[f64],
    obstacle1: &[Option<f64>],
    terminal2: &[f64],
    obstacle2: &[Option<f64>],
) -> Result<StabilityGap> {
    let s1 = solve_rbsde_tree(tree, driver, laws, terminal1, obstacle1)?;
    let s2 = solve_rbsde_tree(tree, driver, laws, terminal2, obstacle2)?;
    let lhs = (s1.root() - s2.root()).powi(2);
    let weight = |i: usize| (2.0 * beta * tree.clock_values()[i]).exp();
    let mut snell = vec![0.0; tree.node_count()];
    for v in tree.leaves() {
        snell[v] = weight(tree.steps()) * (terminal1[v] - terminal2[v]).powi(2);
    }
    for i in (0..tree.steps()).rev() {
        let probs = tree.branch_probs(i);
        for v in tree.level(i) {
            let cont: f64 = tree.children(v).iter().zip(probs).map(|(&c, p)| p * snell[c]).sum();
            let stop = match (obstacle1[v], obstacle2[v]) {
                (Some(a), Some(b)) => weight(i) * (a - b).powi(2),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            };
            snell[v] = cont.max(stop);
        }
    }
    Ok(StabilityGap { lhs, rhs: snell[0] })
}

/// JSON summary of a single tree solve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolutionSummary {
    pub root_y: f64,
    pub total_k_mass: f64,
    pub iterations: usize,
    pub nodes: usize,
}

impl SolutionSummary {
    pub fn new(sol: &SolutionTriple, tree: &ScenarioTree, iterations: usize) -> Self {
        SolutionSummary { root_y: sol.y[tree.level(sol.lo).start], total_k_mass: sol.total_k_mass(tree), iterations, nodes: tree.node_count() }
    }
}
