//! Convergence studies: decay of the empirical-measure statistic, log-log
//! rate fits, the exact chaos inequality on tiny joint trees and the discrete
//! backward Gronwall bound.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::meanfield::{solve_mf_rbsde, MfSolution, PicardOptions};
use crate::measures::{lln_statistic, wasserstein_pow, DiscreteLaw};
use crate::models::{Framework, Model};
use crate::mpp::TreeKind;
use crate::particles::{copy_values, sample_iid_copies, solve_particle_system_exact, ParticleSolution};

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LlnRow {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
    /// 95% normal interval.
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub rows_used: usize,
    pub rows_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChaosReport {
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub rows: Vec<LlnRow>,
    /// Absent when fewer than three rows have a positive mean.
    pub fit: Option<RateFit>,
    pub slope_defined: bool,
}

impl ChaosReport {
    /// Rows `(n, mean, stderr, ci_lo, ci_hi)`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "mean", "stderr", "ci_lo", "ci_hi"])?;
        for r in &self.rows {
            w.write_record([r.n.to_string(), r.mean.to_string(), r.stderr.to_string(), r.ci_lo.to_string(), r.ci_hi.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Least squares of `log mean` on `log n`; rows with nonpositive mean are
/// dropped with a warning.
pub fn rate_fit(rows: &[(f64, f64, f64)]) -> Result<RateFit> {
    let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.1 > 0.0 && r.0 > 0.0).map(|r| (r.0.ln(), r.1.ln())).collect();
    let excluded = rows.len() - pts.len();
    if excluded > 0 {
        log::warn!("rate fit: {excluded} row(s) with nonpositive mean excluded");
    }
    if pts.len() < 3 {
        return Err(Error::Domain(format!("rate fit needs at least 3 positive rows, got {}", pts.len())));
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("rate fit needs at least two distinct n".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(RateFit { slope, intercept, r2, rows_used: pts.len(), rows_excluded: excluded })
}

/// For each `n`, the mean over `reps` batches of `sup_t W_2²(L_n[Ȳ_t], P_{Y_t})`
/// for `n` iid copies, and the log-log slope.
pub fn lln_study(mf: &MfSolution, n_list: &[usize], reps: usize, seed: u64) -> Result<ChaosReport> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[0] >= w[1]) || n_list[0] == 0 {
        return Err(Error::Config("n_list must be nonempty, positive and strictly increasing".into()));
    }
    if reps < 2 {
        return Err(Error::Config("lln study needs at least 2 repetitions".into()));
    }
    let mut rows = Vec::with_capacity(n_list.len());
    for (ni, &n) in n_list.iter().enumerate() {
        let sub_seed = rand::RngCore::next_u64(&mut crate::rng::stream(seed, ni as u64));
        let batches = sample_iid_copies(mf, n, reps, sub_seed);
        let stats = batches.par_iter().map(|b| lln_statistic(b, &mf.flow)).collect::<Result<Vec<f64>>>()?;
        let mean = compensated_sum(stats.iter().copied()) / reps as f64;
        let var = compensated_sum(stats.iter().map(|s| (s - mean).powi(2))) / (reps - 1) as f64;
        let stderr = (var / reps as f64).sqrt();
        rows.push(LlnRow { n, mean, stderr, ci_lo: mean - 1.96 * stderr, ci_hi: mean + 1.96 * stderr });
    }
    let table: Vec<(f64, f64, f64)> = rows.iter().map(|r| (r.n as f64, r.mean, r.stderr)).collect();
    let fit = rate_fit(&table).ok();
    Ok(ChaosReport { n_list: n_list.to_vec(), reps, seed, rows, slope_defined: fit.is_some(), fit })
}

/// Exact evaluation of the chaos inequality on a joint tree.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChaosExact {
    pub framework: Framework,
    pub n: usize,
    pub steps: usize,
    /// `sup_t E[w_t |Y^{i,n}_t − Ȳ^i_t|²]`, maximized over `i`.
    pub lhs: f64,
    /// `E[V^{n,2}_t] = E[w_t |Y^{i,n}_t − Ȳ^i_t|²]` per grid time.
    pub v_profile: Vec<f64>,
    /// `E[Γ_{n,2}]`.
    pub gamma_expectation: f64,
    pub lambda: f64,
    pub k_p: f64,
    /// `e^{K_p} / λ · E[Γ_{n,2}]`.
    pub bound: f64,
    pub holds: bool,
    /// `bound − lhs`.
    pub margin: f64,
}

/// Refuses unless `γ₁² + γ₂² < 1/8`, returning `λ = 1 − 8(γ₁² + γ₂²)`.
pub fn chaos_lambda(model: &Model) -> Result<f64> {
    let (g1, g2) = crate::models::Obstacle::gammas(&model.obstacle);
    let margin = 0.125 - (g1 * g1 + g2 * g2);
    if margin <= 0.0 {
        return Err(Error::Regime { condition: "gamma1^2 + gamma2^2 < 1/8".into(), margin });
    }
    Ok(1.0 - 8.0 * (g1 * g1 + g2 * g2))
}

/// Both sides of the chaos inequality, computed exactly on the full joint
/// tree of `n` particles against the mean-field solution on the same grid.
pub fn chaos_bound_check(model: &Model, n: usize, budget: u128, opts: &PicardOptions) -> Result<ChaosExact> {
    let lambda = chaos_lambda(model)?;
    let ps = solve_particle_system_exact(model, n, TreeKind::Full, budget, opts)?;
    let mf = solve_mf_rbsde(model, opts)?;
    chaos_bound_from(model, &ps, &mf, lambda)
}

pub fn chaos_bound_from(model: &Model, ps: &ParticleSolution, mf: &MfSolution, lambda: f64) -> Result<ChaosExact> {
    let tree = &ps.tree;
    if tree.kind() != TreeKind::Full {
        return Err(Error::Config("the chaos bound needs a full joint tree".into()));
    }
    let n = ps.n();
    let steps = tree.steps();
    let cf = crate::models::Driver::lipschitz(&model.driver);
    let (_, g2) = crate::models::Obstacle::gammas(&model.obstacle);
    let (eta_cf2, beta) = if cf > 0.0 { (1.0, cf + cf * cf) } else { (0.0, 0.0) };
    let horizon = model.clock.horizon();
    let a_total = model.clock.total();
    let (order, coef, k_p, weight): (u32, f64, f64, Box<dyn Fn(usize) -> f64>) = match model.framework {
        Framework::Mpp => {
            let cv = tree.clock_values().to_vec();
            (2, 4.0 * g2 * g2 + 2.0 * eta_cf2 * a_total, 2.0 * eta_cf2 * a_total / lambda, Box::new(move |i| (2.0 * beta * cv[i]).exp()))
        }
        Framework::Poisson => {
            let w = (2.0 * beta * horizon).exp();
            (1, 4.0 * g2 * g2 + 2.0 * eta_cf2, 2.0 * eta_cf2 * horizon / lambda, Box::new(move |_| w))
        }
    };
    let copies: Vec<Vec<f64>> = (0..n).map(|i| copy_values(mf, tree, i)).collect::<Result<_>>()?;

    let mut v_profile = vec![0.0; steps + 1];
    let mut lhs: f64 = 0.0;
    for i in 0..n {
        for (lvl, slot) in v_profile.iter_mut().enumerate() {
            let e: f64 = tree.level(lvl).map(|v| tree.reach(v) * (ps.particles[i].y[v] - copies[i][v]).powi(2)).sum();
            let e = weight(lvl) * e;
            lhs = lhs.max(e);
            *slot += e / n as f64;
        }
    }

    // Pathwise running sup of w_s W²(L_n[Ȳ_s], P_{Y_s}).
    let mut running = vec![0.0f64; tree.node_count()];
    let mut col = vec![0.0; n];
    for lvl in 0..=steps {
        for v in tree.level(lvl) {
            for (c, y) in col.iter_mut().zip(&copies) {
                *c = y[v];
            }
            let emp = DiscreteLaw::uniform(&col)?;
            let w = weight(lvl) * wasserstein_pow(&emp, &mf.flow.laws[lvl], order)?.powf(2.0 / order as f64);
            let prev = tree.parent(v).map_or(0.0, |(p, _)| running[p]);
            running[v] = prev.max(w);
        }
    }
    let sup_expect: f64 = tree.leaves().map(|v| tree.reach(v) * running[v]).sum();
    let gamma_expectation = coef * sup_expect;
    let bound = k_p.exp() / lambda * gamma_expectation;
    Ok(ChaosExact {
        framework: model.framework,
        n,
        steps,
        lhs,
        v_profile,
        gamma_expectation,
        lambda,
        k_p,
        bound,
        holds: lhs <= bound,
        margin: bound - lhs,
    })
}

/// `c · exp(Σ_{s > t} a_s)` at every grid index `t`.
pub fn backward_gronwall(a: &[f64], c: f64) -> Result<Vec<f64>> {
    if c < 0.0 || a.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::Domain("backward Gronwall needs nonnegative weights and constant".into()));
    }
    let mut out = vec![0.0; a.len()];
    let mut tail = 0.0f64;
    for t in (0..a.len()).rev() {
        out[t] = c * tail.exp();
        tail += a[t];
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GronwallCheck {
    pub bound: Vec<f64>,
    /// Indices where `g_t > c + Σ_{s>t} a_s g_s`.
    pub hypothesis_violations: Vec<usize>,
    /// Indices where `g_t` exceeds the bound.
    pub bound_violations: Vec<usize>,
}

/// Checks a supplied `g` against the discrete hypothesis and the bound.
pub fn check_gronwall(g: &[f64], a: &[f64], c: f64, tol: f64) -> Result<GronwallCheck> {
    if g.len() != a.len() {
        return Err(Error::Shape(format!("g has {} points, a has {}", g.len(), a.len())));
    }
    if g.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::Domain("backward Gronwall needs a nonnegative g".into()));
    }
    let bound = backward_gronwall(a, c)?;
    let mut hypothesis_violations = Vec::new();
    let mut tail = 0.0f64;
    for t in (0..g.len()).rev() {
        if g[t] > c + tail + tol {
            hypothesis_violations.push(t);
        }
        tail += a[t] * g[t];
    }
    hypothesis_violations.reverse();
    let bound_violations = (0..g.len()).filter(|&t| g[t] > bound[t] + tol).collect();
    Ok(GronwallCheck { bound, hypothesis_violations, bound_violations })
}
