//! The subcommands. Each computes everything first and returns its artifacts;
//! the caller writes them, so output is single-writer.
//!
//! Frozen output formats:
//!
//! - `validate`: `validation.json`
//! - `solve`: `summary.json`, `nodes.csv` (see `SolutionTriple::write_csv`),
//!   `flow.csv` (`time,atom,prob`)
//! - `snell-oracle`: `snell.csv`
//!   (`seed,steps,marks,rules,dp,brute_force,gap,reflects`), `snell.json`
//! - `simulate`: `paths.csv` (`path,time,mark`)
//! - `chaos-check`: `chaos.json`, `chaos_gap.csv` (`n,step,time,v,bound,gap`)
//! - `lln-study`: `lln.json`, `lln.csv` (`n,mean,stderr,ci_lo,ci_hi`)
//! - `stitch-check`: `stitch.json`
//! - `sample-copies`: `copies.csv` (`copy,step,value`), `copies.json`

use mfrbsde::convergence::{chaos_bound_check, lln_study, ChaosExact, ChaosReport};
use mfrbsde::measures::DiscreteLaw;
use mfrbsde::meanfield::{
    bounded_regime_report, regularity_probe, solve_mf_rbsde, solve_with_stitching, BoundedRegimeReport, MfSummary,
    PicardOptions, RegularityReport,
};
use mfrbsde::models::{random_model, validate_assumptions, Framework, Model, ModelConfig, SampleOptions};
use mfrbsde::mpp::{simulate_batch, TreeKind};
use mfrbsde::particles::{chi_square, sample_iid_copies, ChiSquare};
use mfrbsde::rbsde::{frozen_obstacle, snell_bruteforce, solve_rbsde_tree, terminal_values, LawField, Residuals};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{build_model, Settings};
use crate::error::{exit, CliError};
use crate::manifest::Artifact;

/// Largest `|DP − brute force|` accepted by `snell-oracle`.
pub const SNELL_TOL: f64 = 1e-10;
/// Largest stitched-versus-global node gap accepted by `stitch-check`.
pub const STITCH_TOL: f64 = 1e-9;
/// Slope band and `R²` floor reported by `lln-study`.
pub const LLN_SLOPE_BAND: (f64, f64) = (-0.65, -0.35);
pub const LLN_MIN_R2: f64 = 0.95;

pub struct Run<'a> {
    pub model: Option<&'a ModelConfig>,
    pub settings: &'a Settings,
}

impl Run<'_> {
    fn model(&self) -> Result<Model, CliError> {
        build_model(self.model)
    }

    fn picard(&self) -> PicardOptions {
        PicardOptions { tol: self.settings.tol, max_iter: self.settings.max_iter, ..Default::default() }
    }
}

fn csv_err(e: csv::Error) -> mfrbsde::Error {
    mfrbsde::Error::Csv(e)
}

pub fn validate(run: &Run<'_>) -> Result<Outcome, CliError> {
    let model = run.model()?;
    let report = validate_assumptions(&model, run.settings.probes, run.settings.seed);
    let out = vec![Artifact::json("validation.json", &report)?];
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let message = format!("assumption checks failed: {}", failed.join(", "));
    Ok(judged(out, report.all_passed, exit::REGIME, "assumptions", message, json!({ "failed": failed })))
}

#[derive(Serialize)]
struct SolveReport {
    summary: MfSummary,
    residuals: Residuals,
    fixed_point_residual: f64,
    /// Poisson runs only.
    bounded: Option<BoundedRegimeReport>,
    /// Poisson runs with at least 7 steps only.
    regularity: Option<RegularityReport>,
}

pub fn solve(run: &Run<'_>) -> Result<Outcome, CliError> {
    let model = run.model()?;
    let mf = solve_with_stitching(&model, run.settings.stitch_h, &run.picard())?;
    let problem = model.problem();
    let poisson = model.framework == Framework::Poisson;
    let report = SolveReport {
        summary: mf.summary(),
        residuals: mf.residuals(&problem),
        fixed_point_residual: mf.fixed_point_residual(&problem)?,
        bounded: poisson.then(|| bounded_regime_report(&mf)),
        regularity: if poisson && mf.tree.steps() >= 7 { Some(regularity_probe(&mf, 2.0)?) } else { None },
    };
    Ok(vec![
        Artifact::json("summary.json", &report)?,
        Artifact::csv("nodes.csv", |w| mf.solution.write_csv(&mf.tree, w))?,
        Artifact::csv("flow.csv", |w| mf.flow.write_csv(w))?,
    ]
    .into())
}

/// The seeded family used by `snell-oracle`: full single-source trees with
/// `M ≤ 4` for one mark and `M ≤ 3` for two.
pub fn snell_family(seed: u64) -> SampleOptions {
    if seed.is_multiple_of(2) {
        SampleOptions { tree: TreeKind::Full, steps: 2..=4, marks: 1..=1, ..Default::default() }
    } else {
        SampleOptions { tree: TreeKind::Full, steps: 2..=3, marks: 2..=2, ..Default::default() }
    }
}

#[derive(Clone, Debug, Serialize)]
struct SnellRow {
    seed: u64,
    steps: usize,
    marks: usize,
    rules: u128,
    dp: f64,
    brute_force: f64,
    gap: f64,
    reflects: bool,
}

fn snell_row(seed: u64, budget: u128) -> mfrbsde::Result<SnellRow> {
    let model = random_model(seed, &snell_family(seed))?;
    let tree = model.tree()?;
    let xi = terminal_values(&tree, 0, &model.terminal);
    let law = DiscreteLaw::from_weighted(tree.leaves().map(|v| (xi[v], tree.reach(v))))?;
    let zero = vec![0.0; tree.node_count()];
    let h = frozen_obstacle(&tree, 0, &model.obstacle, &zero, LawField::Fixed(&law), 0..tree.steps());
    let dp = solve_rbsde_tree(&tree, &model.driver, LawField::Fixed(&law), &xi, &h)?;
    let bf = snell_bruteforce(&tree, &model.driver, LawField::Fixed(&law), &xi, &h, budget)?;
    Ok(SnellRow {
        seed,
        steps: tree.steps(),
        marks: tree.marks(),
        rules: bf.rules,
        dp: dp.root(),
        brute_force: bf.value,
        gap: (dp.root() - bf.value).abs(),
        reflects: dp.total_k_mass(&tree) > 0.0,
    })
}

pub fn snell_oracle(run: &Run<'_>) -> Result<Outcome, CliError> {
    let s = run.settings;
    let rows = (0..s.seeds as u64)
        .into_par_iter()
        .map(|i| snell_row(s.seed.wrapping_add(i), s.budget as u128))
        .collect::<mfrbsde::Result<Vec<_>>>()?;
    let max_gap = rows.iter().map(|r| r.gap).fold(0.0, f64::max);
    let passed = max_gap < SNELL_TOL;
    let summary = json!({
        "models": rows.len(),
        "reflecting": rows.iter().filter(|r| r.reflects).count(),
        "max_steps": rows.iter().map(|r| r.steps).max(),
        "max_marks": rows.iter().map(|r| r.marks).max(),
        "max_gap": max_gap,
        "tolerance": SNELL_TOL,
        "passed": passed,
    });
    let csv = Artifact::csv("snell.csv", |out| {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["seed", "steps", "marks", "rules", "dp", "brute_force", "gap", "reflects"]).map_err(csv_err)?;
        for r in &rows {
            w.write_record([
                r.seed.to_string(),
                r.steps.to_string(),
                r.marks.to_string(),
                r.rules.to_string(),
                r.dp.to_string(),
                r.brute_force.to_string(),
                r.gap.to_string(),
                r.reflects.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    })?;
    let out = vec![csv, Artifact::json("snell.json", &summary)?];
    let message = format!("max gap {max_gap:e} exceeds {SNELL_TOL:e}");
    Ok(judged(out, passed, exit::CHECK_FAILED, "snell-oracle", message, summary))
}

pub fn simulate(run: &Run<'_>) -> Result<Outcome, CliError> {
    let model = run.model()?;
    let paths = simulate_batch(&model.kernel, &model.clock, model.config.horizon, run.settings.seed, run.settings.paths)?;
    Ok(vec![Artifact::csv("paths.csv", |out| {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path", "time", "mark"]).map_err(csv_err)?;
        for (i, p) in paths.iter().enumerate() {
            for j in &p.jumps {
                w.write_record([i.to_string(), j.time.to_string(), model.marks.labels[j.mark].clone()]).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    })?]
    .into())
}

pub fn chaos_check(run: &Run<'_>) -> Result<Outcome, CliError> {
    let model = run.model()?;
    let opts = run.picard();
    let checks = run
        .settings
        .n
        .iter()
        .map(|&n| chaos_bound_check(&model, n, run.settings.budget as u128, &opts))
        .collect::<mfrbsde::Result<Vec<ChaosExact>>>()?;
    let grid = model.tree()?.grid().to_vec();
    let all_hold = checks.iter().all(|c| c.holds);
    let out = vec![
        Artifact::json("chaos.json", &json!({ "checks": checks, "all_hold": all_hold }))?,
        Artifact::csv("chaos_gap.csv", |out| {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["n", "step", "time", "v", "bound", "gap"]).map_err(csv_err)?;
            for c in &checks {
                for (i, v) in c.v_profile.iter().enumerate() {
                    w.write_record([
                        c.n.to_string(),
                        i.to_string(),
                        grid[i].to_string(),
                        v.to_string(),
                        c.bound.to_string(),
                        (c.bound - v).to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
            w.flush()?;
            Ok(())
        })?,
    ];
    let failing: Vec<usize> = checks.iter().filter(|c| !c.holds).map(|c| c.n).collect();
    let message = format!("bound fails for n in {failing:?}");
    Ok(judged(out, all_hold, exit::CHECK_FAILED, "chaos-bound", message, json!({ "n": failing })))
}

#[derive(Serialize)]
struct LlnOutput<'a> {
    #[serde(flatten)]
    report: &'a ChaosReport,
    slope_band: (f64, f64),
    min_r2: f64,
    in_band: bool,
}

pub fn lln(run: &Run<'_>) -> Result<Outcome, CliError> {
    let model = run.model()?;
    let mf = solve_mf_rbsde(&model, &run.picard())?;
    let report = lln_study(&mf, &run.settings.n_list, run.settings.reps, run.settings.seed)?;
    let (lo, hi) = LLN_SLOPE_BAND;
    let in_band = report.fit.is_some_and(|f| (lo..=hi).contains(&f.slope) && f.r2 >= LLN_MIN_R2);
    let out = LlnOutput { report: &report, slope_band: LLN_SLOPE_BAND, min_r2: LLN_MIN_R2, in_band };
    Ok(vec![Artifact::json("lln.json", &out)?, Artifact::csv("lln.csv", |w| report.write_csv(w))?].into())
}

pub fn stitch_check(run: &Run<'_>) -> Result<Outcome, CliError> {
    let model = run.model()?;
    let opts = run.picard();
    let global = solve_mf_rbsde(&model, &opts)?;
    let h = match run.settings.stitch_h {
        Some(h) => h,
        None => model.contraction()?.h_step.min(model.config.horizon / 3.0),
    };
    let stitched = solve_with_stitching(&model, Some(h), &opts)?;
    let gap = global.solution.y.iter().zip(&stitched.solution.y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let passed = gap < STITCH_TOL;
    let report = json!({
        "h": h,
        "windows": stitched.contraction.len(),
        "global_root": global.root(),
        "stitched_root": stitched.root(),
        "max_node_gap": gap,
        "tolerance": STITCH_TOL,
        "passed": passed,
    });
    let out = vec![Artifact::json("stitch.json", &report)?];
    let message = format!("stitched and global solutions differ by {gap:e}");
    Ok(judged(out, passed, exit::CHECK_FAILED, "stitching", message, report))
}

#[derive(Serialize)]
struct LevelChi {
    step: usize,
    time: f64,
    #[serde(flatten)]
    chi: ChiSquare,
}

pub fn sample_copies(run: &Run<'_>) -> Result<Outcome, CliError> {
    let model = run.model()?;
    let mf = solve_mf_rbsde(&model, &run.picard())?;
    let copies = sample_iid_copies(&mf, run.settings.copies, 1, run.settings.seed).remove(0);
    let levels: Vec<LevelChi> = (0..=mf.tree.steps())
        .map(|i| {
            let samples: Vec<f64> = copies.iter().map(|path| path[i]).collect();
            LevelChi { step: i, time: mf.tree.grid()[i], chi: chi_square(&samples, &mf.flow.laws[i]) }
        })
        .collect();
    Ok(vec![
        Artifact::csv("copies.csv", |out| {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["copy", "step", "value"]).map_err(csv_err)?;
            for (j, path) in copies.iter().enumerate() {
                for (i, y) in path.iter().enumerate() {
                    w.write_record([j.to_string(), i.to_string(), y.to_string()]).map_err(csv_err)?;
                }
            }
            w.flush()?;
            Ok(())
        })?,
        Artifact::json("copies.json", &json!({ "copies": run.settings.copies, "levels": levels }))?,
    ]
    .into())
}

/// Artifacts of a finished run plus an optional negative verdict, which
/// still gets its artifacts written.
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    pub verdict: Option<CliError>,
}

impl From<Vec<Artifact>> for Outcome {
    fn from(artifacts: Vec<Artifact>) -> Self {
        Outcome { artifacts, verdict: None }
    }
}

fn judged(artifacts: Vec<Artifact>, passed: bool, code: u8, class: &'static str, message: String, detail: serde_json::Value) -> Outcome {
    let verdict = (!passed).then_some(CliError::Verdict { code, class, message, detail });
    Outcome { artifacts, verdict }
}
