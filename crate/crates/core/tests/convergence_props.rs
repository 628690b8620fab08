use mfrbsde::convergence::*;
use mfrbsde::meanfield::*;
use mfrbsde::models::*;
use mfrbsde::mpp::{ClockSpec, IntensityKernel, TreeKind};
use rand::Rng;

fn two_atom(steps: usize) -> Model {
    Model::new(ModelConfig {
        framework: Framework::Mpp,
        horizon: 1.0,
        steps,
        tree: TreeKind::Recombining,
        marks: None,
        clock: ClockSpec::Identity,
        kernel: IntensityKernel::new(vec![0.7]).unwrap(),
        driver: DriverSpec {
            family: DriverFamily::Linear { a: 0.0, b: 0.0, c: 0.0, d: 0.0, measure: MeasureForm::Mean },
            declared: None,
        },
        obstacle: ObstacleSpec::inactive(),
        terminal: TerminalSpec::Indicator { threshold: 1, above: 1.0, below: 0.0 },
    })
    .unwrap()
}

/// `E|K/n − p|` for `K ~ Bin(n, p)`, summed in log space.
fn binomial_mean_abs_deviation(n: usize, p: f64) -> f64 {
    let mut ln_choose = 0.0;
    let mut total = 0.0;
    for k in 0..=n {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        let ln_pmf = ln_choose + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln();
        total += ln_pmf.exp() * (k as f64 / n as f64 - p).abs();
    }
    total
}

#[test]
fn one_step_statistic_matches_binomial_oracle() {
    // With one step the copies are Bernoulli(0.7) at T and the root is a
    // point mass, so sup_t W_2² = |K/n − 0.7|.
    let mf = solve_mf_rbsde(&two_atom(1), &PicardOptions::default()).unwrap();
    let report = lln_study(&mf, &[16, 64, 256], 400, 5).unwrap();
    for row in &report.rows {
        let exact = binomial_mean_abs_deviation(row.n, 0.7);
        assert!((row.mean - exact).abs() < 4.0 * row.stderr, "{row:?} vs {exact}");
    }
    // Values computed independently with exact binomial sums.
    assert!((binomial_mean_abs_deviation(16, 0.7) - 0.09182171516271383).abs() < 1e-14);
    assert!((binomial_mean_abs_deviation(64, 0.7) - 0.04575197492299363).abs() < 1e-14);
    assert!((binomial_mean_abs_deviation(1, 0.7) - 0.42).abs() < 1e-12);
}

#[test]
fn two_atom_benchmark_has_half_order_rate() {
    let mf = solve_mf_rbsde(&two_atom(8), &PicardOptions::default()).unwrap();
    let n_list: Vec<usize> = (4..=12).map(|k| 1usize << k).collect();
    let report = lln_study(&mf, &n_list, 200, 7).unwrap();
    let fit = report.fit.unwrap();
    assert!((-0.65..=-0.35).contains(&fit.slope), "{fit:?}");
    assert!(fit.r2 >= 0.95, "{fit:?}");
}

#[test]
fn study_is_independent_of_thread_count() {
    let mf = solve_mf_rbsde(&two_atom(4), &PicardOptions::default()).unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| lln_study(&mf, &[8, 32, 128], 50, 3).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(3));
}

#[test]
fn standard_error_halves_when_reps_quadruple() {
    let mf = solve_mf_rbsde(&two_atom(4), &PicardOptions::default()).unwrap();
    let small = lln_study(&mf, &[64], 200, 9).unwrap();
    let large = lln_study(&mf, &[64], 800, 9).unwrap();
    let ratio = small.rows[0].stderr / large.rows[0].stderr;
    assert!((1.6..=2.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn rate_fit_recovers_noisy_power_laws() {
    for seed in 0..100u64 {
        let mut rng = mfrbsde::rng::stream(seed, 1);
        let slope = rng.random_range(-1.5..-0.2);
        let c = rng.random_range(0.1..10.0);
        let rows: Vec<(f64, f64, f64)> = (4..=12)
            .map(|k| {
                let n = (1u64 << k) as f64;
                let mean = c * n.powf(slope) * (1.0 + rng.random_range(-0.05..0.05));
                (n, mean, 0.05 * mean)
            })
            .collect();
        let fit = rate_fit(&rows).unwrap();
        assert!((fit.slope - slope).abs() < 0.03, "seed {seed}: {fit:?} vs {slope}");
        assert!(fit.r2 > 0.99);
        assert_eq!(fit.rows_used, 9);
    }
}

#[test]
fn rate_fit_drops_nonpositive_rows() {
    let rows = [(16.0, 0.25, 0.01), (64.0, 0.0, 0.0), (256.0, 0.0625, 0.01), (1024.0, 0.03125, 0.01)];
    let fit = rate_fit(&rows).unwrap();
    assert_eq!((fit.rows_used, fit.rows_excluded), (3, 1));
    assert!((fit.slope + 0.5).abs() < 1e-12);
}
