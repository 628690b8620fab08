mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{Outcome, Run};
use crate::config::{RunSection, Settings};
use crate::error::{exit, CliError};
use crate::manifest::{sha256_hex, Artifact, Manifest};

/// Solvers and diagnostics for mean-field reflected BSDEs driven by marked
/// point processes.
#[derive(Parser, Debug)]
#[command(name = "mfrbsde", version)]
struct Cli {
    /// TOML file with an optional [model] table and a [run] table.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Node or stopping-rule budget (default: $MFRBSDE_BUDGET or 2^18).
    #[arg(long, global = true)]
    budget: Option<u64>,

    /// Picard stopping tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,

    /// Picard iteration limit.
    #[arg(long, global = true)]
    max_iter: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Probe the standing assumptions of the model.
    Validate {
        #[arg(long)]
        probes: Option<usize>,
    },
    /// Solve the mean-field reflected equation on the scenario tree.
    Solve(Stitch),
    /// Compare the dynamic program with brute force over stopping rules on
    /// seeded random models.
    SnellOracle {
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Simulate marked point process paths.
    Simulate {
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Evaluate the propagation-of-chaos inequality exactly for small n.
    ChaosCheck {
        /// Particle counts, comma separated.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
    },
    /// Empirical-measure convergence study with a log-log rate fit.
    LlnStudy {
        #[arg(long, value_delimiter = ',')]
        n_list: Option<Vec<usize>>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Compare a time-stitched solve with a single-window solve.
    StitchCheck(Stitch),
    /// Sample iid copies of the solution and test them against its laws.
    SampleCopies {
        #[arg(long)]
        copies: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct Stitch {
    /// Window length for time stitching.
    #[arg(long)]
    stitch_h: Option<f64>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate { .. } => "validate",
            Command::Solve(_) => "solve",
            Command::SnellOracle { .. } => "snell-oracle",
            Command::Simulate { .. } => "simulate",
            Command::ChaosCheck { .. } => "chaos-check",
            Command::LlnStudy { .. } => "lln-study",
            Command::StitchCheck(_) => "stitch-check",
            Command::SampleCopies { .. } => "sample-copies",
        }
    }

    fn overrides(&self, mut flags: RunSection) -> RunSection {
        match self {
            Command::Validate { probes } => flags.probes = *probes,
            Command::Solve(s) | Command::StitchCheck(s) => flags.stitch_h = s.stitch_h,
            Command::SnellOracle { seeds } => flags.seeds = *seeds,
            Command::Simulate { paths } => flags.paths = *paths,
            Command::ChaosCheck { n } => flags.n = n.clone(),
            Command::LlnStudy { n_list, reps } => {
                flags.n_list = n_list.clone();
                flags.reps = *reps;
            }
            Command::SampleCopies { copies } => flags.copies = *copies,
        }
        flags
    }

    fn run(&self, run: &Run<'_>) -> Result<Outcome, CliError> {
        match self {
            Command::Validate { .. } => commands::validate(run),
            Command::Solve(_) => commands::solve(run),
            Command::SnellOracle { .. } => commands::snell_oracle(run),
            Command::Simulate { .. } => commands::simulate(run),
            Command::ChaosCheck { .. } => commands::chaos_check(run),
            Command::LlnStudy { .. } => commands::lln(run),
            Command::StitchCheck(_) => commands::stitch_check(run),
            Command::SampleCopies { .. } => commands::sample_copies(run),
        }
    }
}

/// Reports a failure that happened before settings were known.
fn early_failure(e: CliError) -> ExitCode {
    let refusal = e.refusal();
    eprintln!("error: {e}");
    println!("{}", serde_json::to_string(&refusal).unwrap_or_default());
    ExitCode::from(refusal.exit_code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            return early_failure(CliError::Usage(format!("thread pool: {e}")));
        }
    }
    let loaded = match config::load(cli.config.as_deref()) {
        Ok(l) => l,
        Err(e) => return early_failure(e),
    };
    let flags = cli.command.overrides(RunSection {
        seed: cli.seed,
        budget: cli.budget,
        tol: cli.tol,
        max_iter: cli.max_iter,
        ..Default::default()
    });
    let settings = match Settings::resolve(&flags, &loaded.run) {
        Ok(s) => s,
        Err(e) => return early_failure(e),
    };
    let subcommand = cli.command.name();
    log::info!("{subcommand}: seed {}, output in {}", settings.seed, cli.out.display());

    let run = Run { model: loaded.model.as_ref(), settings: &settings };
    let (mut artifacts, failure) = match cli.command.run(&run) {
        Ok(Outcome { artifacts, verdict }) => (artifacts, verdict),
        Err(e) => (Vec::new(), Some(e)),
    };
    let mut code = exit::OK;
    if let Some(e) = &failure {
        let refusal = e.refusal();
        code = refusal.exit_code;
        eprintln!("error: {e}");
        println!("{}", serde_json::to_string(&refusal).unwrap_or_default());
        match Artifact::json("refusal.json", &refusal) {
            Ok(a) => artifacts.push(a),
            Err(e) => return early_failure(e),
        }
    }

    let hashed = serde_json::json!({ "model": loaded.model, "settings": settings, "subcommand": subcommand });
    let config_sha256 = sha256_hex(hashed.to_string().as_bytes());
    let manifest = Manifest::new(subcommand, &settings, config_sha256, loaded.file_sha256.as_deref(), code, &artifacts);
    if let Err(e) = manifest::write_all(&cli.out, &artifacts, &manifest) {
        return early_failure(e);
    }
    ExitCode::from(code)
}
