use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kmc_core::cli::{execute, exit_code, ExperimentKind, Invocation};

#[derive(Parser)]
#[command(name = "kmc", version, about = "Kinetic Monte Carlo experiments: chains, certificates, couplings, annealing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// CSV output path; the manifest is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long, env = "KMC_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Single chain trajectory.
    Run(Common),
    /// Entropy-dissipation certificate.
    Certify(Common),
    /// Exact Gaussian dissipation sweep.
    Gaussian(Common),
    /// Entropy-regularizing coupling diagnostics.
    Couple(Common),
    /// Simulated annealing ensemble.
    Anneal(Common),
    /// Propagation-of-chaos experiment.
    Meanfield(Common),
    /// Exact versus Verlet chain error sweep.
    #[command(name = "verlet_error", alias = "verlet-error")]
    VerletError(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (kind, common) = match cli.command {
        Command::Run(c) => (ExperimentKind::Run, c),
        Command::Certify(c) => (ExperimentKind::Certify, c),
        Command::Gaussian(c) => (ExperimentKind::Gaussian, c),
        Command::Couple(c) => (ExperimentKind::Couple, c),
        Command::Anneal(c) => (ExperimentKind::Anneal, c),
        Command::Meanfield(c) => (ExperimentKind::Meanfield, c),
        Command::VerletError(c) => (ExperimentKind::VerletError, c),
    };
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not configure {n} threads: {e}");
        }
    }
    let inv = Invocation { config: common.config, seed: common.seed, out: common.out };
    match execute(kind, &inv) {
        Ok(w) => {
            if let Some(text) = &w.outcome.text {
                print!("{text}");
            }
            println!("wrote {} and {}", w.csv.display(), w.manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
