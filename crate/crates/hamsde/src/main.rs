//! Thin command-line front end over [`hamsde::experiment::run`].
//!
//! Exit codes: 0 when every check passes, 2 for configuration or expression
//! problems, 3 for numerical failures or failed checks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hamsde::catalog::list_catalog;
use hamsde::config::{ExperimentKind, Overrides, RunConfig};
use hamsde::experiment::run;
use hamsde::Error;

#[derive(Parser)]
#[command(
    name = "hamsde",
    version,
    about = "Structure-preserving integration and Hamilton-Jacobi experiments \
             for noise-driven Hamiltonian systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of sampled paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Override the number of time steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the artifact directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pin the worker thread count (results are identical either way).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run whatever experiment kind the config declares.
    Run(RunArgs),
    /// Symplectic-defect measurement runs (config kind "simulate").
    Simulate(RunArgs),
    /// Action-differential identity runs (config kind "action-check").
    ActionCheck(RunArgs),
    /// Shooting and Hamilton-Jacobi residual runs (config kind "hj").
    Hj(RunArgs),
    /// Monte-Carlo heat-equation runs (config kind "feynman-kac").
    FeynmanKac(RunArgs),
    /// Canonical-transform runs (config kind "transform").
    Transform(RunArgs),
    /// Refinement convergence runs (config kind "convergence").
    Convergence(RunArgs),
    /// List the built-in systems, sections, and generating functions.
    Catalog,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, expected) = match cli.command {
        Command::Catalog => {
            print!("{}", list_catalog());
            return ExitCode::SUCCESS;
        }
        Command::Run(a) => (a, None),
        Command::Simulate(a) => (a, Some(ExperimentKind::Simulate)),
        Command::ActionCheck(a) => (a, Some(ExperimentKind::ActionCheck)),
        Command::Hj(a) => (a, Some(ExperimentKind::Hj)),
        Command::FeynmanKac(a) => (a, Some(ExperimentKind::FeynmanKac)),
        Command::Transform(a) => (a, Some(ExperimentKind::Transform)),
        Command::Convergence(a) => (a, Some(ExperimentKind::Convergence)),
    };
    match execute(args, expected) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. }
                | Error::Lex { .. }
                | Error::Parse { .. }
                | Error::Bind { .. } => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn execute(args: RunArgs, expected: Option<ExperimentKind>) -> hamsde::Result<bool> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(kind) = expected {
        if cfg.kind != kind {
            return Err(Error::Config {
                message: format!(
                    "config declares kind '{}' but the '{}' subcommand was invoked",
                    cfg.kind.name(),
                    kind.name()
                ),
            });
        }
    }
    cfg.apply_overrides(&Overrides {
        seed: args.seed,
        paths: args.paths,
        steps: args.steps,
        out: args.out,
        threads: args.threads,
    });
    let outcome = run(&cfg)?;
    print!("{}", outcome.report);
    println!("artifacts: {}", outcome.out_dir.display());
    Ok(outcome.all_pass())
}
