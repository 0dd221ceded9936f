//! `vagam`: fit generalized additive models from CSV files, predict from a
//! saved report and run simulation scenarios.
//!
//! Exit codes: 0 success, 1 I/O or numerical failure, 2 usage error,
//! 3 rejected input data, 4 fit did not converge (outputs still written).

mod commands;
mod data;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vagam::Family;

use crate::commands::{FitArgs, PredictArgs, SimulateArgs};

#[derive(Parser)]
#[command(name = "vagam", version, about = "Generalized additive models by variational approximation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write a JSON report plus one curve table per smooth.
    Fit(FitCmd),
    /// Predict new rows from a saved report.
    Predict(PredictCmd),
    /// Run a simulation scenario and write summary tables.
    Simulate(SimulateCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Normal,
    Poisson,
    Bernoulli,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Normal => Family::Normal,
            FamilyArg::Poisson => Family::Poisson,
            FamilyArg::Bernoulli => Family::Bernoulli,
        }
    }
}

/// Options shared by `fit` and `simulate`.
#[derive(Args)]
struct FitOptions {
    /// Segments per smooth [default: 5 * ceil(n^0.18)]
    #[arg(long)]
    knots: Option<usize>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "max-iters", default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    max_iters: u64,
    /// Relative bound and absolute parameter tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

#[derive(Args)]
struct FitCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    response: String,
    #[arg(long, value_enum)]
    family: FamilyArg,
    /// Parametric columns; an intercept is always included.
    #[arg(long, value_delimiter = ',')]
    parametric: Vec<String>,
    /// Covariates with a smooth effect.
    #[arg(long, value_delimiter = ',', required = true)]
    smooth: Vec<String>,
    #[command(flatten)]
    options: FitOptions,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictCmd {
    /// Report written by `vagam fit`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Interval level [default: the report's level]
    #[arg(long)]
    level: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateCmd {
    #[arg(long, value_enum)]
    family: FamilyArg,
    /// Observations per data set, validation rows included.
    #[arg(long)]
    n: usize,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,
    /// Validation rows held out of each fit.
    #[arg(long, default_value_t = 10)]
    holdout: usize,
    #[command(flatten)]
    options: FitOptions,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> error::CliResult<()> {
    match cli.command {
        Command::Fit(c) => {
            let args = FitArgs {
                data: c.data,
                response: c.response,
                family: c.family.into(),
                parametric: c.parametric.into_iter().filter(|s| !s.is_empty()).collect(),
                smooth: c.smooth.into_iter().filter(|s| !s.is_empty()).collect(),
                knots: c.options.knots,
                level: c.options.level,
                seed: c.options.seed,
                out: c.out,
                max_iters: c.options.max_iters as usize,
                tol: c.options.tol,
            };
            let report = commands::fit(&args)?;
            println!(
                "converged after {} iterations, lower bound {:.6}; wrote {}",
                report.n_iters,
                report.lower_bound,
                args.out.display()
            );
        }
        Command::Predict(c) => {
            let args = PredictArgs {
                report: c.report,
                data: c.data,
                out: c.out,
                level: c.level,
                seed: c.seed,
            };
            let rows = commands::predict(&args)?;
            println!("predicted {rows} rows; wrote {}", args.out.join("predictions.csv").display());
        }
        Command::Simulate(c) => {
            let args = SimulateArgs {
                family: c.family.into(),
                n: c.n,
                reps: c.reps as usize,
                holdout: c.holdout,
                knots: c.options.knots,
                level: c.options.level,
                seed: c.options.seed,
                out: c.out,
                max_iters: c.options.max_iters as usize,
                tol: c.options.tol,
            };
            let scenario = commands::simulate(&args)?;
            println!(
                "family {} n {} replicates {} holdout {} knots {} seed {}; wrote {}",
                scenario.family,
                scenario.n,
                scenario.n_replicates,
                scenario.n_holdout,
                scenario.knots(),
                scenario.seed,
                args.out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
