use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod config;
mod critvals;
mod dgp_args;
mod estimate;
mod experiment;
mod simulate;

#[derive(Debug, Parser)]
#[command(name = "sgmm", version, about = "Streaming IV estimation with online inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate on a CSV file or a simulated design.
    Estimate(estimate::Args),
    /// Write simulated data as CSV.
    Simulate(simulate::Args),
    /// Monte Carlo comparison of the estimators.
    Experiment(experiment::Args),
    /// Simulate random-scaling critical values.
    Critvals(critvals::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Estimate(a) => estimate::run(a),
        Command::Simulate(a) => simulate::run(a),
        Command::Experiment(a) => experiment::run(a),
        Command::Critvals(a) => critvals::run(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
