//! Command-line driver: simulate k-space artefacts, compute QC reports,
//! train the cascaded uncertainty model, and reproduce the Dice-vs-metric
//! correlation experiment.
//!
//! Exit codes: 0 success, 2 usage error, 3 I/O failure, 4 missing
//! prerequisite checkpoint.

mod commands;
mod config;
mod plot;
mod provenance;
mod util;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "artiqc",
    version,
    about = "MRI k-space artefact simulation and uncertainty-based segmentation QC"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corrupt a volume (or generated phantom) with simulated artefacts
    Simulate(commands::simulate::SimulateArgs),
    /// Compute a QC report for one volume or a CSV over a directory
    Metrics(commands::metrics::MetricsArgs),
    /// Train one stage of the cascade (task, teacher:<kind>, student)
    Train(commands::train::TrainArgs),
    /// Run the correlation experiment with a trained student model
    Evaluate(commands::evaluate::EvaluateArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(args) => commands::simulate::run(args),
        Command::Metrics(args) => commands::metrics::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Evaluate(args) => commands::evaluate::run(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(util::exit_code(&err));
    }
}
