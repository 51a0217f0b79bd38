//! `glora` — batch pipeline driver: synthetic task generation, plain
//! pretraining, supernet fine-tuning, evolutionary configuration search,
//! exact merge, evaluation, and reporting.
//!
//! Exit codes: 0 success, 2 usage or validation, 3 numerical divergence,
//! 4 i/o or file-format failure.

use clap::{Parser, Subcommand};

mod commands;

use commands::common::CliError;

#[derive(Parser)]
#[command(
    name = "glora",
    version,
    about = "Generalized adapter fine-tuning over frozen linear layers: \
             supernet training, evolutionary per-layer configuration search, \
             and zero-overhead merge"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pretrain or shifted task dataset.
    GenData(commands::gen_data::Args),
    /// Train a plain model (no adapters) on a dataset and save the base checkpoint.
    Pretrain(commands::pretrain::Args),
    /// Train the multi-path supernet over a frozen base checkpoint.
    TrainSupernet(commands::train_supernet::Args),
    /// Evolutionary search for the best per-layer configuration.
    Search(commands::search::Args),
    /// Fold a searched configuration into plain affine weights.
    Merge(commands::merge::Args),
    /// Evaluate a checkpoint on a dataset, on the base, adapter, or merged path.
    Eval(commands::eval::Args),
    /// Parameter distribution and per-layer kind table for a configuration.
    Report(commands::report::Args),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => commands::gen_data::run(args),
        Command::Pretrain(args) => commands::pretrain::run(args),
        Command::TrainSupernet(args) => commands::train_supernet::run(args),
        Command::Search(args) => commands::search::run(args),
        Command::Merge(args) => commands::merge::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Report(args) => commands::report::run(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
