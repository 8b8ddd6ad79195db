use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(
    name = "pec",
    version,
    about = "Lightweight detector toolkit: data, analysis, gradient checks, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a deterministic synthetic 4-class dataset with a 7:1:2 split.
    GenData(commands::GenDataArgs),
    /// Parameter, MAC and memory-access report for a model graph.
    Analyze(commands::AnalyzeArgs),
    /// Finite-difference gradient suite over every differentiable block.
    Gradcheck(commands::GradcheckArgs),
    /// Train a toy-scale model on a dataset directory.
    Train(commands::TrainArgs),
    /// Precision, recall and mAP of a checkpoint or a predictions file.
    Eval(commands::EvalArgs),
    /// Images-per-second benchmark.
    Bench(commands::BenchArgs),
}

/// Options shared by every subcommand.
#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// JSON file with option values; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed; falls back to the config file, then `PEC_SEED`, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
