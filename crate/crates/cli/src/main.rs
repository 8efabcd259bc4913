mod attack;
mod common;
mod eval;
mod fail;
mod png;
mod report;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Train, attack, evaluate and report on variational autoencoders.
#[derive(Debug, Parser)]
#[command(name = "varm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on procedural sprites.
    Train(train::TrainArgs),
    /// Run a resumable attack campaign against a checkpoint.
    Attack(attack::AttackArgs),
    /// Evaluate one or more checkpoints.
    Eval(eval::EvalArgs),
    /// Render tables and figures from finished campaigns.
    Report(report::ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train::run(a),
        Command::Attack(a) => attack::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Report(a) => report::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
