//! `semflow`: dense semantic flow from the command line.
//!
//! Exit codes: 0 success, 1 invalid arguments or other failure, 2 malformed
//! or unreadable input, 3 shape mismatch, 4 numeric failure.

mod config;
mod eval_cmd;
mod match_cmd;
mod synth_cmd;
mod train_cmd;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use semflow_core::Error;

#[derive(Debug, Parser)]
#[command(name = "semflow", version, about = "Dense semantic flow between image pairs", args_override_self = true)]
struct Cli {
    /// Log progress, repeat for debug output [default: warnings only]
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate source and target flows for one pair.
    Match(match_cmd::MatchArgs),
    /// Train adaptation layers on synthetic pairs from a corpus.
    Train(train_cmd::TrainArgs),
    /// Score flows or a model on a list of annotated pairs.
    Eval(eval_cmd::EvalArgs),
    /// Generate procedural corpora and synthetic evaluation pairs.
    #[command(subcommand)]
    Synth(synth_cmd::SynthCommand),
    /// Grid search over the softmax temperature and kernel width.
    Sweep(eval_cmd::SweepArgs),
}

/// Exit status for an error chain, keyed on the first library error in it.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Format(_) | Error::Io { .. } => 2,
                Error::Shape(_) => 3,
                Error::Numeric(_) => 4,
                Error::Invalid(_) => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Match(a) => match_cmd::run(a),
        Command::Train(a) => train_cmd::run(a),
        Command::Eval(a) => eval_cmd::run_eval(a),
        Command::Synth(c) => synth_cmd::run(c),
        Command::Sweep(a) => eval_cmd::run_sweep(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
