//! `bmnn`: train and inspect feedforward networks with back-matching
//! layer-wise learning rates.
//!
//! Exit codes: 0 success, 1 divergence, 2 config error, 3 I/O error.

mod commands;
mod config;
mod dataset;
mod error;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use commands::{OracleArgs, Report, SynthArgs, VerifyArgs};
use config::Overrides;
use error::{CliError, EXIT_CONFIG, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "bmnn", version, about = "Layer-wise learning rates from approximate back-matching propagation")]
struct Cli {
    /// Print a JSON document instead of text
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one run, or a paired run with --pair-rule
    Train(Overrides),
    /// Evaluate a checkpoint on the test split
    Eval(Overrides),
    /// Print the per-layer factor walk for freshly initialized weights
    VerifyFactors(VerifyArgs),
    /// Compare the scaled gradients with the exact least-squares solutions
    CompareOracle(OracleArgs),
    /// Write a synthetic dataset in CIFAR binary format
    MakeSynthetic(SynthArgs),
}

fn run(command: &Command) -> Result<Report, CliError> {
    match command {
        Command::Train(o) => commands::cmd_train(o),
        Command::Eval(o) => commands::cmd_eval(o),
        Command::VerifyFactors(a) => commands::cmd_verify_factors(a),
        Command::CompareOracle(a) => commands::cmd_compare_oracle(a),
        Command::MakeSynthetic(a) => commands::cmd_make_synthetic(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(&cli.command) {
        Ok(report) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report.json).expect("serializable report"));
            } else {
                print!("{}", report.text);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            if cli.json {
                let doc = json!({ "error": { "kind": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() } });
                println!("{}", serde_json::to_string_pretty(&doc).expect("serializable error"));
            }
            eprintln!("bmnn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
