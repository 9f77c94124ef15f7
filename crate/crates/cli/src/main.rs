//! powq: command-line front end for the power-exponent quantization
//! toolkit. Every run writes its outputs plus a run manifest; stdout
//! carries a one-line summary so runs stay scriptable.

mod commands;
mod manifest;

use anyhow::Result;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "powq", version, about = "Power-exponent post-training quantization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a synthetic blobs fixture and write model + dataset splits
    Fixture(commands::FixtureArgs),
    /// Data-free search for the shared power exponent; writes a bundle
    Search(commands::SearchArgs),
    /// Layer-wise calibration optimization; writes a bundle + report
    Optimize(commands::OptimizeArgs),
    /// Evaluate accuracy, full precision or through a quantized bundle
    Eval(commands::EvalArgs),
    /// Emit the representable level set of a quantization format as CSV
    Levels(commands::LevelsArgs),
    /// Emit the per-weight fake-quantization error as CSV
    ErrorHist(commands::ErrorHistArgs),
}

fn main() {
    let cli = Cli::parse();
    let result: Result<String> = match cli.command {
        Command::Fixture(args) => commands::run_fixture(args),
        Command::Search(args) => commands::run_search(args),
        Command::Optimize(args) => commands::run_optimize(args),
        Command::Eval(args) => commands::run_eval(args),
        Command::Levels(args) => commands::run_levels(args),
        Command::ErrorHist(args) => commands::run_error_hist(args),
    };
    match result {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
