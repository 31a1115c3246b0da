//! `hyperinit`: variance checks, formula tables and experiment presets.
//!
//! Exit codes: 0 success, 1 a check failed or training diverged, 2 usage
//! error, 3 missing or unreadable files.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod gradcheck;
mod report;
mod table;
mod train;
mod util;
mod variance;

use util::Status;

#[derive(Parser)]
#[command(name = "hyperinit", version, about = "Initialization experiments for hypernetworks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Probe a deep square mainnet generated by a linear hypernet at init.
    VarianceCheck(variance::VarianceArgs),
    /// Print head variances of every scheme for one layer geometry.
    InitTable(table::TableArgs),
    /// Train a preset and write curves, probes and a checkpoint.
    Train(train::TrainArgs),
    /// Compare analytic gradients against central finite differences.
    GradCheck(gradcheck::GradCheckArgs),
    /// Summarize the probe output of a training run.
    Report(report::ReportArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::VarianceCheck(a) => variance::run(&a),
        Command::InitTable(a) => table::run(&a),
        Command::Train(a) => train::run(&a),
        Command::GradCheck(a) => gradcheck::run(&a),
        Command::Report(a) => report::run(&a),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed) => ExitCode::from(1),
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
