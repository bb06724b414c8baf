//! `olens`: synthetic data, training, Monte-Carlo dropout uncertainty and
//! saliency maps from the command line.
//!
//! Exit codes: 0 success, 2 invalid arguments or settings, 3 I/O failure,
//! 4 dataset mismatch or malformed data, 5 incompatible or corrupt checkpoint,
//! 6 target invalid for the checkpoint.

mod commands;
mod common;
mod config;
mod error;
mod output;

use std::process::ExitCode;

use clap::Parser;

use config::{Cli, Command, FileSettings};
use error::CliResult;

fn run(cli: Cli) -> CliResult<()> {
    let file = FileSettings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => commands::synth(a, &file),
        Command::Train(a) => commands::train(a, &file),
        Command::Eval(a) => commands::eval(a, &file),
        Command::Uncertainty(a) => commands::uncertainty(a, &file),
        Command::Explain(a) => commands::explain_cmd(a, &file),
        Command::Report(a) => commands::report(a, &file),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
