//! `errdisc` binary. Exit codes: 0 success, 1 usage error, 2 runtime error.

mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                // Includes a bare `errdisc` with no subcommand.
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let common = match &cli.command {
        Command::Synth(a) => &a.common,
        Command::Split(a) => &a.common,
        Command::Train(a) => &a.common,
        Command::Eval(a) => &a.common,
        Command::Rank(a) => &a.common,
        Command::Define(a) => &a.common,
        Command::Run(a) => &a.common,
    };
    env_logger::Builder::new().parse_filters(&common.log_level).init();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Split(a) => commands::split(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Rank(a) => commands::rank(a),
        Command::Define(a) => commands::define(a),
        Command::Run(a) => commands::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
