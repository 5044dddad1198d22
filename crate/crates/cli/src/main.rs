//! `ltd`: data generation, training, evaluation, scoring and layer analysis.
//!
//! Logs go to stderr. Every run ends with one JSON line on stdout.

mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::json;

use commands::Cli;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet {
        "warn"
    } else {
        "info"
    }))
    .target(env_logger::Target::Stderr)
    .init();

    match commands::run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            let code = e.exit_code();
            println!(
                "{}",
                json!({"status": "error", "exit_code": code, "error": e.to_string()})
            );
            ExitCode::from(code as u8)
        }
    }
}
