use std::process::ExitCode;

use clap::Parser;
use lipsam::cli::{error_exit_code, execute, Cli};
use lipsam::experiments::Outcome;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(outcome) => {
            match &outcome {
                Outcome::Success => {}
                Outcome::Violation(items) => items.iter().for_each(|i| eprintln!("violation: {i}")),
                Outcome::Diverged(msg) => eprintln!("divergence: {msg}"),
            }
            ExitCode::from(outcome.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_exit_code(&e))
        }
    }
}
