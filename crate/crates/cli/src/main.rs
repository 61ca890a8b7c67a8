mod args;
mod commands;
mod report;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Exit status for invalid flags, inputs and configurations.
const EXIT_VALIDATION: u8 = 2;
/// Exit status for non-finite numerics and failed gradient checks.
const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Numerical(String),
}

impl From<xfsl_core::Error> for CliError {
    fn from(e: xfsl_core::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("XFSL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation(format!("XFSL_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Validation(format!("cannot size the thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<serde_json::Value> {
    configure_threads()?;
    let seed = cli.seed;
    match cli.command {
        Command::GenData(a) => commands::gen_data(a, seed),
        Command::Train(a) => commands::train(a, seed),
        Command::Eval(a) => commands::eval(a, seed),
        Command::Explain(a) => commands::explain(a, seed),
        Command::Active(a) => commands::active(a, seed),
        Command::Gradcheck(a) => commands::gradcheck(a, seed),
        Command::Report(a) => report::report(a, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_NUMERICAL)
        }
    }
}
