mod commands;
mod opts;
mod output;

use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;

use opts::Cli;

/// Exit status plus the machine-readable error written to stderr.
#[derive(Debug, Serialize)]
pub struct CliError {
    pub code: u8,
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn validation(kind: &str, message: impl Into<String>) -> Self {
        Self {
            code: 1,
            kind: kind.into(),
            message: message.into(),
        }
    }

    pub fn acceptance(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            kind: "acceptance_fail".into(),
            message: message.into(),
        }
    }
}

impl From<rwrp::Error> for CliError {
    fn from(e: rwrp::Error) -> Self {
        let code = if e.is_validation() { 1 } else { 2 };
        Self {
            code,
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::validation("io", e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::validation("usage", e.to_string().trim_end());
            eprintln!("{}", serde_json::to_string(&err).expect("error serialises"));
            return ExitCode::from(err.code);
        }
    };
    match opts::resolve(cli.command, &cli.opts).and_then(|cfg| commands::run(&cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", serde_json::to_string(&err).expect("error serialises"));
            ExitCode::from(err.code)
        }
    }
}
