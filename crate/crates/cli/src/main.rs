mod args;
mod commands;
mod manifest;
mod selftest;

use std::process::ExitCode;

use clap::Parser;
use compatkit::error::{Error, ErrorKind};

use crate::args::{Cli, Command};

/// Failure of a subcommand, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
    /// φ = 0 was detected and `--fail-on-zero` was given.
    ConditionFails(String),
    SelftestFailed(usize),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(e) => match e.kind() {
                ErrorKind::Input => 2,
                ErrorKind::Solver => 3,
            },
            CliError::SelftestFailed(_) => 3,
            CliError::ConditionFails(_) => 4,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::ConditionFails(m) => m.clone(),
            CliError::Lib(e) => e.to_string(),
            CliError::SelftestFailed(n) => format!("{n} selftest check(s) failed"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COMPATKIT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("code=1 msg={first}");
            return ExitCode::from(1);
        }
    };
    let out = match cli.command {
        Command::PhiQp(a) => commands::phi_qp(a),
        Command::PhiMiqp(a) => commands::phi_miqp(a),
        Command::AnalyticBound(a) => commands::analytic_bound(a),
        Command::EstimateActiveSet(a) => commands::estimate_active_set(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::PhiCurve(a) => commands::phi_curve(a),
        Command::Selftest => selftest::run(),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.message().replace('\n', " ");
            eprintln!("code={} msg={}", e.code(), msg);
            ExitCode::from(e.code())
        }
    }
}
