use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod check;
mod plotdata;
mod simulate;

/// Exit code 2: bad input; 1: internal failure.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

pub fn io_input(path: &std::path::Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

pub fn io_internal(path: &std::path::Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Internal(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "relpos", version, about = "Relative position estimation from range and inertial data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo campaign and write its artifacts.
    Simulate(simulate::Args),
    /// Report observability of the line-of-sight history at each epoch.
    Check(check::Args),
    /// Turn campaign artifacts into plot-ready CSV tables.
    Plotdata(plotdata::Args),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Simulate(args) => simulate::run(&args),
        Command::Check(args) => check::run(&args),
        Command::Plotdata(args) => plotdata::run(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

/// Loads a configuration file, or the defaults when no path is given.
pub fn load_config(path: Option<&PathBuf>) -> Result<relpos::sim::SimConfig, CliError> {
    match path {
        None => Ok(relpos::sim::SimConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_input(p))?;
            relpos::sim::SimConfig::from_toml(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
        }
    }
}
