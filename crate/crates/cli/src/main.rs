//! `mtdiff`: train, sample, restore, verify and evaluate multi-task diffusion
//! models on the synthetic tasks.
//!
//! Exit codes: 0 success, 1 invalid input or runtime error, 2 verification
//! failure.

mod commands;
mod config;
mod files;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "MTDIFF_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "mtdiff", version, about = "Multi-task diffusion on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a key=value config; writes a checkpoint, metrics
    /// CSV and the schedule table.
    Train(commands::train::Args),
    /// Draw samples from a checkpoint.
    Sample(commands::sample::Args),
    /// Restore the masked region of a signal.
    Restore(commands::restore::Args),
    /// Run the verification suites.
    Verify(commands::verify::Args),
    /// Score a checkpoint on its task.
    Eval(commands::eval::Args),
}

/// How a command finished when it did not error.
pub enum Outcome {
    Success,
    VerificationFailed,
}

/// Explicit directory, else the environment default, else `./mtdiff-out`.
pub fn resolve_out_dir(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("mtdiff-out"))
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train::run(a),
        Command::Sample(a) => commands::sample::run(a),
        Command::Restore(a) => commands::restore::run(a),
        Command::Verify(a) => commands::verify::run(a),
        Command::Eval(a) => commands::eval::run(a),
    };
    match result {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::VerificationFailed) => 2,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
