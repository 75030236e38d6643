//! `dreg`: dataset generation, training, registration, evaluation and
//! latent-space analysis from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.  All randomness
//! is controlled by `--seed`; every subcommand writes its resolved
//! configuration next to its outputs, and `DREG_THREADS` caps the worker
//! count of the per-case fan-outs (default 1).

use clap::error::ErrorKind;
use clap::Parser;
use std::process::ExitCode;

mod commands;

#[derive(Parser)]
#[command(name = "dreg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: commands::Command,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return ExitCode::from(if ok { 0 } else { 1 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
