//! `spanlab`: one binary, one subcommand per pipeline stage.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use spanlab_core::Error;

use crate::args::Cli;

fn init_logging(cli: &Cli) {
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn report(err: &Error) -> ExitCode {
    let body = serde_json::json!({ "kind": err.kind(), "error": err.to_string() });
    eprintln!("{body}");
    match err {
        Error::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    init_logging(&cli);
    if let Some(n) = cli.threads {
        if n == 0 {
            return report(&Error::Config("--threads must be at least 1".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return report(&Error::Invalid(format!("thread pool: {e}")));
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
