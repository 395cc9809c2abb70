//! `biasprobe`: detect spurious features, perturb images, evaluate bias
//! metrics and their sensitivity, and emit report tables.

mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = args::Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = config::FileConfig::load(cli.config.as_deref()).and_then(|file| commands::run(cli.command, file));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(config::exit_code(&e))
        }
    }
}
