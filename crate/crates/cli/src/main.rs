//! `refocus` command-line interface.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::commands::Failure;

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(cli.log_level.as_str())),
        )
        .with_writer(std::io::stderr)
        .init();

    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start async runtime: {e}");
            return ExitCode::from(2);
        }
    };
    let result = runtime.block_on(async {
        match cli.command {
            Command::RunEval(a) => commands::eval::run_eval(a).await,
            Command::Episode(a) => commands::eval::episode(a).await,
            Command::Rewards(a) => commands::rewards::run(a),
            Command::Validate(a) => commands::data::validate(a).await,
            Command::Stats(a) => commands::data::stats(a),
            Command::Judge(a) => commands::data::judge(a).await,
            Command::MockServe(a) => commands::serve::run(a).await,
            Command::Report(a) => commands::report::run(a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match e.downcast_ref::<Failure>() {
                Some(Failure::Invalid(_)) => 1,
                _ => 2,
            };
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
