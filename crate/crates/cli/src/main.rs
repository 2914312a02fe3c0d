mod args;
mod commands;
mod config;
mod corpus_dir;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};
use thiserror::Error;

use args::Cli;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

macro_rules! data_errors {
    ($($t:ty),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_errors!(
    dsfeat::data::DataError,
    dsfeat::DecodeError,
    dsfeat::network::NetworkError,
    dsfeat::losses::LossError,
    dsfeat::trainer::TrainError,
    dsfeat::retrieval::RetrievalError,
    dsfeat::selection::SelectionError,
    dsfeat::evaluation::EvalError,
    dsfeat::pipeline::PipelineError,
    std::io::Error,
);

fn run() -> Result<(), CliError> {
    let argv = config::merge(&Cli::command(), std::env::args_os().collect())?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            // Clap's message carries the usage text.
            eprint!("{e}");
            return Err(CliError::Usage(String::new()));
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    commands::dispatch(cli.command)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            if !msg.is_empty() {
                eprintln!("error: {}", msg.replace('\n', " "));
            }
            match e {
                CliError::Usage(_) => ExitCode::from(1),
                CliError::Data(_) => ExitCode::from(2),
            }
        }
    }
}
