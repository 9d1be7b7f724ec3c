//! `tags` — retrieval-augmented generalist/specialist QA pipeline.
//!
//! Exit codes: 0 on success, 1 on domain failures (abstention, backend
//! or trace errors), 2 on usage and configuration errors.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(String),
}

impl CliError {
    pub fn usage(message: impl fmt::Display) -> Self {
        CliError::Usage(message.to_string())
    }

    pub fn domain(message: impl fmt::Display) -> Self {
        CliError::Domain(message.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "tags",
    version,
    about = "Answer multiple-choice medical questions with two-stage exemplar retrieval, \
             generalist/specialist reasoning, and consistency-scored aggregation"
)]
struct Cli {
    /// TOML run configuration (backend, provider, paths, defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed a corpus into a dual-field vector index
    BuildIndex(commands::BuildIndexArgs),
    /// Answer a single question and print the winning candidate
    Ask(commands::AskArgs),
    /// Run an evaluation dataset and report Pass@1
    Eval(commands::EvalArgs),
    /// Pretty-print the recorded events for one instance
    Trace(commands::TraceArgs),
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::BuildIndex(args) => commands::cmd_build_index(args, cli.config.as_deref()),
        Command::Ask(args) => commands::cmd_ask(args, cli.config.as_deref()),
        Command::Eval(args) => commands::cmd_eval(args, cli.config.as_deref()),
        Command::Trace(args) => commands::cmd_trace(args),
    };
    match result {
        Ok(()) => {}
        Err(CliError::Domain(message)) => {
            eprintln!("error: {message}");
            std::process::exit(1);
        }
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            std::process::exit(2);
        }
    }
}
