//! `ifsl`: batch evaluation of backdoor-adjusted few-shot classifiers,
//! synthetic confounding experiments, causal-graph checks and learned
//! initializations.

mod commands;
mod failure;
mod report;
mod scm;

use std::num::NonZeroUsize;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ifsl", version, about)]
struct Cli {
    /// Worker threads for episode evaluation [default: available cores]
    #[arg(long, global = true, env = "IFSL_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evaluate a classifier over random episodes
    Episodes(commands::EpisodesArgs),
    /// Accuracy per query-hardness quantile bin
    Hardness(commands::EpisodesArgs),
    /// Generate a confounded synthetic dataset and compare baseline and adjusted classifiers
    Synth(commands::SynthArgs),
    /// Causal-graph queries
    #[command(subcommand)]
    Scm(scm::ScmCommand),
    /// Meta-train a head initialization and compare it with zero initialization
    Meta(commands::MetaArgs),
}

const HARDNESS_BINS: usize = 10;

fn threads(requested: Option<usize>) -> Result<usize> {
    match requested {
        Some(0) => Err(failure::config("--threads must be at least 1")),
        Some(p) => Ok(p),
        None => Ok(std::thread::available_parallelism().map_or(1, NonZeroUsize::get)),
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = threads(cli.threads)?;
    match cli.command {
        Command::Episodes(args) => commands::episodes(&args, None, threads),
        Command::Hardness(args) => commands::episodes(&args, Some(HARDNESS_BINS), threads),
        Command::Synth(args) => commands::synth(&args, threads),
        Command::Scm(cmd) => scm::run(&cmd),
        Command::Meta(args) => commands::meta(&args, threads),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(failure::exit_code(&e) as u8)
        }
    }
}
