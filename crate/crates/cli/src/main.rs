//! `hil`: expert, demonstrations, training, evaluation and oracle checks for
//! hierarchical imitation learning with batch and online Baum-Welch.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime or numeric error.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use hil_core::HilError;

use crate::commands::Run;
use crate::config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "hil", version, about = "Hierarchical imitation learning with batch and online Baum-Welch")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Value iteration: writes the expert, its value table and its policy checkpoint.
    Expert,
    /// Rolls out the epsilon-greedy expert and writes a demonstration file.
    Demo,
    /// Trains the configured algorithm on the demonstration file.
    Train,
    /// Evaluates a checkpoint against the expert.
    Eval,
    /// Sweeps trainers x demo sizes x seeds and writes the report tables.
    Compare,
    /// Checks the smoothers against brute-force latent enumeration.
    OracleCheck,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ConfigError>().is_some() || matches!(e.downcast_ref::<HilError>(), Some(HilError::Config(_))) {
        1
    } else {
        2
    }
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    let out = cli.out.clone().unwrap_or_else(|| config.out_dir.clone());
    let ctx = Run {
        config,
        out,
        seed_flag: cli.seed,
    };
    match cli.command {
        Command::Expert => commands::cmd_expert(&ctx)?,
        Command::Demo => commands::cmd_demo(&ctx)?,
        Command::Train => commands::cmd_train(&ctx)?,
        Command::Eval => commands::cmd_eval(&ctx)?,
        Command::Compare => commands::cmd_compare(&ctx)?,
        Command::OracleCheck => return commands::cmd_oracle_check(&ctx),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("oracle check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
