//! `tgraph`: synthesize, preprocess, train, rank and evaluate.

mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use crate::commands::{
    AblateArgs, EvaluateArgs, GradcheckArgs, PreprocessArgs, RankArgs, SynthArgs, TrainCmd,
};
use crate::error::{CliError, EXIT_OK};

#[derive(Debug, Parser)]
#[command(
    name = "tgraph",
    version,
    about = "Rank tensor-program configurations with a graph neural network",
    after_help = "Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 I/O error.\n\
                  Log level: TGRAPH_LOG (error, warn, info, debug, trace; default info)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic collection with a known runtime function
    Synth(SynthArgs),
    /// Prune, re-pad, compress and deduplicate a dataset
    Preprocess(PreprocessArgs),
    /// Train fold models by cross-validation
    Train(TrainCmd),
    /// Score and order the configurations of every graph
    Rank(RankArgs),
    /// Compare predictions with measured runtimes
    Evaluate(EvaluateArgs),
    /// Check analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Train model variants with features removed and compare them
    Ablate(AblateArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Preprocess(a) => commands::preprocess(&a),
        Command::Train(a) => commands::train(&a).map(drop),
        Command::Rank(a) => commands::rank_cmd(&a).map(drop),
        Command::Evaluate(a) => commands::evaluate(&a).map(drop),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Ablate(a) => commands::ablate(&a).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TGRAPH_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_tree_is_consistent() {
        Cli::command().debug_assert();
    }
}
