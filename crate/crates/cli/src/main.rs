use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use ewcseq_cli::commands;

/// Continual learning for token-level sequence labeling with elastic
/// weight consolidation.
#[derive(Parser)]
#[command(name = "ewcseq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a seeds x arms experiment from a JSON config.
    Sequence {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the config's seed list with a single seed.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Replace the config's consolidation strength.
        #[arg(long)]
        lambda_override: Option<f64>,
    },
    /// Generate a synthetic task pair as CoNLL files.
    Synth {
        /// Synth spec file (a synth_shift or synth_coarse_fine section).
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Verify the two shift tasks emit disjoint token sets.
        #[arg(long)]
        check_disjoint: bool,
    },
    /// Score a checkpoint against a CoNLL file; prints the report JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CoNLL data file.
        #[arg(long)]
        data: PathBuf,
    },
    /// Dump checkpoint metadata as JSON.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };

    let result = match cli.command {
        Command::Sequence {
            config,
            out,
            seed_override,
            lambda_override,
        } => commands::cmd_sequence(&config, out, seed_override, lambda_override),
        Command::Synth {
            config,
            out,
            check_disjoint,
        } => commands::cmd_synth(&config, &out, check_disjoint),
        Command::Eval { checkpoint, data } => commands::cmd_eval(&checkpoint, &data),
        Command::Inspect { checkpoint } => commands::cmd_inspect(&checkpoint),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
