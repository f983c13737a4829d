//! `scsm`: training, evaluation, ablation, probing and verification.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scsm_core::ScsmError;

#[derive(Parser)]
#[command(name = "scsm", version, about = "Spatial-channel state space blocks for few-shot classification")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Flat `key = value` run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set base_epochs=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output root; falls back to $SCSM_OUT, then the config's out_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Debug)]
pub struct CheckpointArg {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the backbone, blocks and head on base classes.
    TrainBase {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a base checkpoint on K novel shots per class, for each configured K.
    FinetuneNovel {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint; defaults to the one train-base writes.
        #[command(flatten)]
        ckpt: CheckpointArg,
    },
    /// Accuracy of a checkpoint on the matching evaluation partition.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
    },
    /// Median novel accuracy per variant and K over the configured seeds.
    Ablation {
        #[command(flatten)]
        common: Common,
    },
    /// Train a channel-importance probe on a fine-tuned checkpoint.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
    },
    /// Accuracy as a function of the fraction of top-weighted channels kept.
    Retention {
        #[command(flatten)]
        common: Common,
    },
    /// Write the highest- and lowest-weighted channel maps of one image as PGM.
    ExportMaps {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Index into the novel evaluation split.
        #[arg(long, default_value_t = 0)]
        image: usize,
    },
    /// Time the scan kernels.
    BenchScan {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4096)]
        len: usize,
        #[arg(long, default_value_t = 64)]
        lanes: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Thread count for the parallel kernels; defaults to every core.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the oracle checks; optionally cross-check a ledger's config hashes.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
}

/// Failure with its exit code.
pub enum Failure {
    Usage(String),
    Verify(String),
    Run(ScsmError),
}

impl From<ScsmError> for Failure {
    fn from(e: ScsmError) -> Self {
        Failure::Run(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.cmd {
        Command::TrainBase { common } => commands::train_base(&common),
        Command::FinetuneNovel { common, ckpt } => commands::finetune_novel(&common, &ckpt),
        Command::Eval { common, ckpt } => commands::eval(&common, &ckpt),
        Command::Ablation { common } => commands::ablation(&common),
        Command::Probe { common, ckpt } => commands::probe(&common, &ckpt),
        Command::Retention { common } => commands::retention(&common),
        Command::ExportMaps { common, ckpt, image } => commands::export_maps(&common, &ckpt, image),
        Command::BenchScan { common, len, lanes, batch, reps, workers } => {
            commands::bench_scan(&common, len, lanes, batch, reps, workers)
        }
        Command::Verify { common, ledger } => commands::verify(&common, ledger.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error[usage]: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Verify(name)) => {
            eprintln!("error[verify]: check '{name}' failed");
            ExitCode::from(3)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
