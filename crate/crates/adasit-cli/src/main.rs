//! Experiment harness for initialization-shared multi-task learning.

mod config;
mod runner;

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use adasit::data::Split;
use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "adasit",
    about = "Multi-task meta-learning experiments on event-sequence data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Generate a synthetic dataset and print its statistics
    GenData {
        /// Named preset (two-regime, mini-eicu)
        #[arg(long)]
        preset: Option<String>,

        /// Synthetic config file (alternative to --preset)
        #[arg(long)]
        config: Option<PathBuf>,

        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,

        #[arg(long, default_value = "0")]
        seed: u64,
    },

    /// Train per the experiment config, once per seed
    Train {
        /// Experiment config file
        #[arg(long)]
        config: PathBuf,

        /// Output directory (overrides config and ADASIT_OUTPUT_ROOT)
        #[arg(long)]
        out: Option<PathBuf>,

        /// Comma-separated seed list overriding the config
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,

        /// Continue a finished run from its checkpoint (the current config
        /// must describe the same dataset and model; raise max_epochs to
        /// train further). Ignores the seed list.
        #[arg(long)]
        resume: Option<PathBuf>,
    },

    /// Evaluate a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,

        /// Dataset directory or manifest file
        #[arg(long)]
        data: PathBuf,

        #[arg(long, default_value = "test")]
        split: String,

        /// Write the report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Run all four similarity strategies over the seed list and summarize
    Ablate {
        #[arg(long)]
        config: PathBuf,

        #[arg(long)]
        out: Option<PathBuf>,

        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },

    /// Export per-task adaptation deltas and neighborhoods for projection
    ExportModelSpace {
        #[arg(long)]
        checkpoint: PathBuf,

        /// Output file (one JSON record per line)
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path, seeds: Option<Vec<u64>>) -> Result<(ExperimentConfig, PathBuf)> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seeds) = seeds {
        if seeds.is_empty() {
            bail!("--seeds must list at least one seed");
        }
        config.seeds = seeds;
    }
    let dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((config, dir))
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => bail!("unknown split '{other}' (expected train, valid, or test)"),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    match cli.command {
        Commands::GenData {
            preset,
            config,
            out,
            seed,
        } => runner::cmd_gen_data(preset.as_deref(), config.as_deref(), &out, seed),

        Commands::Train {
            config,
            out,
            seeds,
            resume,
        } => {
            let (config, dir) = load_config(&config, seeds)?;
            match resume {
                Some(checkpoint) => runner::cmd_resume(&config, &dir, &checkpoint, out.as_deref()),
                None => runner::cmd_train(&config, &dir, out.as_deref()),
            }
        }

        Commands::Eval {
            checkpoint,
            data,
            split,
            out,
        } => runner::cmd_eval(&checkpoint, &data, parse_split(&split)?, out.as_deref()),

        Commands::Ablate { config, out, seeds } => {
            let (config, dir) = load_config(&config, seeds)?;
            runner::cmd_ablate(&config, &dir, out.as_deref())
        }

        Commands::ExportModelSpace { checkpoint, out } => {
            runner::cmd_export_model_space(&checkpoint, &out)
        }
    }
}
