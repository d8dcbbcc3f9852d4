mod archive;
mod commands;
mod config;
mod figures;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{Config, Overrides};

/// Decode-and-transfer attack on deep image steganography: dataset
/// generation, oracle and attack training, evaluation and reporting.
#[derive(Debug, Parser)]
#[command(name = "stegattack", version)]
struct Cli {
    /// TOML experiment config. Flags take precedence over its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Root seed; every component seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for checkpoints, tuples, reports, panels and figures.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    /// Image corpus root. Falls back to `dataset.root_path`, then to
    /// $STEGATTACK_DATA_DIR.
    #[arg(long, global = true, value_name = "DIR")]
    data_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a deterministic synthetic image corpus into the dataset root.
    SynthImages {
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
    /// Train the hiding model on the training split.
    TrainOracle,
    /// Embed secret/cover pairs with the trained hiding model into train and
    /// test tuple archives.
    GenerateDataset,
    /// Train the decoder, generator and discriminator on the train archive.
    TrainAttack {
        /// Continue from the saved training state.
        #[arg(long)]
        resume: bool,
    },
    /// Decode and transfer one (cover, container) pair.
    Attack {
        #[arg(long, value_name = "PNG")]
        cover: PathBuf,
        #[arg(long, value_name = "PNG")]
        container: PathBuf,
        /// Ground-truth secret; when given, PSNR and SSIM are printed.
        #[arg(long, value_name = "PNG")]
        secret: Option<PathBuf>,
    },
    /// Score the attack on the test archive and write report and panels.
    Evaluate,
    /// Plot loss curves from the training logs.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthImages { .. } => "synth-images",
            Command::TrainOracle => "train-oracle",
            Command::GenerateDataset => "generate-dataset",
            Command::TrainAttack { .. } => "train-attack",
            Command::Attack { .. } => "attack",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
        }
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out_dir,
        data_dir: cli.data_dir,
    };
    let config = Config::load(cli.config.as_deref(), &overrides)?;
    let archived = config.archive(cli.command.name())?;
    log::debug!("effective config written to {}", archived.display());
    match cli.command {
        Command::SynthImages { count } => commands::synth_images(&config, count),
        Command::TrainOracle => commands::train_oracle(&config),
        Command::GenerateDataset => commands::generate_dataset(&config),
        Command::TrainAttack { resume } => commands::train_attack(&config, resume),
        Command::Attack {
            cover,
            container,
            secret,
        } => commands::attack(&config, &cover, &container, secret.as_deref()),
        Command::Evaluate => commands::evaluate(&config),
        Command::Report => commands::report(&config),
    }
}
