use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "cyclevqg", version, about = "Category-conditioned visual question generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML experiment config; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed` and `data.split_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Use the synthetic shapes dataset described by the config.
    #[arg(long, conflicts_with = "data_dir")]
    toy: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a dataset, build the vocabulary and split, and write a cache.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Raw VQA directory holding the files named in `[data]`.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// `answer<TAB>category` table extending the default categories.
        #[arg(long)]
        categories: Option<PathBuf>,
        /// Cache directory to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write a checkpoint after every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Prepared cache directory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Resume from this checkpoint instead of initializing.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one question per category for every validation image.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Prepared cache directory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample with this softmax temperature instead of greedy decoding.
        #[arg(long)]
        temperature: Option<f64>,
        /// JSONL file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a generations file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Prepared cache whose training split defines seen questions.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        generations: PathBuf,
        #[arg(long, value_enum, default_value_t = Base::Total)]
        inventiveness_base: Base,
        /// Directory for `report.json` and `report.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Base {
    Total,
    Unique,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare {
            common,
            data_dir,
            categories,
            out,
        } => commands::prepare(&common, data_dir.as_deref(), categories.as_deref(), &out),
        Command::Train {
            common,
            data_dir,
            checkpoint,
            out,
        } => commands::train(&common, data_dir.as_deref(), checkpoint.as_deref(), &out),
        Command::Generate {
            common,
            data_dir,
            checkpoint,
            temperature,
            out,
        } => commands::generate(&common, data_dir.as_deref(), &checkpoint, temperature, &out),
        Command::Evaluate {
            common,
            data_dir,
            generations,
            inventiveness_base,
            out,
        } => {
            let base = match inventiveness_base {
                Base::Total => cyclevqg::metrics::InventivenessBase::Total,
                Base::Unique => cyclevqg::metrics::InventivenessBase::Unique,
            };
            commands::evaluate(&common, data_dir.as_deref(), &generations, base, out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
