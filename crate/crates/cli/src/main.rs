use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use limix_cli::commands::{self, CHECKPOINT_DIR, MIXTURE_FILE};
use limix_cli::config::ExperimentConfig;
use limix_cli::error::CliError;

#[derive(Parser)]
#[command(name = "limix", version, about = "Lifelong mixture experiments on synthetic task streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `model.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the mixture over the stream.
    Train(Common),
    /// Baseline against mixture and a fresh-component control.
    Compare(Common),
    /// Bound chains and ledger from saved checkpoints.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoints`.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Distil a student from a saved unsupervised mixture.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoints/mixture.lmx`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Retrain once per value of a configuration key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `section.key`, for example `gate.V`.
        #[arg(long)]
        param: String,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir.clone_from(o);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => commands::train(&load(&c)?),
        Command::Compare(c) => commands::compare(&load(&c)?),
        Command::Analyze { common, checkpoints } => {
            let cfg = load(&common)?;
            let dir = checkpoints.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_DIR));
            commands::analyze(&cfg, &dir)
        }
        Command::Distill { common, checkpoint } => {
            let cfg = load(&common)?;
            let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_DIR).join(MIXTURE_FILE));
            commands::distill(&cfg, &path)
        }
        Command::Sweep { common, param, values } => commands::sweep(&load(&common)?, &param, &values),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LIMIX_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
