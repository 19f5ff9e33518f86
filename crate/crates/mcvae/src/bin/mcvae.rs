//! Command-line driver: synthetic cohort generation, single training
//! runs, the four experiment protocols, and the statistics report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mcvae::data::{generate_cohort, write_cohort};
use mcvae::experiments::{
    run_combinations, run_dropout_sweep, run_missingness_sweep, run_single, run_survival,
    write_report, ExperimentConfig,
};
use mcvae::training::TrainConfig;
use mcvae::{McvaeError, Result};

#[derive(Parser)]
#[command(
    name = "mcvae",
    version,
    about = "Multimodal VAE survival pipeline: synthetic cohorts, training, \
             robustness experiments, and statistical reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Profile {
    /// Hyperparameters tuned for the first reference cohort.
    Luad,
    /// Hyperparameters tuned for the second reference cohort.
    Lusc,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file (TOML); omitted fields use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for records, metrics, and summaries.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel training workers.
    #[arg(long)]
    workers: Option<usize>,
    /// Hyperparameter profile; ignored when the config file sets [train].
    #[arg(long, value_enum)]
    profile: Option<Profile>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort and write it to a file.
    Generate {
        /// Experiment configuration supplying the generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output cohort file.
        #[arg(long, default_value = "cohort.csv")]
        out: PathBuf,
    },
    /// Train one model on the first fold; writes a checkpoint and metrics.
    Train {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Cross-validated survival evaluation over every (fold, seed) pair.
    Survival {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Modality-combination grid with masked train and test sets.
    Combinations {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Sweep the training-time modality-dropout rate.
    DropoutSweep {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Sweep the data missingness level under a fixed training recipe.
    MissingnessSweep {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Aggregate recorded runs into the statistical report.
    Report {
        /// Directory holding the experiment subdirectories.
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(path: &PathBuf) -> Result<(ExperimentConfig, bool)> {
    let text = std::fs::read_to_string(path)?;
    let value: toml::Value = toml::from_str(&text)
        .map_err(|e| McvaeError::Config(format!("{}: {e}", path.display())))?;
    let cfg: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| McvaeError::Config(format!("{}: {e}", path.display())))?;
    Ok((cfg, value.get("train").is_some()))
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let (mut cfg, had_train_section) = match &args.config {
        Some(path) => read_config(path)?,
        None => (ExperimentConfig::default(), false),
    };
    if let Some(profile) = args.profile {
        if had_train_section {
            log::warn!("config file sets [train]; --profile {profile:?} is ignored");
        } else {
            cfg.train = match profile {
                Profile::Luad => TrainConfig::luad(),
                Profile::Lusc => TrainConfig::lusc(),
            };
        }
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(workers) = args.workers {
        cfg.workers = workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, seed, out } => {
            let cfg = match &config {
                Some(path) => read_config(path)?.0,
                None => ExperimentConfig::default(),
            };
            let mut spec = cfg.dataset.generate;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let cohort = generate_cohort(&spec)?;
            write_cohort(&cohort, &out)?;
            println!(
                "wrote {} patients ({} events) to {}",
                cohort.len(),
                cohort.records.iter().filter(|r| r.event).count(),
                out.display()
            );
        }
        Command::Train { args } => {
            let cfg = load_config(&args)?;
            let run = run_single(&cfg)?;
            println!(
                "trained {} epochs; best validation C {:.4} at epoch {}; test C {:.4}",
                run.state.epoch, run.state.best_val_cindex, run.state.best_epoch,
                run.test.cindex.value
            );
            println!("metrics:    {}", run.metrics_path.display());
            println!("checkpoint: {}", run.checkpoint_path.display());
        }
        Command::Survival { args } => {
            run_survival(&load_config(&args)?)?;
        }
        Command::Combinations { args } => {
            run_combinations(&load_config(&args)?)?;
        }
        Command::DropoutSweep { args } => {
            run_dropout_sweep(&load_config(&args)?)?;
        }
        Command::MissingnessSweep { args } => {
            run_missingness_sweep(&load_config(&args)?)?;
        }
        Command::Report { out } => {
            write_report(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
