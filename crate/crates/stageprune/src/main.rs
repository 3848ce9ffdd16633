use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stageprune::cli::{
    cmd_build_db, cmd_compare, cmd_evaluate, cmd_memory_report, cmd_search, cmd_train,
    resolve_config, write_default_config, Overrides,
};
use stageprune::error::Error;
use stageprune::prune::Backend;

#[derive(Parser)]
#[command(
    name = "stageprune",
    about = "Stage-wise structural pruning of a toy diffusion model with \
             budget-preserving schedule search over precomputed pruning trajectories"
)]
struct Cli {
    /// Experiment config (TOML); defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the search seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the stage count.
    #[arg(long, global = true)]
    stages: Option<usize>,
    /// Override the pruning backend: obs | wanda | layerdrop.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Override the per-stage target sparsity level.
    #[arg(long = "target-level", global = true)]
    target_level: Option<u32>,
    /// Override the search generation count.
    #[arg(long, global = true)]
    generations: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy denoiser and write a checkpoint.
    Train,
    /// Build per-stage calibrations, pruning trajectories, and the route
    /// database.
    BuildDb,
    /// Search for the best stage-wise sparsity schedule.
    Search,
    /// Evaluate a schedule against the dense model (plus uniform baseline).
    Evaluate {
        /// Schedule JSON (defaults to the search output).
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Compare uniform, random, greedy, and evolutionary search at a matched
    /// evaluation budget.
    Compare {
        /// Number of seeds to aggregate over.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Print routing-vs-stitching memory accounting for a schedule.
    MemoryReport {
        /// Schedule JSON (defaults to uniform at the target level).
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Write a default config file.
    InitConfig {
        /// Destination path.
        #[arg(long, default_value = "stageprune.toml")]
        path: PathBuf,
    },
}

fn parse_backend(s: &str) -> Result<Backend, Error> {
    match s {
        "obs" => Ok(Backend::Obs),
        "wanda" => Ok(Backend::Wanda),
        "layerdrop" => Ok(Backend::LayerDrop),
        other => Err(Error::InvalidConfig(format!(
            "unknown backend '{other}' (expected obs, wanda, or layerdrop)"
        ))),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let backend = cli.backend.as_deref().map(parse_backend).transpose()?;
    let overrides = Overrides {
        seed: cli.seed,
        stages: cli.stages,
        backend,
        target_level: cli.target_level,
        generations: cli.generations,
    };
    if let Command::InitConfig { path } = &cli.command {
        write_default_config(path)?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    let cfg = resolve_config(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Train => {
            cmd_train(&cfg)?;
        }
        Command::BuildDb => {
            cmd_build_db(&cfg)?;
        }
        Command::Search => {
            cmd_search(&cfg)?;
        }
        Command::Evaluate { schedule } => {
            cmd_evaluate(&cfg, schedule.as_deref())?;
        }
        Command::Compare { seeds } => {
            cmd_compare(&cfg, seeds)?;
        }
        Command::MemoryReport { schedule } => {
            cmd_memory_report(&cfg, schedule.as_deref())?;
        }
        Command::InitConfig { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
