use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use profashion_cli::commands;
use profashion_cli::config::resolve_config;
use profashion_cli::exit_code;
use profashion_core::error::Result;

#[derive(Parser)]
#[command(
    name = "profashion",
    about = "Multi-reference pose-driven video generation at desk scale",
    version
)]
struct Cli {
    /// Config file (sectioned key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override a config value: --set section.key=value (repeatable).
    #[arg(long = "set", global = true)]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clip: P6 frames plus sidecar.
    Synth,
    /// Train one stage; writes checkpoint.bin and loss.csv.
    Train {
        /// Checkpoint to resume from (stage 2 resumes from stage 1).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Sample a video with a trained checkpoint and score it.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck,
    /// Dump per-frame reference aggregation scores.
    InspectPpa {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score predicted frames against a clip directory.
    Evaluate {
        /// Directory of predicted frame_NNNN.ppm files.
        #[arg(long)]
        pred: PathBuf,
        /// Clip directory written by `synth`.
        #[arg(long)]
        gt: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(
        cli.config.as_deref(),
        &cli.sets,
        cli.seed,
        cli.out.as_deref(),
    )?;
    match cli.command {
        Command::Synth => commands::cmd_synth(&cfg),
        Command::Train { init } => commands::cmd_train(&cfg, init.as_deref()),
        Command::Generate { checkpoint } => commands::cmd_generate(&cfg, &checkpoint),
        Command::Gradcheck => commands::cmd_gradcheck(&cfg),
        Command::InspectPpa { checkpoint } => commands::cmd_inspect_ppa(&cfg, &checkpoint),
        Command::Evaluate { pred, gt } => commands::cmd_evaluate(&cfg, &pred, &gt),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
