//! `alae` command line: data generation, both training phases, evaluation,
//! concept fitting, latent editing and the inference service.

pub mod commands;
pub mod server;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "alae", version, about = "Staged autoencoder and adversarial latent autoencoder toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// TOML training configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Checkpoint directory (written by the training commands, read by the rest).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Writes a labelled synthetic dataset.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// Defaults to the configured resolution.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Phase 1: greedy stage training and fine-tuning. Resumes an
    /// unfinished checkpoint.
    TrainAe {
        #[arg(long)]
        data: PathBuf,
    },
    /// Phase 2: adversarial latent training on top of a Phase 1 checkpoint.
    TrainAlae {
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint; defaults to updating --checkpoint in place.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FID between two image directories.
    EvalFid {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        /// Resize every image to this size; defaults to the first image's size.
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Reconstruction MAE and FID per split.
    EvalRecon {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fits the five concept vectors and prints the metrics table.
    FitConcepts {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Moves an image along a concept direction.
    Edit {
        #[arg(long)]
        concepts: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        concept: String,
        #[arg(long, allow_hyphen_values = true)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Renders a strip between the codes of two images.
    Interpolate {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        to: PathBuf,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value = "linear")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draws images from the prior into a grid.
    Sample {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Starts the HTTP inference service.
    Serve {
        #[arg(long)]
        concepts: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Static files served under /ui.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
}

/// Parses `argv` and runs the command. Returns the process exit code: 0 on
/// success, 2 on usage errors, 1 on runtime errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::execute(&cli.global, cli.command, &mut std::io::stdout()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
