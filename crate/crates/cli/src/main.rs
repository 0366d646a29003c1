#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use morphprint_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "morphprint",
    version,
    about = "Cortical morphology fingerprinting pipeline"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Start from the single-core profile (48x48 rasters, one round) instead of the full defaults.
    #[arg(long, global = true, conflicts_with = "config")]
    desk: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort and its manifest.
    Synth {
        /// Two-scan subjects.
        #[arg(long)]
        subjects: Option<usize>,
        /// Single-scan subjects.
        #[arg(long)]
        singles: Option<usize>,
    },
    /// Flatten an open mesh (or one half of a split sphere) onto the unit square.
    Flatten {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Split a closed sphere at x = 0 and flatten this half.
        #[arg(long, value_enum)]
        half: Option<commands::Half>,
    },
    /// Rasterize the features of a flattened mesh into a FIMG image.
    Rasterize {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        map: PathBuf,
    },
    /// Draw two augmented views of a FIMG image.
    Augment {
        #[arg(long)]
        image: PathBuf,
    },
    /// Train both stages on every scan of a cohort.
    Train {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Identify two-scan subjects with a trained model, or cross-validate without one.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory of `train`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Compare the full pipeline against its ablations.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Compare single-channel inputs against all channels.
    Channels {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Occlusion saliency of one two-scan subject.
    Saliency {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory of `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        subject: String,
    },
    /// Central-difference gradient checks of every operator and both losses.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

/// Exit code 1 for usage and configuration errors, 2 for data and validation failures.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match commands::dispatch(&cli.global, cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
