//! Command-line front end for the mesoscopic photogrammetry engine.
//!
//! Verbs: `reconstruct` (run the optimization on an image sequence),
//! `synth` (render a synthetic benchmark with ground truth), `eval`
//! (score a height estimate against region ground truths), and
//! `inspect-distortion` (dump the estimated radial undistortion).
//!
//! Exit codes: 0 success, 1 usage/configuration errors, 2 data errors,
//! 3 numerical failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod formats;

/// Error classified by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        CliError::Numerical(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "meso",
    about = "Mesoscopic photogrammetry: joint registration, stitching, and height mapping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct an orthomosaic and height map from an image sequence.
    Reconstruct {
        /// Plain-text `key = value` run configuration.
        #[arg(long)]
        config: PathBuf,
    },
    /// Render a synthetic benchmark dataset with ground truth.
    Synth {
        /// Plain-text phantom/capture specification.
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a height estimate against region ground truths.
    Eval {
        /// Estimated height map (.mesoh).
        #[arg(long)]
        estimate: PathBuf,
        /// Region masks (.mesomask).
        #[arg(long)]
        masks: PathBuf,
        /// Region heights file (mm, line index = region id).
        #[arg(long)]
        regions: PathBuf,
        /// Exclude cells within this radius of region boundaries.
        #[arg(long, default_value_t = 0)]
        erode: usize,
        /// Optional machine-readable output (TSV).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print and plot the radial undistortion stored in a checkpoint.
    InspectDistortion {
        /// Checkpoint written by `reconstruct`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for the profile table and plot.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are success; anything else is a
            // usage error (exit 1).
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match &cli.command {
        Command::Reconstruct { config } => commands::cmd_reconstruct(config),
        Command::Synth { spec, out } => commands::cmd_synth(spec, out),
        Command::Eval {
            estimate,
            masks,
            regions,
            erode,
            out,
        } => commands::cmd_eval(estimate, masks, regions, *erode, out.as_deref()),
        Command::InspectDistortion {
            checkpoint,
            out_dir,
        } => commands::cmd_inspect_distortion(checkpoint, out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
