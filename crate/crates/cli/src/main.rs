//! `curate`: file-in, file-out front end for every curation operation.
//!
//! Exit codes: 0 success, 2 invalid input or parameters, 3 missing input
//! file, 4 internal failure.

mod commands;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use curate_core::Error;

#[derive(Parser, Debug)]
#[command(name = "curate", version, about = "Pseudo-label curation engine for point-supervised segmentation")]
pub struct Cli {
    /// Worker threads for image-parallel work (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArg {
    /// JSON pipeline configuration; unspecified keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PredKind {
    /// Instance ids 0..=K.
    Instances,
    /// A label map; its foreground is split into connected components.
    Mask,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene directory.
    Synth(commands::SynthArgs),
    /// Build a density map from a point set.
    Density {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = 11.0)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract density peaks as a pseudo point set.
    Nms {
        #[arg(long)]
        density: PathBuf,
        #[arg(long)]
        min_distance: Option<usize>,
        #[arg(long)]
        max_peaks: Option<usize>,
        #[arg(long)]
        min_value: Option<f64>,
        /// Kernel bandwidth used to derive the default distance and floor.
        #[arg(long, default_value_t = 11.0)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Advance the detection pseudo-label schedule by one round.
    DetectRound {
        #[arg(long)]
        round: usize,
        /// Ground-truth points of the image.
        #[arg(long)]
        points: PathBuf,
        /// Points accepted by the previous round (required after round 0).
        #[arg(long)]
        accepted: Option<PathBuf>,
        /// Count fixed in round 0, for the first-round count basis.
        #[arg(long)]
        reference_count: Option<usize>,
        /// Predicted density of the current model.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Run one instance-aware segmentation pseudo-labelling round.
    SegRound {
        #[arg(long)]
        round: usize,
        #[arg(long)]
        prob: PathBuf,
        #[arg(long)]
        density: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Build a prototype bank from target (and optionally source) tensors.
    Prototypes(commands::PrototypeArgs),
    /// Evaluate the pixel-to-prototype contrastive loss.
    ContrastLoss {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Labels or pseudo-labels the queries are drawn from.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        prob: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Evaluate the masked segmentation and detection losses and their combination.
    Losses {
        #[arg(long)]
        prob: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, requires_all = ["target_density", "mask"])]
        pred_density: Option<PathBuf>,
        #[arg(long)]
        target_density: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Contrastive term computed elsewhere (default 0).
        #[arg(long, default_value_t = 0.0)]
        contrastive: f64,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Score predictions against ground-truth instances (Dice, AJI, PQ).
    Evaluate {
        /// Prediction files; pair them with `--gt` in order.
        #[arg(long, required = true, num_args = 1..)]
        pred: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        gt: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = PredKind::Instances)]
        pred_kind: PredKind,
    },
    /// Run curation rounds over a working directory.
    RunPipeline {
        #[arg(long)]
        workdir: PathBuf,
        /// Run only this round (its predecessor must be complete); default runs all.
        #[arg(long)]
        round: Option<usize>,
        /// Training iteration stamped on the prototype banks.
        #[arg(long, default_value_t = 0)]
        iteration: u64,
        #[command(flatten)]
        config: ConfigArg,
    },
}

/// Maps a failure to its exit code.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::MissingFile(_)) => 3,
        Some(Error::Io { .. } | Error::Internal(_)) => 4,
        Some(_) => 2,
        None => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(report) => {
            let text = serde_json::to_string_pretty(&report).expect("reports are plain JSON");
            // a closed pipe downstream is not a failure of the command
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
