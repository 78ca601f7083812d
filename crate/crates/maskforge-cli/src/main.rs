//! `maskforge`: coarse masks, graph-cut enhancement and recursive pseudo-label
//! refinement from the command line.
//!
//! Exit codes: 0 on success, 1 when inputs or configuration are invalid,
//! 2 when the run itself fails. Runs are deterministic given their inputs and
//! seed, and `--jobs` changes only the worker count, never the outputs.

mod commands;
mod config;
mod exchange;

use clap::{Args, Parser, Subcommand};
use config::{ConfigOverrides, ThresholdModeArg};
use maskforge::segment::SaliencyParams;
use maskforge::synthetic::SyntheticParams;
use serde::Serialize;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CliError {
    Validation(Vec<String>),
    Runtime(String),
}

impl CliError {
    pub fn invalid(msg: impl Display) -> Self {
        CliError::Validation(vec![msg.to_string()])
    }

    pub fn runtime(msg: impl Display) -> Self {
        CliError::Runtime(msg.to_string())
    }
}

/// Pretty JSON with a trailing newline, matching the snapshot files.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    let mut writer = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, value)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    writer
        .write_all(b"\n")
        .and_then(|()| writer.flush())
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

#[derive(Parser)]
#[command(
    name = "maskforge",
    version,
    about = "Weakly supervised segmentation: coarse masks, graph-cut enhancement, recursive refinement"
)]
struct Cli {
    /// Worker threads for per-image stages; results do not depend on it
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u32).range(1..))]
    jobs: Option<u32>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sharpen one coarse mask by iterated graph cuts
    Enhance(EnhanceArgs),
    /// Estimate a coarse mask from color contrast and a center prior
    Saliency(SaliencyArgs),
    /// Full run: coarse masks, enhancement, refinement rounds, reports
    Pipeline(ConfigOverrides),
    /// Continue refinement rounds from a saved snapshot
    Refine(ConfigOverrides),
    /// Score predicted label masks against ground-truth masks
    Eval(EvalArgs),
    /// Train the appearance backend once and write its predictions
    Segment(SegmentArgs),
    /// Write the bundled synthetic dataset (images, coarse and true masks)
    Synth(SynthArgs),
}

#[derive(Args)]
pub struct EnhanceArgs {
    /// Input image (PNG or PPM)
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    /// Initial binary mask to enhance
    #[arg(long, value_name = "FILE")]
    pub coarse: PathBuf,
    /// Where the enhanced mask is written
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Seed for the color models (fallback: $MASKFORGE_SEED, then 0)
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub grabcut: config::GrabCutArgs,
}

#[derive(Args)]
pub struct SaliencyArgs {
    /// Input image (PNG or PPM)
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    /// Where the coarse mask is written
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Center prior width as a fraction of the image diagonal
    #[arg(long)]
    pub center_prior_sigma: Option<f64>,
    /// How the saliency map is binarized
    #[arg(long, value_enum)]
    pub threshold_mode: Option<ThresholdModeArg>,
    /// Cut level for --threshold-mode fixed, in [0, 1]
    #[arg(long)]
    pub fixed_threshold: Option<f64>,
}

impl SaliencyArgs {
    fn to_params(&self) -> SaliencyParams {
        let mut params = SaliencyParams::default();
        if let Some(v) = self.center_prior_sigma {
            params.center_prior_sigma = v;
        }
        if let Some(v) = self.threshold_mode {
            params.threshold_mode = v.into();
        }
        if let Some(v) = self.fixed_threshold {
            params.fixed_threshold = v;
        }
        params
    }
}

#[derive(Args)]
pub struct EvalArgs {
    /// Directory of predicted label masks (<stem>.png)
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    /// Directory of ground-truth label masks with matching stems
    #[arg(long, value_name = "DIR")]
    pub gt: PathBuf,
    /// Where the metrics report is written
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SegmentArgs {
    /// Dataset manifest naming the images to train on and predict
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Directory of training label masks, one <stem>.png per image
    #[arg(long, value_name = "DIR")]
    pub labels: PathBuf,
    /// Directory the predictions are written to
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Mixture components per class
    #[arg(long, default_value_t = maskforge::gmm::DEFAULT_COMPONENTS)]
    pub components: usize,
    /// 3x3 majority vote over predicted labels
    #[arg(long, value_name = "BOOL", default_value_t = true)]
    pub majority_filter: bool,
    /// Seed for subsampling and model fits (fallback: $MASKFORGE_SEED, then 0)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the fitted model as JSON
    #[arg(long, value_name = "FILE")]
    pub model_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Directory the dataset is written to; prints the manifest path
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = SyntheticParams::default().images)]
    pub images: usize,
    #[arg(long, default_value_t = SyntheticParams::default().width)]
    pub width: u32,
    #[arg(long, default_value_t = SyntheticParams::default().height)]
    pub height: u32,
    /// Standard deviation of the per-channel color noise
    #[arg(long, default_value_t = SyntheticParams::default().noise)]
    pub noise: f64,
    #[arg(long, default_value_t = SyntheticParams::default().seed)]
    pub seed: u64,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    if let Some(jobs) = cli.jobs {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs as usize)
            .build_global();
        if let Err(e) = pool {
            eprintln!("error: {e}");
            return 2;
        }
    }
    let result = match &cli.command {
        Command::Enhance(args) => commands::cmd_enhance(args),
        Command::Saliency(args) => commands::cmd_saliency(args),
        Command::Pipeline(overrides) => commands::cmd_pipeline(overrides),
        Command::Refine(overrides) => commands::cmd_refine(overrides),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::Segment(args) => commands::cmd_segment(args),
        Command::Synth(args) => commands::cmd_synth(args),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Validation(problems)) => {
            for problem in problems {
                eprintln!("error: {problem}");
            }
            1
        }
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            2
        }
    }
}
