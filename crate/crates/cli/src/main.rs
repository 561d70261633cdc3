//! `flim`: phantoms, marker-based encoders, sU-Net training, evaluation and
//! the studio server.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "flim", version, about = "Marker-based encoder construction and sU-Net segmentation")]
pub struct Cli {
    /// JSON file with configuration values; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic datasets.
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Single-shot marker-based filter estimation.
    #[command(subcommand)]
    Flim(FlimCmd),
    /// Multi-step candidate runs with scripted selection.
    #[command(subcommand)]
    Msflim(MsflimCmd),
    /// Multi-layer encoders.
    #[command(subcommand)]
    Encoder(EncoderCmd),
    /// Train an sU-Net.
    Train(TrainArgs),
    /// Dice report of a trained model.
    Eval(EvalArgs),
    /// Side-by-side table of several reports.
    Compare(CompareArgs),
    /// Start the studio HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum PhantomCmd {
    /// Generate a dataset of phantom cases.
    Gen(PhantomArgs),
}

#[derive(Debug, Subcommand)]
pub enum FlimCmd {
    /// Estimate a first-layer bank from the markers.
    Estimate(FlimArgs),
}

#[derive(Debug, Subcommand)]
pub enum MsflimCmd {
    /// Run the (N1, N2) grid and select a bank with the scripted oracle.
    Grid(GridArgs),
}

#[derive(Debug, Subcommand)]
pub enum EncoderCmd {
    /// Build three-layer encoders for both modalities.
    Build(EncoderArgs),
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset directory.
    #[arg(long, env = "FLIM_DATA_DIR")]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cubic extent in voxels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Train, validation and test fractions, e.g. `0.7,0.1,0.2`.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<f64>>,
    /// Voxels per synthesized marker.
    #[arg(long)]
    pub marker_voxels: Option<usize>,
    #[command(flatten)]
    pub out: OutArg,
}

/// Flags shared by commands that estimate filters from markers.
#[derive(Debug, Args)]
pub struct MarkerArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Training cases that carry markers.
    #[arg(long)]
    pub marked_cases: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub clusters_per_marker: Option<usize>,
    /// `flair`, `t1gd` or `both`.
    #[arg(long, default_value = "both")]
    pub modality: String,
}

#[derive(Debug, Args)]
pub struct FlimArgs {
    #[command(flatten)]
    pub markers: MarkerArgs,
    /// Principal components kept from the estimated filters.
    #[arg(long)]
    pub target_bank: Option<usize>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub markers: MarkerArgs,
    /// `N1xN2` pairs, e.g. `5x5,10x50`.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<String>>,
    #[arg(long)]
    pub target_bank: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct EncoderArgs {
    #[command(flatten)]
    pub markers: MarkerArgs,
    /// Directory with `bank_<modality>.fb` for the first layers; without
    /// it the first layer is estimated from the markers.
    #[arg(long)]
    pub banks: Option<PathBuf>,
    #[arg(long)]
    pub target_bank: Option<usize>,
    /// Widths of layers 2 and 3.
    #[arg(long, value_delimiter = ',')]
    pub deep_widths: Option<Vec<usize>>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub markers: MarkerArgs,
    /// `fbp`, `pbp` or `ft`.
    #[arg(long)]
    pub regime: Option<String>,
    /// `random`, `flim` or `bank`.
    #[arg(long)]
    pub init: Option<String>,
    /// Directory with `encoder_<modality>.fenc` files to start from.
    #[arg(long)]
    pub encoders: Option<PathBuf>,
    /// Directory with `bank_<modality>.fb` files (for `--init bank`).
    #[arg(long)]
    pub banks: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub target_bank: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub deep_widths: Option<Vec<usize>>,
    /// Decoder widths, coarsest first.
    #[arg(long, value_delimiter = ',')]
    pub decoder_widths: Option<Vec<usize>>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub model: PathBuf,
    /// `train`, `val` or `test`.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// `name=path` pairs; the path is a report file or a directory holding `report.json`.
    #[arg(long = "report", required = true)]
    pub reports: Vec<String>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Built client bundle served at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArg,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
