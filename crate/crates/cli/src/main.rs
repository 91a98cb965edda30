mod commands;
mod error;

use std::net::IpAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

/// Progressive Gaussian volumetric video: encode, decode, render, serve, analyze.
#[derive(Debug, Parser)]
#[command(name = "gsv", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode splat point frames into a .gsv container, its manifest and a report.
    Encode(EncodeArgs),
    /// Decode layers 1..=l of a container into one splat point file per frame.
    Decode(DecodeArgs),
    /// Render one frame of a container (or a splat point file) to a PPM image.
    Render(RenderArgs),
    /// Serve a container over HTTP.
    Serve(ServeArgs),
    /// Play a served stream and write the playback log.
    Play(PlayArgs),
    /// Rate-distortion points and Bjøntegaard deltas for one or more containers.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic scene sequence as splat point files.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CodecArg {
    Raw,
    Reference,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OrderArg {
    Significance,
    Morton,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Splat point files, or directories of `.splat` files (sorted by name), one frame each.
    #[arg(long, short, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long, short)]
    pub output: PathBuf,
    /// Manifest path [default: manifest.json beside the output]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Encode report path [default: <output>.report.json]
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    pub layers: usize,
    /// Comma-separated fractions summing to 1 [default: equal]
    #[arg(long, value_delimiter = ',')]
    pub layer_fractions: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1e5)]
    pub lambda_psi: f64,
    #[arg(long, default_value_t = 0.0025)]
    pub tau_mu: f64,
    /// Reduce the SH degree of the input [default: keep]
    #[arg(long)]
    pub sh_degree: Option<u8>,
    #[arg(long, default_value_t = 16)]
    pub pos_bits: u8,
    /// Switch positions to 32 bits when a scene axis spans more than this
    #[arg(long)]
    pub wide_position_extent: Option<f32>,
    #[arg(long, value_enum, default_value = "reference")]
    pub codec: CodecArg,
    #[arg(long, default_value_t = 0.4)]
    pub prune_fraction: f64,
    /// `adaptive`, or a fixed group length in frames
    #[arg(long, default_value = "adaptive")]
    pub grouping: String,
    #[arg(long, value_enum, default_value = "significance")]
    pub flatten_order: OrderArg,
    #[arg(long, default_value_t = 30)]
    pub fps_num: u16,
    #[arg(long, default_value_t = 1)]
    pub fps_den: u16,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub estimate_rates: bool,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// Layers to decode [default: all]
    #[arg(long, short)]
    pub layers: Option<usize>,
    /// Output directory for frame_NNNN.splat files
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// A .gsv container or a splat point file
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub layers: Option<usize>,
    #[arg(long, short, default_value_t = 0)]
    pub frame: usize,
    /// Camera JSON [default: orbit view of the scene bounds]
    #[arg(long)]
    pub camera: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// Overridden by GSV_PORT
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
}

#[derive(Debug, Args)]
pub struct PlayArgs {
    /// Server base url, e.g. http://127.0.0.1:8080
    #[arg(long)]
    pub url: String,
    /// Link cap in bits per second [default: unlimited]
    #[arg(long)]
    pub cap_bps: Option<f64>,
    /// Fixed layer count instead of bandwidth adaptation
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long, default_value_t = 0.8)]
    pub safety: f64,
    /// Playback log JSON [default: stdout]
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// `NAME=a.gsv[,b.gsv,...]`. One container gives a point per layer count;
    /// several give one full-layer point each. The first curve is the anchor.
    #[arg(long = "curve", required = true)]
    pub curves: Vec<String>,
    /// Ground truth: a directory of frame_NNNN.ppm renders or frame_NNNN.splat frames
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub camera: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    /// Use only the first N frames
    #[arg(long)]
    pub frames: Option<usize>,
    /// Directory for per-curve RD CSV files
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, required = true)]
    pub seed: u64,
    /// Scene description JSON; flags below override its fields
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub sh_degree: Option<u8>,
    #[arg(long)]
    pub motion_amplitude: Option<f64>,
    #[arg(long)]
    pub rotation_amplitude: Option<f64>,
    #[arg(long)]
    pub residual_amplitude: Option<f64>,
    /// Output directory for frame_NNNN.splat files
    #[arg(long, short)]
    pub output: PathBuf,
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("GSV_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("GSV_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::Render(a) => commands::render(a),
        Command::Serve(a) => commands::serve(a),
        Command::Play(a) => commands::play(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Synth(a) => commands::synth(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
