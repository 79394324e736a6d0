//! `flatmae`: mesh to grid to shards to pretraining, probing, scaling fits
//! and rendering.

mod commands;
mod resolve;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "flatmae", version, about = "Flat-map fMRI masked autoencoder pipeline")]
struct Cli {
    /// JSON file with the command's configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Precompute the pixel-to-vertex interpolation table for a flat mesh.
    BuildGrid(BuildGridArgs),
    /// Generate a synthetic dataset: mesh, runs, labels and optionally shards.
    MakeSynth(MakeSynthArgs),
    /// Preprocess surface runs onto a grid and write one shard per run.
    Resample(ResampleArgs),
    /// Train the masked autoencoder on shards.
    Pretrain(PretrainArgs),
    /// Sweep attentive probes on frozen features and report test accuracy.
    Probe(ProbeArgs),
    /// Fit a power law to loss-versus-dataset-size traces.
    FitScaling(FitScalingArgs),
    /// Render masked input, prediction and target for one clip.
    Render(RenderArgs),
    /// Describe a mesh, grid, run, shard or checkpoint file.
    Info(InfoArgs),
}

#[derive(clap::Args, Debug)]
pub struct BuildGridArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub pixel_mm: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct MakeSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long)]
    pub n_vertices: Option<usize>,
    #[arg(long)]
    pub n_times: Option<usize>,
    #[arg(long)]
    pub tr: Option<f64>,
    #[arg(long)]
    pub runs_per_class: Option<usize>,
    /// Also build a square grid of this size and write shards.
    #[arg(long)]
    pub grid_size: Option<usize>,
    #[arg(long)]
    pub pixel_mm: Option<f64>,
}

#[derive(clap::Args, Debug)]
pub struct ResampleArgs {
    #[arg(long)]
    pub grid: PathBuf,
    /// Run files, or directories holding `.fmrun` files.
    #[arg(long, required = true, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub tr_out: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub grid: PathBuf,
    /// Shard files, or directories holding `.fmshrd` files.
    #[arg(long, required = true, num_args = 1..)]
    pub shards: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Train until this many optimizer steps have been taken.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// Explicit number of visible spatial tubes; overrides the ratio.
    #[arg(long)]
    pub num_visible: Option<usize>,
    #[arg(long)]
    pub p_t: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub clip_len: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub capacity: Option<usize>,
    /// Continue from a checkpoint; its configuration is reused.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// Frozen encoder tokens into an attentive probe.
    Mae,
    /// Learned patch embedding without transformer blocks.
    PatchEmbed,
    /// Parcel correlation upper triangle into a linear probe.
    Connectome,
}

#[derive(clap::Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub shards: Vec<PathBuf>,
    /// CSV with `run_id,label,split` rows.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_enum)]
    pub features: Option<FeatureKind>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub lr_scales: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub weight_decays: Option<Vec<f64>>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub parcels: Option<usize>,
    #[arg(long)]
    pub clip_len: Option<usize>,
}

#[derive(clap::Args, Debug)]
pub struct FitScalingArgs {
    /// CSV with `size,epoch,test_loss` rows.
    pub csv: PathBuf,
    /// Fit only the k smallest dataset sizes; the rest are held out.
    #[arg(long)]
    pub first_k: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub shard: PathBuf,
    /// Index of the non-overlapping clip within the shard.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub zoom: Option<u32>,
    /// Three frame indices to show, one per row.
    #[arg(long, value_delimiter = ',')]
    pub frames: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct InfoArgs {
    pub path: PathBuf,
}

fn init_threads() -> Result<Option<usize>, String> {
    let Ok(v) = std::env::var("FLATMAE_THREADS") else { return Ok(None) };
    let n: usize =
        v.parse().ok().filter(|&n| n > 0).ok_or(format!("FLATMAE_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())?;
    Ok(Some(n))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = match init_threads() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cfg = cli.config.as_deref();
    let result = match cli.command {
        Command::BuildGrid(a) => commands::build_grid(a, cfg),
        Command::MakeSynth(a) => commands::make_synth(a, cfg),
        Command::Resample(a) => commands::resample(a, cfg),
        Command::Pretrain(a) => commands::pretrain(a, cfg, threads),
        Command::Probe(a) => commands::probe(a, cfg),
        Command::FitScaling(a) => commands::fit_scaling(a),
        Command::Render(a) => commands::render(a, cfg),
        Command::Info(a) => commands::info(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
