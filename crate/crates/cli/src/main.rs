//! `lgc3d`: data preparation, training, evaluation, compilation and cost reports
//! for learnable-group-convolution 3D DenseNets.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lgc3d_core::hsi::RawLayout;

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "lgc3d",
    version,
    about = "Learnable group convolution for hyperspectral 3D DenseNets"
)]
pub struct Cli {
    /// Print one JSON object on stdout instead of text.
    #[arg(long, global = true)]
    pub json: bool,

    /// Seed for every random number consumer of the subcommand.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Log progress (per-epoch training lines) to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert a raw or CSV cube dump into the native cube format.
    Convert(ConvertArgs),
    /// Generate the synthetic Voronoi scene.
    Synth(SynthArgs),
    /// Stratified train/val/test split of the labeled pixels.
    Split(SplitArgs),
    /// Train from scratch, keeping the best validation epoch.
    Train(TrainArgs),
    /// Metrics of a checkpoint on one split part.
    Eval(EvalArgs),
    /// Freeze a checkpoint and write its compiled inference plan.
    Compile(CompileArgs),
    /// Time naive frozen inference against the compiled plan.
    Bench(BenchArgs),
    /// Parameter and multiply-add counts of a model configuration.
    Flops(FlopsArgs),
    /// Render predicted classes of the labeled pixels as a PPM image.
    Map(MapArgs),
    /// Summarize run records into per-setting tables.
    Report(ReportArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum InputFormat {
    /// Little-endian f32 samples plus little-endian i16 labels.
    Raw,
    /// One pixel spectrum per line plus an H-line label grid.
    Csv,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Layout {
    Hwb,
    Bhw,
}

impl From<Layout> for RawLayout {
    fn from(l: Layout) -> Self {
        match l {
            Layout::Hwb => RawLayout::Hwb,
            Layout::Bhw => RawLayout::Bhw,
        }
    }
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_enum, default_value = "raw")]
    pub format: InputFormat,
    /// `H,W,B` (raw format only).
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub dims: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "hwb")]
    pub layout: Layout,
    /// Band list file of 0-based indices to drop.
    #[arg(long)]
    pub remove_bands: Option<PathBuf>,
    #[arg(long, default_value = "cube")]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 48)]
    pub size: usize,
    #[arg(long, default_value_t = 16)]
    pub bands: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Standard deviation of the additive noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub cube: PathBuf,
    /// `train:val:test`, e.g. `6:1:3`.
    #[arg(long, default_value = "6:1:3")]
    pub ratio: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Model config file, or one of `small`, `base`, `larger`, `desk`.
    #[arg(long)]
    pub config: String,
    /// Training schedule file (TOML or JSON); defaults apply otherwise.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Spatial patch side; overrides the model config.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Checkpoint path; with `--runs R > 1` run `r` writes `<stem>.run<r>.<ext>`.
    #[arg(long)]
    pub out: PathBuf,
    /// Independent runs with seeds `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Append one JSON run record per run to this file.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Dataset label used in run records.
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, default_value = "test")]
    pub part: String,
    /// Also run the compiled plan and require identical confusion matrices.
    #[arg(long)]
    pub compiled: bool,
}

#[derive(Args, Debug)]
pub struct CompileArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// A checkpoint or a compiled plan.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 30)]
    pub reps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    /// Model config file, or one of `small`, `base`, `larger`, `desk`.
    #[arg(long)]
    pub config: String,
    #[arg(long)]
    pub bands: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    /// Include the per-layer rows.
    #[arg(long)]
    pub layers: bool,
}

#[derive(Args, Debug)]
pub struct MapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// A run-record file, or a directory whose `*.jsonl` files are all read.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long = "json-out")]
    pub json_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
