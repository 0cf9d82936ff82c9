//! `inflens`: extract class-specific influential features from exported
//! final-layer features and evaluate the decomposed classifier head.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "inflens", version, about, propagate_version = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Base seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 uses one per core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Output root; each subcommand writes to <out>/<subcommand>/.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Clamp negative features to zero instead of rejecting them.
    #[arg(long, global = true)]
    pub lenient: bool,
    /// Tie-breaking rule. Only `fixed` exists: equal feature values go to the
    /// lower index, equal histogram counts to the larger summed magnitude and
    /// then the lower index, equal logits to the lower class.
    #[arg(long, global = true, value_enum, default_value_t = Tiebreak::Fixed)]
    pub tiebreak: Tiebreak,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Tiebreak {
    Fixed,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with known influential indices.
    GenPlanted(GenPlantedArgs),
    /// Build the influence map and per-class histograms.
    Extract(ExtractArgs),
    /// Accuracy of the dense and the decomposed head.
    Eval(EvalArgs),
    /// Evaluate a grid of (k1, k2) pairs.
    Sweep(SweepArgs),
    /// Replace selected features with noise and measure the accuracy drop.
    Ablate(AblateArgs),
    /// Pairwise overlap of the class index sets.
    Overlap(OverlapArgs),
    /// Retrain the decomposed head on cached features.
    Finetune(FinetuneArgs),
    /// Attribution images from the influential channels of spatial features.
    Attrib(AttribArgs),
}

#[derive(Debug, Args)]
pub struct GenPlantedArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    /// Planted indices per class.
    #[arg(long, default_value_t = 3)]
    pub planted: usize,
    #[arg(long, default_value_t = 200)]
    pub n_per_class: usize,
    /// Instances per class in the held-out split.
    #[arg(long, default_value_t = 200)]
    pub holdout_per_class: usize,
    #[arg(long, default_value_t = 5.0)]
    pub signal_mean: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise_mean: f64,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Training manifest; influence maps and fitted noise come from it.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Manifest of the split to evaluate on; defaults to --manifest.
    #[arg(long)]
    pub eval_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
pub enum CoverageModeArg {
    #[default]
    InstanceMean,
    ClassMean,
}

/// How `k1` and `k2` are chosen when extracting.
#[derive(Debug, Args)]
pub struct KArgs {
    /// Top features kept per instance.
    #[arg(long, conflicts_with = "coverage")]
    pub k1: Option<usize>,
    /// Choose k1 as the smallest width reaching this mean ℓ₁ coverage.
    #[arg(long)]
    pub coverage: Option<f64>,
    #[arg(long, value_enum, default_value_t)]
    pub coverage_mode: CoverageModeArg,
    /// Influential indices kept per class; defaults to k1.
    #[arg(long)]
    pub k2: Option<usize>,
}

/// An influence map read from disk, extracted on the fly, or all indices.
#[derive(Debug, Args)]
pub struct MapArgs {
    /// Influence map JSON written by `extract`.
    #[arg(long, conflicts_with_all = ["k1", "coverage", "k2", "full"])]
    pub map: Option<PathBuf>,
    /// Select every index for every class.
    #[arg(long, conflicts_with_all = ["k1", "coverage", "k2"])]
    pub full: bool,
    #[command(flatten)]
    pub k: KArgs,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub k: KArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub map: MapArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated k1 values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub k1_grid: Vec<usize>,
    /// Comma-separated k2 values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub k2_grid: Vec<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NoiseModeArg {
    Fitted,
    Unit,
    Zero,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TargetArg {
    Influential,
    Complement,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    TrueLabel,
    Union,
    Both,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub map: MapArgs,
    #[arg(long, value_enum, default_value_t = NoiseModeArg::Fitted)]
    pub noise_mode: NoiseModeArg,
    /// Features to replace; both targets are run when omitted.
    #[arg(long, value_enum)]
    pub ablate_target: Option<TargetArg>,
    /// Whose sets are replaced: the true label's, the union of all classes',
    /// or both.
    #[arg(long, value_enum, default_value_t = ScopeArg::Both)]
    pub scope: ScopeArg,
}

#[derive(Debug, Args)]
pub struct OverlapArgs {
    /// Needed only when the map is extracted rather than read.
    #[arg(long, required_unless_present = "map")]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub map: MapArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub map: MapArgs,
    /// Step size; chosen by step halving from 1.0 when omitted.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Instances per step; 0 is full batch.
    #[arg(long, default_value_t = 0)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    pub l2: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CenteringArg {
    SpatialMean,
    CrossChannelMean,
}

#[derive(Debug, Args)]
pub struct AttribArgs {
    /// Manifest whose features are rank 4 (instances × m × h × w).
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub map: MapArgs,
    /// Class whose instances and influential set are used.
    #[arg(long)]
    pub class: usize,
    /// Instance indices within the class; defaults to the first.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub instances: Vec<usize>,
    /// Output size as HEIGHTxWIDTH.
    #[arg(long, default_value = "224x224")]
    pub target: String,
    #[arg(long, value_enum, default_value_t = CenteringArg::SpatialMean)]
    pub centering: CenteringArg,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build_global()
    {
        log::warn!("thread pool: {e}");
    }
    match commands::run(&cli) {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("inflens: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

