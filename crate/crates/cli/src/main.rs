//! `ctxsim`: data conversion, training, evaluation and analysis for
//! context-sensitive odd-one-out similarity models.
//!
//! Exit status: 0 success, 1 invalid input, 2 I/O or unreadable file,
//! 3 numerical divergence.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxsim::model::ContextInput;
use ctxsim::{Error, ModelKind};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "ctxsim", version, about = "Context-sensitive similarity modeling on frozen embeddings")]
struct Cli {
    /// Worker threads. With 1 every output is bit-reproducible; more threads
    /// are used only where the reduction order is fixed.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand 8-choose-2 trials into context triplets, drop class
    /// collisions, and assign participant-stratified splits.
    Convert(ConvertArgs),
    /// Assign participant-stratified splits to trials or triplets.
    Split(SplitArgs),
    /// Train one model on the train split, selecting the epoch by val accuracy.
    Train(TrainArgs),
    /// Train over a hyperparameter grid and keep the best run.
    Gridsearch(GridArgs),
    /// Accuracy of a model or baseline on one split.
    Eval(EvalArgs),
    /// Paired bootstrap CI on the accuracy difference of two prediction files.
    Bootstrap(BootstrapArgs),
    /// Class-level ceiling on achievable accuracy.
    Upperbound(UpperBoundArgs),
    /// Similarity matrix of a set of images under one context.
    Rsm(RsmArgs),
    /// Principal-component coordinates of context-projected images.
    Pca(PcaArgs),
    /// Sample embeddings and triplets from a ground-truth model.
    Synth(SynthArgs),
}

#[derive(Args, Serialize)]
pub struct RatioArgs {
    #[arg(long, default_value_t = 0.8)]
    pub train_ratio: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_ratio: f64,
    #[arg(long, default_value_t = 0.1)]
    pub test_ratio: f64,
}

#[derive(Args, Serialize)]
pub struct ConvertArgs {
    /// Line-delimited JSON trial records.
    #[arg(long)]
    pub trials: PathBuf,
    /// JSON object mapping image ID to class label.
    #[arg(long)]
    pub classes: PathBuf,
    /// Output triplets (line-delimited JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the trial-level split assignment here.
    #[arg(long)]
    pub assignment: Option<PathBuf>,
    /// Randomly permute each triplet's image order instead of storing the
    /// canonical (selected, selected, unselected) order.
    #[arg(long)]
    pub shuffle_order: bool,
    #[command(flatten)]
    pub ratios: RatioArgs,
}

#[derive(Args, Serialize)]
pub struct SplitArgs {
    /// Triplets to tag; splits are drawn over their source trials.
    #[arg(long, required_unless_present = "trials", conflicts_with = "trials")]
    pub triplets: Option<PathBuf>,
    /// Trial records to split.
    #[arg(long)]
    pub trials: Option<PathBuf>,
    /// Tagged triplets output (with --triplets).
    #[arg(long, required_unless_present = "trials")]
    pub out: Option<PathBuf>,
    /// Split assignment output (line-delimited JSON of trial_id and split).
    #[arg(long, required_unless_present = "triplets")]
    pub assignment: Option<PathBuf>,
    #[command(flatten)]
    pub ratios: RatioArgs,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindArg {
    ContextSensitive,
    ContextInsensitive,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::ContextSensitive => ModelKind::ContextSensitive,
            KindArg::ContextInsensitive => ModelKind::ContextInsensitive,
        }
    }
}

#[derive(Clone, Copy, Default, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextInputArg {
    #[default]
    Normalized,
    Raw,
    Transformed,
}

impl From<ContextInputArg> for ContextInput {
    fn from(c: ContextInputArg) -> Self {
        match c {
            ContextInputArg::Normalized => ContextInput::Normalized,
            ContextInputArg::Raw => ContextInput::Raw,
            ContextInputArg::Transformed => ContextInput::Transformed,
        }
    }
}

#[derive(Args, Serialize)]
pub struct DataArgs {
    /// Embedding file (CSEM).
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Triplets with split tags.
    #[arg(long)]
    pub triplets: PathBuf,
}

#[derive(Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = KindArg::ContextSensitive)]
    pub model: KindArg,
    /// What the context mapper sees.
    #[arg(long, value_enum, default_value_t)]
    pub context_input: ContextInputArg,
    /// Drop the mapper bias m0.
    #[arg(long)]
    pub no_mapper_bias: bool,
    /// Keep the training order fixed across epochs.
    #[arg(long)]
    pub no_shuffle: bool,
    /// Std. dev. of the mapper initialization (default 0.01/√d).
    #[arg(long)]
    pub init_sigma: Option<f64>,
}

#[derive(Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 1e-4)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 16)]
    pub rank: usize,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Directory for model.ckpt, history.csv and manifest.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Serialize)]
pub struct GridArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32])]
    pub grid_rank: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1e-4, 1e-3])]
    pub grid_lambda1: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1e-5, 1e-4, 1e-3])]
    pub grid_lambda2: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 5.0, 7.5])]
    pub grid_tau: Vec<f64>,
    /// Directory for grid.csv, best.ckpt, best_history.csv and manifest.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineArg {
    /// Cosine similarity of the raw embeddings.
    FmCosine,
    /// Transformed embeddings of --checkpoint without the context kernel.
    CitOnly,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    pub fn split(self) -> Option<ctxsim::Split> {
        match self {
            SplitArg::Train => Some(ctxsim::Split::Train),
            SplitArg::Val => Some(ctxsim::Split::Val),
            SplitArg::Test => Some(ctxsim::Split::Test),
            SplitArg::All => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
            SplitArg::All => "all",
        }
    }
}

#[derive(Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Trained model; required unless --baseline fm-cosine.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Model label in the report (default: checkpoint stem or baseline name).
    #[arg(long)]
    pub name: Option<String>,
    /// Randomly permute each triplet's image order before predicting.
    #[arg(long)]
    pub permute_order: bool,
    /// Report CSV: model, split, n_trials, accuracy.
    #[arg(long)]
    pub report: PathBuf,
    /// Per-triplet predictions CSV, the input to `bootstrap`.
    #[arg(long)]
    pub predictions: PathBuf,
}

#[derive(Args, Serialize)]
pub struct BootstrapArgs {
    /// Predictions of the reference model.
    #[arg(long)]
    pub a: PathBuf,
    /// Predictions of the compared model; Δ = acc(b) − acc(a).
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub name_a: Option<String>,
    #[arg(long)]
    pub name_b: Option<String>,
    #[arg(long, default_value_t = ctxsim::evaluation::DEFAULT_N_BOOT)]
    pub n_boot: usize,
    #[arg(long, default_value_t = ctxsim::evaluation::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// CSV: model_a, model_b, delta, ci_low, ci_high, n_boot, seed.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct UpperBoundArgs {
    #[arg(long)]
    pub triplets: PathBuf,
    #[arg(long)]
    pub classes: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    /// JSON result.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RsmModeArg {
    ContextSensitive,
    CitOnly,
}

impl From<RsmModeArg> for ctxsim::analysis::RsmMode {
    fn from(m: RsmModeArg) -> Self {
        match m {
            RsmModeArg::ContextSensitive => Self::ContextSensitive,
            RsmModeArg::CitOnly => Self::CitOnly,
        }
    }
}

#[derive(Args, Serialize)]
pub struct ViewArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Context image ID.
    #[arg(long)]
    pub context: u64,
    /// Image IDs, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ids: Vec<u64>,
    #[arg(long, value_enum, default_value_t = RsmModeArg::ContextSensitive)]
    pub mode: RsmModeArg,
    /// CSV output; metadata JSON goes next to it with a .json extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct RsmArgs {
    #[command(flatten)]
    pub view: ViewArgs,
}

#[derive(Args, Serialize)]
pub struct PcaArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long, default_value_t = 2)]
    pub components: usize,
}

#[derive(Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 4)]
    pub r_true: usize,
    #[arg(long, default_value_t = 200)]
    pub n_images: usize,
    #[arg(long, default_value_t = 8)]
    pub n_clusters: usize,
    #[arg(long, default_value_t = 0.6)]
    pub cluster_spread: f64,
    #[arg(long, default_value_t = 25_000)]
    pub n_trials: usize,
    #[arg(long, default_value_t = 50)]
    pub n_participants: usize,
    /// Scale α of the truth kernel.
    #[arg(long, default_value_t = 4.0)]
    pub kernel_scale: f64,
    #[arg(long, default_value_t = 0.05)]
    pub transform_noise: f64,
    /// One constant kernel for every context. With --kernel-scale 1 the
    /// truth is a pure context-free transform.
    #[arg(long)]
    pub context_free: bool,
    /// Directory for embeddings.csem, triplets.jsonl, classes.json,
    /// truth.ckpt and manifest.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format(_) | Error::Corruption(_) => 2,
        Error::Divergence(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
    {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let ctx = commands::Context {
        seed: cli.seed,
        threads: cli.threads,
    };
    let result = match &cli.command {
        Command::Convert(a) => commands::convert(&ctx, a),
        Command::Split(a) => commands::split(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Gridsearch(a) => commands::gridsearch(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Bootstrap(a) => commands::bootstrap(&ctx, a),
        Command::Upperbound(a) => commands::upperbound(&ctx, a),
        Command::Rsm(a) => commands::rsm(&ctx, a),
        Command::Pca(a) => commands::pca(&ctx, a),
        Command::Synth(a) => commands::synth(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
