//! `apm`: corpus generation, teacher preparation, staged training, evaluation, metric
//! re-scoring and adversarial runs.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use apm_core::ErrorKind;
use manifest::UsageError;

#[derive(Parser, Debug)]
#[command(name = "apm", version, about = "Aesthetic score-distribution prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with known score rules.
    Synth(SynthArgs),
    /// Train a classifier on the corpus's latent classes and write its soft targets.
    Teacher(TeacherArgs),
    /// Run the distill or aesthetic training stage.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Score a prediction file against a ground-truth file.
    Metrics(MetricsArgs),
    /// Perturb an image so its predicted distribution shifts up or down.
    Adversarial(AdversarialArgs),
    /// Print the smallest image side a network accepts.
    MinSize(MinSizeArgs),
    /// Re-execute a run from its manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageArg {
    Distill,
    Aesthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossArg {
    Huber,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantArg {
    Dist,
    Mean,
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneArg {
    Tiny,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionArg {
    Improve,
    Worsen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    /// Output directory (required).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub min_side: usize,
    #[arg(long, default_value_t = 48)]
    pub max_side: usize,
    /// Latent texture classes (1 to 4).
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Fraction of images whose annotation gets a spurious spike.
    #[arg(long, default_value_t = 0.0)]
    pub outlier_rate: f64,
    #[arg(long, default_value_t = 210)]
    pub votes: u32,
    /// JSON object of option values; flags given on the command line win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct NetArgs {
    #[arg(long, value_enum, default_value_t = BackboneArg::Tiny)]
    pub backbone: BackboneArg,
    /// Pyramid grid size n (n x n cells).
    #[arg(long, default_value_t = 3)]
    pub spp_n: usize,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, value_enum, default_value_t = VariantArg::Dist)]
    pub variant: VariantArg,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 10_000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2000)]
    pub step_iters: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr_factor: f64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TeacherArgs {
    /// Synthetic corpus directory (needs manifest.json for the latent classes).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: Option<StageArg>,
    /// Dataset directory with annotations.csv and images/.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Teacher soft targets (distill stage).
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// Distilled checkpoint to continue from (aesthetic stage).
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    /// Start the aesthetic stage from a fresh network without distillation.
    #[arg(long)]
    pub from_scratch: bool,
    #[arg(long, value_enum, default_value_t = LossArg::Huber)]
    pub loss: LossArg,
    #[arg(long, default_value_t = 3.0)]
    pub huber_sigma: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    pub val_count: usize,
    #[arg(long, default_value_t = 0)]
    pub test_count: usize,
    #[arg(long, default_value_t = 1000)]
    pub eval_every: usize,
    #[arg(short = 't', long, default_value_t = 5.0)]
    pub threshold: f64,
    /// Resize every image so its smaller side has this length.
    #[arg(long)]
    pub resize: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Split file written by `train`; restricts evaluation to one subset.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SubsetArg::All)]
    pub subset: SubsetArg,
    #[arg(short = 't', long, default_value_t = 5.0)]
    pub threshold: f64,
    #[arg(long)]
    pub resize: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsArgs {
    /// Rows of `id` followed by ten non-negative prediction values.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Annotation rows of `id` followed by ten vote counts (or probabilities).
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(short = 't', long, default_value_t = 5.0)]
    pub threshold: f64,
    /// Directory for report.json and the run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DirectionArg::Worsen)]
    pub direction: DirectionArg,
    #[arg(long, default_value_t = 0.5)]
    pub shift: f64,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub step_size: f64,
    #[arg(long)]
    pub linf_budget: Option<f64>,
    #[arg(long, default_value_t = 3.0)]
    pub huber_sigma: f64,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinSizeArgs {
    /// Read the network layout from a checkpoint instead of the flags.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BackboneArg::Tiny)]
    pub backbone: BackboneArg,
    #[arg(long, default_value_t = 3)]
    pub spp_n: usize,
}

#[derive(Args, Debug, Clone)]
pub struct RerunArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn sub_matches(matches: &ArgMatches) -> &ArgMatches {
    matches.subcommand().map(|(_, m)| m).expect("subcommand required")
}

fn run(cli: Cli, matches: &ArgMatches) -> anyhow::Result<()> {
    let sub = sub_matches(matches);
    match cli.command {
        Command::Synth(a) => {
            let resolved = manifest::merge_config(&a, sub, a.config.as_deref())?;
            commands::synth(resolved)
        }
        Command::Teacher(a) => {
            let resolved = manifest::merge_config(&a, sub, a.config.as_deref())?;
            commands::teacher(resolved)
        }
        Command::Train(a) => {
            let resolved = manifest::merge_config(&a, sub, a.config.as_deref())?;
            commands::train(resolved)
        }
        Command::Eval(a) => {
            let resolved = manifest::merge_config(&a, sub, a.config.as_deref())?;
            commands::eval(resolved)
        }
        Command::Metrics(a) => {
            let resolved = manifest::merge_config(&a, sub, a.config.as_deref())?;
            commands::metrics(resolved)
        }
        Command::Adversarial(a) => {
            let resolved = manifest::merge_config(&a, sub, a.config.as_deref())?;
            commands::adversarial(resolved)
        }
        Command::MinSize(a) => commands::min_size(a),
        Command::Rerun(a) => commands::rerun(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<apm_core::Error>().map(apm_core::Error::kind) {
        Some(ErrorKind::Usage) => 1,
        Some(ErrorKind::Numerical) => 3,
        Some(ErrorKind::Data) | None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = Cli::from_arg_matches(&matches).expect("matches come from the same definition");
    match run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
