//! Command-line surface: one binary, eight subcommands, a config file with
//! flag overrides where flags win. Exit codes are a stable contract: 0 for
//! success, 1 for runtime or validation failures, 2 for usage errors.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::Overrides;
use crate::error::Result;
use crate::runner;

#[derive(Debug, Parser)]
#[command(name = "bgch", version, about = "Bipartite graph convolutional hashing pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train hash codes from an edge list and write run artifacts.
    Train(TrainArgs),
    /// Top-N Hamming retrieval against a trained code table.
    Query(QueryArgs),
    /// Recall/NDCG report for a trained code table over standard cutoffs.
    Eval(EvalArgs),
    /// Train the full model and every single-switch variant; compare.
    Ablate(AblateArgs),
    /// Train once per gradient estimator; compare quality and speed.
    Estimators(EstimatorsArgs),
    /// Time XOR/popcount scoring against a float dot-product scan.
    Bench(BenchArgs),
    /// Loss-surface scan over embedding perturbation magnitudes.
    Landscape(LandscapeArgs),
    /// Run the dispersion Monte-Carlo check and the scoring-identity fuzz.
    Validate(ValidateArgs),
}

/// Training hyperparameter flags shared by every subcommand that trains.
/// Each maps onto one config-file key and overrides it when present.
#[derive(Debug, Clone, Default, Args)]
pub struct HyperFlags {
    /// Config file with key = value lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed for all random streams.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gradient estimator: fourier, ste, tanh, sigmoid, or signswish.
    #[arg(long)]
    pub estimator: Option<String>,
    /// Odd harmonic bound of the fourier estimator.
    #[arg(long = "n-terms")]
    pub n_terms: Option<u32>,
    /// Half-period of the fourier estimator.
    #[arg(long = "H")]
    pub half_period: Option<f64>,
    /// Dispersion strength in [0, 1).
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Graph convolution layers.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Power-iteration count for the dispersion projection.
    #[arg(long = "disp-iters")]
    pub disp_iters: Option<usize>,
    /// Embedding and code width in bits.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Ranking-loss weight.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// L2 regularization weight.
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Positives per training step.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Negatives sampled per positive.
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Ablation switch: no_fd, no_ah_ta, no_ah_rf, learnable_factors,
    /// no_bpr, or no_rec.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Top-N cutoff for per-epoch validation metrics.
    #[arg(long)]
    pub n: Option<usize>,
}

impl HyperFlags {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            estimator: self.estimator.clone(),
            n_terms: self.n_terms,
            half_period: self.half_period,
            epsilon: self.epsilon,
            layers: self.layers,
            power_iterations: self.disp_iters,
            dim: self.dim,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lr: self.lr,
            batch_size: self.batch,
            neg_samples: self.negatives,
            ablation: self.ablation.clone(),
            top_n: self.n,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub hyper: HyperFlags,
    /// Edge list (text) or graph cache (binary).
    #[arg(long)]
    pub edges: PathBuf,
    /// Output directory for codes, checkpoint, metrics, and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker cap for sharded evaluation passes.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Trained code-table file.
    #[arg(long)]
    pub codes: PathBuf,
    /// Edge list the table was trained on. With it, candidates are the item
    /// side and training neighbors are excluded; without it, every other
    /// node is a candidate.
    #[arg(long)]
    pub edges: Option<PathBuf>,
    /// Query node id; repeatable.
    #[arg(long)]
    pub node: Vec<u64>,
    /// Batch file of query ids, one per line.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Results per query.
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    /// Output directory; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub hyper: HyperFlags,
    /// Trained code-table file.
    #[arg(long)]
    pub codes: PathBuf,
    /// Edge list the table was trained on; supplies the held-out split.
    #[arg(long)]
    pub edges: PathBuf,
    /// Output directory; stdout-only when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub hyper: HyperFlags,
    #[arg(long)]
    pub edges: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EstimatorsArgs {
    #[command(flatten)]
    pub hyper: HyperFlags,
    #[arg(long)]
    pub edges: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Candidate pool size.
    #[arg(long, default_value_t = 100_000)]
    pub candidates: usize,
    /// Code width in bits.
    #[arg(long = "d", default_value_t = 256)]
    pub dim: u32,
    /// Convolution depth; the table carries L + 1 segments.
    #[arg(long = "L", default_value_t = 2)]
    pub depth: u32,
    /// Results per query.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output directory; stdout-only when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LandscapeArgs {
    #[command(flatten)]
    pub hyper: HyperFlags,
    #[arg(long)]
    pub edges: PathBuf,
    /// Checkpoint to scan around; trains from scratch when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Perturbation grid as start:end:step.
    #[arg(long, default_value = "0.05:0.5:0.05")]
    pub p: String,
    /// Loss surface to scan: rec, bpr, or total.
    #[arg(long, default_value = "total")]
    pub loss: String,
    /// Output directory; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Trials for the scoring-identity fuzz.
    #[arg(long = "identity-trials", default_value_t = 100_000)]
    pub identity_trials: usize,
    /// Monte-Carlo draws for the dispersion check.
    #[arg(long = "shrink-draws", default_value_t = 10_000)]
    pub shrink_draws: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub threads: Option<usize>,
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => runner::run_train(args),
        Command::Query(args) => runner::run_query(args),
        Command::Eval(args) => runner::run_eval(args),
        Command::Ablate(args) => runner::run_ablate(args),
        Command::Estimators(args) => runner::run_estimators(args),
        Command::Bench(args) => runner::run_bench(args),
        Command::Landscape(args) => runner::run_landscape(args),
        Command::Validate(args) => runner::run_validate(args),
    }
}
