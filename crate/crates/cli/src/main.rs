use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

mod commands;
mod manifest;
mod report;

/// Preference alignment for next-item recommendation.
#[derive(Parser)]
#[command(name = "rosepo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest interaction logs into examples, popularity and embeddings.
    Prepare(PrepareArgs),
    /// Generate a planted-structure dataset.
    Synth(SynthArgs),
    /// Supervised fine-tuning on the training split.
    TrainSft(TrainSftArgs),
    /// Train the preference oracle used to estimate flip rates.
    TrainOracle(TrainOracleArgs),
    /// Build a preference file from the training split.
    BuildPrefs(BuildPrefsArgs),
    /// Swap chosen and rejected items at random.
    InjectFlips(InjectFlipsArgs),
    /// Preference optimisation from an SFT checkpoint.
    TrainPo(TrainPoArgs),
    /// Rank a split and compute accuracy and bias metrics.
    Evaluate(EvaluateArgs),
    /// Grid search over run settings, selected on the validation split.
    Sweep(SweepArgs),
    /// Merge evaluated runs into comparison tables.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub interactions: PathBuf,
    #[arg(long)]
    pub items: PathBuf,
    /// Item vectors; co-occurrence embeddings are built when absent.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub min_rating: Option<i64>,
    #[arg(long, default_value_t = 11)]
    pub min_user_interactions: usize,
    /// Dimension of the fallback embeddings.
    #[arg(long, default_value_t = 32)]
    pub embedding_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 5000)]
    pub n_users: usize,
    #[arg(long, default_value_t = 500)]
    pub n_items: usize,
    #[arg(long, default_value_t = 0.8)]
    pub rho: f64,
    #[arg(long, default_value_t = 1.2)]
    pub zipf: f64,
    #[arg(long, default_value_t = 10)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0.5)]
    pub cluster_affinity: f64,
    #[arg(long, default_value_t = 15)]
    pub min_len: usize,
    #[arg(long, default_value_t = 25)]
    pub max_len: usize,
    #[arg(long, default_value_t = 32)]
    pub emb_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Run settings. A `--config` file is read first; flags override it.
#[derive(Args, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_fraction: Option<f64>,
    #[arg(long)]
    pub data_fraction: Option<f64>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Args)]
pub struct TrainSftArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run_dir: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args)]
pub struct TrainOracleArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct BuildPrefsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// uniform, self-hard, semantic, popular or mixed.
    #[arg(long)]
    pub strategy: String,
    #[arg(long)]
    pub sft_ckpt: Option<PathBuf>,
    /// Attaches a per-pair flip rate; without it the column is `-`.
    #[arg(long)]
    pub oracle_ckpt: Option<PathBuf>,
    /// Additional rejected items per pair, for multi-negative objectives.
    #[arg(long, default_value_t = 0)]
    pub extra_negatives: usize,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct InjectFlipsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub prefs: PathBuf,
    #[arg(long)]
    pub flip_prob: f64,
    /// Overwrite every pair's flip rate with `flip_prob`.
    #[arg(long)]
    pub write_epsilon: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainPoArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub prefs: PathBuf,
    #[arg(long)]
    pub sft_ckpt: PathBuf,
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Comma-separated: given, semantic_hard, all_items.
    #[arg(long, default_value = "given,semantic_hard")]
    pub modes: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// sft or po.
    #[arg(long, default_value = "po")]
    pub stage: String,
    #[arg(long)]
    pub prefs: Option<PathBuf>,
    #[arg(long)]
    pub sft_ckpt: Option<PathBuf>,
    /// `key=v1,v2,...`. Repeatable; the first key varies slowest.
    #[arg(long = "grid", value_name = "KEY=VALUES")]
    pub grid: Vec<String>,
    /// Comma-separated run seeds; defaults to the config seed.
    #[arg(long)]
    pub seeds: Option<String>,
    /// hr@K or ndcg@K on the validation split, given candidates.
    #[arg(long, default_value = "hr@1")]
    pub metric: String,
    #[arg(long)]
    pub run_dir: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub run_dirs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exits with clap's usage-error status.
pub fn usage_error(message: &str) -> ! {
    Cli::command().error(ErrorKind::ArgumentConflict, message).exit()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Synth(a) => commands::synth(a),
        Command::TrainSft(a) => commands::train_sft(a),
        Command::TrainOracle(a) => commands::train_oracle(a),
        Command::BuildPrefs(a) => commands::build_prefs(a),
        Command::InjectFlips(a) => commands::inject_flips(a),
        Command::TrainPo(a) => commands::train_po(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Report(a) => report::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
