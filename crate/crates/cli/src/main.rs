//! `deeppipe` command-line driver.

mod commands;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use deeppipe_core::Error as CoreError;

#[derive(Parser, Debug)]
#[command(name = "deeppipe", version, about = "Pipeline embeddings and deep-kernel BO")]
struct Cli {
    /// Default meta-dataset directory for commands that take `--meta`.
    #[arg(long, global = true, env = "DEEPPIPE_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit preprocessing statistics and write the scaled pipeline table.
    Preprocess(PreprocessArgs),
    /// Meta-train a network and kernel on a meta-dataset.
    MetaTrain(MetaTrainArgs),
    /// Run Bayesian optimization on one task.
    Optimize(OptimizeArgs),
    /// Run a methods x tasks x seeds grid and write rank/regret tables.
    Benchmark(BenchmarkArgs),
    /// Monte-Carlo checks of the random-weight identities.
    VerifyTheory(VerifyTheoryArgs),
    /// Cluster metric of randomly initialised networks.
    ClusterMetric(ClusterMetricArgs),
    /// Write the embedding of every pipeline in a meta-dataset.
    ExportEmbeddings(ExportArgs),
    /// Print parameter counts of an architecture.
    ParamCount(ParamCountArgs),
    /// Generate a synthetic meta-dataset.
    Synth(SynthArgs),
    /// Rerun a command from its manifest into a new output directory.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub space: PathBuf,
    #[arg(long)]
    pub pipelines: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct MetaTrainArgs {
    /// JSON config: meta, architecture, train, strict_paper.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub meta: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `train_state.json` in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Restrict the architecture to the published grid.
    #[arg(long)]
    pub strict_paper: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Deeppipe,
    RawGp,
    Random,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneArg {
    KernelOnly,
    Network,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct OptimizeArgs {
    /// Required for `--mode deeppipe`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub meta: Option<PathBuf>,
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value_t = 5)]
    pub n_init: usize,
    #[arg(long, default_value_t = 95)]
    pub iterations: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Deeppipe)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = FineTuneArg::KernelOnly)]
    pub fine_tune: FineTuneArg,
    #[arg(long, default_value_t = 100)]
    pub fine_tune_steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub fine_tune_lr: f64,
    /// `all`, `aggregation`, `kernel_only` or `encoder(stage,algorithm)`.
    #[arg(long)]
    pub trainable: Option<String>,
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long)]
    pub reset_kernel: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub meta: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct VerifyTheoryArgs {
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.01)]
    pub tolerance: f64,
    /// Also report the cluster metric for encoder depths 0 and 1.
    #[arg(long)]
    pub cluster_metric: bool,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Search space for the cluster metric.
    #[arg(long)]
    pub space: Option<PathBuf>,
    #[arg(long)]
    pub stage: Option<String>,
    #[arg(long, default_value_t = 2000)]
    pub configs: usize,
    #[arg(long, default_value_t = 5000)]
    pub triples: usize,
    #[arg(long, default_value_t = 8)]
    pub width_factor: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ClusterMetricArgs {
    #[arg(long)]
    pub space: PathBuf,
    /// Stage whose algorithm labels the points; defaults to the last.
    #[arg(long)]
    pub stage: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub width_factor: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub encoder_layers: Vec<usize>,
    #[arg(long, default_value_t = 2000)]
    pub configs: usize,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 5000)]
    pub triples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub meta: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ParamCountArgs {
    #[arg(long)]
    pub space: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub width_factor: usize,
    #[arg(long, default_value_t = 1)]
    pub encoder_layers: usize,
    /// Defaults to `4 - encoder_layers`.
    #[arg(long)]
    pub aggregation_layers: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub embedding_dim: usize,
    #[arg(long)]
    pub one_hot: bool,
    #[arg(long)]
    pub strict_paper: bool,
    /// Also write `param_count.json` and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub space: PathBuf,
    #[arg(long, default_value_t = 45)]
    pub tasks: usize,
    #[arg(long, default_value_t = 300)]
    pub pipelines: usize,
    #[arg(long, default_value_t = 5)]
    pub families: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.8)]
    pub spread: f64,
    #[arg(long, default_value_t = 0.0)]
    pub missing: f64,
    #[arg(long)]
    pub with_cost: bool,
    #[arg(long, default_value_t = 0.6)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0.2)]
    pub val_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Bad invocation detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Numerical(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let data_dir = cli.data_dir.clone();
    let result = match cli.command {
        Command::Preprocess(a) => commands::preprocess(a),
        Command::MetaTrain(a) => commands::meta_train_cmd(a, data_dir),
        Command::Optimize(a) => commands::optimize(a, data_dir),
        Command::Benchmark(a) => commands::benchmark_cmd(a, data_dir),
        Command::VerifyTheory(a) => commands::verify_theory_cmd(a),
        Command::ClusterMetric(a) => commands::cluster_metric_cmd(a),
        Command::ExportEmbeddings(a) => commands::export(a, data_dir),
        Command::ParamCount(a) => commands::param_count(a),
        Command::Synth(a) => commands::synth(a),
        Command::Replay(a) => commands::replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
