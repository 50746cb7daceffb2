use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use deeppipe_core::analysis::{
    export_embeddings, random_network_cluster_metric, random_weight_architecture, verify_theory,
    Estimate, TripleSampleSpec, VerifierReport,
};
use deeppipe_core::bo::{
    bo_run, meta_initial_design, rank_and_regret, result_rows, write_results, write_table,
    BoConfig, BoHistory, CandidatePool, Surrogate, SurrogateMode,
};
use deeppipe_core::gp::KernelParams;
use deeppipe_core::metadata::{generate_synthetic, MetaDataset, Split, SyntheticSpec};
use deeppipe_core::network::{ArchitectureSpec, Checkpoint, EmbeddingNetwork, InitScheme, TrainableSelector};
use deeppipe_core::space::{format_float, PipelineTable, PreprocessStats, SearchSpace};
use deeppipe_core::train::{meta_train, FineTuneConfig, FineTuneMode, TrainConfig, TrainState, TrainingData};
use deeppipe_core::Error as CoreError;

use crate::manifest::{hash_file, write_atomic, write_json_atomic, RunManifest, MANIFEST_FILE};
use crate::{
    ClusterMetricArgs, ExportArgs, FineTuneArg, ModeArg, OptimizeArgs, ParamCountArgs,
    PreprocessArgs, ReplayArgs, SynthArgs, UsageError, VerifyTheoryArgs,
};
use crate::{BenchmarkArgs, MetaTrainArgs};

const CHECKPOINT_FILE: &str = "checkpoint.json";
const STATE_FILE: &str = "train_state.json";

/// Files read and written by one command, plus its seeds.
#[derive(Default)]
struct Run {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seeds: Vec<u64>,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Creates `out`, runs `body`, then writes the manifest atomically.
fn with_manifest<C: Serialize>(
    command: &str,
    config: &C,
    out: &Path,
    body: impl FnOnce() -> Result<Run>,
) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let started = chrono::Utc::now();
    let clock = Instant::now();
    let run = body()?;
    let inputs = run
        .inputs
        .iter()
        .map(|p| hash_file(p))
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        command: command.to_string(),
        config: serde_json::to_value(config)?,
        seeds: run.seeds,
        inputs,
        outputs: run.outputs,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started: started.to_rfc3339(),
        finished: chrono::Utc::now().to_rfc3339(),
        elapsed_seconds: clock.elapsed().as_secs_f64(),
    };
    write_json_atomic(&out.join(MANIFEST_FILE), &manifest)?;
    info!("{command} finished in {:.1}s", manifest.elapsed_seconds);
    Ok(())
}

fn resolve_meta(meta: Option<PathBuf>, data_dir: Option<PathBuf>) -> Result<PathBuf> {
    meta.or(data_dir)
        .ok_or_else(|| usage("no meta-dataset: pass --meta or set DEEPPIPE_DATA_DIR"))
}

fn load_meta(dir: &Path) -> Result<MetaDataset> {
    let meta = MetaDataset::load_dir(dir)
        .with_context(|| format!("loading meta-dataset from {}", dir.display()))?;
    if meta.dropped_pipelines() > 0 {
        warn!("{} pipelines without any evaluation were dropped", meta.dropped_pipelines());
    }
    Ok(meta)
}

fn read_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        CoreError::Parse {
            path: format!("{}: {}", path.display(), e.path()),
            message: e.inner().to_string(),
        }
        .into()
    })
}

// ------------------------------------------------------------ preprocess

pub fn preprocess(a: PreprocessArgs) -> Result<()> {
    let out = a.out.clone();
    with_manifest("preprocess", &a, &out, || {
        let space = SearchSpace::load(&a.space)?;
        let table = PipelineTable::read_csv(&space, &a.pipelines)?;
        let stats = PreprocessStats::fit(&space, &table.rows, &table.masks)?;
        let mut scaled = table.clone();
        let mut clamps = 0;
        for (row, m) in scaled.rows.iter_mut().zip(&table.masks) {
            let s = stats.apply(row, m)?;
            clamps += s.nonpositive_clamps;
            *row = s.values;
        }
        if clamps > 0 {
            warn!("{clamps} non-positive values met a log transform and were clamped");
        }
        stats.save(out.join("stats.json"))?;
        scaled.write_csv(&space, out.join("processed.csv"))?;
        info!("preprocessed {} pipelines", table.len());
        Ok(Run {
            inputs: vec![a.space.clone(), a.pipelines.clone()],
            outputs: vec!["stats.json".into(), "processed.csv".into()],
            seeds: vec![],
        })
    })
}

// ------------------------------------------------------------ meta-train

/// Architecture section of a config file; unset fields follow the
/// four-layer default split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub width_factor: usize,
    pub encoder_layers: usize,
    #[serde(default)]
    pub aggregation_layers: Option<usize>,
    #[serde(default)]
    pub embedding_dim: Option<usize>,
    #[serde(default)]
    pub append_one_hot: bool,
    #[serde(default)]
    pub init: Option<InitScheme>,
}

impl ArchitectureConfig {
    fn resolve(&self) -> ArchitectureSpec {
        let mut arch = ArchitectureSpec::new(self.width_factor, self.encoder_layers);
        if let Some(l) = self.aggregation_layers {
            arch.aggregation_layers = l;
        }
        if let Some(z) = self.embedding_dim {
            arch.embedding_dim = z;
        }
        arch.append_one_hot = self.append_one_hot;
        if let Some(i) = self.init {
            arch.init = i;
        }
        arch
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaTrainFile {
    #[serde(default)]
    meta: Option<PathBuf>,
    architecture: ArchitectureConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    strict_paper: bool,
}

/// Fully resolved meta-training run, as stored in the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub meta: PathBuf,
    pub architecture: ArchitectureSpec,
    pub train: TrainConfig,
    pub strict_paper: bool,
    pub resume: bool,
    pub out: PathBuf,
}

pub fn meta_train_cmd(a: MetaTrainArgs, data_dir: Option<PathBuf>) -> Result<()> {
    let file: MetaTrainFile = read_json_file(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let meta = match a.meta.clone().or(file.meta.map(|m| if m.is_relative() { base.join(m) } else { m })) {
        Some(m) => m,
        None => resolve_meta(None, data_dir)?,
    };
    let mut train = file.train;
    if let Some(e) = a.epochs {
        train.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        train.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        train.batch_size = b;
    }
    if let Some(s) = a.seed {
        train.seed = s;
    }
    let cfg = MetaTrainConfig {
        meta,
        architecture: file.architecture.resolve(),
        train,
        strict_paper: file.strict_paper || a.strict_paper,
        resume: a.resume,
        out: a.out.clone(),
    };
    run_meta_train(cfg, Some(a.config))
}

fn zero_elapsed(state: &TrainState) -> TrainState {
    let mut s = state.clone();
    for row in &mut s.log {
        row.elapsed_seconds = 0.0;
    }
    s
}

fn run_meta_train(cfg: MetaTrainConfig, config_file: Option<PathBuf>) -> Result<()> {
    if cfg.strict_paper {
        cfg.architecture.validate_strict()?;
    } else {
        cfg.architecture.validate()?;
    }
    cfg.train.validate()?;
    let out = cfg.out.clone();
    with_manifest("meta-train", &cfg, &out, || {
        let meta = load_meta(&cfg.meta)?;
        let stats = meta.fit_preprocess()?;
        let data = TrainingData::from_meta(&meta, &stats)?;
        let mut net = EmbeddingNetwork::build(meta.space(), &cfg.architecture, cfg.train.seed)?;
        let mut kernel = KernelParams::default();
        let state_path = out.join(STATE_FILE);
        let resume = if cfg.resume {
            if !state_path.exists() {
                bail!(usage(format!("--resume given but {} does not exist", state_path.display())));
            }
            let s: TrainState = read_json_file(&state_path)?;
            info!("resuming after epoch {}", s.epoch);
            Some(s)
        } else {
            None
        };
        // A resumed run's state file is overwritten, so only the config and
        // the meta-dataset are recorded as inputs.
        let mut inputs: Vec<PathBuf> = config_file.into_iter().collect();
        inputs.extend(MetaDataset::files(&cfg.meta));
        info!(
            "meta-training {} parameters on {} tasks ({} validation)",
            net.params().len(),
            data.train.len(),
            data.val.len()
        );
        let mut on_check = |s: &TrainState| -> deeppipe_core::Result<()> {
            if let Some(row) = s.log.last() {
                info!(
                    "epoch {} train {} val {}",
                    row.epoch,
                    row.mean_train_nll.map_or("-".into(), |v| format!("{v:.4}")),
                    row.mean_val_nll.map_or("-".into(), |v| format!("{v:.4}"))
                );
            }
            write_json_atomic(&state_path, &zero_elapsed(s)).map_err(|e| CoreError::Io {
                path: state_path.clone(),
                source: std::io::Error::other(e.to_string()),
            })
        };
        let outcome = meta_train(&mut net, &mut kernel, &data, &cfg.train, resume, &mut on_check)?;
        let mut ck = net.to_checkpoint(&kernel);
        ck.preprocess = Some(stats);
        ck.epoch = Some(outcome.best_epoch);
        write_json_atomic(&out.join(CHECKPOINT_FILE), &ck)?;
        let mut log = String::from("epoch,mean_train_nll,mean_val_nll\n");
        for r in &outcome.log {
            log.push_str(&format!(
                "{},{},{}\n",
                r.epoch,
                r.mean_train_nll.map_or(String::new(), format_float),
                r.mean_val_nll.map_or(String::new(), format_float)
            ));
        }
        write_atomic(&out.join("log.csv"), log.as_bytes())?;
        info!(
            "best validation nll {:.4} at epoch {}{}",
            outcome.best_val,
            outcome.best_epoch,
            if outcome.stopped_early { " (stopped early)" } else { "" }
        );
        Ok(Run {
            inputs,
            outputs: vec![CHECKPOINT_FILE.into(), STATE_FILE.into(), "log.csv".into()],
            seeds: vec![cfg.train.seed],
        })
    })
}

// ------------------------------------------------------------ optimize

fn load_checkpoint(path: &Path, space: &SearchSpace) -> Result<(EmbeddingNetwork, KernelParams, Option<PreprocessStats>)> {
    let ck: Checkpoint = read_json_file(path)?;
    let stats = ck.preprocess.clone();
    let (net, kernel) = EmbeddingNetwork::from_checkpoint(space, &ck)
        .with_context(|| format!("restoring {}", path.display()))?;
    Ok((net, kernel, stats))
}

fn fine_tune_config(mode: FineTuneArg, steps: usize, lr: f64) -> FineTuneConfig {
    FineTuneConfig {
        steps,
        learning_rate: lr,
        mode: match mode {
            FineTuneArg::KernelOnly => FineTuneMode::KernelOnly,
            FineTuneArg::Network => FineTuneMode::Network,
        },
    }
}

pub fn optimize(mut a: OptimizeArgs, data_dir: Option<PathBuf>) -> Result<()> {
    a.meta = Some(resolve_meta(a.meta.take(), data_dir)?);
    if a.mode == ModeArg::Deeppipe && a.checkpoint.is_none() {
        return Err(usage("--mode deeppipe needs --checkpoint"));
    }
    let out = a.out.clone();
    with_manifest("optimize", &a, &out, || {
        let meta_dir = a.meta.clone().expect("resolved");
        let meta = load_meta(&meta_dir)?;
        let task = meta.task_index(&a.task).ok_or_else(|| {
            CoreError::Validation(format!("task `{}` is not in the meta-dataset", a.task))
        })?;
        let mut inputs = MetaDataset::files(&meta_dir);
        let restored = match (&a.checkpoint, a.mode) {
            (Some(p), ModeArg::Deeppipe) => {
                inputs.push(p.clone());
                Some(load_checkpoint(p, meta.space())?)
            }
            _ => None,
        };
        let stats = match restored.as_ref().and_then(|r| r.2.clone()) {
            Some(s) => s,
            None => meta.fit_preprocess()?,
        };
        let pool = CandidatePool::from_meta(&meta, &stats)?;
        let init = meta_initial_design(&meta, a.n_init)?;
        let cfg = BoConfig {
            iterations: a.iterations,
            fine_tune: fine_tune_config(a.fine_tune, a.fine_tune_steps, a.fine_tune_lr),
            budget: a.budget,
            reset_kernel: a.reset_kernel,
            seed: a.seed,
        };
        let mut net = restored.as_ref().map(|r| r.0.clone());
        if let (Some(n), Some(sel)) = (net.as_mut(), &a.trainable) {
            n.set_trainable(&sel.parse::<TrainableSelector>()?)?;
        }
        let surrogate = match a.mode {
            ModeArg::Deeppipe => Surrogate::deeppipe(net.as_ref().expect("checked"), restored.as_ref().expect("checked").1.clone()),
            ModeArg::RawGp => Surrogate::raw_gp(),
            ModeArg::Random => Surrogate::random(),
        };
        let oracle = |i: usize| meta.accuracy(task, i).map(|y| (y, meta.cost(task, i)));
        let history = bo_run(&surrogate, &pool, &oracle, &init, &cfg)?;
        if !history.skipped.is_empty() {
            warn!("{} candidates had no table entry and were skipped", history.skipped.len());
        }
        let y_max = meta.y_max(task).unwrap_or(f64::NAN);
        let rows = result_rows(mode_name(a.mode), &a.task, a.seed, &history, y_max);
        write_results(out.join("history.csv"), &rows)?;
        info!(
            "{} observations, best {:.4} (table best {:.4})",
            history.observations.len(),
            history.best().unwrap_or(f64::NAN),
            y_max
        );
        Ok(Run {
            inputs,
            outputs: vec!["history.csv".into()],
            seeds: vec![a.seed],
        })
    })
}

fn mode_name(m: ModeArg) -> &'static str {
    match m {
        ModeArg::Deeppipe => "deeppipe",
        ModeArg::RawGp => "raw_gp",
        ModeArg::Random => "random",
    }
}

// ------------------------------------------------------------ benchmark

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub mode: SurrogateMode,
    /// Meta-trained network for `deep_pipe`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Freshly initialised network (seeded per run) when no checkpoint.
    #[serde(default)]
    pub architecture: Option<ArchitectureConfig>,
    #[serde(default)]
    pub fine_tune: Option<FineTuneConfig>,
    #[serde(default)]
    pub trainable: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    #[serde(default)]
    pub meta: Option<PathBuf>,
    pub methods: Vec<MethodSpec>,
    /// Defaults to the test split.
    #[serde(default)]
    pub tasks: Option<Vec<String>>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_n_init")]
    pub n_init: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub budget: Option<f64>,
    #[serde(default)]
    pub reset_kernel: bool,
}

fn default_n_init() -> usize {
    5
}

fn default_iterations() -> usize {
    95
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BenchmarkResolved {
    config: BenchmarkConfig,
    out: PathBuf,
    threads: usize,
}

pub fn benchmark_cmd(a: BenchmarkArgs, data_dir: Option<PathBuf>) -> Result<()> {
    let mut config: BenchmarkConfig = read_json_file(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let rel = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
    config.meta = Some(match a.meta.clone() {
        Some(m) => m,
        None => match config.meta.take() {
            Some(m) => rel(m),
            None => resolve_meta(None, data_dir)?,
        },
    });
    for m in &mut config.methods {
        m.checkpoint = m.checkpoint.take().map(rel);
    }
    run_benchmark(BenchmarkResolved { config, out: a.out, threads: a.threads })
}

enum Prepared {
    Fixed(EmbeddingNetwork, KernelParams),
    Fresh(ArchitectureSpec),
    NoNetwork,
}

fn run_benchmark(r: BenchmarkResolved) -> Result<()> {
    let c = &r.config;
    if c.methods.is_empty() || c.seeds.is_empty() {
        return Err(CoreError::Validation("benchmark needs at least one method and one seed".into()).into());
    }
    let out = r.out.clone();
    with_manifest("benchmark", &r, &out, || {
        let meta_dir = c.meta.clone().expect("resolved");
        let meta = load_meta(&meta_dir)?;
        let mut inputs = MetaDataset::files(&meta_dir);
        let tasks: Vec<usize> = match &c.tasks {
            Some(ids) => ids
                .iter()
                .map(|t| {
                    meta.task_index(t).ok_or_else(|| {
                        CoreError::Validation(format!("task `{t}` is not in the meta-dataset"))
                    })
                })
                .collect::<std::result::Result<_, _>>()?,
            None => meta.split_indices(Split::Test),
        };
        if tasks.is_empty() {
            return Err(CoreError::Validation("no benchmark tasks (empty test split)".into()).into());
        }
        let raw_stats = meta.fit_preprocess()?;
        let mut prepared = Vec::new();
        let mut pools = Vec::new();
        for m in &c.methods {
            let (p, stats) = match (m.mode, &m.checkpoint, &m.architecture) {
                (SurrogateMode::DeepPipe, Some(ck), _) => {
                    inputs.push(ck.clone());
                    let (mut net, kernel, stats) = load_checkpoint(ck, meta.space())?;
                    if let Some(sel) = &m.trainable {
                        net.set_trainable(&sel.parse()?)?;
                    }
                    (Prepared::Fixed(net, kernel), stats.unwrap_or_else(|| raw_stats.clone()))
                }
                (SurrogateMode::DeepPipe, None, Some(arch)) => {
                    let arch = arch.resolve();
                    arch.validate()?;
                    (Prepared::Fresh(arch), raw_stats.clone())
                }
                (SurrogateMode::DeepPipe, None, None) => {
                    return Err(CoreError::Validation(format!(
                        "method `{}` needs a checkpoint or an architecture",
                        m.name
                    ))
                    .into())
                }
                _ => (Prepared::NoNetwork, raw_stats.clone()),
            };
            prepared.push(p);
            pools.push(CandidatePool::from_meta(&meta, &stats)?);
        }
        let init = meta_initial_design(&meta, c.n_init)?;
        let jobs: Vec<(usize, usize, u64)> = (0..c.methods.len())
            .flat_map(|m| tasks.iter().flat_map(move |&t| c.seeds.iter().map(move |&s| (m, t, s))))
            .collect();
        info!("{} runs ({} methods x {} tasks x {} seeds)", jobs.len(), c.methods.len(), tasks.len(), c.seeds.len());
        let run_one = |&(m, t, seed): &(usize, usize, u64)| -> Result<BoHistory> {
            let spec = &c.methods[m];
            let cfg = BoConfig {
                iterations: c.iterations,
                fine_tune: spec.fine_tune.clone().unwrap_or_default(),
                budget: c.budget,
                reset_kernel: c.reset_kernel,
                seed,
            };
            let fresh;
            let surrogate = match &prepared[m] {
                Prepared::Fixed(net, kernel) => Surrogate::deeppipe(net, kernel.clone()),
                Prepared::Fresh(arch) => {
                    let mut n = EmbeddingNetwork::build(meta.space(), arch, seed)?;
                    if let Some(sel) = &spec.trainable {
                        n.set_trainable(&sel.parse()?)?;
                    }
                    fresh = n;
                    Surrogate::deeppipe(&fresh, KernelParams::default())
                }
                Prepared::NoNetwork => match spec.mode {
                    SurrogateMode::RawGp => Surrogate::raw_gp(),
                    _ => Surrogate::random(),
                },
            };
            let oracle = |i: usize| meta.accuracy(t, i).map(|y| (y, meta.cost(t, i)));
            Ok(bo_run(&surrogate, &pools[m], &oracle, &init, &cfg)?)
        };
        let pool = rayon::ThreadPoolBuilder::new().num_threads(r.threads.max(1)).build()?;
        let histories: Vec<BoHistory> =
            pool.install(|| jobs.par_iter().map(run_one).collect::<Result<Vec<_>>>())?;

        let names: Vec<String> = c.methods.iter().map(|m| m.name.clone()).collect();
        let mut rows = Vec::new();
        let runs_per_method = tasks.len() * c.seeds.len();
        let len = histories.iter().map(|h| h.incumbent.len()).max().unwrap_or(0);
        let mut traces = vec![Vec::with_capacity(runs_per_method); names.len()];
        let mut y_max = Vec::with_capacity(runs_per_method);
        for ((m, t, seed), h) in jobs.iter().zip(&histories) {
            let ym = meta.y_max(*t).unwrap_or(f64::NAN);
            rows.extend(result_rows(&names[*m], &meta.tasks()[*t], *seed, h, ym));
            // Budget-stopped runs hold their last incumbent.
            let mut tr = h.incumbent.clone();
            let last = tr.last().copied().unwrap_or(f64::NAN);
            tr.resize(len, last);
            traces[*m].push(tr);
            if *m == 0 {
                y_max.push(ym);
            }
        }
        write_results(out.join("results.csv"), &rows)?;
        let tables = rank_and_regret(&names, &traces, &y_max)?;
        write_table(out.join("rank.csv"), &names, &tables.mean_rank)?;
        write_table(out.join("regret.csv"), &names, &tables.mean_regret)?;
        let mut summary = String::from("method,final_mean_regret,mean_rank\n");
        for (m, name) in names.iter().enumerate() {
            let reg = tables.mean_regret[m].last().copied().unwrap_or(f64::NAN);
            let rank = tables.mean_rank[m].iter().sum::<f64>() / tables.mean_rank[m].len().max(1) as f64;
            info!("{name}: final regret {reg:.4}, mean rank {rank:.3}");
            summary.push_str(&format!("{name},{},{}\n", format_float(reg), format_float(rank)));
        }
        write_atomic(&out.join("summary.csv"), summary.as_bytes())?;
        Ok(Run {
            inputs,
            outputs: ["results.csv", "rank.csv", "regret.csv", "summary.csv"].map(PathBuf::from).to_vec(),
            seeds: c.seeds.clone(),
        })
    })
}

// ------------------------------------------------------------ theory / cluster

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ClusterRow {
    encoder_layers: usize,
    weight_seed: u64,
    estimate: Estimate,
}

fn stage_of(space: &SearchSpace, name: &Option<String>) -> Result<usize> {
    match name {
        Some(n) => space
            .stage_index(n)
            .ok_or_else(|| CoreError::Validation(format!("no stage named `{n}`")).into()),
        None => Ok(space.n_stages() - 1),
    }
}

#[allow(clippy::too_many_arguments)]
fn cluster_rows(
    space: &SearchSpace,
    stage: usize,
    width_factor: usize,
    depths: &[usize],
    seeds: u64,
    configs: usize,
    triples: usize,
    seed: u64,
) -> Result<Vec<ClusterRow>> {
    let mut rows = Vec::new();
    for &le in depths {
        let arch = random_weight_architecture(width_factor, le);
        for w in 0..seeds {
            let spec = TripleSampleSpec { n_triples: triples, seed, stage_of_interest: stage };
            let estimate = random_network_cluster_metric(space, &arch, configs, w, &spec)?;
            rows.push(ClusterRow { encoder_layers: le, weight_seed: w, estimate });
        }
    }
    Ok(rows)
}

/// Mean and standard error over weight seeds per encoder depth.
fn summarize(rows: &[ClusterRow]) -> Vec<(usize, f64, f64)> {
    let mut depths: Vec<usize> = rows.iter().map(|r| r.encoder_layers).collect();
    depths.dedup();
    depths
        .into_iter()
        .map(|le| {
            let v: Vec<f64> = rows.iter().filter(|r| r.encoder_layers == le).map(|r| r.estimate.value).collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            (le, mean, (var / n).sqrt())
        })
        .collect()
}

#[derive(Serialize)]
struct ClusterSummary {
    encoder_layers: usize,
    mean: f64,
    std_error: f64,
}

#[derive(Serialize)]
struct TheoryReport {
    theory: VerifierReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    cluster_metric: Option<Vec<ClusterSummary>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    encoder_direction_holds: Option<bool>,
}

pub fn verify_theory_cmd(a: VerifyTheoryArgs) -> Result<()> {
    if a.cluster_metric && a.space.is_none() {
        return Err(usage("--cluster-metric needs --space"));
    }
    let out = a.out.clone();
    with_manifest("verify-theory", &a, &out, || {
        let theory = verify_theory(a.samples, a.seed, a.tolerance)?;
        for e in &theory.entries {
            info!(
                "{}: {} (estimate {:.6} ± {:.2e}{}){}",
                e.name,
                if e.pass { "pass" } else { "FAIL" },
                e.estimate,
                e.std_error,
                e.closed_form.map_or(String::new(), |c| format!(", closed form {c:.6}")),
                if e.wide_std_error { " [wide standard error]" } else { "" }
            );
        }
        let mut inputs = Vec::new();
        let (cluster_metric, direction) = if a.cluster_metric {
            let path = a.space.clone().expect("checked");
            let space = SearchSpace::load(&path)?;
            inputs.push(path);
            let stage = stage_of(&space, &a.stage)?;
            let rows = cluster_rows(&space, stage, a.width_factor, &[0, 1], a.seeds, a.configs, a.triples, a.seed)?;
            let s = summarize(&rows);
            let holds = s[1].1 > s[0].1;
            info!(
                "cluster metric l_e=0 {:.4}, l_e=1 {:.4}: encoder direction {}",
                s[0].1,
                s[1].1,
                if holds { "holds" } else { "does not hold" }
            );
            (
                Some(s.into_iter().map(|(encoder_layers, mean, std_error)| ClusterSummary { encoder_layers, mean, std_error }).collect()),
                Some(holds),
            )
        } else {
            (None, None)
        };
        write_json_atomic(
            &out.join("report.json"),
            &TheoryReport { theory, cluster_metric, encoder_direction_holds: direction },
        )?;
        Ok(Run { inputs, outputs: vec!["report.json".into()], seeds: vec![a.seed] })
    })
}

pub fn cluster_metric_cmd(a: ClusterMetricArgs) -> Result<()> {
    let out = a.out.clone();
    with_manifest("cluster-metric", &a, &out, || {
        let space = SearchSpace::load(&a.space)?;
        let stage = stage_of(&space, &a.stage)?;
        let rows = cluster_rows(&space, stage, a.width_factor, &a.encoder_layers, a.seeds, a.configs, a.triples, a.seed)?;
        let mut csv = String::from("encoder_layers,weight_seed,value,std_error,n\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                r.encoder_layers,
                r.weight_seed,
                format_float(r.estimate.value),
                format_float(r.estimate.std_error),
                r.estimate.n
            ));
        }
        write_atomic(&out.join("cluster_metric.csv"), csv.as_bytes())?;
        let mut summary = String::from("encoder_layers,mean,std_error\n");
        for (le, mean, se) in summarize(&rows) {
            info!("l_e={le}: cluster metric {mean:.4} ± {se:.4}");
            summary.push_str(&format!("{le},{},{}\n", format_float(mean), format_float(se)));
        }
        write_atomic(&out.join("summary.csv"), summary.as_bytes())?;
        Ok(Run {
            inputs: vec![a.space.clone()],
            outputs: vec!["cluster_metric.csv".into(), "summary.csv".into()],
            seeds: vec![a.seed],
        })
    })
}

// ------------------------------------------------------------ export / counts / synth

pub fn export(mut a: ExportArgs, data_dir: Option<PathBuf>) -> Result<()> {
    a.meta = Some(resolve_meta(a.meta.take(), data_dir)?);
    let out = a.out.clone();
    with_manifest("export-embeddings", &a, &out, || {
        let meta_dir = a.meta.clone().expect("resolved");
        let meta = load_meta(&meta_dir)?;
        let (net, _, stats) = load_checkpoint(&a.checkpoint, meta.space())?;
        let stats = match stats {
            Some(s) => s,
            None => meta.fit_preprocess()?,
        };
        let features = meta.scaled_features(&stats)?;
        let p = meta.pipelines();
        export_embeddings(&net, &p.ids, &features, &p.masks, out.join("embeddings.csv"))?;
        let mut inputs = MetaDataset::files(&meta_dir);
        inputs.push(a.checkpoint.clone());
        Ok(Run { inputs, outputs: vec!["embeddings.csv".into()], seeds: vec![] })
    })
}

#[derive(Serialize)]
struct CountReport {
    input_width: usize,
    aggregation_input_width: usize,
    weights: usize,
    head_weights: usize,
    biases: usize,
    total: usize,
}

pub fn param_count(a: ParamCountArgs) -> Result<()> {
    let space = SearchSpace::load(&a.space)?;
    let mut arch = ArchitectureSpec::new(a.width_factor, a.encoder_layers);
    if let Some(l) = a.aggregation_layers {
        arch.aggregation_layers = l;
    }
    arch.embedding_dim = a.embedding_dim;
    arch.append_one_hot = a.one_hot;
    if a.strict_paper {
        arch.validate_strict()?;
    }
    let net = EmbeddingNetwork::build(&space, &arch, 0)?;
    let c = net.parameter_count();
    let report = CountReport {
        input_width: space.flat_width(),
        aggregation_input_width: net.aggregation_input_width(),
        weights: c.weights,
        head_weights: c.head_weights,
        biases: c.biases,
        total: c.total(),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = a.out.clone() {
        with_manifest("param-count", &a, &out, || {
            write_json_atomic(&out.join("param_count.json"), &report)?;
            Ok(Run { inputs: vec![a.space.clone()], outputs: vec!["param_count.json".into()], seeds: vec![] })
        })?;
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let out = a.out.clone();
    with_manifest("synth", &a, &out, || {
        let space = SearchSpace::load(&a.space)?;
        let spec = SyntheticSpec {
            n_families: a.families,
            noise: a.noise,
            task_spread: a.spread,
            missing_fraction: a.missing,
            with_cost: a.with_cost,
            train_frac: a.train_frac,
            val_frac: a.val_frac,
            ..SyntheticSpec::new(a.tasks, a.pipelines)
        };
        let (meta, _) = generate_synthetic(&space, &spec, a.seed)?;
        meta.save_dir(&out)?;
        info!("wrote {} tasks x {} pipelines to {}", meta.tasks().len(), meta.n_pipelines(), out.display());
        Ok(Run {
            inputs: vec![a.space.clone()],
            outputs: MetaDataset::files(Path::new("")),
            seeds: vec![a.seed],
        })
    })
}

// ------------------------------------------------------------ replay

pub fn replay(a: ReplayArgs) -> Result<()> {
    let m = RunManifest::load(&a.manifest)?;
    let cfg = m.config.clone();
    let parse_err = |e: serde_json::Error| usage(format!("manifest config does not match `{}`: {e}", m.command));
    info!("replaying `{}` into {}", m.command, a.out.display());
    match m.command.as_str() {
        "preprocess" => {
            let mut c: PreprocessArgs = serde_json::from_value(cfg).map_err(parse_err)?;
            c.out = a.out;
            preprocess(c)
        }
        "meta-train" => {
            let mut c: MetaTrainConfig = serde_json::from_value(cfg).map_err(parse_err)?;
            if c.resume {
                return Err(usage("a resumed meta-train run depends on its prior state; replay the original run"));
            }
            c.out = a.out;
            run_meta_train(c, None)
        }
        "optimize" => {
            let mut c: OptimizeArgs = serde_json::from_value(cfg).map_err(parse_err)?;
            c.out = a.out;
            optimize(c, None)
        }
        "benchmark" => {
            let mut c: BenchmarkResolved = serde_json::from_value(cfg).map_err(parse_err)?;
            c.out = a.out;
            run_benchmark(c)
        }
        "verify-theory" => {
            let mut c: VerifyTheoryArgs = serde_json::from_value(cfg).map_err(parse_err)?;
            c.out = a.out;
            verify_theory_cmd(c)
        }
        "cluster-metric" => {
            let mut c: ClusterMetricArgs = serde_json::from_value(cfg).map_err(parse_err)?;
            c.out = a.out;
            cluster_metric_cmd(c)
        }
        "export-embeddings" => {
            let mut c: ExportArgs = serde_json::from_value(cfg).map_err(parse_err)?;
            c.out = a.out;
            export(c, None)
        }
        "param-count" => {
            let mut c: ParamCountArgs = serde_json::from_value(cfg).map_err(parse_err)?;
            c.out = Some(a.out);
            param_count(c)
        }
        "synth" => {
            let mut c: SynthArgs = serde_json::from_value(cfg).map_err(parse_err)?;
            c.out = a.out;
            synth(c)
        }
        other => Err(usage(format!("unknown command `{other}` in manifest"))),
    }
}
