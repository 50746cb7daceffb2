//! Bayesian optimization over a finite pipeline pool.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::gp::{self, KernelParams};
use crate::metadata::MetaDataset;
use crate::network::{EmbeddingNetwork, Input};
use crate::seeded_rng;
use crate::space::{format_float, ActiveMask, PreprocessStats};
use crate::train::{self, FineTuneConfig, FineTuneMode};

/// Expected improvement for maximization.
pub fn expected_improvement(mean: f64, variance: f64, y_best: f64) -> f64 {
    let sigma = variance.max(0.0).sqrt();
    if sigma == 0.0 {
        return (mean - y_best).max(0.0);
    }
    let n = Normal::standard();
    let z = (mean - y_best) / sigma;
    (sigma * (z * n.cdf(z) + n.pdf(z))).max(0.0)
}

/// Ranks with 1 for the best value; ties share their average rank.
/// NaN entries share the worst ranks.
pub fn average_ranks(values: &[f64], higher_is_better: bool) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    let key = |i: usize| {
        let v = values[i];
        if v.is_nan() {
            f64::NEG_INFINITY
        } else if higher_is_better {
            v
        } else {
            -v
        }
    };
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && key(order[j + 1]) == key(order[i]) {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Greedy initial design from a tasks x pipelines accuracy matrix (NaN for
/// missing). The first pick has the best average rank; each further pick
/// minimizes `sum_t min_{p in X} r_{t,p}`. Ties go to the lowest id.
pub fn greedy_initialization(matrix: &[Vec<f64>], ids: &[u64], n_init: usize) -> Result<Vec<u64>> {
    let n = ids.len();
    if n_init == 0 {
        return Err(Error::validation("the initial design needs at least one pipeline"));
    }
    if n_init > n {
        return Err(Error::validation(format!(
            "{n_init} initial pipelines requested from a pool of {n}"
        )));
    }
    if matrix.is_empty() {
        return Err(Error::validation("greedy initialization needs at least one task"));
    }
    if matrix.iter().any(|r| r.len() != n) {
        return Err(Error::shape("accuracy matrix width differs from the id list"));
    }
    let ranks: Vec<Vec<f64>> = matrix.iter().map(|r| average_ranks(r, true)).collect();
    let better = |score: f64, id: u64, best: Option<(f64, u64, usize)>| match best {
        None => true,
        Some((s, bid, _)) => score < s || (score == s && id < bid),
    };

    let mut best = None;
    for p in 0..n {
        let s: f64 = ranks.iter().map(|r| r[p]).sum();
        if better(s, ids[p], best) {
            best = Some((s, ids[p], p));
        }
    }
    let first = best.expect("non-empty pool").2;
    let mut chosen = vec![first];
    let mut current: Vec<f64> = ranks.iter().map(|r| r[first]).collect();
    while chosen.len() < n_init {
        let mut best = None;
        for p in 0..n {
            if chosen.contains(&p) {
                continue;
            }
            let s: f64 = ranks.iter().zip(&current).map(|(r, c)| c.min(r[p])).sum();
            if better(s, ids[p], best) {
                best = Some((s, ids[p], p));
            }
        }
        let p = best.expect("pool not exhausted").2;
        for (c, r) in current.iter_mut().zip(&ranks) {
            *c = c.min(r[p]);
        }
        chosen.push(p);
    }
    Ok(chosen.into_iter().map(|p| ids[p]).collect())
}

/// Greedy initial design over the meta-training tasks of `meta`.
pub fn meta_initial_design(meta: &MetaDataset, n_init: usize) -> Result<Vec<u64>> {
    let matrix: Vec<Vec<f64>> = meta
        .split_indices(crate::metadata::Split::Train)
        .into_iter()
        .map(|t| meta.task_row(t).to_vec())
        .collect();
    greedy_initialization(&matrix, &meta.pipelines().ids, n_init)
}

/// The finite search domain: preprocessed pipelines sorted by id.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePool {
    pub ids: Vec<u64>,
    pub features: Vec<Vec<f64>>,
    pub masks: Vec<ActiveMask>,
}

impl CandidatePool {
    pub fn new(ids: Vec<u64>, features: Vec<Vec<f64>>, masks: Vec<ActiveMask>) -> Result<Self> {
        if ids.len() != features.len() || ids.len() != masks.len() {
            return Err(Error::shape("pool columns differ in length"));
        }
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by_key(|&i| ids[i]);
        if order.windows(2).any(|w| ids[w[0]] == ids[w[1]]) {
            return Err(Error::validation("pool ids must be unique"));
        }
        Ok(CandidatePool {
            ids: order.iter().map(|&i| ids[i]).collect(),
            features: order.iter().map(|&i| features[i].clone()).collect(),
            masks: order.iter().map(|&i| masks[i].clone()).collect(),
        })
    }

    pub fn from_meta(meta: &MetaDataset, stats: &PreprocessStats) -> Result<Self> {
        CandidatePool::new(
            meta.pipelines().ids.clone(),
            meta.scaled_features(stats)?,
            meta.pipelines().masks.clone(),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    fn inputs(&self, idx: &[usize]) -> Vec<Input<'_>> {
        idx.iter()
            .map(|&i| Input {
                features: &self.features[i],
                mask: &self.masks[i],
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateMode {
    #[serde(alias = "deeppipe")]
    DeepPipe,
    RawGp,
    Random,
}

impl std::str::FromStr for SurrogateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deeppipe" | "deep_pipe" => Ok(SurrogateMode::DeepPipe),
            "raw_gp" | "raw-gp" => Ok(SurrogateMode::RawGp),
            "random" => Ok(SurrogateMode::Random),
            other => Err(Error::validation(format!("unknown surrogate mode `{other}`"))),
        }
    }
}

/// Surrogate setup for a BO run. `network` is required in deeppipe mode.
#[derive(Clone, Debug)]
pub struct Surrogate<'a> {
    pub mode: SurrogateMode,
    pub network: Option<&'a EmbeddingNetwork>,
    pub kernel: KernelParams,
}

impl<'a> Surrogate<'a> {
    pub fn deeppipe(network: &'a EmbeddingNetwork, kernel: KernelParams) -> Self {
        Surrogate {
            mode: SurrogateMode::DeepPipe,
            network: Some(network),
            kernel,
        }
    }

    pub fn raw_gp() -> Self {
        Surrogate {
            mode: SurrogateMode::RawGp,
            network: None,
            kernel: KernelParams::default(),
        }
    }

    pub fn random() -> Self {
        Surrogate {
            mode: SurrogateMode::Random,
            network: None,
            kernel: KernelParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    /// Further observations after the initial design (E_BO).
    pub iterations: usize,
    pub fine_tune: FineTuneConfig,
    /// Stop once the cumulative simulated cost exceeds this value.
    #[serde(default)]
    pub budget: Option<f64>,
    /// Restart every fine-tuning from the given γ instead of the previous
    /// iteration's.
    #[serde(default)]
    pub reset_kernel: bool,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            iterations: 95,
            fine_tune: FineTuneConfig::default(),
            budget: None,
            reset_kernel: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub pipeline_id: u64,
    pub y: f64,
    pub cumulative_cost: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoHistory {
    pub observations: Vec<Observation>,
    /// Best observed accuracy after each observation.
    pub incumbent: Vec<f64>,
    /// Candidates without an oracle entry, removed from the pool.
    pub skipped: Vec<u64>,
}

impl BoHistory {
    fn push(&mut self, pipeline_id: u64, y: f64, cost: f64) {
        let cumulative_cost = self.observations.last().map_or(0.0, |o| o.cumulative_cost) + cost;
        let best = self.incumbent.last().map_or(y, |b| b.max(y));
        self.observations.push(Observation {
            pipeline_id,
            y,
            cumulative_cost,
        });
        self.incumbent.push(best);
    }

    pub fn best(&self) -> Option<f64> {
        self.incumbent.last().copied()
    }

    fn over_budget(&self, budget: Option<f64>) -> bool {
        match (budget, self.observations.last()) {
            (Some(b), Some(o)) => o.cumulative_cost > b,
            _ => false,
        }
    }
}

/// Scores the remaining pool and returns the index with the highest EI
/// (lowest id on ties).
fn argmax_ei(scores: &[(usize, f64)]) -> usize {
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    best.0
}

/// One optimization run on a single task. `oracle(i)` returns the accuracy
/// and cost of pool entry `i`, or `None` when the table has no entry.
pub fn bo_run(
    surrogate: &Surrogate,
    pool: &CandidatePool,
    oracle: &dyn Fn(usize) -> Option<(f64, f64)>,
    initial: &[u64],
    cfg: &BoConfig,
) -> Result<BoHistory> {
    if pool.is_empty() {
        return Err(Error::validation("empty candidate pool"));
    }
    let mut net = match surrogate.mode {
        SurrogateMode::DeepPipe => Some(
            surrogate
                .network
                .ok_or_else(|| Error::validation("deeppipe mode needs a network"))?
                .clone(),
        ),
        _ => None,
    };
    if let Some(n) = &net {
        if cfg.fine_tune.mode == FineTuneMode::Network && !n.any_trainable() {
            return Err(Error::validation(
                "network fine-tuning requested but every network group is frozen",
            ));
        }
    }

    let mut history = BoHistory::default();
    let mut remaining: Vec<bool> = vec![true; pool.len()];
    let mut observed: Vec<usize> = Vec::new();
    let observe = |i: usize,
                   history: &mut BoHistory,
                   remaining: &mut Vec<bool>,
                   observed: &mut Vec<usize>|
     -> bool {
        remaining[i] = false;
        match oracle(i) {
            Some((y, cost)) => {
                history.push(pool.ids[i], y, cost);
                observed.push(i);
                true
            }
            None => {
                log::info!("pipeline {} has no evaluation on this task; skipped", pool.ids[i]);
                history.skipped.push(pool.ids[i]);
                false
            }
        }
    };

    for &id in initial {
        let i = pool
            .position(id)
            .ok_or_else(|| Error::validation(format!("initial pipeline {id} is not in the pool")))?;
        if !remaining[i] {
            continue;
        }
        observe(i, &mut history, &mut remaining, &mut observed);
        if history.over_budget(cfg.budget) {
            return Ok(history);
        }
    }

    // Embeddings are fixed when only γ is tuned.
    let static_inputs: Option<Vec<Vec<f64>>> = match (surrogate.mode, &net) {
        (SurrogateMode::DeepPipe, Some(n)) if cfg.fine_tune.mode == FineTuneMode::KernelOnly => {
            let all: Vec<usize> = (0..pool.len()).collect();
            Some(n.embed_all(&pool.inputs(&all))?)
        }
        (SurrogateMode::RawGp, _) => Some(pool.features.clone()),
        _ => None,
    };
    let mut kernel = surrogate.kernel.clone();
    let mut rng = seeded_rng(cfg.seed, 0);

    let mut added = 0;
    while added < cfg.iterations {
        let candidates: Vec<usize> = (0..pool.len()).filter(|&i| remaining[i]).collect();
        if candidates.is_empty() {
            break;
        }
        let next = if candidates.len() == 1 {
            candidates[0]
        } else if surrogate.mode == SurrogateMode::Random || history.observations.is_empty() {
            candidates[rng.random_range(0..candidates.len())]
        } else {
            let y: Vec<f64> = history.observations.iter().map(|o| o.y).collect();
            let (ys, mean, sd) = train::standardize(&y);
            if cfg.reset_kernel {
                kernel = surrogate.kernel.clone();
            }
            let inputs: Vec<Vec<f64>> = match (&static_inputs, net.as_mut()) {
                (Some(z), _) => {
                    let hist: Vec<Vec<f64>> = observed.iter().map(|&i| z[i].clone()).collect();
                    train::fine_tune_kernel(
                        &hist,
                        &ys,
                        &mut kernel,
                        cfg.fine_tune.steps,
                        cfg.fine_tune.learning_rate,
                    )?;
                    z.clone()
                }
                (None, Some(n)) => {
                    train::fine_tune(n, &mut kernel, &pool.inputs(&observed), &ys, &cfg.fine_tune)?;
                    let all: Vec<usize> = (0..pool.len()).collect();
                    n.embed_all(&pool.inputs(&all))?
                }
                (None, None) => unreachable!("surrogate inputs resolved above"),
            };
            let hist: Vec<Vec<f64>> = observed.iter().map(|&i| inputs[i].clone()).collect();
            let state = gp::fit(&hist, &ys, &kernel)?;
            let y_best = history.best().expect("non-empty history");
            let scores: Vec<(usize, f64)> = candidates
                .iter()
                .map(|&i| {
                    let (m, v) = state.predict(&inputs[i]);
                    (i, expected_improvement(mean + sd * m, sd * sd * v, y_best))
                })
                .collect();
            argmax_ei(&scores)
        };
        if observe(next, &mut history, &mut remaining, &mut observed) {
            added += 1;
        }
        if history.over_budget(cfg.budget) {
            break;
        }
    }
    Ok(history)
}

/// Mean rank and regret per iteration, one row per method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTables {
    pub methods: Vec<String>,
    pub mean_rank: Vec<Vec<f64>>,
    pub mean_regret: Vec<Vec<f64>>,
}

/// `traces[m][r]` is the incumbent trace of method `m` on run `r` (the
/// task/seed grid is shared across methods); `y_max[r]` is the best table
/// entry of the run's task.
pub fn rank_and_regret(
    methods: &[String],
    traces: &[Vec<Vec<f64>>],
    y_max: &[f64],
) -> Result<MetricTables> {
    if methods.len() != traces.len() || traces.is_empty() {
        return Err(Error::shape("one trace list per method required"));
    }
    let runs = y_max.len();
    let len = traces[0].first().map_or(0, Vec::len);
    for (m, ts) in traces.iter().enumerate() {
        if ts.len() != runs {
            return Err(Error::shape(format!(
                "method `{}` has {} runs, expected {runs}",
                methods[m],
                ts.len()
            )));
        }
        if let Some(t) = ts.iter().find(|t| t.len() != len) {
            return Err(Error::shape(format!(
                "ragged histories: method `{}` has a trace of length {} (expected {len})",
                methods[m],
                t.len()
            )));
        }
    }
    let nm = methods.len();
    let mut mean_rank = vec![vec![0.0; len]; nm];
    let mut mean_regret = vec![vec![0.0; len]; nm];
    for r in 0..runs {
        for k in 0..len {
            let vals: Vec<f64> = traces.iter().map(|ts| ts[r][k]).collect();
            let ranks = average_ranks(&vals, true);
            for m in 0..nm {
                mean_rank[m][k] += ranks[m] / runs as f64;
                mean_regret[m][k] += (y_max[r] - vals[m]) / runs as f64;
            }
        }
    }
    Ok(MetricTables {
        methods: methods.to_vec(),
        mean_rank,
        mean_regret,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub task_id: String,
    pub seed: u64,
    pub iteration: usize,
    pub pipeline_id: u64,
    pub y: f64,
    pub incumbent: f64,
    pub regret: f64,
    pub cumulative_cost: f64,
}

/// Result rows of a run; iterations count observations from 1.
pub fn result_rows(
    method: &str,
    task_id: &str,
    seed: u64,
    history: &BoHistory,
    y_max: f64,
) -> Vec<ResultRow> {
    history
        .observations
        .iter()
        .zip(&history.incumbent)
        .enumerate()
        .map(|(k, (o, &inc))| ResultRow {
            method: method.to_string(),
            task_id: task_id.to_string(),
            seed,
            iteration: k + 1,
            pipeline_id: o.pipeline_id,
            y: o.y,
            incumbent: inc,
            regret: y_max - inc,
            cumulative_cost: o.cumulative_cost,
        })
        .collect()
}

pub fn write_results(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, &e))?;
    w.write_record([
        "method",
        "task_id",
        "seed",
        "iteration",
        "pipeline_id",
        "y",
        "incumbent",
        "regret",
        "cumulative_cost",
    ])
    .map_err(|e| Error::csv(path, &e))?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.task_id.clone(),
            r.seed.to_string(),
            r.iteration.to_string(),
            r.pipeline_id.to_string(),
            format_float(r.y),
            format_float(r.incumbent),
            format_float(r.regret),
            format_float(r.cumulative_cost),
        ])
        .map_err(|e| Error::csv(path, &e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a metric table as `method, <column per iteration>`.
pub fn write_table(path: impl AsRef<Path>, methods: &[String], table: &[Vec<f64>]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, &e))?;
    let len = table.first().map_or(0, Vec::len);
    let mut header = vec!["method".to_string()];
    header.extend((1..=len).map(|k| k.to_string()));
    w.write_record(&header).map_err(|e| Error::csv(path, &e))?;
    for (m, row) in methods.iter().zip(table) {
        let mut rec = vec![m.clone()];
        rec.extend(row.iter().map(|v| format_float(*v)));
        w.write_record(&rec).map_err(|e| Error::csv(path, &e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ei_edge_cases() {
        assert!((expected_improvement(1.2, 0.0, 1.0) - 0.2).abs() < 1e-15);
        assert_eq!(expected_improvement(0.8, 0.0, 1.0), 0.0);
        let v = expected_improvement(0.0, 1.0, 0.0);
        assert!((v - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert!(expected_improvement(-10.0, 0.01, 0.0) < 1e-12);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[0.5, 0.9, 0.5], true), vec![2.5, 1.0, 2.5]);
        assert_eq!(average_ranks(&[0.5, f64::NAN, 0.7], true), vec![2.0, 3.0, 1.0]);
        assert_eq!(average_ranks(&[3.0, 1.0], false), vec![2.0, 1.0]);
    }

    #[test]
    fn greedy_picks_dominant_first() {
        let m = vec![vec![0.1, 0.9, 0.5], vec![0.2, 0.8, 0.3]];
        assert_eq!(greedy_initialization(&m, &[10, 11, 12], 1).unwrap(), vec![11]);
        assert_eq!(greedy_initialization(&m, &[10, 11, 12], 3).unwrap().len(), 3);
        assert!(greedy_initialization(&m, &[10, 11, 12], 4).is_err());
    }

    #[test]
    fn greedy_prefers_specialists() {
        // Ranks [[1,3],[3,1],[2,2]] for pipelines 1..3 on two tasks.
        let m = vec![vec![0.9, 0.1, 0.5], vec![0.1, 0.9, 0.5]];
        let mut got = greedy_initialization(&m, &[1, 2, 3], 2).unwrap();
        got.sort();
        assert_eq!(got, vec![1, 2]);
    }

    #[test]
    fn ragged_histories_error() {
        let methods = vec!["a".to_string(), "b".to_string()];
        let traces = vec![vec![vec![0.1, 0.2]], vec![vec![0.1]]];
        assert!(rank_and_regret(&methods, &traces, &[1.0]).is_err());
    }

    #[test]
    fn identical_traces_share_rank() {
        let methods = vec!["a".to_string(), "b".to_string()];
        let traces = vec![vec![vec![0.1, 0.5, 0.9]], vec![vec![0.1, 0.5, 0.9]]];
        let t = rank_and_regret(&methods, &traces, &[0.9]).unwrap();
        assert!(t.mean_rank.iter().flatten().all(|&r| r == 1.5));
        assert_eq!(t.mean_regret[0][2], 0.0);
    }

    fn toy_pool(n: usize) -> CandidatePool {
        let ids: Vec<u64> = (0..n as u64).collect();
        let features: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64]).collect();
        let masks = vec![ActiveMask::new(vec![0]); n];
        CandidatePool::new(ids, features, masks).unwrap()
    }

    #[test]
    fn single_candidate_is_forced() {
        let pool = toy_pool(2);
        let oracle = |i: usize| Some((i as f64 * 0.1, 1.0));
        let cfg = BoConfig {
            iterations: 5,
            ..BoConfig::default()
        };
        let h = bo_run(&Surrogate::raw_gp(), &pool, &oracle, &[0], &cfg).unwrap();
        assert_eq!(h.observations.len(), 2);
        assert_eq!(h.observations[1].pipeline_id, 1);
    }

    #[test]
    fn random_mode_reproducible_and_unique() {
        let pool = toy_pool(30);
        let oracle = |i: usize| Some(((i * 7 % 11) as f64 / 11.0, 1.0));
        let cfg = BoConfig {
            iterations: 20,
            seed: 4,
            ..BoConfig::default()
        };
        let a = bo_run(&Surrogate::random(), &pool, &oracle, &[3], &cfg).unwrap();
        let b = bo_run(&Surrogate::random(), &pool, &oracle, &[3], &cfg).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<u64> = a.observations.iter().map(|o| o.pipeline_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 21);
        assert!(a.incumbent.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn missing_entries_skipped() {
        let pool = toy_pool(6);
        let oracle = |i: usize| (i % 2 == 0).then_some((i as f64 / 10.0, 1.0));
        let cfg = BoConfig {
            iterations: 10,
            ..BoConfig::default()
        };
        let h = bo_run(&Surrogate::raw_gp(), &pool, &oracle, &[0, 1], &cfg).unwrap();
        assert_eq!(h.observations.len(), 3);
        assert_eq!(h.skipped.len(), 3);
    }

    #[test]
    fn budget_stops_run() {
        let pool = toy_pool(10);
        let oracle = |i: usize| Some((i as f64 / 10.0, 2.0));
        let cfg = BoConfig {
            iterations: 10,
            budget: Some(5.0),
            ..BoConfig::default()
        };
        let h = bo_run(&Surrogate::random(), &pool, &oracle, &[0], &cfg).unwrap();
        assert_eq!(h.observations.len(), 3);
        assert_eq!(h.observations.last().unwrap().cumulative_cost, 6.0);
    }
}
