//! Meta-datasets of pipeline evaluations, their on-disk format, task splits,
//! the lookup oracle and a seeded synthetic generator.
//!
//! A meta-dataset directory holds:
//!
//! * `space.json`: the search-space document;
//! * `pipelines.csv`: see [`PipelineTable`];
//! * `evaluations.csv`: `task_id, pipeline_id, accuracy|error[, cost]`;
//! * `meta.json`: orientation of the value column and the space fingerprint;
//! * `splits.json`: `{"train": [...], "val": [...], "test": [...]}`.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::space::{
    format_float, read_json, write_json, ActiveMask, FeatureTransform, PipelineConfiguration,
    PipelineTable, PreprocessStats, SearchSpace,
};

pub const SPACE_FILE: &str = "space.json";
pub const PIPELINES_FILE: &str = "pipelines.csv";
pub const EVALUATIONS_FILE: &str = "evaluations.csv";
pub const HEADER_FILE: &str = "meta.json";
pub const SPLITS_FILE: &str = "splits.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Accuracy,
    /// Values are errors `e`; stored as `1 - e`.
    Error,
}

impl Orientation {
    fn column(self) -> &'static str {
        match self {
            Orientation::Accuracy => "accuracy",
            Orientation::Error => "error",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaHeader {
    pub orientation: Orientation,
    pub space_fingerprint: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaDataset {
    space: SearchSpace,
    pipelines: PipelineTable,
    tasks: Vec<String>,
    /// `accuracy[task][pipeline]`, NaN when missing.
    accuracy: Vec<Vec<f64>>,
    cost: Option<Vec<Vec<f64>>>,
    splits: Splits,
    dropped: usize,
}

impl MetaDataset {
    /// Validates the tables and drops pipelines without any evaluation.
    pub fn new(
        space: SearchSpace,
        pipelines: PipelineTable,
        tasks: Vec<String>,
        accuracy: Vec<Vec<f64>>,
        cost: Option<Vec<Vec<f64>>>,
        splits: Splits,
    ) -> Result<Self> {
        let n = pipelines.len();
        if accuracy.len() != tasks.len() || accuracy.iter().any(|r| r.len() != n) {
            return Err(Error::shape("accuracy matrix must be tasks x pipelines"));
        }
        if let Some(c) = &cost {
            if c.len() != tasks.len() || c.iter().any(|r| r.len() != n) {
                return Err(Error::shape("cost matrix must be tasks x pipelines"));
            }
        }
        let mut seen = HashSet::new();
        for t in &tasks {
            if !seen.insert(t.as_str()) {
                return Err(Error::validation(format!("duplicate task id `{t}`")));
            }
        }
        for (t, row) in accuracy.iter().enumerate() {
            for (p, &v) in row.iter().enumerate() {
                if !v.is_nan() && !(0.0..=1.0).contains(&v) {
                    return Err(Error::validation(format!(
                        "accuracy {v} outside [0, 1] for task `{}`, pipeline {}",
                        tasks[t], pipelines.ids[p]
                    )));
                }
            }
        }
        for (r, m) in pipelines.rows.iter().zip(&pipelines.masks) {
            if r.len() != space.flat_width() {
                return Err(Error::shape("pipeline row width differs from the space"));
            }
            space.check_mask(m)?;
        }

        let keep: Vec<usize> = (0..n)
            .filter(|&p| accuracy.iter().any(|row| !row[p].is_nan()))
            .collect();
        let dropped = n - keep.len();
        if dropped > 0 {
            log::info!("dropped {dropped} pipeline(s) without any evaluation");
        }
        let select = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            m.iter().map(|row| keep.iter().map(|&p| row[p]).collect()).collect()
        };
        let accuracy = select(&accuracy);
        let cost = cost.as_ref().map(select);
        let pipelines = PipelineTable {
            ids: keep.iter().map(|&p| pipelines.ids[p]).collect(),
            rows: keep.iter().map(|&p| pipelines.rows[p].clone()).collect(),
            masks: keep.iter().map(|&p| pipelines.masks[p].clone()).collect(),
        };
        let mut meta = MetaDataset {
            space,
            pipelines,
            tasks,
            accuracy,
            cost,
            splits: Splits::default(),
            dropped,
        };
        meta.set_splits(splits)?;
        Ok(meta)
    }

    fn set_splits(&mut self, splits: Splits) -> Result<()> {
        let known: HashSet<&str> = self.tasks.iter().map(String::as_str).collect();
        let mut assigned = HashSet::new();
        for id in splits.train.iter().chain(&splits.val).chain(&splits.test) {
            if !known.contains(id.as_str()) {
                return Err(Error::validation(format!("unknown task `{id}` in splits")));
            }
            if !assigned.insert(id.as_str()) {
                return Err(Error::validation(format!("task `{id}` assigned to two splits")));
            }
        }
        if let Some(t) = self.tasks.iter().find(|t| !assigned.contains(t.as_str())) {
            return Err(Error::validation(format!("task `{t}` is not assigned to any split")));
        }
        self.splits = splits;
        Ok(())
    }

    /// Replaces the split assignment with explicit id lists.
    pub fn with_splits(&self, splits: Splits) -> Result<Self> {
        let mut meta = self.clone();
        meta.set_splits(splits)?;
        Ok(meta)
    }

    /// Seeded assignment: `round(T * train_frac)` train tasks,
    /// `round(T * val_frac)` validation tasks, the rest test. Each split
    /// keeps the dataset's task order.
    pub fn split_assign(&self, train_frac: f64, val_frac: f64, seed: u64) -> Result<Self> {
        let ok = |f: f64| f > 0.0 && f < 1.0;
        if !ok(train_frac) || !ok(val_frac) || train_frac + val_frac >= 1.0 {
            return Err(Error::validation(format!(
                "split fractions must lie in (0, 1) and sum below 1, got {train_frac} and {val_frac}"
            )));
        }
        let t = self.tasks.len();
        let n_train = (t as f64 * train_frac).round() as usize;
        let n_val = (t as f64 * val_frac).round() as usize;
        if n_train == 0 || n_val == 0 || n_train + n_val >= t {
            return Err(Error::validation(format!(
                "fractions {train_frac}/{val_frac} leave an empty split for {t} tasks"
            )));
        }
        let mut order: Vec<usize> = (0..t).collect();
        order.shuffle(&mut seeded_rng(seed, 0));
        let pick = |range: std::ops::Range<usize>| -> Vec<String> {
            let mut idx = order[range].to_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| self.tasks[i].clone()).collect()
        };
        self.with_splits(Splits {
            train: pick(0..n_train),
            val: pick(n_train..n_train + n_val),
            test: pick(n_train + n_val..t),
        })
    }

    /// Re-expresses the dataset in another space, matching stages,
    /// algorithms and hyperparameters by name. Pipelines that use an
    /// algorithm unknown to `target` are dropped.
    pub fn remap(&self, target: &SearchSpace) -> Result<Self> {
        let mut stage_map = Vec::with_capacity(target.n_stages());
        for st in target.stages() {
            let s = self.space.stage_index(&st.name).ok_or_else(|| {
                Error::validation(format!("stage `{}` is not in the source space", st.name))
            })?;
            stage_map.push(s);
        }
        if stage_map.len() != self.space.n_stages() {
            return Err(Error::validation("source and target spaces differ in stages"));
        }
        let mut keep = Vec::new();
        let mut table = PipelineTable {
            ids: Vec::new(),
            rows: Vec::new(),
            masks: Vec::new(),
        };
        'pipelines: for p in 0..self.n_pipelines() {
            let cfg = self
                .space
                .unflatten(&self.pipelines.rows[p], &self.pipelines.masks[p])?;
            let mut algorithms = Vec::with_capacity(target.n_stages());
            let mut values = Vec::with_capacity(target.n_stages());
            for (ts, st) in target.stages().iter().enumerate() {
                let s = stage_map[ts];
                let src = &self.space.stages()[s].algorithms[cfg.algorithms[s]];
                let Some(ta) = target.algorithm_index(ts, &src.name) else {
                    continue 'pipelines;
                };
                let dst = &st.algorithms[ta];
                let vals = dst
                    .hyperparameters
                    .iter()
                    .map(|hp| {
                        src.hyperparameters
                            .iter()
                            .position(|h| h.name == hp.name)
                            .map(|k| cfg.values[s][k].clone())
                            .ok_or_else(|| {
                                Error::validation(format!(
                                    "hyperparameter `{}` of `{}` missing in the source space",
                                    hp.name, dst.name
                                ))
                            })
                    })
                    .collect::<Result<Vec<_>>>()?;
                algorithms.push(ta);
                values.push(vals);
            }
            let (f, m) = target.flatten(&PipelineConfiguration { algorithms, values })?;
            table.ids.push(self.pipelines.ids[p]);
            table.rows.push(f);
            table.masks.push(m);
            keep.push(p);
        }
        let select = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            m.iter().map(|row| keep.iter().map(|&p| row[p]).collect()).collect()
        };
        MetaDataset::new(
            target.clone(),
            table,
            self.tasks.clone(),
            select(&self.accuracy),
            self.cost.as_ref().map(select),
            self.splits.clone(),
        )
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn pipelines(&self) -> &PipelineTable {
        &self.pipelines
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn dropped_pipelines(&self) -> usize {
        self.dropped
    }

    pub fn n_pipelines(&self) -> usize {
        self.pipelines.len()
    }

    pub fn has_cost(&self) -> bool {
        self.cost.is_some()
    }

    pub fn task_index(&self, task_id: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t == task_id)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .get(split)
            .iter()
            .map(|id| self.task_index(id).expect("validated split"))
            .collect()
    }

    /// Accuracy by (task index, pipeline index).
    pub fn accuracy(&self, task: usize, pipeline: usize) -> Option<f64> {
        let v = self.accuracy[task][pipeline];
        (!v.is_nan()).then_some(v)
    }

    /// Accuracy row of a task, NaN for missing entries.
    pub fn task_row(&self, task: usize) -> &[f64] {
        &self.accuracy[task]
    }

    /// Stored accuracy, `None` for a sparse cell. Unknown ids are errors.
    pub fn oracle(&self, task_id: &str, pipeline_id: u64) -> Result<Option<f64>> {
        let t = self
            .task_index(task_id)
            .ok_or_else(|| Error::validation(format!("unknown task `{task_id}`")))?;
        let p = self
            .pipelines
            .ids
            .iter()
            .position(|&id| id == pipeline_id)
            .ok_or_else(|| Error::validation(format!("unknown pipeline {pipeline_id}")))?;
        Ok(self.accuracy(t, p))
    }

    pub fn y_max(&self, task: usize) -> Option<f64> {
        self.accuracy[task]
            .iter()
            .filter(|v| !v.is_nan())
            .copied()
            .reduce(f64::max)
    }

    /// Per-evaluation cost, 1 when no cost column is present.
    pub fn cost(&self, task: usize, pipeline: usize) -> f64 {
        match &self.cost {
            Some(c) if !c[task][pipeline].is_nan() => c[task][pipeline],
            _ => 1.0,
        }
    }

    /// (pipeline index, accuracy) of every present evaluation of a task.
    pub fn observed(&self, task: usize) -> Vec<(usize, f64)> {
        self.accuracy[task]
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_nan())
            .map(|(p, &v)| (p, v))
            .collect()
    }

    /// Fits preprocessing statistics on the pipeline table.
    pub fn fit_preprocess(&self) -> Result<PreprocessStats> {
        PreprocessStats::fit(&self.space, &self.pipelines.rows, &self.pipelines.masks)
    }

    /// Scaled features of every pipeline.
    pub fn scaled_features(&self, stats: &PreprocessStats) -> Result<Vec<Vec<f64>>> {
        if stats.space_fingerprint != self.space.fingerprint() {
            return Err(Error::validation(
                "preprocessing statistics were fitted on a different search space",
            ));
        }
        self.pipelines
            .rows
            .iter()
            .zip(&self.pipelines.masks)
            .map(|(r, m)| stats.apply(r, m).map(|s| s.values))
            .collect()
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let space = SearchSpace::load(dir.join(SPACE_FILE))?;
        Self::load(
            space,
            &dir.join(PIPELINES_FILE),
            &dir.join(EVALUATIONS_FILE),
            &dir.join(SPLITS_FILE),
            &dir.join(HEADER_FILE),
        )
    }

    pub fn load(
        space: SearchSpace,
        pipelines: &Path,
        evaluations: &Path,
        splits: &Path,
        header: &Path,
    ) -> Result<Self> {
        let header: MetaHeader = read_json(header)?;
        if header.space_fingerprint != space.fingerprint() {
            return Err(Error::validation(format!(
                "meta-dataset was built for space {} but the space document hashes to {}",
                header.space_fingerprint,
                space.fingerprint()
            )));
        }
        let table = PipelineTable::read_csv(&space, pipelines)?;
        let splits: Splits = read_json(splits)?;
        let (tasks, accuracy, cost) = read_evaluations(evaluations, &table, header.orientation)?;
        MetaDataset::new(space, table, tasks, accuracy, cost, splits)
    }

    /// Writes the five files in accuracy orientation.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(dir.join(SPACE_FILE), self.space.to_json() + "\n")
            .map_err(|e| Error::io(dir.join(SPACE_FILE), e))?;
        self.pipelines.write_csv(&self.space, dir.join(PIPELINES_FILE))?;
        self.write_evaluations(&dir.join(EVALUATIONS_FILE))?;
        write_json(
            &dir.join(HEADER_FILE),
            &MetaHeader {
                orientation: Orientation::Accuracy,
                space_fingerprint: self.space.fingerprint(),
            },
        )?;
        write_json(&dir.join(SPLITS_FILE), &self.splits)
    }

    /// Paths of the files read by [`load_dir`](Self::load_dir).
    pub fn files(dir: impl AsRef<Path>) -> Vec<PathBuf> {
        [SPACE_FILE, PIPELINES_FILE, EVALUATIONS_FILE, HEADER_FILE, SPLITS_FILE]
            .iter()
            .map(|f| dir.as_ref().join(f))
            .collect()
    }

    fn write_evaluations(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, &e))?;
        let mut header = vec!["task_id", "pipeline_id", "accuracy"];
        if self.cost.is_some() {
            header.push("cost");
        }
        w.write_record(&header).map_err(|e| Error::csv(path, &e))?;
        for (t, task) in self.tasks.iter().enumerate() {
            for (p, id) in self.pipelines.ids.iter().enumerate() {
                let v = self.accuracy[t][p];
                if v.is_nan() {
                    continue;
                }
                let mut rec = vec![task.clone(), id.to_string(), format_float(v)];
                if let Some(c) = &self.cost {
                    rec.push(format_float(c[t][p]));
                }
                w.write_record(&rec).map_err(|e| Error::csv(path, &e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

type EvaluationTables = (Vec<String>, Vec<Vec<f64>>, Option<Vec<Vec<f64>>>);

fn read_evaluations(
    path: &Path,
    table: &PipelineTable,
    orientation: Orientation,
) -> Result<EvaluationTables> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, &e))?;
    let header = reader.headers().map_err(|e| Error::csv(path, &e))?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let has_cost = match cols.as_slice() {
        ["task_id", "pipeline_id", v] if *v == orientation.column() => false,
        ["task_id", "pipeline_id", v, "cost"] if *v == orientation.column() => true,
        _ => {
            return Err(Error::Csv {
                file: path.to_path_buf(),
                line: 1,
                message: format!(
                    "expected header `task_id,pipeline_id,{}[,cost]` as declared in {HEADER_FILE}",
                    orientation.column()
                ),
            })
        }
    };
    let index = table.index_of();
    let mut tasks: Vec<String> = Vec::new();
    let mut task_of: HashMap<String, usize> = HashMap::new();
    let mut accuracy: Vec<Vec<f64>> = Vec::new();
    let mut cost: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, &e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let bad = |message: String| Error::Csv {
            file: path.to_path_buf(),
            line,
            message,
        };
        let task = record[0].trim().to_string();
        let pid: u64 = record[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("invalid pipeline_id `{}`", &record[1])))?;
        let p = *index
            .get(&pid)
            .ok_or_else(|| bad(format!("pipeline {pid} is not in {PIPELINES_FILE}")))?;
        let parse = |s: &str| -> Result<f64> {
            let s = s.trim();
            if s.is_empty() || s.eq_ignore_ascii_case("nan") {
                Ok(f64::NAN)
            } else {
                s.parse().map_err(|_| bad(format!("invalid number `{s}`")))
            }
        };
        let mut v = parse(&record[2])?;
        if !v.is_nan() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!(
                    "{}:{line}: {} {v} outside [0, 1]",
                    path.display(),
                    orientation.column()
                )));
            }
            if orientation == Orientation::Error {
                v = 1.0 - v;
            }
        }
        let t = *task_of.entry(task.clone()).or_insert_with(|| {
            tasks.push(task.clone());
            accuracy.push(vec![f64::NAN; table.len()]);
            cost.push(vec![f64::NAN; table.len()]);
            tasks.len() - 1
        });
        if !accuracy[t][p].is_nan() {
            return Err(bad(format!("duplicate evaluation for task `{task}`, pipeline {pid}")));
        }
        accuracy[t][p] = v;
        if has_cost {
            let c = parse(&record[3])?;
            if c < 0.0 {
                return Err(bad(format!("negative cost {c}")));
            }
            cost[t][p] = c;
        }
    }
    Ok((tasks, accuracy, has_cost.then_some(cost)))
}

/// Parameters of the synthetic meta-dataset generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_tasks: usize,
    pub n_pipelines: usize,
    /// Tasks are grouped into families sharing latent prototypes.
    pub n_families: usize,
    /// Standard deviation of the Gaussian noise added before squashing.
    pub noise: f64,
    /// Per-task deviation from the family prototype.
    #[serde(default = "default_spread")]
    pub task_spread: f64,
    /// Fraction of (task, pipeline) cells left unevaluated.
    #[serde(default)]
    pub missing_fraction: f64,
    #[serde(default)]
    pub with_cost: bool,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
}

fn default_spread() -> f64 {
    0.8
}

fn default_train_frac() -> f64 {
    0.6
}

fn default_val_frac() -> f64 {
    0.2
}

impl SyntheticSpec {
    pub fn new(n_tasks: usize, n_pipelines: usize) -> Self {
        SyntheticSpec {
            n_tasks,
            n_pipelines,
            n_families: 5,
            noise: 0.05,
            task_spread: default_spread(),
            missing_fraction: 0.0,
            with_cost: false,
            train_frac: default_train_frac(),
            val_frac: default_val_frac(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tasks < 3 || self.n_pipelines == 0 || self.n_families == 0 {
            return Err(Error::validation(
                "synthetic spec needs at least 3 tasks, 1 pipeline and 1 family",
            ));
        }
        if self.noise < 0.0 || self.task_spread < 0.0 || !(0.0..1.0).contains(&self.missing_fraction)
        {
            return Err(Error::validation("noise, spread and missing fraction out of range"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct TaskLatent {
    /// `base[stage][algorithm]`
    base: Vec<Vec<f64>>,
    /// `curvature[stage][algorithm]`
    curvature: Vec<Vec<f64>>,
    /// Bowl centre per flattened slot, in scaled units.
    center: Vec<f64>,
    /// Per-slot weight inside the bowl; most hyperparameters barely matter.
    relevance: Vec<f64>,
    /// `interaction[pair][a * M_b + b]` for stage pairs in order.
    interaction: Vec<Vec<f64>>,
}

/// Ground-truth response surfaces behind a synthetic meta-dataset.
///
/// `score = base[a] - curvature[a] * mean((x - center)^2) + interactions`,
/// accuracy `= sigmoid(score + noise)`, with `x` the bound-scaled
/// hyperparameters of the active algorithms.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticModel {
    space: SearchSpace,
    scaler: PreprocessStats,
    tasks: Vec<TaskLatent>,
    families: Vec<usize>,
    algo_cost: Vec<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SyntheticModel {
    pub fn new(space: &SearchSpace, spec: &SyntheticSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let scaler = PreprocessStats::from_space_bounds(space);
        let mut rng = seeded_rng(seed, 1);
        let n = space.n_stages();
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| ((a + 1)..n).map(move |b| (a, b)))
            .collect();
        let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

        let prototype = |rng: &mut rand_chacha::ChaCha8Rng| TaskLatent {
            base: (0..n)
                .map(|s| (0..space.n_algorithms(s)).map(|_| normal(rng)).collect())
                .collect(),
            curvature: (0..n)
                .map(|s| {
                    (0..space.n_algorithms(s))
                        .map(|_| rng.random_range(2.0..6.0))
                        .collect()
                })
                .collect(),
            center: (0..space.flat_width()).map(|_| rng.random_range(0.1..0.9)).collect(),
            relevance: (0..space.flat_width())
                .map(|_| {
                    if rng.random::<f64>() < 0.4 {
                        rng.random_range(1.0..3.0)
                    } else {
                        rng.random_range(0.0..0.05)
                    }
                })
                .collect(),
            interaction: pairs
                .iter()
                .map(|&(a, b)| {
                    (0..space.n_algorithms(a) * space.n_algorithms(b))
                        .map(|_| 0.5 * normal(rng))
                        .collect()
                })
                .collect(),
        };
        let protos: Vec<TaskLatent> = (0..spec.n_families).map(|_| prototype(&mut rng)).collect();
        let spread = spec.task_spread;
        let mut tasks = Vec::with_capacity(spec.n_tasks);
        let mut families = Vec::with_capacity(spec.n_tasks);
        for t in 0..spec.n_tasks {
            let fam = t % spec.n_families;
            let p = &protos[fam];
            let jitter = |v: &[f64], scale: f64, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                v.iter().map(|x| x + scale * normal(rng)).collect()
            };
            tasks.push(TaskLatent {
                base: p.base.iter().map(|r| jitter(r, spread, &mut rng)).collect(),
                curvature: p.curvature.clone(),
                center: p
                    .center
                    .iter()
                    .map(|c| (c + 0.3 * spread * normal(&mut rng)).clamp(0.0, 1.0))
                    .collect(),
                relevance: p.relevance.clone(),
                interaction: p
                    .interaction
                    .iter()
                    .map(|r| jitter(r, 0.5 * spread, &mut rng))
                    .collect(),
            });
            families.push(fam);
        }
        let algo_cost = (0..n)
            .map(|s| {
                (0..space.n_algorithms(s))
                    .map(|_| rng.random_range(0.2..2.0))
                    .collect()
            })
            .collect();
        Ok(SyntheticModel {
            space: space.clone(),
            scaler,
            tasks,
            families,
            algo_cost,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Family index of each task.
    pub fn families(&self) -> &[usize] {
        &self.families
    }

    fn score_scaled(&self, task: usize, x: &[f64], mask: &ActiveMask) -> f64 {
        let lat = &self.tasks[task];
        let mut score = 0.0;
        for s in 0..self.space.n_stages() {
            let a = mask.active[s];
            score += lat.base[s][a];
            let range = self.space.stage_layout(s).algorithms[a].range();
            let numeric: Vec<usize> = range
                .filter(|&f| self.scaler.features[f].transform == FeatureTransform::MinMax)
                .collect();
            if !numeric.is_empty() {
                let sq: f64 = numeric
                    .iter()
                    .map(|&f| lat.relevance[f] * (x[f] - lat.center[f]).powi(2))
                    .sum();
                score -= lat.curvature[s][a] * sq / numeric.len() as f64;
            }
        }
        let n = self.space.n_stages();
        let mut k = 0;
        for a in 0..n {
            for b in (a + 1)..n {
                let mb = self.space.n_algorithms(b);
                score += lat.interaction[k][mask.active[a] * mb + mask.active[b]];
                k += 1;
            }
        }
        score
    }

    /// Noise-free accuracy of raw flattened features.
    pub fn accuracy_of(&self, task: usize, features: &[f64], mask: &ActiveMask) -> Result<f64> {
        let x = self.scaler.apply(features, mask)?.values;
        Ok(sigmoid(self.score_scaled(task, &x, mask)))
    }

    /// Noise-free accuracy of any configuration in the space.
    pub fn evaluate(&self, task: usize, config: &PipelineConfiguration) -> Result<f64> {
        let (f, m) = self.space.flatten(config)?;
        self.accuracy_of(task, &f, &m)
    }

    /// Best configuration of a task, found by enumerating every algorithm
    /// combination with numeric hyperparameters at their bowl centres.
    pub fn planted_optimum(&self, task: usize) -> Result<PipelineConfiguration> {
        let n = self.space.n_stages();
        let lat = &self.tasks[task];
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut combo = vec![0usize; n];
        loop {
            let mask = ActiveMask::new(combo.clone());
            let mut x = vec![0.0; self.space.flat_width()];
            for (s, &a) in combo.iter().enumerate() {
                for f in self.space.stage_layout(s).algorithms[a].range() {
                    x[f] = lat.center[f];
                }
            }
            let score = self.score_scaled(task, &x, &mask);
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, combo.clone()));
            }
            let mut s = 0;
            loop {
                if s == n {
                    let (_, algos) = best.expect("at least one combination");
                    return self.centre_config(task, &algos);
                }
                combo[s] += 1;
                if combo[s] < self.space.n_algorithms(s) {
                    break;
                }
                combo[s] = 0;
                s += 1;
            }
        }
    }

    fn centre_config(&self, task: usize, algos: &[usize]) -> Result<PipelineConfiguration> {
        let lat = &self.tasks[task];
        let mut raw = vec![0.0; self.space.flat_width()];
        for (s, &a) in algos.iter().enumerate() {
            for f in self.space.stage_layout(s).algorithms[a].range() {
                let st = &self.scaler.features[f];
                raw[f] = match st.transform {
                    FeatureTransform::MinMax => st.min + lat.center[f] * (st.max - st.min),
                    FeatureTransform::Passthrough => lat.center[f],
                };
            }
        }
        self.space.unflatten(&raw, &ActiveMask::new(algos.to_vec()))
    }

    fn cost_of(&self, mask: &ActiveMask) -> f64 {
        mask.active
            .iter()
            .enumerate()
            .map(|(s, &a)| self.algo_cost[s][a])
            .sum()
    }
}

fn task_name(t: usize, n: usize) -> String {
    let width = format!("{}", n.saturating_sub(1)).len().max(3);
    format!("t{t:0width$}")
}

/// Synthetic meta-dataset plus the model that generated it.
pub fn generate_synthetic(
    space: &SearchSpace,
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<(MetaDataset, SyntheticModel)> {
    let model = SyntheticModel::new(space, spec, seed)?;
    let mut rng = seeded_rng(seed, 2);
    let mut table = PipelineTable {
        ids: Vec::with_capacity(spec.n_pipelines),
        rows: Vec::with_capacity(spec.n_pipelines),
        masks: Vec::with_capacity(spec.n_pipelines),
    };
    for p in 0..spec.n_pipelines {
        let config = space.sample(&mut rng);
        let (f, m) = space.flatten(&config)?;
        table.ids.push(p as u64);
        table.rows.push(f);
        table.masks.push(m);
    }
    let tasks: Vec<String> = (0..spec.n_tasks).map(|t| task_name(t, spec.n_tasks)).collect();
    let mut accuracy = vec![vec![f64::NAN; spec.n_pipelines]; spec.n_tasks];
    let mut cost = vec![vec![f64::NAN; spec.n_pipelines]; spec.n_tasks];
    let mut noise_rng = seeded_rng(seed, 3);
    for t in 0..spec.n_tasks {
        let task_cost = noise_rng.random_range(0.5..2.0);
        for p in 0..spec.n_pipelines {
            let eps: f64 = noise_rng.sample(StandardNormal);
            let skip = noise_rng.random::<f64>() < spec.missing_fraction;
            if skip {
                continue;
            }
            let x = model.scaler.apply(&table.rows[p], &table.masks[p])?.values;
            let score = model.score_scaled(t, &x, &table.masks[p]);
            accuracy[t][p] = sigmoid(score + spec.noise * eps);
            cost[t][p] = task_cost * model.cost_of(&table.masks[p]);
        }
    }
    let all = Splits {
        train: tasks.clone(),
        ..Splits::default()
    };
    let meta = MetaDataset::new(
        space.clone(),
        table,
        tasks,
        accuracy,
        spec.with_cost.then_some(cost),
        all,
    )?;
    let meta = meta.split_assign(spec.train_frac, spec.val_frac, seed)?;
    Ok((meta, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{AlgorithmSpec, HyperparameterSpec, Stage};

    fn space() -> SearchSpace {
        SearchSpace::new(vec![
            Stage {
                name: "s".into(),
                algorithms: vec![
                    AlgorithmSpec::new("a", vec![HyperparameterSpec::continuous("x", 0.0, 1.0)]),
                    AlgorithmSpec::new("b", vec![]),
                ],
            },
            Stage {
                name: "e".into(),
                algorithms: vec![
                    AlgorithmSpec::new("c", vec![HyperparameterSpec::continuous("y", 0.0, 2.0)]),
                    AlgorithmSpec::new("d", vec![HyperparameterSpec::continuous("z", 0.0, 1.0)]),
                ],
            },
        ])
        .unwrap()
    }

    fn table(n: usize) -> PipelineTable {
        let sp = space();
        let mut rng = seeded_rng(0, 0);
        let mut t = PipelineTable {
            ids: vec![],
            rows: vec![],
            masks: vec![],
        };
        for i in 0..n {
            let (f, m) = sp.flatten(&sp.sample(&mut rng)).unwrap();
            t.ids.push(i as u64 + 1);
            t.rows.push(f);
            t.masks.push(m);
        }
        t
    }

    fn splits(train: &[&str], val: &[&str], test: &[&str]) -> Splits {
        let v = |s: &[&str]| s.iter().map(|x| x.to_string()).collect();
        Splits {
            train: v(train),
            val: v(val),
            test: v(test),
        }
    }

    #[test]
    fn all_nan_pipeline_dropped() {
        let nan = f64::NAN;
        let meta = MetaDataset::new(
            space(),
            table(3),
            vec!["t1".into(), "t2".into(), "t3".into()],
            vec![vec![0.5, nan, 0.7], vec![0.6, nan, nan], vec![nan, nan, 0.1]],
            None,
            splits(&["t1"], &["t2"], &["t3"]),
        )
        .unwrap();
        assert_eq!(meta.n_pipelines(), 2);
        assert_eq!(meta.dropped_pipelines(), 1);
        assert_eq!(meta.pipelines().ids, vec![1, 3]);
        assert_eq!(meta.oracle("t1", 3).unwrap(), Some(0.7));
        assert_eq!(meta.oracle("t2", 3).unwrap(), None);
        assert!(meta.oracle("t9", 1).is_err());
        assert!(meta.oracle("t1", 2).is_err());
        assert_eq!(meta.y_max(0), Some(0.7));
    }

    #[test]
    fn out_of_range_accuracy_rejected() {
        let r = MetaDataset::new(
            space(),
            table(1),
            vec!["t1".into(), "t2".into(), "t3".into()],
            vec![vec![1.2], vec![0.1], vec![0.1]],
            None,
            splits(&["t1"], &["t2"], &["t3"]),
        );
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn unknown_task_in_splits_rejected() {
        let r = MetaDataset::new(
            space(),
            table(1),
            vec!["t1".into(), "t2".into(), "t3".into()],
            vec![vec![0.2], vec![0.1], vec![0.1]],
            None,
            splits(&["t1", "zz"], &["t2"], &["t3"]),
        );
        assert!(r.unwrap_err().to_string().contains("zz"));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let tasks: Vec<String> = (0..10).map(|t| format!("t{t}")).collect();
        let meta = MetaDataset::new(
            space(),
            table(2),
            tasks.clone(),
            vec![vec![0.5, 0.5]; 10],
            None,
            Splits {
                train: tasks,
                ..Splits::default()
            },
        )
        .unwrap();
        let a = meta.split_assign(0.6, 0.2, 7).unwrap();
        let b = meta.split_assign(0.6, 0.2, 7).unwrap();
        let s = a.splits();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        assert_eq!(a.splits(), b.splits());
        assert!(meta.split_assign(0.7, 0.4, 0).is_err());
        assert!(meta.split_assign(0.0, 0.4, 0).is_err());
        let explicit = splits(
            &["t0", "t1", "t2", "t3", "t4", "t5", "t6"],
            &["t7"],
            &["t8", "t9"],
        );
        assert_eq!(meta.with_splits(explicit.clone()).unwrap().splits(), &explicit);
    }

    #[test]
    fn planted_optimum_beats_samples() {
        let sp = space();
        let spec = SyntheticSpec {
            noise: 0.0,
            ..SyntheticSpec::new(6, 50)
        };
        let (meta, model) = generate_synthetic(&sp, &spec, 3).unwrap();
        let mut rng = seeded_rng(1, 0);
        for t in 0..meta.tasks().len() {
            let best = model.evaluate(t, &model.planted_optimum(t).unwrap()).unwrap();
            for _ in 0..500 {
                let c = sp.sample(&mut rng);
                assert!(model.evaluate(t, &c).unwrap() <= best + 1e-12);
            }
            assert!(meta.y_max(t).unwrap() <= best + 1e-12);
        }
    }

    #[test]
    fn seeds_give_different_tables() {
        let sp = space();
        let spec = SyntheticSpec::new(5, 20);
        let (a, _) = generate_synthetic(&sp, &spec, 1).unwrap();
        let (b, _) = generate_synthetic(&sp, &spec, 2).unwrap();
        let (c, _) = generate_synthetic(&sp, &spec, 1).unwrap();
        assert_ne!(a.task_row(0), b.task_row(0));
        assert_eq!(a, c);
    }
}
