//! Adam, meta-training over tasks, and test-time fine-tuning.

use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{self, KernelParams};
use crate::metadata::{MetaDataset, Split};
use crate::network::{EmbeddingNetwork, GradientBundle, Input};
use crate::seeded_rng;
use crate::space::{ActiveMask, PreprocessStats};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// One bias-corrected Adam update. Entries with `trainable[i] == false`
    /// keep their value and moments.
    pub fn update(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        trainable: Option<&[bool]>,
        lr: f64,
    ) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grads.len() != n || trainable.is_some_and(|t| t.len() != n) {
            return Err(Error::shape(format!(
                "Adam state has {n} entries, got {} params and {} grads",
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for i in 0..n {
            if trainable.is_some_and(|t| !t[i]) {
                continue;
            }
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + EPSILON);
        }
        Ok(())
    }
}

/// Applies one Adam step to the trainable network groups and γ.
pub fn adam_step(
    net: &mut EmbeddingNetwork,
    kernel: &mut KernelParams,
    grads: &GradientBundle,
    kernel_grad: &[f64; 3],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let mut params = net.params().to_vec();
    params.extend_from_slice(&kernel.to_array());
    let mut g = grads.values.clone();
    g.extend_from_slice(kernel_grad);
    let mut mask = net.trainable_mask();
    mask.extend_from_slice(&[true; 3]);
    state.update(&mut params, &g, Some(&mask), lr)?;
    let n = net.params().len();
    net.params_mut().copy_from_slice(&params[..n]);
    *kernel = KernelParams::from_array([params[n], params[n + 1], params[n + 2]]);
    Ok(())
}

/// Zero mean, unit variance; constant targets map to zeros. Returns the
/// standardized values with the mean and standard deviation used.
pub fn standardize(y: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = y.len().max(1) as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return (vec![0.0; y.len()], mean, 1.0);
    }
    (y.iter().map(|v| (v - mean) / std).collect(), mean, std)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub task_id: String,
    /// Indices into [`TrainingData::features`].
    pub pipelines: Vec<usize>,
    pub y: Vec<f64>,
}

/// Preprocessed pipeline features and per-task evaluations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingData {
    pub features: Vec<Vec<f64>>,
    pub masks: Vec<ActiveMask>,
    pub train: Vec<TaskData>,
    pub val: Vec<TaskData>,
}

impl TrainingData {
    pub fn from_meta(meta: &MetaDataset, stats: &PreprocessStats) -> Result<Self> {
        let tasks = |split: Split| -> Vec<TaskData> {
            meta.split_indices(split)
                .into_iter()
                .map(|t| {
                    let obs = meta.observed(t);
                    TaskData {
                        task_id: meta.tasks()[t].clone(),
                        pipelines: obs.iter().map(|o| o.0).collect(),
                        y: obs.iter().map(|o| o.1).collect(),
                    }
                })
                .collect()
        };
        Ok(TrainingData {
            features: meta.scaled_features(stats)?,
            masks: meta.pipelines().masks.clone(),
            train: tasks(Split::Train),
            val: tasks(Split::Val),
        })
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
    /// Epochs between validation checks.
    pub val_interval: usize,
    /// Evaluations per validation task (a fixed seeded subsample).
    #[serde(default)]
    pub val_batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10_000,
            batch_size: 1000,
            learning_rate: 1e-4,
            patience: 20,
            val_interval: 50,
            val_batch_size: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Smaller epoch count and batch for the bundled synthetic benchmarks.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 2000,
            batch_size: 100,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.batch_size == 0
            || self.patience == 0
            || self.val_interval == 0
            || self.val_batch_size == Some(0)
        {
            return Err(Error::validation("training config values must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning rate must be positive"));
        }
        if self.patience > self.epochs {
            return Err(Error::validation("patience exceeds the epoch count"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    /// Mean batch loss over meta-train tasks during the epoch (absent at
    /// epoch 0).
    pub mean_train_nll: Option<f64>,
    /// Absent when no validation check happened at this epoch.
    pub mean_val_nll: Option<f64>,
    pub elapsed_seconds: f64,
}

/// Everything needed to continue meta-training exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub params: Vec<f64>,
    pub kernel: KernelParams,
    pub adam: AdamState,
    pub best_params: Vec<f64>,
    pub best_kernel: KernelParams,
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    pub stale_checks: usize,
    pub stopped: bool,
    pub log: Vec<LogRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// Loss (and gradients) of one task batch with standardized targets.
fn batch_loss(
    net: &EmbeddingNetwork,
    kernel: &KernelParams,
    data: &TrainingData,
    idx: &[usize],
    y: &[f64],
    with_grad: bool,
) -> Result<(f64, Option<(GradientBundle, [f64; 3])>)> {
    let inputs = data.inputs(idx);
    let (ys, _, _) = standardize(y);
    if !with_grad {
        let z = net.embed_all(&inputs)?;
        return Ok((gp::nll(&z, &ys, kernel)?, None));
    }
    let trace = net.forward_batch(&inputs)?;
    let g = gp::nll_grad(&trace.embeddings, &ys, kernel)?;
    let bundle = if net.any_trainable() {
        net.backward(&trace, &g.inputs)?
    } else {
        net.zero_gradient()
    };
    Ok((g.value, Some((bundle, g.params))))
}

fn validation_batches(data: &TrainingData, cfg: &TrainConfig) -> Vec<(Vec<usize>, Vec<f64>)> {
    let cap = cfg.val_batch_size.unwrap_or(cfg.batch_size);
    data.val
        .iter()
        .enumerate()
        .map(|(k, task)| {
            let n = task.pipelines.len();
            let mut pick: Vec<usize> = if n <= cap {
                (0..n).collect()
            } else {
                let mut rng = seeded_rng(cfg.seed ^ 0x5eed_0000_0000_0000, k as u64);
                index::sample(&mut rng, n, cap).into_vec()
            };
            pick.sort_unstable();
            (
                pick.iter().map(|&i| task.pipelines[i]).collect(),
                pick.iter().map(|&i| task.y[i]).collect(),
            )
        })
        .collect()
}

fn mean_val_nll(
    net: &EmbeddingNetwork,
    kernel: &KernelParams,
    data: &TrainingData,
    batches: &[(Vec<usize>, Vec<f64>)],
) -> Result<Option<f64>> {
    if batches.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for (idx, y) in batches {
        total += batch_loss(net, kernel, data, idx, y, false)?.0;
    }
    Ok(Some(total / batches.len() as f64))
}

/// Meta-training: every epoch, one Adam step per meta-train task on a
/// random batch of `min(b, Q_t)` of its evaluations. The network and
/// kernel are left at the best-validation snapshot.
///
/// `on_check` runs after every validation check with the resumable state.
pub fn meta_train(
    net: &mut EmbeddingNetwork,
    kernel: &mut KernelParams,
    data: &TrainingData,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    on_check: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::validation("meta-train split is empty"));
    }
    if let Some(t) = data.train.iter().find(|t| t.pipelines.len() < 2) {
        return Err(Error::validation(format!(
            "meta-train task `{}` has fewer than 2 evaluations",
            t.task_id
        )));
    }
    let val_batches = validation_batches(data, cfg);
    let start = Instant::now();
    let n_params = net.params().len();

    let mut state = match resume {
        Some(s) => {
            if s.params.len() != n_params || s.adam.m.len() != n_params + 3 {
                return Err(Error::shape("resume state does not match the network"));
            }
            net.params_mut().copy_from_slice(&s.params);
            *kernel = s.kernel.clone();
            s
        }
        None => {
            let v0 = mean_val_nll(net, kernel, data, &val_batches)?;
            let mut s = TrainState {
                epoch: 0,
                params: net.params().to_vec(),
                kernel: kernel.clone(),
                adam: AdamState::new(n_params + 3),
                best_params: net.params().to_vec(),
                best_kernel: kernel.clone(),
                best_val: v0,
                best_epoch: 0,
                stale_checks: 0,
                stopped: false,
                log: vec![LogRow {
                    epoch: 0,
                    mean_train_nll: None,
                    mean_val_nll: v0,
                    elapsed_seconds: 0.0,
                }],
            };
            on_check(&s)?;
            s.params.clear();
            s
        }
    };
    let prior_elapsed = state.log.last().map(|r| r.elapsed_seconds).unwrap_or(0.0);

    while !state.stopped && state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let mut rng = seeded_rng(cfg.seed, epoch as u64);
        let mut total = 0.0;
        for task in &data.train {
            let q = task.pipelines.len();
            let b = cfg.batch_size.min(q);
            let mut pick = index::sample(&mut rng, q, b).into_vec();
            pick.sort_unstable();
            let idx: Vec<usize> = pick.iter().map(|&i| task.pipelines[i]).collect();
            let y: Vec<f64> = pick.iter().map(|&i| task.y[i]).collect();
            let (loss, grads) = batch_loss(net, kernel, data, &idx, &y, true).map_err(|e| match e {
                Error::Numerical(m) => {
                    Error::numerical(format!("epoch {epoch}, task `{}`: {m}", task.task_id))
                }
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::numerical(format!(
                    "epoch {epoch}, task `{}`: loss is {loss}",
                    task.task_id
                )));
            }
            let (bundle, kgrad) = grads.expect("gradients requested");
            adam_step(net, kernel, &bundle, &kgrad, &mut state.adam, cfg.learning_rate)?;
            total += loss;
        }
        state.epoch = epoch;
        let mut row = LogRow {
            epoch,
            mean_train_nll: Some(total / data.train.len() as f64),
            mean_val_nll: None,
            elapsed_seconds: prior_elapsed + start.elapsed().as_secs_f64(),
        };
        let check = epoch % cfg.val_interval == 0 || epoch == cfg.epochs;
        if check && !val_batches.is_empty() {
            let v = mean_val_nll(net, kernel, data, &val_batches)?;
            let v = v.expect("validation tasks present");
            row.mean_val_nll = Some(v);
            if state.best_val.is_none_or(|b| v < b) {
                state.best_val = Some(v);
                state.best_epoch = epoch;
                state.best_params = net.params().to_vec();
                state.best_kernel = kernel.clone();
                state.stale_checks = 0;
            } else {
                state.stale_checks += 1;
                if state.stale_checks >= cfg.patience {
                    state.stopped = true;
                }
            }
        } else if check {
            // Without validation tasks the latest parameters are kept.
            state.best_epoch = epoch;
            state.best_params = net.params().to_vec();
            state.best_kernel = kernel.clone();
        }
        state.log.push(row);
        if check || state.epoch == cfg.epochs {
            state.params = net.params().to_vec();
            state.kernel = kernel.clone();
            on_check(&state)?;
            state.params.clear();
        }
    }

    net.params_mut().copy_from_slice(&state.best_params);
    *kernel = state.best_kernel.clone();
    Ok(TrainOutcome {
        log: state.log,
        best_epoch: state.best_epoch,
        best_val: state.best_val.unwrap_or(f64::NAN),
        epochs_run: state.epoch,
        stopped_early: state.stopped,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneMode {
    /// Only γ is updated; the network is never touched.
    #[default]
    KernelOnly,
    /// γ plus every network group currently flagged trainable.
    Network,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub mode: FineTuneMode,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            steps: 100,
            learning_rate: 1e-3,
            mode: FineTuneMode::KernelOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineTuneReport {
    pub nll_before: f64,
    pub nll_after: f64,
    pub steps: usize,
}

/// Fine-tunes γ on fixed embeddings (the network is not needed).
pub fn fine_tune_kernel(
    embeddings: &[Vec<f64>],
    y: &[f64],
    kernel: &mut KernelParams,
    steps: usize,
    lr: f64,
) -> Result<FineTuneReport> {
    let mut adam = AdamState::new(3);
    let before = gp::nll(embeddings, y, kernel)?;
    let mut raw = kernel.to_array();
    for _ in 0..steps {
        let g = gp::nll_grad(embeddings, y, &KernelParams::from_array(raw))?;
        adam.update(&mut raw, &g.params, None, lr)?;
    }
    *kernel = KernelParams::from_array(raw);
    let after = gp::nll(embeddings, y, kernel)?;
    Ok(FineTuneReport {
        nll_before: before,
        nll_after: after,
        steps,
    })
}

/// Test-time fine-tuning on a history (`y` already standardized).
pub fn fine_tune(
    net: &mut EmbeddingNetwork,
    kernel: &mut KernelParams,
    history: &[Input],
    y: &[f64],
    cfg: &FineTuneConfig,
) -> Result<FineTuneReport> {
    if history.is_empty() {
        return Err(Error::validation("fine-tuning needs a non-empty history"));
    }
    match cfg.mode {
        FineTuneMode::KernelOnly => {
            let z = net.embed_all(history)?;
            fine_tune_kernel(&z, y, kernel, cfg.steps, cfg.learning_rate)
        }
        FineTuneMode::Network => {
            if !net.any_trainable() {
                return Err(Error::validation(
                    "network fine-tuning requested but every network group is frozen",
                ));
            }
            let before = gp::nll(&net.embed_all(history)?, y, kernel)?;
            let mut adam = AdamState::new(net.params().len() + 3);
            for _ in 0..cfg.steps {
                let trace = net.forward_batch(history)?;
                let g = gp::nll_grad(&trace.embeddings, y, kernel)?;
                let bundle = net.backward(&trace, &g.inputs)?;
                adam_step(net, kernel, &bundle, &g.params, &mut adam, cfg.learning_rate)?;
            }
            let after = gp::nll(&net.embed_all(history)?, y, kernel)?;
            Ok(FineTuneReport {
                nll_before: before,
                nll_after: after,
                steps: cfg.steps,
            })
        }
    }
}
