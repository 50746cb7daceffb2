//! The pipeline embedding network.
//!
//! Each algorithm (or encoder group) of each stage owns a small MLP encoder
//! that sees only its own hyperparameter slots. Per stage, the selector keeps
//! the output of the encoder of the active algorithm; the stage outputs are
//! concatenated (optionally with the per-stage one-hot selections) and fed
//! through the aggregation MLP, whose last layer is a linear projection to
//! the embedding dimension.
//!
//! Widths: an encoder of stage `i` maps its input to `F * L_i` units in every
//! layer; aggregation layers have `F * sum_i L_i` units. With zero encoder
//! layers the network is a plain MLP on the flattened input.
//!
//! All parameters live in one flat vector; [`GroupId`] addresses the slice
//! owned by a single encoder or by the aggregation stack.

use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::KernelParams;
use crate::space::{read_json, write_json, ActiveMask, AlgorithmSpec, PreprocessStats, SearchSpace};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    #[default]
    UniformFanIn,
    /// Every weight and bias iid N(0, 1).
    StandardNormal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    /// F
    pub width_factor: usize,
    pub encoder_layers: usize,
    pub aggregation_layers: usize,
    /// Z
    pub embedding_dim: usize,
    #[serde(default)]
    pub append_one_hot: bool,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub init: InitScheme,
}

impl ArchitectureSpec {
    /// Four layers in total split between encoders and aggregation, Z = 20.
    pub fn new(width_factor: usize, encoder_layers: usize) -> Self {
        ArchitectureSpec {
            width_factor,
            encoder_layers,
            aggregation_layers: 4usize.saturating_sub(encoder_layers),
            embedding_dim: 20,
            append_one_hot: false,
            activation: Activation::Relu,
            init: InitScheme::UniformFanIn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_layers + self.aggregation_layers < 1 {
            return Err(Error::validation("network needs at least one layer"));
        }
        if self.width_factor == 0 {
            return Err(Error::validation("width factor F must be positive"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::validation("embedding dimension Z must be positive"));
        }
        Ok(())
    }

    /// The published sizing: F in {4, 6, 8, 10}, four layers in total.
    pub fn validate_strict(&self) -> Result<()> {
        self.validate()?;
        if ![4, 6, 8, 10].contains(&self.width_factor) {
            return Err(Error::validation(format!(
                "F = {} is outside {{4, 6, 8, 10}}",
                self.width_factor
            )));
        }
        if self.encoder_layers + self.aggregation_layers != 4 {
            return Err(Error::validation(format!(
                "encoder_layers + aggregation_layers = {}, expected 4",
                self.encoder_layers + self.aggregation_layers
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupId {
    Encoder { stage: usize, unit: usize },
    Aggregation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub offset: usize,
}

impl DenseLayer {
    pub fn weight_range(&self) -> Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    pub fn bias_range(&self) -> Range<usize> {
        let start = self.offset + self.inputs * self.outputs;
        start..start + self.outputs
    }

    fn len(&self) -> usize {
        (self.inputs + 1) * self.outputs
    }

    fn apply(&self, params: &[f64], x: &[f64], act: Option<Activation>) -> Vec<f64> {
        let w = &params[self.weight_range()];
        let b = &params[self.bias_range()];
        (0..self.outputs)
            .map(|o| {
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                let z = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                match act {
                    Some(Activation::Relu) => z.max(0.0),
                    _ => z,
                }
            })
            .collect()
    }

    /// Accumulates parameter gradients (when `grad` is given) and returns the
    /// gradient with respect to the input when `want_input` is set.
    fn back(
        &self,
        params: &[f64],
        x: &[f64],
        g: &[f64],
        grad: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        if let Some(grad) = grad {
            let (wr, br) = (self.weight_range(), self.bias_range());
            for o in 0..self.outputs {
                if g[o] == 0.0 {
                    continue;
                }
                let row = &mut grad[wr.start + o * self.inputs..wr.start + (o + 1) * self.inputs];
                for (r, xi) in row.iter_mut().zip(x) {
                    *r += g[o] * xi;
                }
                grad[br.start + o] += g[o];
            }
        }
        if !want_input {
            return None;
        }
        let w = &params[self.weight_range()];
        let mut gin = vec![0.0; self.inputs];
        for o in 0..self.outputs {
            if g[o] == 0.0 {
                continue;
            }
            let row = &w[o * self.inputs..(o + 1) * self.inputs];
            for (gi, wi) in gin.iter_mut().zip(row) {
                *gi += wi * g[o];
            }
        }
        Some(gin)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub id: GroupId,
    pub layers: Vec<DenseLayer>,
    pub trainable: bool,
}

impl ParamGroup {
    pub fn range(&self) -> Range<usize> {
        let start = self.layers.first().map(|l| l.offset).unwrap_or(0);
        let end = self.layers.last().map(|l| l.offset + l.len()).unwrap_or(start);
        start..end
    }
}

/// Weight and bias totals. `weights` counts the encoder and aggregation
/// layers; the final projection to Z is reported separately in
/// `head_weights`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub weights: usize,
    pub head_weights: usize,
    pub biases: usize,
}

impl ParameterCount {
    pub fn total(&self) -> usize {
        self.weights + self.head_weights + self.biases
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrainableSelector {
    All,
    KernelOnly,
    Encoder { stage: usize, algorithm: usize },
    Aggregation,
}

impl FromStr for TrainableSelector {
    type Err = Error;

    /// `all`, `kernel_only`, `aggregation`, or `encoder(stage,algorithm)`
    /// with zero-based indices.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        match t {
            "all" => return Ok(TrainableSelector::All),
            "kernel_only" => return Ok(TrainableSelector::KernelOnly),
            "aggregation" => return Ok(TrainableSelector::Aggregation),
            _ => {}
        }
        let inner = t
            .strip_prefix("encoder(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::validation(format!("unknown trainable selector `{s}`")))?;
        let mut parts = inner.split(',').map(|p| p.trim().parse::<usize>());
        match (parts.next(), parts.next(), parts.next()) {
            (Some(Ok(stage)), Some(Ok(algorithm)), None) => {
                Ok(TrainableSelector::Encoder { stage, algorithm })
            }
            _ => Err(Error::validation(format!("unknown trainable selector `{s}`"))),
        }
    }
}

/// Gradient aligned with [`EmbeddingNetwork::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub values: Vec<f64>,
    groups: Vec<(GroupId, Range<usize>)>,
}

impl GradientBundle {
    pub fn slice(&self, id: GroupId) -> Option<&[f64]> {
        self.groups
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, r)| &self.values[r.clone()])
    }

    pub fn groups(&self) -> impl Iterator<Item = (GroupId, &[f64])> {
        self.groups.iter().map(|(g, r)| (*g, &self.values[r.clone()]))
    }

    pub fn add(&mut self, other: &GradientBundle) -> Result<()> {
        if other.values.len() != self.values.len() {
            return Err(Error::shape("gradient bundles differ in length"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }
}

/// A single network input: flattened (preprocessed) features and the mask.
#[derive(Clone, Copy, Debug)]
pub struct Input<'a> {
    pub features: &'a [f64],
    pub mask: &'a ActiveMask,
}

#[derive(Clone, Debug)]
struct LayerTrace {
    input: Vec<f64>,
    output: Vec<f64>,
}

#[derive(Clone, Debug)]
struct RowTrace {
    encoders: Vec<(usize, usize, Vec<LayerTrace>)>,
    aggregation: Vec<LayerTrace>,
}

/// Activations recorded by [`EmbeddingNetwork::forward_batch`], consumed by
/// [`EmbeddingNetwork::backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub embeddings: Vec<Vec<f64>>,
    rows: Vec<RowTrace>,
    param_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNetwork {
    space: SearchSpace,
    arch: ArchitectureSpec,
    seed: u64,
    params: Vec<f64>,
    /// `encoders[stage][unit]`
    encoders: Vec<Vec<ParamGroup>>,
    aggregation: ParamGroup,
    /// Flattened-feature indices gathered by each encoder unit.
    unit_inputs: Vec<Vec<Vec<usize>>>,
}

impl EmbeddingNetwork {
    pub fn build(space: &SearchSpace, arch: &ArchitectureSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let f = arch.width_factor;
        let mut offset = 0;
        let mut push_layer = |layers: &mut Vec<DenseLayer>, inputs: usize, outputs: usize| {
            layers.push(DenseLayer {
                inputs,
                outputs,
                offset,
            });
            offset += (inputs + 1) * outputs;
        };

        let mut encoders = Vec::with_capacity(space.n_stages());
        let mut unit_inputs = Vec::with_capacity(space.n_stages());
        for s in 0..space.n_stages() {
            let sl = space.stage_layout(s);
            let width = f * sl.max_width;
            let mut stage_groups = Vec::new();
            let mut stage_inputs = Vec::new();
            for (u, unit) in sl.encoders.iter().enumerate() {
                let idx: Vec<usize> = unit
                    .members
                    .iter()
                    .flat_map(|&a| sl.algorithms[a].range())
                    .collect();
                let mut layers = Vec::new();
                if arch.encoder_layers > 0 {
                    push_layer(&mut layers, idx.len(), width);
                    for _ in 1..arch.encoder_layers {
                        push_layer(&mut layers, width, width);
                    }
                }
                stage_groups.push(ParamGroup {
                    id: GroupId::Encoder { stage: s, unit: u },
                    layers,
                    trainable: true,
                });
                stage_inputs.push(idx);
            }
            encoders.push(stage_groups);
            unit_inputs.push(stage_inputs);
        }

        let hidden = f * space.total_stage_width();
        let mut agg_in = if arch.encoder_layers > 0 {
            hidden
        } else {
            space.flat_width()
        };
        if arch.append_one_hot {
            agg_in += space.total_algorithms();
        }
        let mut layers = Vec::new();
        let mut width = agg_in;
        for _ in 0..arch.aggregation_layers {
            push_layer(&mut layers, width, hidden);
            width = hidden;
        }
        push_layer(&mut layers, width, arch.embedding_dim);
        let aggregation = ParamGroup {
            id: GroupId::Aggregation,
            layers,
            trainable: true,
        };

        let mut net = EmbeddingNetwork {
            space: space.clone(),
            arch: arch.clone(),
            seed,
            params: vec![0.0; offset],
            encoders,
            aggregation,
            unit_inputs,
        };
        net.initialize(seed);
        Ok(net)
    }

    fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<DenseLayer> = self
            .encoders
            .iter()
            .flatten()
            .chain(std::iter::once(&self.aggregation))
            .flat_map(|g| g.layers.clone())
            .collect();
        for l in layers {
            let lo = l.offset;
            let hi = l.offset + l.len();
            match self.arch.init {
                InitScheme::UniformFanIn => {
                    let bound = 1.0 / (l.inputs.max(1) as f64).sqrt();
                    for p in &mut self.params[lo..hi] {
                        *p = rng.random_range(-bound..bound);
                    }
                }
                InitScheme::StandardNormal => {
                    for p in &mut self.params[lo..hi] {
                        *p = rng.sample(StandardNormal);
                    }
                }
            }
        }
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn architecture(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim
    }

    pub fn groups(&self) -> impl Iterator<Item = &ParamGroup> {
        self.encoders
            .iter()
            .flatten()
            .chain(std::iter::once(&self.aggregation))
    }

    fn groups_mut(&mut self) -> impl Iterator<Item = &mut ParamGroup> {
        self.encoders
            .iter_mut()
            .flatten()
            .chain(std::iter::once(&mut self.aggregation))
    }

    pub fn group(&self, id: GroupId) -> Option<&ParamGroup> {
        match id {
            GroupId::Aggregation => Some(&self.aggregation),
            GroupId::Encoder { stage, unit } => self.encoders.get(stage)?.get(unit),
        }
    }

    /// Encoder group of an algorithm, `None` without encoder layers.
    pub fn encoder_group_of(&self, stage: usize, algorithm: usize) -> Option<GroupId> {
        if self.arch.encoder_layers == 0 || stage >= self.space.n_stages() {
            return None;
        }
        let unit = *self.space.stage_layout(stage).encoder_of.get(algorithm)?;
        Some(GroupId::Encoder { stage, unit })
    }

    /// Per-parameter trainable flags.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for g in self.groups() {
            if g.trainable {
                mask[g.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    pub fn any_trainable(&self) -> bool {
        self.groups().any(|g| g.trainable && !g.layers.is_empty())
    }

    pub fn set_trainable(&mut self, selector: &TrainableSelector) -> Result<()> {
        match *selector {
            TrainableSelector::All => self.groups_mut().for_each(|g| g.trainable = true),
            TrainableSelector::KernelOnly => self.groups_mut().for_each(|g| g.trainable = false),
            TrainableSelector::Aggregation => {
                self.groups_mut()
                    .for_each(|g| g.trainable = g.id == GroupId::Aggregation);
            }
            TrainableSelector::Encoder { stage, algorithm } => {
                let target = self.encoder_group_of(stage, algorithm).ok_or_else(|| {
                    Error::validation(format!(
                        "no encoder for stage {stage}, algorithm {algorithm}"
                    ))
                })?;
                self.groups_mut().for_each(|g| g.trainable = g.id == target);
            }
        }
        Ok(())
    }

    pub fn set_group_trainable(&mut self, id: GroupId, trainable: bool) {
        if let Some(g) = self.groups_mut().find(|g| g.id == id) {
            g.trainable = trainable;
        }
    }

    pub fn parameter_count(&self) -> ParameterCount {
        let mut count = ParameterCount {
            weights: 0,
            head_weights: 0,
            biases: 0,
        };
        let n_agg = self.aggregation.layers.len();
        for g in self.groups() {
            for (k, l) in g.layers.iter().enumerate() {
                count.biases += l.outputs;
                if g.id == GroupId::Aggregation && k + 1 == n_agg {
                    count.head_weights += l.inputs * l.outputs;
                } else {
                    count.weights += l.inputs * l.outputs;
                }
            }
        }
        count
    }

    /// Width of the aggregation input (concatenated encoder outputs plus
    /// one-hots when enabled).
    pub fn aggregation_input_width(&self) -> usize {
        self.aggregation.layers[0].inputs
    }

    fn check_input(&self, input: &Input) -> Result<()> {
        if input.features.len() != self.space.flat_width() {
            return Err(Error::shape(format!(
                "feature width {} != space width {}",
                input.features.len(),
                self.space.flat_width()
            )));
        }
        self.space.check_mask(input.mask)?;
        if let Some(i) = input.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("non-finite input at feature {i}")));
        }
        Ok(())
    }

    fn hidden_act(&self) -> Activation {
        self.arch.activation
    }

    fn run_row(&self, input: &Input, keep: bool) -> Result<(Vec<f64>, Option<RowTrace>)> {
        self.check_input(input)?;
        let act = Some(self.hidden_act());
        let mut trace = RowTrace {
            encoders: Vec::new(),
            aggregation: Vec::new(),
        };
        let mut layer_index = 0;
        let finite = |v: &[f64], layer: usize| -> Result<()> {
            if v.iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(Error::numerical(format!("non-finite activation in layer {layer}")))
            }
        };

        let mut z0 = Vec::new();
        if self.arch.encoder_layers > 0 {
            for s in 0..self.space.n_stages() {
                let unit = self.space.stage_layout(s).encoder_of[input.mask.active[s]];
                let mut h: Vec<f64> = self.unit_inputs[s][unit]
                    .iter()
                    .map(|&i| input.features[i])
                    .collect();
                let mut layers = Vec::new();
                for (k, l) in self.encoders[s][unit].layers.iter().enumerate() {
                    let out = l.apply(&self.params, &h, act);
                    finite(&out, k)?;
                    if keep {
                        layers.push(LayerTrace {
                            input: h,
                            output: out.clone(),
                        });
                    }
                    h = out;
                }
                z0.extend_from_slice(&h);
                if keep {
                    trace.encoders.push((s, unit, layers));
                }
            }
            layer_index = self.arch.encoder_layers;
        } else {
            z0.extend_from_slice(input.features);
        }
        if self.arch.append_one_hot {
            z0.extend(input.mask.one_hots(&self.space));
        }

        let n = self.aggregation.layers.len();
        let mut h = z0;
        for (k, l) in self.aggregation.layers.iter().enumerate() {
            let a = if k + 1 == n { None } else { act };
            let out = l.apply(&self.params, &h, a);
            finite(&out, layer_index + k)?;
            if keep {
                trace.aggregation.push(LayerTrace {
                    input: h,
                    output: out.clone(),
                });
            }
            h = out;
        }
        Ok((h, keep.then_some(trace)))
    }

    /// φ(p_λ) for a single configuration.
    pub fn forward(&self, features: &[f64], mask: &ActiveMask) -> Result<Vec<f64>> {
        self.run_row(&Input { features, mask }, false).map(|(z, _)| z)
    }

    /// Embeds many rows without recording activations.
    pub fn embed_all(&self, inputs: &[Input]) -> Result<Vec<Vec<f64>>> {
        inputs
            .iter()
            .map(|i| self.run_row(i, false).map(|(z, _)| z))
            .collect()
    }

    pub fn forward_batch(&self, inputs: &[Input]) -> Result<ForwardTrace> {
        let mut embeddings = Vec::with_capacity(inputs.len());
        let mut rows = Vec::with_capacity(inputs.len());
        for input in inputs {
            let (z, t) = self.run_row(input, true)?;
            embeddings.push(z);
            rows.push(t.expect("trace kept"));
        }
        Ok(ForwardTrace {
            embeddings,
            rows,
            param_len: self.params.len(),
        })
    }

    pub fn zero_gradient(&self) -> GradientBundle {
        GradientBundle {
            values: vec![0.0; self.params.len()],
            groups: self.groups().map(|g| (g.id, g.range())).collect(),
        }
    }

    /// Reverse-mode pass: `upstream[r]` is ∂L/∂embedding of row `r`.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[Vec<f64>]) -> Result<GradientBundle> {
        if trace.param_len != self.params.len() || upstream.len() != trace.rows.len() {
            return Err(Error::shape(format!(
                "backward got {} upstream rows for a trace of {} rows",
                upstream.len(),
                trace.rows.len()
            )));
        }
        let mut bundle = self.zero_gradient();
        let relu = self.hidden_act() == Activation::Relu;
        let encoders_trainable = self.arch.encoder_layers > 0
            && self.encoders.iter().flatten().any(|g| g.trainable);
        let concat_width = if self.arch.encoder_layers > 0 {
            self.arch.width_factor * self.space.total_stage_width()
        } else {
            0
        };
        let n = self.aggregation.layers.len();
        for (row, g_up) in trace.rows.iter().zip(upstream) {
            if g_up.len() != self.arch.embedding_dim {
                return Err(Error::shape("upstream gradient width != Z"));
            }
            let mut g = g_up.clone();
            for k in (0..n).rev() {
                let l = &self.aggregation.layers[k];
                let lt = &row.aggregation[k];
                if k + 1 != n && relu {
                    for (gi, o) in g.iter_mut().zip(&lt.output) {
                        if *o <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                }
                let want = k > 0 || encoders_trainable;
                let grad = self
                    .aggregation
                    .trainable
                    .then_some(&mut bundle.values[..]);
                match l.back(&self.params, &lt.input, &g, grad, want) {
                    Some(gin) => g = gin,
                    None => break,
                }
            }
            if !encoders_trainable {
                continue;
            }
            let mut cursor = 0;
            for (s, unit, layers) in &row.encoders {
                let group = &self.encoders[*s][*unit];
                let width = layers.last().map(|t| t.output.len()).unwrap_or(0);
                if !group.trainable {
                    cursor += width;
                    continue;
                }
                let mut ge = g[cursor..cursor + width].to_vec();
                cursor += width;
                for k in (0..group.layers.len()).rev() {
                    let lt = &layers[k];
                    if relu {
                        for (gi, o) in ge.iter_mut().zip(&lt.output) {
                            if *o <= 0.0 {
                                *gi = 0.0;
                            }
                        }
                    }
                    match group.layers[k].back(
                        &self.params,
                        &lt.input,
                        &ge,
                        Some(&mut bundle.values[..]),
                        k > 0,
                    ) {
                        Some(gin) => ge = gin,
                        None => break,
                    }
                }
            }
            debug_assert_eq!(cursor, concat_width);
        }
        Ok(bundle)
    }

    /// Extends a stage with a new algorithm and a freshly initialised
    /// encoder. Existing parameters are copied unchanged and frozen; only the
    /// new encoder is trainable.
    pub fn add_algorithm_encoder(
        &self,
        stage: usize,
        algo: AlgorithmSpec,
        seed: u64,
    ) -> Result<EmbeddingNetwork> {
        if self.arch.encoder_layers == 0 {
            return Err(Error::Unsupported(
                "cannot add an encoder to a network without encoder layers; \
                 fine-tune the whole network instead"
                    .into(),
            ));
        }
        if stage >= self.space.n_stages() {
            return Err(Error::validation(format!("stage index {stage} out of range")));
        }
        if algo.encoder_group.is_some() {
            return Err(Error::validation(
                "a newly added algorithm gets its own encoder; drop encoder_group",
            ));
        }
        let limit = self.space.stage_width(stage);
        if algo.width() > limit {
            return Err(Error::validation(format!(
                "`{}` has {} slots but stage {stage} was built for at most {limit}",
                algo.name,
                algo.width()
            )));
        }
        let space = self.space.with_algorithm(stage, algo)?;
        let mut net = EmbeddingNetwork::build(&space, &self.arch, seed)?;
        net.seed = self.seed;

        for (s, groups) in self.encoders.iter().enumerate() {
            for (u, old) in groups.iter().enumerate() {
                let new = &net.encoders[s][u];
                debug_assert_eq!(old.layers.len(), new.layers.len());
                let (src, dst) = (old.range(), new.range());
                net.params[dst].copy_from_slice(&self.params[src]);
            }
        }

        // The aggregation stack is identical except that the first layer
        // gains one input column for the new one-hot slot.
        let one_hot_col = self.arch.append_one_hot.then(|| {
            self.arch.width_factor * self.space.total_stage_width()
                + (0..=stage).map(|s| self.space.n_algorithms(s)).sum::<usize>()
        });
        for (k, (old, new)) in self
            .aggregation
            .layers
            .iter()
            .zip(net.aggregation.layers.clone())
            .enumerate()
        {
            match one_hot_col {
                Some(col) if k == 0 => {
                    for o in 0..old.outputs {
                        for i in 0..new.inputs {
                            let v = match i.cmp(&col) {
                                std::cmp::Ordering::Less => {
                                    self.params[old.offset + o * old.inputs + i]
                                }
                                std::cmp::Ordering::Equal => 0.0,
                                std::cmp::Ordering::Greater => {
                                    self.params[old.offset + o * old.inputs + i - 1]
                                }
                            };
                            net.params[new.offset + o * new.inputs + i] = v;
                        }
                    }
                    net.params[new.bias_range()].copy_from_slice(&self.params[old.bias_range()]);
                }
                _ => {
                    net.params[new.offset..new.offset + new.len()]
                        .copy_from_slice(&self.params[old.offset..old.offset + old.len()]);
                }
            }
        }

        let new_alg = space.n_algorithms(stage) - 1;
        net.set_trainable(&TrainableSelector::Encoder {
            stage,
            algorithm: new_alg,
        })?;
        Ok(net)
    }

    pub fn to_checkpoint(&self, kernel: &KernelParams) -> Checkpoint {
        let groups = self
            .groups()
            .map(|g| GroupWeights {
                group: g.id,
                trainable: g.trainable,
                layers: g
                    .layers
                    .iter()
                    .map(|l| LayerWeights {
                        weights: self.params[l.weight_range()]
                            .chunks(l.inputs.max(1))
                            .map(<[f64]>::to_vec)
                            .collect(),
                        bias: self.params[l.bias_range()].to_vec(),
                    })
                    .collect(),
            })
            .collect();
        Checkpoint {
            architecture: self.arch.clone(),
            space_fingerprint: self.space.fingerprint(),
            seed: self.seed,
            kernel: kernel.clone(),
            groups,
            preprocess: None,
            epoch: None,
        }
    }

    /// Restores a network from a checkpoint; the space must match the stored
    /// fingerprint.
    pub fn from_checkpoint(space: &SearchSpace, ck: &Checkpoint) -> Result<(Self, KernelParams)> {
        if space.fingerprint() != ck.space_fingerprint {
            return Err(Error::validation(format!(
                "checkpoint was trained on space {} but {} was given",
                ck.space_fingerprint,
                space.fingerprint()
            )));
        }
        let mut net = EmbeddingNetwork::build(space, &ck.architecture, ck.seed)?;
        if ck.groups.len() != net.groups().count() {
            return Err(Error::shape("checkpoint group count mismatch"));
        }
        for gw in &ck.groups {
            let group = net
                .group(gw.group)
                .cloned()
                .ok_or_else(|| Error::shape(format!("unknown group {:?}", gw.group)))?;
            if group.layers.len() != gw.layers.len() {
                return Err(Error::shape(format!("layer count mismatch in {:?}", gw.group)));
            }
            for (l, lw) in group.layers.iter().zip(&gw.layers) {
                let flat: Vec<f64> = lw.weights.iter().flatten().copied().collect();
                if flat.len() != l.inputs * l.outputs || lw.bias.len() != l.outputs {
                    return Err(Error::shape(format!("weight shape mismatch in {:?}", gw.group)));
                }
                net.params[l.weight_range()].copy_from_slice(&flat);
                net.params[l.bias_range()].copy_from_slice(&lw.bias);
            }
            net.set_group_trainable(gw.group, gw.trainable);
        }
        Ok((net, ck.kernel.clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    /// Row-major, one row per output unit.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub group: GroupId,
    pub trainable: bool,
    pub layers: Vec<LayerWeights>,
}

/// Network weights and kernel parameters as a JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub architecture: ArchitectureSpec,
    pub space_fingerprint: String,
    pub seed: u64,
    pub kernel: KernelParams,
    pub groups: Vec<GroupWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocess: Option<PreprocessStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{HyperparameterSpec, Stage};

    fn tiny_space() -> SearchSpace {
        SearchSpace::new(vec![
            Stage {
                name: "a".into(),
                algorithms: vec![
                    AlgorithmSpec::new("x", vec![HyperparameterSpec::continuous("u", 0.0, 1.0)]),
                    AlgorithmSpec::new(
                        "y",
                        vec![
                            HyperparameterSpec::continuous("v", 0.0, 1.0),
                            HyperparameterSpec::continuous("w", 0.0, 1.0),
                        ],
                    ),
                ],
            },
            Stage {
                name: "b".into(),
                algorithms: vec![AlgorithmSpec::new("z", vec![])],
            },
        ])
        .unwrap()
    }

    #[test]
    fn widths_follow_stage_sizes() {
        let space = tiny_space();
        let arch = ArchitectureSpec {
            embedding_dim: 3,
            ..ArchitectureSpec::new(2, 1)
        };
        let net = EmbeddingNetwork::build(&space, &arch, 0).unwrap();
        let e = net.group(GroupId::Encoder { stage: 0, unit: 1 }).unwrap();
        assert_eq!((e.layers[0].inputs, e.layers[0].outputs), (2, 4));
        // concat: F * (2 + 1)
        assert_eq!(net.aggregation_input_width(), 6);
        assert_eq!(net.aggregation.layers.last().unwrap().outputs, 3);
    }

    #[test]
    fn zero_layers_rejected() {
        let arch = ArchitectureSpec {
            encoder_layers: 0,
            aggregation_layers: 0,
            ..ArchitectureSpec::new(2, 0)
        };
        assert!(EmbeddingNetwork::build(&tiny_space(), &arch, 0).is_err());
    }

    #[test]
    fn selector_strings() {
        assert_eq!("all".parse::<TrainableSelector>().unwrap(), TrainableSelector::All);
        assert_eq!(
            "encoder(1, 2)".parse::<TrainableSelector>().unwrap(),
            TrainableSelector::Encoder {
                stage: 1,
                algorithm: 2
            }
        );
        assert!("decoder".parse::<TrainableSelector>().is_err());
        assert!("encoder(1)".parse::<TrainableSelector>().is_err());
    }

    #[test]
    fn non_finite_input_rejected() {
        let net = EmbeddingNetwork::build(&tiny_space(), &ArchitectureSpec::new(2, 1), 0).unwrap();
        let mask = ActiveMask::new(vec![0, 0]);
        let err = net.forward(&[f64::NAN, 0.0, 0.0, 1.0], &mask).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn non_finite_activation_reports_layer() {
        let mut net =
            EmbeddingNetwork::build(&tiny_space(), &ArchitectureSpec::new(2, 1), 0).unwrap();
        let l = net.aggregation.layers[1].clone();
        net.params[l.bias_range()][0] = f64::INFINITY;
        let err = net
            .forward(&[0.5, 0.0, 0.0, 1.0], &ActiveMask::new(vec![0, 0]))
            .unwrap_err();
        assert!(err.to_string().contains("layer 2"), "{err}");
    }

    #[test]
    fn unknown_encoder_selector_errors() {
        let mut net =
            EmbeddingNetwork::build(&tiny_space(), &ArchitectureSpec::new(2, 0), 0).unwrap();
        assert!(net
            .set_trainable(&TrainableSelector::Encoder {
                stage: 0,
                algorithm: 0
            })
            .is_err());
    }

    #[test]
    fn extension_rejected_without_encoders_or_when_too_wide() {
        let space = tiny_space();
        let flat = EmbeddingNetwork::build(&space, &ArchitectureSpec::new(2, 0), 0).unwrap();
        let algo = AlgorithmSpec::new("n", vec![HyperparameterSpec::continuous("q", 0.0, 1.0)]);
        assert!(matches!(
            flat.add_algorithm_encoder(0, algo.clone(), 1),
            Err(Error::Unsupported(_))
        ));
        let net = EmbeddingNetwork::build(&space, &ArchitectureSpec::new(2, 1), 0).unwrap();
        let wide = AlgorithmSpec::new(
            "n",
            vec![
                HyperparameterSpec::continuous("q", 0.0, 1.0),
                HyperparameterSpec::continuous("r", 0.0, 1.0),
                HyperparameterSpec::continuous("s", 0.0, 1.0),
            ],
        );
        assert!(net.add_algorithm_encoder(0, wide, 1).is_err());
    }

    #[test]
    fn extension_with_one_hot_keeps_embeddings() {
        let space = tiny_space();
        let arch = ArchitectureSpec {
            append_one_hot: true,
            ..ArchitectureSpec::new(2, 1)
        };
        let net = EmbeddingNetwork::build(&space, &arch, 4).unwrap();
        let algo = AlgorithmSpec::new("n", vec![HyperparameterSpec::continuous("q", 0.0, 1.0)]);
        let ext = net.add_algorithm_encoder(0, algo, 9).unwrap();
        let mask = ActiveMask::new(vec![1, 0]);
        let before = net.forward(&[0.0, 0.3, 0.6, 1.0], &mask).unwrap();
        let after = ext.forward(&[0.0, 0.3, 0.6, 0.0, 1.0], &mask).unwrap();
        assert_eq!(before, after);
    }
}
