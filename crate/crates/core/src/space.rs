//! Hierarchical pipeline search spaces.
//!
//! A [`SearchSpace`] is an ordered list of stages, each holding one or more
//! algorithms with their own hyperparameter schema. Categorical
//! hyperparameters are one-hot expanded when the space is loaded, so every
//! algorithm owns a fixed, contiguous block of numeric "slots" in the
//! flattened feature vector. Algorithms without hyperparameters get a single
//! indicator slot.
//!
//! The module also holds the meta-dataset preprocessing statistics
//! ([`PreprocessStats`]) and the pipeline table CSV format.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HyperparameterKind {
    Continuous { low: f64, high: f64 },
    Integer { low: i64, high: i64 },
    Categorical { choices: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: HyperparameterKind,
}

impl HyperparameterSpec {
    pub fn continuous(name: &str, low: f64, high: f64) -> Self {
        HyperparameterSpec {
            name: name.to_string(),
            kind: HyperparameterKind::Continuous { low, high },
        }
    }

    pub fn integer(name: &str, low: i64, high: i64) -> Self {
        HyperparameterSpec {
            name: name.to_string(),
            kind: HyperparameterKind::Integer { low, high },
        }
    }

    pub fn categorical(name: &str, choices: &[&str]) -> Self {
        HyperparameterSpec {
            name: name.to_string(),
            kind: HyperparameterKind::Categorical {
                choices: choices.iter().map(|c| c.to_string()).collect(),
            },
        }
    }

    /// Number of flattened slots (one per category for categoricals).
    pub fn width(&self) -> usize {
        match &self.kind {
            HyperparameterKind::Categorical { choices } => choices.len(),
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSpec {
    pub name: String,
    /// Algorithms of the same stage sharing a tag share one encoder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_group: Option<String>,
    #[serde(default)]
    pub hyperparameters: Vec<HyperparameterSpec>,
}

impl AlgorithmSpec {
    pub fn new(name: &str, hyperparameters: Vec<HyperparameterSpec>) -> Self {
        AlgorithmSpec {
            name: name.to_string(),
            encoder_group: None,
            hyperparameters,
        }
    }

    /// |Λ|: flattened slot count, never zero.
    pub fn width(&self) -> usize {
        if self.hyperparameters.is_empty() {
            1
        } else {
            self.hyperparameters.iter().map(HyperparameterSpec::width).sum()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub algorithms: Vec<AlgorithmSpec>,
}

/// On-disk form of a search space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpaceDocument {
    pub stages: Vec<Stage>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    Numeric { hyperparameter: usize },
    OneHot { hyperparameter: usize, choice: usize },
    Indicator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub name: String,
    pub kind: SlotKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlgorithmLayout {
    pub offset: usize,
    pub slots: Vec<Slot>,
}

impl AlgorithmLayout {
    pub fn width(&self) -> usize {
        self.slots.len()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.slots.len()
    }
}

/// One encoder sub-network; usually a single algorithm, several when the
/// schema groups algorithms with `encoder_group`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderUnit {
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageLayout {
    pub algorithms: Vec<AlgorithmLayout>,
    pub encoders: Vec<EncoderUnit>,
    pub encoder_of: Vec<usize>,
    pub max_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    stages: Vec<Stage>,
    layout: Vec<StageLayout>,
    width: usize,
}

impl Serialize for SearchSpace {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SearchSpaceDocument {
            stages: self.stages.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SearchSpace {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = SearchSpaceDocument::deserialize(d)?;
        SearchSpace::new(doc.stages).map_err(serde::de::Error::custom)
    }
}

impl SearchSpace {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::validation("search space needs at least one stage"));
        }
        let mut seen_stages = HashSet::new();
        let mut layout = Vec::with_capacity(stages.len());
        let mut offset = 0;
        for (si, stage) in stages.iter().enumerate() {
            if !seen_stages.insert(stage.name.as_str()) {
                return Err(Error::validation(format!(
                    "duplicate stage name `{}` at stages[{si}]",
                    stage.name
                )));
            }
            if stage.algorithms.is_empty() {
                return Err(Error::validation(format!(
                    "stage `{}` has no algorithms",
                    stage.name
                )));
            }
            let mut seen_algos = HashSet::new();
            let mut algos = Vec::with_capacity(stage.algorithms.len());
            let mut groups: Vec<(Option<&str>, Vec<usize>)> = Vec::new();
            let mut encoder_of = Vec::with_capacity(stage.algorithms.len());
            for (ai, algo) in stage.algorithms.iter().enumerate() {
                if !seen_algos.insert(algo.name.as_str()) {
                    return Err(Error::validation(format!(
                        "duplicate algorithm name `{}` in stage `{}`",
                        algo.name, stage.name
                    )));
                }
                let slots = algorithm_slots(&stage.name, algo)?;
                algos.push(AlgorithmLayout { offset, slots });
                offset += algos[ai].width();

                let unit = match algo.encoder_group.as_deref() {
                    Some(tag) => match groups.iter().position(|(g, _)| *g == Some(tag)) {
                        Some(u) => u,
                        None => {
                            groups.push((Some(tag), Vec::new()));
                            groups.len() - 1
                        }
                    },
                    None => {
                        groups.push((None, Vec::new()));
                        groups.len() - 1
                    }
                };
                groups[unit].1.push(ai);
                encoder_of.push(unit);
            }
            let max_width = algos.iter().map(AlgorithmLayout::width).max().unwrap_or(1);
            layout.push(StageLayout {
                algorithms: algos,
                encoders: groups
                    .into_iter()
                    .map(|(_, members)| EncoderUnit { members })
                    .collect(),
                encoder_of,
                max_width,
            });
        }
        Ok(SearchSpace {
            stages,
            layout,
            width: offset,
        })
    }

    /// Parses a JSON search-space document, reporting the offending path on
    /// failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let doc: SearchSpaceDocument =
            serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        SearchSpace::new(doc.stages)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("search space serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("search space serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stage_layout(&self, stage: usize) -> &StageLayout {
        &self.layout[stage]
    }

    /// N
    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    /// M_i
    pub fn n_algorithms(&self, stage: usize) -> usize {
        self.stages[stage].algorithms.len()
    }

    /// |Λ_{i,j}|
    pub fn algorithm_width(&self, stage: usize, algorithm: usize) -> usize {
        self.layout[stage].algorithms[algorithm].width()
    }

    /// L_i
    pub fn stage_width(&self, stage: usize) -> usize {
        self.layout[stage].max_width
    }

    /// Σ_i L_i
    pub fn total_stage_width(&self) -> usize {
        self.layout.iter().map(|s| s.max_width).sum()
    }

    /// Σ_i M_i
    pub fn total_algorithms(&self) -> usize {
        self.stages.iter().map(|s| s.algorithms.len()).sum()
    }

    /// Σ_{i,j} |Λ_{i,j}|
    pub fn flat_width(&self) -> usize {
        self.width
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.width);
        for (stage, sl) in self.stages.iter().zip(&self.layout) {
            for (algo, al) in stage.algorithms.iter().zip(&sl.algorithms) {
                for slot in &al.slots {
                    names.push(format!("{}/{}/{}", stage.name, algo.name, slot.name));
                }
            }
        }
        names
    }

    pub fn stage_index(&self, name: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.name == name)
    }

    pub fn algorithm_index(&self, stage: usize, name: &str) -> Option<usize> {
        self.stages[stage]
            .algorithms
            .iter()
            .position(|a| a.name == name)
    }

    /// Returns a copy of this space with `algo` appended to `stage`.
    pub fn with_algorithm(&self, stage: usize, algo: AlgorithmSpec) -> Result<Self> {
        if stage >= self.stages.len() {
            return Err(Error::validation(format!("stage index {stage} out of range")));
        }
        let mut stages = self.stages.clone();
        stages[stage].algorithms.push(algo);
        SearchSpace::new(stages)
    }

    /// Returns a copy of this space without the named algorithm.
    pub fn without_algorithm(&self, stage: usize, name: &str) -> Result<Self> {
        let mut stages = self.stages.clone();
        let before = stages[stage].algorithms.len();
        stages[stage].algorithms.retain(|a| a.name != name);
        if stages[stage].algorithms.len() == before {
            return Err(Error::validation(format!(
                "algorithm `{name}` not found in stage `{}`",
                stages[stage].name
            )));
        }
        SearchSpace::new(stages)
    }

    pub fn validate(&self, config: &PipelineConfiguration) -> Result<()> {
        if config.algorithms.len() != self.n_stages() || config.values.len() != self.n_stages() {
            return Err(Error::validation(format!(
                "configuration has {} stages, space has {}",
                config.algorithms.len(),
                self.n_stages()
            )));
        }
        for (si, stage) in self.stages.iter().enumerate() {
            let ai = config.algorithms[si];
            let algo = stage.algorithms.get(ai).ok_or_else(|| {
                Error::validation(format!(
                    "stage `{}`: algorithm index {ai} out of range (M = {})",
                    stage.name,
                    stage.algorithms.len()
                ))
            })?;
            let values = &config.values[si];
            if values.len() != algo.hyperparameters.len() {
                return Err(Error::validation(format!(
                    "{}/{}: expected {} values, got {}",
                    stage.name,
                    algo.name,
                    algo.hyperparameters.len(),
                    values.len()
                )));
            }
            for (hp, value) in algo.hyperparameters.iter().zip(values) {
                let ok = match (&hp.kind, value) {
                    (HyperparameterKind::Continuous { low, high }, HyperparameterValue::Real(v)) => {
                        v.is_finite() && *v >= *low && *v <= *high
                    }
                    (HyperparameterKind::Integer { low, high }, HyperparameterValue::Int(v)) => {
                        *v >= *low && *v <= *high
                    }
                    (HyperparameterKind::Categorical { choices }, HyperparameterValue::Choice(c)) => {
                        *c < choices.len()
                    }
                    _ => false,
                };
                if !ok {
                    return Err(Error::validation(format!(
                        "{}/{}/{}: invalid value {value:?} for {:?}",
                        stage.name, algo.name, hp.name, hp.kind
                    )));
                }
            }
        }
        Ok(())
    }

    /// Flattens a configuration into raw slot values. Inactive blocks are
    /// zero; categoricals are one-hot; indicator slots are 1 when active.
    pub fn flatten(&self, config: &PipelineConfiguration) -> Result<(Vec<f64>, ActiveMask)> {
        self.validate(config)?;
        let mut features = vec![0.0; self.width];
        for (si, sl) in self.layout.iter().enumerate() {
            let ai = config.algorithms[si];
            let al = &sl.algorithms[ai];
            for (k, slot) in al.slots.iter().enumerate() {
                features[al.offset + k] = match slot.kind {
                    SlotKind::Indicator => 1.0,
                    SlotKind::Numeric { hyperparameter } => {
                        match config.values[si][hyperparameter] {
                            HyperparameterValue::Real(v) => v,
                            HyperparameterValue::Int(v) => v as f64,
                            HyperparameterValue::Choice(_) => unreachable!("validated"),
                        }
                    }
                    SlotKind::OneHot {
                        hyperparameter,
                        choice,
                    } => match config.values[si][hyperparameter] {
                        HyperparameterValue::Choice(c) if c == choice => 1.0,
                        _ => 0.0,
                    },
                };
            }
        }
        Ok((
            features,
            ActiveMask {
                active: config.algorithms.clone(),
            },
        ))
    }

    /// Inverse of [`flatten`](Self::flatten) for raw slot values.
    pub fn unflatten(&self, features: &[f64], mask: &ActiveMask) -> Result<PipelineConfiguration> {
        self.check_mask(mask)?;
        if features.len() != self.width {
            return Err(Error::shape(format!(
                "feature width {} != space width {}",
                features.len(),
                self.width
            )));
        }
        let mut values = Vec::with_capacity(self.n_stages());
        for (si, stage) in self.stages.iter().enumerate() {
            let ai = mask.active[si];
            let algo = &stage.algorithms[ai];
            let al = &self.layout[si].algorithms[ai];
            let block = &features[al.range()];
            let mut stage_values = Vec::with_capacity(algo.hyperparameters.len());
            let mut cursor = 0;
            for hp in &algo.hyperparameters {
                let v = match &hp.kind {
                    HyperparameterKind::Continuous { .. } => HyperparameterValue::Real(block[cursor]),
                    HyperparameterKind::Integer { .. } => {
                        HyperparameterValue::Int(block[cursor].round() as i64)
                    }
                    HyperparameterKind::Categorical { choices } => {
                        let slice = &block[cursor..cursor + choices.len()];
                        let best = slice
                            .iter()
                            .enumerate()
                            .fold(0, |b, (i, &x)| if x > slice[b] { i } else { b });
                        HyperparameterValue::Choice(best)
                    }
                };
                cursor += hp.width();
                stage_values.push(v);
            }
            values.push(stage_values);
        }
        Ok(PipelineConfiguration {
            algorithms: mask.active.clone(),
            values,
        })
    }

    pub fn check_mask(&self, mask: &ActiveMask) -> Result<()> {
        if mask.active.len() != self.n_stages() {
            return Err(Error::shape(format!(
                "mask has {} stages, space has {}",
                mask.active.len(),
                self.n_stages()
            )));
        }
        for (si, &a) in mask.active.iter().enumerate() {
            if a >= self.n_algorithms(si) {
                return Err(Error::validation(format!(
                    "mask selects algorithm {a} in stage {si} with M = {}",
                    self.n_algorithms(si)
                )));
            }
        }
        Ok(())
    }

    /// Uniformly random configuration: algorithm per stage, then each
    /// hyperparameter uniform within its bounds.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PipelineConfiguration {
        let algorithms: Vec<usize> = self
            .stages
            .iter()
            .map(|s| rng.random_range(0..s.algorithms.len()))
            .collect();
        self.sample_with(&algorithms, rng)
    }

    /// Random hyperparameters for a fixed algorithm choice.
    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        algorithms: &[usize],
        rng: &mut R,
    ) -> PipelineConfiguration {
        let values = self
            .stages
            .iter()
            .zip(algorithms)
            .map(|(stage, &ai)| {
                stage.algorithms[ai]
                    .hyperparameters
                    .iter()
                    .map(|hp| match &hp.kind {
                        HyperparameterKind::Continuous { low, high } => {
                            HyperparameterValue::Real(if high > low {
                                rng.random_range(*low..=*high)
                            } else {
                                *low
                            })
                        }
                        HyperparameterKind::Integer { low, high } => {
                            HyperparameterValue::Int(rng.random_range(*low..=*high))
                        }
                        HyperparameterKind::Categorical { choices } => {
                            HyperparameterValue::Choice(rng.random_range(0..choices.len()))
                        }
                    })
                    .collect()
            })
            .collect();
        PipelineConfiguration {
            algorithms: algorithms.to_vec(),
            values,
        }
    }

    fn owners(&self) -> Vec<(usize, usize, SlotKind)> {
        let mut owners = Vec::with_capacity(self.width);
        for (si, sl) in self.layout.iter().enumerate() {
            for (ai, al) in sl.algorithms.iter().enumerate() {
                for slot in &al.slots {
                    owners.push((si, ai, slot.kind.clone()));
                }
            }
        }
        owners
    }

    fn bounds_of(&self, stage: usize, algorithm: usize, kind: &SlotKind) -> Option<(f64, f64)> {
        match kind {
            SlotKind::Numeric { hyperparameter } => {
                match &self.stages[stage].algorithms[algorithm].hyperparameters[*hyperparameter].kind
                {
                    HyperparameterKind::Continuous { low, high } => Some((*low, *high)),
                    HyperparameterKind::Integer { low, high } => Some((*low as f64, *high as f64)),
                    HyperparameterKind::Categorical { .. } => None,
                }
            }
            _ => None,
        }
    }
}

fn algorithm_slots(stage: &str, algo: &AlgorithmSpec) -> Result<Vec<Slot>> {
    let mut seen = HashSet::new();
    let mut slots = Vec::new();
    for (hi, hp) in algo.hyperparameters.iter().enumerate() {
        if !seen.insert(hp.name.as_str()) {
            return Err(Error::validation(format!(
                "duplicate hyperparameter `{}` in {stage}/{}",
                hp.name, algo.name
            )));
        }
        match &hp.kind {
            HyperparameterKind::Continuous { low, high } => {
                if !(low.is_finite() && high.is_finite() && low <= high) {
                    return Err(Error::validation(format!(
                        "{stage}/{}/{}: bad bounds [{low}, {high}]",
                        algo.name, hp.name
                    )));
                }
                slots.push(Slot {
                    name: hp.name.clone(),
                    kind: SlotKind::Numeric { hyperparameter: hi },
                });
            }
            HyperparameterKind::Integer { low, high } => {
                if low > high {
                    return Err(Error::validation(format!(
                        "{stage}/{}/{}: bad bounds [{low}, {high}]",
                        algo.name, hp.name
                    )));
                }
                slots.push(Slot {
                    name: hp.name.clone(),
                    kind: SlotKind::Numeric { hyperparameter: hi },
                });
            }
            HyperparameterKind::Categorical { choices } => {
                if choices.is_empty() {
                    return Err(Error::validation(format!(
                        "{stage}/{}/{}: categorical with no choices",
                        algo.name, hp.name
                    )));
                }
                let mut seen_choices = HashSet::new();
                for (ci, c) in choices.iter().enumerate() {
                    if !seen_choices.insert(c.as_str()) {
                        return Err(Error::validation(format!(
                            "{stage}/{}/{}: duplicate choice `{c}`",
                            algo.name, hp.name
                        )));
                    }
                    slots.push(Slot {
                        name: format!("{}_{}", hp.name, c),
                        kind: SlotKind::OneHot {
                            hyperparameter: hi,
                            choice: ci,
                        },
                    });
                }
            }
        }
    }
    if slots.is_empty() {
        slots.push(Slot {
            name: format!("apply_{}", algo.name),
            kind: SlotKind::Indicator,
        });
    }
    Ok(slots)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum HyperparameterValue {
    Real(f64),
    Int(i64),
    Choice(usize),
}

/// p_λ: the algorithm chosen per stage plus its hyperparameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfiguration {
    pub algorithms: Vec<usize>,
    pub values: Vec<Vec<HyperparameterValue>>,
}

/// The active algorithm of each stage.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActiveMask {
    pub active: Vec<usize>,
}

impl ActiveMask {
    pub fn new(active: Vec<usize>) -> Self {
        ActiveMask { active }
    }

    /// One-hot selection vector of length M_i for `stage`.
    pub fn one_hot(&self, space: &SearchSpace, stage: usize) -> Vec<f64> {
        let mut v = vec![0.0; space.n_algorithms(stage)];
        v[self.active[stage]] = 1.0;
        v
    }

    /// Concatenation of all stage one-hots (length Σ_i M_i).
    pub fn one_hots(&self, space: &SearchSpace) -> Vec<f64> {
        (0..space.n_stages())
            .flat_map(|s| self.one_hot(space, s))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTransform {
    /// One-hot and indicator slots are already in {0, 1}.
    Passthrough,
    MinMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub name: String,
    pub stage: usize,
    pub algorithm: usize,
    pub transform: FeatureTransform,
    pub log_flag: bool,
    pub min: f64,
    pub max: f64,
}

impl FeatureStats {
    pub fn is_constant(&self) -> bool {
        self.max <= self.min
    }
}

/// Per-feature log flag and range, fitted on a pipeline table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub space_fingerprint: String,
    pub features: Vec<FeatureStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scaled {
    pub values: Vec<f64>,
    /// Log-scaled features that received a non-positive value.
    pub nonpositive_clamps: usize,
}

impl PreprocessStats {
    /// Fits statistics feature by feature. Only rows in which the feature's
    /// algorithm is active contribute, since inactive blocks are zero-filled.
    pub fn fit(space: &SearchSpace, rows: &[Vec<f64>], masks: &[ActiveMask]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::validation("cannot fit preprocessing on an empty table"));
        }
        if rows.len() != masks.len() {
            return Err(Error::shape("rows and masks differ in length"));
        }
        for (r, m) in rows.iter().zip(masks) {
            if r.len() != space.flat_width() {
                return Err(Error::shape(format!(
                    "row width {} != space width {}",
                    r.len(),
                    space.flat_width()
                )));
            }
            space.check_mask(m)?;
        }
        let names = space.feature_names();
        let mut features = Vec::with_capacity(space.flat_width());
        for (f, (stage, algorithm, kind)) in space.owners().into_iter().enumerate() {
            let transform = match kind {
                SlotKind::Numeric { .. } => FeatureTransform::MinMax,
                _ => FeatureTransform::Passthrough,
            };
            let values: Vec<f64> = rows
                .iter()
                .zip(masks)
                .filter(|(_, m)| m.active[stage] == algorithm)
                .map(|(r, _)| r[f])
                .collect();
            let (log_flag, min, max) = match transform {
                FeatureTransform::Passthrough => (false, 0.0, 1.0),
                FeatureTransform::MinMax => fit_feature(&values),
            };
            features.push(FeatureStats {
                name: names[f].clone(),
                stage,
                algorithm,
                transform,
                log_flag,
                min,
                max,
            });
        }
        Ok(PreprocessStats {
            space_fingerprint: space.fingerprint(),
            features,
        })
    }

    /// Linear scaling by the schema's declared bounds, no log transform.
    pub fn from_space_bounds(space: &SearchSpace) -> Self {
        let names = space.feature_names();
        let features = space
            .owners()
            .into_iter()
            .enumerate()
            .map(|(f, (stage, algorithm, kind))| {
                let bounds = space.bounds_of(stage, algorithm, &kind);
                let (transform, (min, max)) = match bounds {
                    Some(b) => (FeatureTransform::MinMax, b),
                    None => (FeatureTransform::Passthrough, (0.0, 1.0)),
                };
                FeatureStats {
                    name: names[f].clone(),
                    stage,
                    algorithm,
                    transform,
                    log_flag: false,
                    min,
                    max,
                }
            })
            .collect();
        PreprocessStats {
            space_fingerprint: space.fingerprint(),
            features,
        }
    }

    pub fn width(&self) -> usize {
        self.features.len()
    }

    /// Scales a single value of feature `f`. Returns the scaled value and
    /// whether a non-positive input had to be clamped before the log.
    pub fn apply_value(&self, f: usize, x: f64) -> (f64, bool) {
        let st = &self.features[f];
        match st.transform {
            FeatureTransform::Passthrough => (x.clamp(0.0, 1.0), false),
            FeatureTransform::MinMax => {
                if st.is_constant() {
                    return (0.0, false);
                }
                let (g, clamped) = if st.log_flag {
                    if x <= 0.0 {
                        (st.min, true)
                    } else {
                        (x.ln(), false)
                    }
                } else {
                    (x, false)
                };
                (((g - st.min) / (st.max - st.min)).clamp(0.0, 1.0), clamped)
            }
        }
    }

    /// Scales a flattened vector; blocks of inactive algorithms stay zero.
    pub fn apply(&self, features: &[f64], mask: &ActiveMask) -> Result<Scaled> {
        if features.len() != self.width() {
            return Err(Error::shape(format!(
                "feature width {} != stats width {}",
                features.len(),
                self.width()
            )));
        }
        let mut nonpositive_clamps = 0;
        let values = features
            .iter()
            .enumerate()
            .map(|(f, &x)| {
                let st = &self.features[f];
                if mask.active.get(st.stage) != Some(&st.algorithm) {
                    return 0.0;
                }
                let (v, clamped) = self.apply_value(f, x);
                nonpositive_clamps += clamped as usize;
                v
            })
            .collect();
        if nonpositive_clamps > 0 {
            log::warn!("{nonpositive_clamps} non-positive value(s) clamped on log-scaled features");
        }
        Ok(Scaled {
            values,
            nonpositive_clamps,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

/// Heavy-tail rule: log-transform a strictly positive feature when any value
/// lies above mean + 3 standard deviations; then record the range.
fn fit_feature(values: &[f64]) -> (bool, f64, f64) {
    if values.is_empty() {
        return (false, 0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let threshold = mean + 3.0 * var.sqrt();
    let positive = values.iter().all(|&v| v > 0.0);
    let log_flag = positive && values.iter().any(|&v| v > threshold);
    let transformed = values.iter().map(|&v| if log_flag { v.ln() } else { v });
    let (min, max) = transformed.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    (log_flag, min, max)
}

/// Pipelines keyed by id: raw flattened features plus the active mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineTable {
    pub ids: Vec<u64>,
    pub rows: Vec<Vec<f64>>,
    pub masks: Vec<ActiveMask>,
}

const ALGO_PREFIX: &str = "algo:";

impl PipelineTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Reads `pipeline_id, algo:<stage>..., <feature names>...`.
    pub fn read_csv(space: &SearchSpace, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, &e))?;
        let header = reader.headers().map_err(|e| Error::csv(path, &e))?.clone();
        let expected = Self::header(space);
        if header.iter().collect::<Vec<_>>() != expected.iter().map(String::as_str).collect::<Vec<_>>()
        {
            return Err(Error::Csv {
                file: path.to_path_buf(),
                line: 1,
                message: format!(
                    "header does not match the search space ({} columns expected, {} found)",
                    expected.len(),
                    header.len()
                ),
            });
        }
        let n = space.n_stages();
        let mut table = PipelineTable {
            ids: Vec::new(),
            rows: Vec::new(),
            masks: Vec::new(),
        };
        let mut seen = HashSet::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::csv(path, &e))?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let bad = |message: String| Error::Csv {
                file: path.to_path_buf(),
                line,
                message,
            };
            let id: u64 = record[0]
                .trim()
                .parse()
                .map_err(|_| bad(format!("invalid pipeline_id `{}`", &record[0])))?;
            if !seen.insert(id) {
                return Err(bad(format!("duplicate pipeline_id {id}")));
            }
            let mut active = Vec::with_capacity(n);
            for s in 0..n {
                let name = record[1 + s].trim();
                let a = space
                    .algorithm_index(s, name)
                    .ok_or_else(|| bad(format!("unknown algorithm `{name}` in stage {s}")))?;
                active.push(a);
            }
            let row = record
                .iter()
                .skip(1 + n)
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| bad(format!("invalid number `{v}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            table.ids.push(id);
            table.rows.push(row);
            table.masks.push(ActiveMask::new(active));
        }
        Ok(table)
    }

    pub fn write_csv(&self, space: &SearchSpace, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, &e))?;
        w.write_record(Self::header(space))
            .map_err(|e| Error::csv(path, &e))?;
        for ((id, row), mask) in self.ids.iter().zip(&self.rows).zip(&self.masks) {
            let mut rec = Vec::with_capacity(row.len() + 1 + mask.active.len());
            rec.push(id.to_string());
            for (s, &a) in mask.active.iter().enumerate() {
                rec.push(space.stages()[s].algorithms[a].name.clone());
            }
            rec.extend(row.iter().map(|v| format_float(*v)));
            w.write_record(&rec).map_err(|e| Error::csv(path, &e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn header(space: &SearchSpace) -> Vec<String> {
        let mut h = vec!["pipeline_id".to_string()];
        h.extend(space.stages().iter().map(|s| format!("{ALGO_PREFIX}{}", s.name)));
        h.extend(space.feature_names());
        h
    }

    pub fn index_of(&self) -> BTreeMap<u64, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }
}

/// Shortest representation that round-trips through `parse::<f64>`.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:?}")
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: format!("{}: {}", path.display(), e.path()),
        message: e.inner().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_stage() -> SearchSpace {
        SearchSpace::new(vec![
            Stage {
                name: "Preprocessor".into(),
                algorithms: vec![
                    AlgorithmSpec::new(
                        "Polynomial",
                        vec![
                            HyperparameterSpec::integer("include_bias", 0, 1),
                            HyperparameterSpec::integer("interaction_only", 0, 1),
                            HyperparameterSpec::integer("degree", 2, 3),
                        ],
                    ),
                    AlgorithmSpec::new(
                        "PCA",
                        vec![
                            HyperparameterSpec::continuous("keep_variance", 0.5, 0.999),
                            HyperparameterSpec::integer("whiten", 0, 1),
                        ],
                    ),
                ],
            },
            Stage {
                name: "Estimator".into(),
                algorithms: vec![AlgorithmSpec::new(
                    "kNN",
                    vec![
                        HyperparameterSpec::integer("p", 1, 2),
                        HyperparameterSpec::integer("n_neighbors", 1, 50),
                        HyperparameterSpec::categorical("weights", &["distance", "uniform"]),
                    ],
                )],
            },
        ])
        .unwrap()
    }

    #[test]
    fn counts_from_schema() {
        let s = two_stage();
        assert_eq!(s.n_stages(), 2);
        assert_eq!((s.n_algorithms(0), s.n_algorithms(1)), (2, 1));
        assert_eq!((s.stage_width(0), s.stage_width(1)), (3, 4));
        assert_eq!(s.flat_width(), 9);
        assert_eq!(s.feature_names().len(), 9);
    }

    #[test]
    fn duplicate_names_rejected() {
        let hp = HyperparameterSpec::continuous("a", 0.0, 1.0);
        let err = SearchSpace::new(vec![Stage {
            name: "s".into(),
            algorithms: vec![
                AlgorithmSpec::new("x", vec![hp.clone()]),
                AlgorithmSpec::new("x", vec![hp.clone()]),
            ],
        }])
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));

        let err = SearchSpace::new(vec![Stage {
            name: "s".into(),
            algorithms: vec![AlgorithmSpec::new("x", vec![hp.clone(), hp])],
        }])
        .unwrap_err();
        assert!(err.to_string().contains("duplicate hyperparameter"));
    }

    #[test]
    fn parse_error_names_path() {
        let doc = r#"{"stages":[{"name":"a","algorithms":[{"name":"x","hyperparameters":[{"name":"h","kind":"continuous","low":"zero","high":1}]}]}]}"#;
        match SearchSpace::from_json(doc).unwrap_err() {
            Error::Parse { path, .. } => assert!(path.starts_with("stages[0].algorithms[0]"), "{path}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn inactive_block_zero_and_one_hot() {
        let s = two_stage();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = s.sample_with(&[1, 0], &mut rng);
        let (x, mask) = s.flatten(&cfg).unwrap();
        let poly = s.stage_layout(0).algorithms[0].range();
        assert!(x[poly].iter().all(|&v| v == 0.0));
        assert_eq!(mask.one_hot(&s, 0), vec![0.0, 1.0]);
        assert_eq!(mask.one_hots(&s).iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn lower_bounds_scale_to_zero() {
        let s = SearchSpace::new(vec![Stage {
            name: "s".into(),
            algorithms: vec![
                AlgorithmSpec::new(
                    "a",
                    vec![
                        HyperparameterSpec::continuous("u", 2.0, 4.0),
                        HyperparameterSpec::integer("k", 1, 9),
                    ],
                ),
                AlgorithmSpec::new("b", vec![HyperparameterSpec::continuous("v", -1.0, 1.0)]),
            ],
        }])
        .unwrap();
        let cfg = PipelineConfiguration {
            algorithms: vec![0],
            values: vec![vec![HyperparameterValue::Real(2.0), HyperparameterValue::Int(1)]],
        };
        let (x, mask) = s.flatten(&cfg).unwrap();
        let stats = PreprocessStats::from_space_bounds(&s);
        let scaled = stats.apply(&x, &mask).unwrap();
        assert!(scaled.values.iter().all(|&v| v == 0.0));
        assert_eq!(mask.active, vec![0]);
    }

    #[test]
    fn invalid_config_rejected() {
        let s = two_stage();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = s.sample(&mut rng);
        cfg.algorithms[0] = 5;
        assert!(s.flatten(&cfg).is_err());
        let mut cfg = s.sample_with(&[1, 0], &mut rng);
        cfg.values[0][0] = HyperparameterValue::Real(2.0);
        assert!(s.flatten(&cfg).is_err());
    }

    #[test]
    fn flat_width_constant() {
        let s = two_stage();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (x, _) = s.flatten(&s.sample(&mut rng)).unwrap();
            assert_eq!(x.len(), s.flat_width());
        }
    }

    #[test]
    fn fit_plain_feature() {
        assert_eq!(fit_feature(&[1.0, 2.0, 3.0]), (false, 1.0, 3.0));
    }

    #[test]
    fn fit_heavy_tail_feature() {
        let mut v = vec![1.0; 30];
        v.push(1000.0);
        let (log_flag, min, max) = fit_feature(&v);
        assert!(log_flag);
        assert_eq!(min, 0.0);
        assert!((max - 1000f64.ln()).abs() < 1e-12);
        // the same tail with a zero present is not eligible
        v[0] = 0.0;
        assert!(!fit_feature(&v).0);
    }

    fn numeric_stats(log_flag: bool, min: f64, max: f64) -> PreprocessStats {
        PreprocessStats {
            space_fingerprint: String::new(),
            features: vec![FeatureStats {
                name: "f".into(),
                stage: 0,
                algorithm: 0,
                transform: FeatureTransform::MinMax,
                log_flag,
                min,
                max,
            }],
        }
    }

    #[test]
    fn apply_endpoints_log_and_clamp() {
        let st = numeric_stats(false, 1.0, 3.0);
        assert_eq!(st.apply_value(0, 1.0).0, 0.0);
        assert_eq!(st.apply_value(0, 3.0).0, 1.0);
        assert_eq!(st.apply_value(0, 4.0).0, 1.0);
        let st = numeric_stats(true, 0.0, 100f64.ln());
        assert!((st.apply_value(0, 10.0).0 - 0.5).abs() < 1e-12);
        assert_eq!(st.apply_value(0, -3.0), (0.0, true));
        let scaled = st.apply(&[-1.0], &ActiveMask::new(vec![0])).unwrap();
        assert_eq!(scaled.nonpositive_clamps, 1);
    }

    #[test]
    fn constant_feature_maps_to_zero() {
        let (log_flag, min, max) = fit_feature(&[5.0, 5.0, 5.0]);
        let st = numeric_stats(log_flag, min, max);
        assert!(st.features[0].is_constant());
        assert_eq!(st.apply_value(0, 5.0).0, 0.0);
    }

    #[test]
    fn encoder_groups() {
        let mut a = AlgorithmSpec::new("nb1", vec![]);
        a.encoder_group = Some("nb".into());
        let mut b = AlgorithmSpec::new("nb2", vec![HyperparameterSpec::continuous("alpha", 0.0, 1.0)]);
        b.encoder_group = Some("nb".into());
        let c = AlgorithmSpec::new("tree", vec![HyperparameterSpec::continuous("d", 0.0, 1.0)]);
        let s = SearchSpace::new(vec![Stage {
            name: "est".into(),
            algorithms: vec![a, c, b],
        }])
        .unwrap();
        let sl = s.stage_layout(0);
        assert_eq!(sl.encoders.len(), 2);
        assert_eq!(sl.encoders[0].members, vec![0, 2]);
        assert_eq!(sl.encoder_of, vec![0, 1, 0]);
    }
}
