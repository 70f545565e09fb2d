//! Feature datasets, synthetic stream generation, and task partitioning.
//!
//! A dataset is a flat list of `(feature vector, class id)` pairs. A task
//! stream slices one dataset's classes into an ordered sequence of tasks with
//! pairwise-disjoint label sets, under one of two protocols: `equal` (all
//! tasks the same size) or `half-first` (half the classes up front, the rest
//! split equally).

pub mod io;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class identifier. Contiguous from 0 after ingestion remapping.
pub type ClassId = u32;

/// One frozen feature vector with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeature {
    pub feature: Vec<f32>,
    pub label: ClassId,
}

/// A set of labeled features sharing one dimension.
///
/// `label_universe` is always the exact sorted set of labels present.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureSet {
    dimension: usize,
    examples: Vec<LabeledFeature>,
    label_universe: Vec<ClassId>,
}

impl LabeledFeatureSet {
    /// Build a set, validating dimensions and finiteness of every example.
    pub fn from_examples(dimension: usize, examples: Vec<LabeledFeature>) -> Result<Self> {
        let mut universe = BTreeSet::new();
        for (i, ex) in examples.iter().enumerate() {
            if ex.feature.len() != dimension {
                return Err(Error::Shape(format!(
                    "example {i}: expected dimension {dimension}, got {}",
                    ex.feature.len()
                )));
            }
            if let Some(j) = ex.feature.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "example {i}: non-finite feature value at position {j}"
                )));
            }
            universe.insert(ex.label);
        }
        Ok(Self {
            dimension,
            examples,
            label_universe: universe.into_iter().collect(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn examples(&self) -> &[LabeledFeature] {
        &self.examples
    }

    pub fn label_universe(&self) -> &[ClassId] {
        &self.label_universe
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.label_universe.len()
    }

    /// Subset containing only examples whose label is in `labels`.
    pub fn filter_labels(&self, labels: &[ClassId]) -> LabeledFeatureSet {
        let keep: BTreeSet<ClassId> = labels.iter().copied().collect();
        let examples: Vec<LabeledFeature> = self
            .examples
            .iter()
            .filter(|ex| keep.contains(&ex.label))
            .cloned()
            .collect();
        let universe: BTreeSet<ClassId> = examples.iter().map(|ex| ex.label).collect();
        LabeledFeatureSet {
            dimension: self.dimension,
            examples,
            label_universe: universe.into_iter().collect(),
        }
    }

    /// Mean feature vector of one class, accumulated in f64.
    /// Returns `None` when the class has no examples.
    pub fn class_mean(&self, label: ClassId) -> Option<Vec<f64>> {
        let mut sum = vec![0.0f64; self.dimension];
        let mut count = 0usize;
        for ex in &self.examples {
            if ex.label == label {
                for (s, v) in sum.iter_mut().zip(&ex.feature) {
                    *s += f64::from(*v);
                }
                count += 1;
            }
        }
        if count == 0 {
            return None;
        }
        for s in &mut sum {
            *s /= count as f64;
        }
        Some(sum)
    }
}

/// Class-to-task assignment protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "equal")]
    EqualSplit,
    #[serde(rename = "half-first")]
    HalfFirst,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::EqualSplit => write!(f, "equal"),
            Protocol::HalfFirst => write!(f, "half-first"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal" | "equal-split" => Ok(Protocol::EqualSplit),
            "half-first" => Ok(Protocol::HalfFirst),
            other => Err(Error::Config(format!(
                "unknown protocol '{other}' (expected 'equal' or 'half-first')"
            ))),
        }
    }
}

/// One task: a label set with its train and test splits.
#[derive(Debug, Clone)]
pub struct Task {
    pub label_set: Vec<ClassId>,
    pub train: LabeledFeatureSet,
    pub test: LabeledFeatureSet,
}

/// Ordered sequence of tasks with pairwise-disjoint label sets.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub protocol: Protocol,
}

impl TaskStream {
    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn total_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.label_set.len()).sum()
    }

    /// Sorted union of the label sets of tasks `1..=phase` (1-based).
    pub fn seen_labels(&self, phase: usize) -> Vec<ClassId> {
        let mut seen = BTreeSet::new();
        for task in self.tasks.iter().take(phase) {
            seen.extend(task.label_set.iter().copied());
        }
        seen.into_iter().collect()
    }

    /// Sorted union of all label sets.
    pub fn all_labels(&self) -> Vec<ClassId> {
        self.seen_labels(self.tasks.len())
    }

    /// Check stream invariants: disjoint label sets, examples within their
    /// task's label set, and protocol size rules.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("task stream is empty".into()));
        }
        let mut seen: BTreeSet<ClassId> = BTreeSet::new();
        for (i, task) in self.tasks.iter().enumerate() {
            for &label in &task.label_set {
                if !seen.insert(label) {
                    return Err(Error::Invariant(format!(
                        "label {label} appears in more than one task (task {})",
                        i + 1
                    )));
                }
            }
            let labels: BTreeSet<ClassId> = task.label_set.iter().copied().collect();
            for split in [&task.train, &task.test] {
                for ex in split.examples() {
                    if !labels.contains(&ex.label) {
                        return Err(Error::Invariant(format!(
                            "task {}: example label {} outside task label set",
                            i + 1,
                            ex.label
                        )));
                    }
                }
            }
        }
        let sizes: Vec<usize> = self.tasks.iter().map(|t| t.label_set.len()).collect();
        match self.protocol {
            Protocol::EqualSplit => {
                if sizes.windows(2).any(|w| w[0] != w[1]) {
                    return Err(Error::Invariant(format!(
                        "equal-split task sizes differ: {sizes:?}"
                    )));
                }
            }
            Protocol::HalfFirst => {
                let total: usize = sizes.iter().sum();
                if sizes[0] * 2 != total {
                    return Err(Error::Invariant(format!(
                        "half-first: first task has {} of {} classes",
                        sizes[0], total
                    )));
                }
                if sizes[1..].windows(2).any(|w| w[0] != w[1]) {
                    return Err(Error::Invariant(format!(
                        "half-first remainder task sizes differ: {sizes:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parameters for a synthetic Gaussian-cluster feature stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub class_count: u32,
    pub dimension: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Within-class isotropic standard deviation. Zero collapses every
    /// sample onto its class mean.
    pub cluster_spread: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(Error::Config("class_count must be at least 1".into()));
        }
        if self.dimension == 0 {
            return Err(Error::Config("dimension must be at least 1".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("samples per class must be at least 1".into()));
        }
        if !self.cluster_spread.is_finite() || self.cluster_spread < 0.0 {
            return Err(Error::Config(format!(
                "cluster_spread must be finite and non-negative, got {}",
                self.cluster_spread
            )));
        }
        Ok(())
    }
}

/// Assign an ordered class list to tasks under a protocol, by contiguous
/// slicing. Fails when the counts do not divide.
pub fn partition_classes(
    class_order: &[ClassId],
    task_count: usize,
    protocol: Protocol,
) -> Result<Vec<Vec<ClassId>>> {
    let class_count = class_order.len();
    if task_count == 0 {
        return Err(Error::Config("task count must be at least 1".into()));
    }
    if class_count == 0 {
        return Err(Error::Config("no classes to partition".into()));
    }
    let mut groups = Vec::with_capacity(task_count);
    match protocol {
        Protocol::EqualSplit => {
            if !class_count.is_multiple_of(task_count) {
                return Err(Error::Config(format!(
                    "{class_count} classes not divisible into {task_count} equal tasks"
                )));
            }
            let per_task = class_count / task_count;
            for chunk in class_order.chunks(per_task) {
                groups.push(chunk.to_vec());
            }
        }
        Protocol::HalfFirst => {
            if task_count < 2 {
                return Err(Error::Config(
                    "half-first protocol needs at least 2 tasks".into(),
                ));
            }
            if !class_count.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "half-first protocol needs an even class count, got {class_count}"
                )));
            }
            let half = class_count / 2;
            let rest_tasks = task_count - 1;
            if !half.is_multiple_of(rest_tasks) {
                return Err(Error::Config(format!(
                    "{half} remaining classes not divisible into {rest_tasks} equal tasks"
                )));
            }
            let per_task = half / rest_tasks;
            groups.push(class_order[..half].to_vec());
            for chunk in class_order[half..].chunks(per_task) {
                groups.push(chunk.to_vec());
            }
        }
    }
    Ok(groups)
}

/// Unit-norm class mean vectors for a synthetic configuration.
///
/// Deterministic in `cfg.seed`; draws the exact stream `generate_synthetic_stream`
/// uses, so the returned means match the generated clusters.
pub fn class_means(cfg: &SyntheticConfig) -> Result<Vec<Vec<f64>>> {
    let (means, _, _) = generate_class_data(cfg)?;
    Ok(means)
}

fn unit_sphere_mean(rng: &mut ChaCha12Rng, dimension: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dimension).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

type ClassData = (Vec<Vec<f64>>, Vec<Vec<LabeledFeature>>, Vec<Vec<LabeledFeature>>);

fn generate_class_data(cfg: &SyntheticConfig) -> Result<ClassData> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let d = cfg.dimension;
    let mut means = Vec::with_capacity(cfg.class_count as usize);
    let mut train = Vec::with_capacity(cfg.class_count as usize);
    let mut test = Vec::with_capacity(cfg.class_count as usize);
    for class in 0..cfg.class_count {
        let mean = unit_sphere_mean(&mut rng, d);
        let sample = |rng: &mut ChaCha12Rng| {
            let feature: Vec<f32> = mean
                .iter()
                .map(|m| {
                    let noise: f64 = rng.sample(StandardNormal);
                    (m + cfg.cluster_spread * noise) as f32
                })
                .collect();
            LabeledFeature {
                feature,
                label: class,
            }
        };
        train.push((0..cfg.train_per_class).map(|_| sample(&mut rng)).collect());
        test.push((0..cfg.test_per_class).map(|_| sample(&mut rng)).collect());
        means.push(mean);
    }
    Ok((means, train, test))
}

/// Generate a synthetic task stream: per class, a mean drawn uniformly on the
/// unit sphere plus isotropic Gaussian noise; classes assigned to tasks in id
/// order. Identical configs produce identical streams.
pub fn generate_synthetic_stream(
    cfg: &SyntheticConfig,
    task_count: usize,
    protocol: Protocol,
) -> Result<TaskStream> {
    let class_ids: Vec<ClassId> = (0..cfg.class_count).collect();
    let groups = partition_classes(&class_ids, task_count, protocol)?;
    let (_, train_by_class, test_by_class) = generate_class_data(cfg)?;
    let mut tasks = Vec::with_capacity(groups.len());
    for group in groups {
        let train: Vec<LabeledFeature> = group
            .iter()
            .flat_map(|&c| train_by_class[c as usize].iter().cloned())
            .collect();
        let test: Vec<LabeledFeature> = group
            .iter()
            .flat_map(|&c| test_by_class[c as usize].iter().cloned())
            .collect();
        tasks.push(Task {
            label_set: group,
            train: LabeledFeatureSet::from_examples(cfg.dimension, train)?,
            test: LabeledFeatureSet::from_examples(cfg.dimension, test)?,
        });
    }
    Ok(TaskStream { tasks, protocol })
}

/// Split a train/test dataset pair into a task stream. Class-to-task
/// assignment shuffles the class ids with `seed`, then slices contiguously.
pub fn split_into_tasks(
    train: &LabeledFeatureSet,
    test: &LabeledFeatureSet,
    task_count: usize,
    protocol: Protocol,
    seed: u64,
) -> Result<TaskStream> {
    if train.dimension() != test.dimension() {
        return Err(Error::Shape(format!(
            "train dimension {} differs from test dimension {}",
            train.dimension(),
            test.dimension()
        )));
    }
    let train_universe: BTreeSet<ClassId> = train.label_universe().iter().copied().collect();
    for label in test.label_universe() {
        if !train_universe.contains(label) {
            return Err(Error::Data(format!(
                "test set contains label {label} absent from the train set"
            )));
        }
    }
    let mut order: Vec<ClassId> = train.label_universe().to_vec();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut groups = partition_classes(&order, task_count, protocol)?;
    for group in &mut groups {
        group.sort_unstable();
    }
    let tasks = groups
        .into_iter()
        .map(|group| Task {
            train: train.filter_labels(&group),
            test: test.filter_labels(&group),
            label_set: group,
        })
        .collect();
    Ok(TaskStream { tasks, protocol })
}

/// Batch index plan for one epoch: a shuffle of `0..example_count` cut into
/// consecutive `batch_size` chunks. The final partial batch is kept.
pub fn epoch_batches(
    example_count: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    if example_count == 0 {
        return Err(Error::Sampling("cannot sample from an empty set".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut indices: Vec<usize> = (0..example_count).collect();
    indices.shuffle(rng);
    Ok(indices.chunks(batch_size).map(|c| c.to_vec()).collect())
}
