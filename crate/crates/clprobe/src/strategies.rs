//! Replay strategy lattice around a shared per-task training loop.
//!
//! Five variants cover the cross of two switches on top of plain experience
//! replay: freezing the classifier columns of past classes, and rebalancing
//! the replay loss against the current-task loss.
//!
//! | variant  | freeze old columns | rebalance |
//! |----------|--------------------|-----------|
//! | finetune | -                  | -         |
//! | er       | no                 | no        |
//! | er-fix   | yes                | no        |
//! | er-bal   | no                 | yes       |
//! | taer     | yes                | yes       |
//!
//! With rebalance on, the combined step objective is
//! `(1 - lambda) * current_loss + lambda * replay_loss` with
//! `lambda = old_classes / total_classes`, which weights the stored classes
//! as if every class were sampled equally. Without it both losses weigh 1.
//! Frozen columns always stay in the softmax denominator.

use std::collections::BTreeSet;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, GradientSlice, InitMode, OptimizerConfig};
use crate::data::{epoch_batches, ClassId, LabeledFeature, Task, TaskStream};
use crate::error::{Error, Result};
use crate::memory::EpisodicMemory;
use crate::metrics::{
    self, ConfusionMatrix, ExperimentReport, PhaseMetrics, REPORT_FORMAT_VERSION,
};

/// Strategy variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "finetune")]
    Finetune,
    #[serde(rename = "er")]
    Er,
    #[serde(rename = "er-fix")]
    ErFix,
    #[serde(rename = "er-bal")]
    ErBal,
    #[serde(rename = "taer")]
    TaEr,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Finetune,
        Variant::Er,
        Variant::ErFix,
        Variant::ErBal,
        Variant::TaEr,
    ];

    /// Old-class columns are excluded from updates.
    pub fn freeze_old(self) -> bool {
        matches!(self, Variant::ErFix | Variant::TaEr)
    }

    /// Replay loss is weighted by the old-class fraction.
    pub fn rebalance(self) -> bool {
        matches!(self, Variant::ErBal | Variant::TaEr)
    }

    pub fn uses_memory(self) -> bool {
        !matches!(self, Variant::Finetune)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Finetune => "finetune",
            Variant::Er => "er",
            Variant::ErFix => "er-fix",
            Variant::ErBal => "er-bal",
            Variant::TaEr => "taer",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Variant::Finetune),
            "er" => Ok(Variant::Er),
            "er-fix" => Ok(Variant::ErFix),
            "er-bal" => Ok(Variant::ErBal),
            "taer" => Ok(Variant::TaEr),
            other => Err(Error::Config(format!(
                "unknown strategy '{other}' (expected finetune, er, er-fix, er-bal or taer)"
            ))),
        }
    }
}

/// Full configuration of one training strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub variant: Variant,
    pub optimizer: OptimizerConfig,
    pub memory_capacity: usize,
    /// Initialize new columns with class-mean features instead of zeros.
    pub class_mean_init: bool,
}

impl StrategyConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            optimizer: OptimizerConfig::default(),
            memory_capacity: 200,
            class_mean_init: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.variant.uses_memory() && self.memory_capacity == 0 {
            return Err(Error::Config(format!(
                "strategy '{}' replays from memory but the capacity is 0",
                self.variant
            )));
        }
        Ok(())
    }
}

/// Mutable state carried across tasks.
#[derive(Debug, Clone)]
pub struct PhaseState {
    pub classifier: Classifier,
    pub memory: EpisodicMemory,
    /// Number of tasks trained so far.
    pub task_index: usize,
    /// Sorted union of all label sets trained so far.
    pub seen_labels: Vec<ClassId>,
}

impl PhaseState {
    pub fn new(dim: usize, memory_capacity: usize) -> Self {
        Self {
            classifier: Classifier::new(dim),
            memory: EpisodicMemory::new(memory_capacity),
            task_index: 0,
            seen_labels: Vec::new(),
        }
    }
}

/// Replay weight `old / total`; zero for the first task.
pub fn compute_lambda(old_class_count: usize, total_class_count: usize) -> Result<f64> {
    if total_class_count == 0 {
        return Err(Error::Config("lambda over zero total classes".into()));
    }
    if old_class_count > total_class_count {
        return Err(Error::Config(format!(
            "old class count {old_class_count} exceeds total {total_class_count}"
        )));
    }
    Ok(old_class_count as f64 / total_class_count as f64)
}

/// Combined loss and masked gradient for one update step.
///
/// `old_class_count` is the number of classes seen before the current task;
/// the classifier must already be expanded to the full current label set.
pub fn phase_loss(
    classifier: &Classifier,
    old_class_count: usize,
    current_batch: &[&LabeledFeature],
    replay_batch: Option<&[&LabeledFeature]>,
    config: &StrategyConfig,
) -> Result<GradientSlice> {
    let replay_expected = config.variant.uses_memory() && old_class_count > 0;
    match (replay_expected, replay_batch.is_some()) {
        (true, false) => {
            return Err(Error::Strategy(format!(
                "strategy '{}' requires a replay batch after the first task",
                config.variant
            )))
        }
        (false, true) => {
            return Err(Error::Strategy(format!(
                "strategy '{}' does not take a replay batch here",
                config.variant
            )))
        }
        _ => {}
    }
    let (current_weight, replay_weight) = if config.variant.rebalance() {
        let lambda = compute_lambda(old_class_count, classifier.column_count())?;
        (1.0 - lambda, lambda)
    } else {
        (1.0, 1.0)
    };
    let mut slice = classifier.loss_and_grad_masked(current_batch, current_weight)?;
    if let Some(replay) = replay_batch {
        let replay_slice = classifier.loss_and_grad_masked(replay, replay_weight)?;
        slice.accumulate(&replay_slice)?;
    }
    Ok(slice)
}

/// Samples drawn for one optimizer step; handed to observers for
/// instrumentation.
pub struct StepDraw<'a> {
    pub epoch: usize,
    pub step: usize,
    /// Indices into the current task's training set.
    pub current_indices: &'a [usize],
    pub replay: Option<&'a [LabeledFeature]>,
}

/// Train one task and update the memory at the boundary.
pub fn train_task(
    state: PhaseState,
    task: &Task,
    config: &StrategyConfig,
    rng: &mut ChaCha12Rng,
) -> Result<PhaseState> {
    train_task_observed(state, task, config, rng, &mut |_| {})
}

/// `train_task` with a per-step observer over the drawn samples.
///
/// The RNG consumption schedule depends only on the data, the optimizer
/// settings and the memory contents, never on the variant's loss weighting
/// or gradient mask, so replay variants see identical sample streams under
/// the same seed.
pub fn train_task_observed(
    mut state: PhaseState,
    task: &Task,
    config: &StrategyConfig,
    rng: &mut ChaCha12Rng,
    observe: &mut dyn FnMut(&StepDraw<'_>),
) -> Result<PhaseState> {
    config.validate()?;
    if task.train.is_empty() {
        return Err(Error::Strategy("task has no training examples".into()));
    }
    let seen: BTreeSet<ClassId> = state.seen_labels.iter().copied().collect();
    for label in &task.label_set {
        if seen.contains(label) {
            return Err(Error::Strategy(format!(
                "task class {label} was already trained"
            )));
        }
    }

    let old_class_count = state.classifier.column_count();
    let init = if config.class_mean_init {
        InitMode::ClassMean(&task.train)
    } else {
        InitMode::Zeros
    };
    state
        .classifier
        .expand(&task.label_set, init, config.variant.freeze_old())?;

    let replay_active = config.variant.uses_memory() && old_class_count > 0;
    if replay_active && state.memory.is_empty() {
        return Err(Error::Replay(
            "replay strategy reached a later task with an empty memory".into(),
        ));
    }

    let opt = &config.optimizer;
    for epoch in 0..opt.epochs {
        let batches = epoch_batches(task.train.len(), opt.batch_size, rng)?;
        for (step, indices) in batches.iter().enumerate() {
            let current: Vec<&LabeledFeature> = indices
                .iter()
                .map(|&i| &task.train.examples()[i])
                .collect();
            let replay_owned = if replay_active {
                Some(state.memory.sample_replay_batch(current.len(), rng)?)
            } else {
                None
            };
            observe(&StepDraw {
                epoch,
                step,
                current_indices: indices,
                replay: replay_owned.as_deref(),
            });
            let replay_refs: Option<Vec<&LabeledFeature>> =
                replay_owned.as_ref().map(|v| v.iter().collect());
            let slice = phase_loss(
                &state.classifier,
                old_class_count,
                &current,
                replay_refs.as_deref(),
                config,
            )?;
            state.classifier.sgd_step(&slice, opt.learning_rate)?;
        }
    }

    let mut seen_after: Vec<ClassId> = seen.into_iter().collect();
    seen_after.extend(task.label_set.iter().copied());
    seen_after.sort_unstable();
    if config.variant.uses_memory() {
        state.memory.update(&task.train, &seen_after, rng)?;
    }
    state.task_index += 1;
    state.seen_labels = seen_after;
    Ok(state)
}

/// Classifier and metrics captured after one phase.
#[derive(Debug, Clone)]
pub struct PhaseSnapshot {
    pub phase: usize,
    pub classifier: Classifier,
    pub metrics: PhaseMetrics,
    pub memory_counts: std::collections::BTreeMap<ClassId, usize>,
}

/// Everything produced by one seeded sequence run.
#[derive(Debug, Clone)]
pub struct SequenceOutcome {
    pub report: ExperimentReport,
    pub snapshots: Vec<PhaseSnapshot>,
    pub final_state: PhaseState,
}

/// Fold `train_task` over the stream, snapshotting the classifier and
/// metrics after every phase. Deterministic in `seed`.
pub fn run_sequence(
    stream: &TaskStream,
    config: &StrategyConfig,
    seed: u64,
    config_echo: serde_json::Value,
) -> Result<SequenceOutcome> {
    let started = Instant::now();
    config.validate()?;
    stream.validate()?;
    let dim = stream.tasks[0].train.dimension();
    let mut state = PhaseState::new(dim, config.memory_capacity);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut snapshots: Vec<PhaseSnapshot> = Vec::with_capacity(stream.task_count());

    for (i, task) in stream.tasks.iter().enumerate() {
        let phase = i + 1;
        state = train_task(state, task, config, &mut rng)
            .map_err(|e| Error::Strategy(format!("phase {phase}: {e}")))?;
        let metrics = evaluate_phase(&state, stream, phase)?;
        snapshots.push(PhaseSnapshot {
            phase,
            classifier: state.classifier.clone(),
            metrics,
            memory_counts: state.memory.per_class_counts(),
        });
    }

    let final_phase = snapshots
        .last()
        .ok_or_else(|| Error::Strategy("empty task stream".into()))?;
    let average_accuracy = metrics::average_accuracy(&final_phase.metrics.per_task_accuracy)?;
    let alphas: Vec<f64> = snapshots
        .iter()
        .map(|s| s.metrics.incremental_accuracy)
        .collect();
    let average_incremental_accuracy = metrics::average_incremental_accuracy(&alphas)?;

    let mut preserved = Vec::with_capacity(stream.task_count());
    for t in 1..=stream.task_count() {
        let labels = stream.seen_labels(t);
        preserved.push(metrics::preserved_accuracy(
            &state.classifier,
            &stream.tasks[t - 1].test,
            &labels,
        )?);
    }
    let confusion = final_confusion(&state.classifier, stream)?;

    let report = ExperimentReport {
        format_version: REPORT_FORMAT_VERSION,
        config: config_echo,
        seed,
        phases: snapshots.iter().map(|s| s.metrics.clone()).collect(),
        average_accuracy,
        average_incremental_accuracy,
        preserved_accuracy: preserved,
        confusion,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(SequenceOutcome {
        report,
        snapshots,
        final_state: state,
    })
}

fn evaluate_phase(state: &PhaseState, stream: &TaskStream, phase: usize) -> Result<PhaseMetrics> {
    let clf = &state.classifier;
    let seen = stream.seen_labels(phase);
    let per_task_accuracy: Vec<f64> = (0..phase)
        .map(|k| metrics::task_accuracy(clf, &stream.tasks[k].test, &seen))
        .collect::<Result<_>>()?;
    let pooled: Vec<&crate::data::LabeledFeatureSet> =
        (0..phase).map(|k| &stream.tasks[k].test).collect();
    let incremental_accuracy = metrics::pooled_accuracy(clf, &pooled, &seen)?;

    let (indicator_test, indicator_memory) = if phase >= 2 {
        let old = stream.seen_labels(phase - 1);
        let old_set: BTreeSet<ClassId> = old.iter().copied().collect();
        let test_pool: Vec<&LabeledFeature> = (0..phase - 1)
            .flat_map(|k| stream.tasks[k].test.examples())
            .collect();
        let on_test = metrics::old_task_probability_mass(clf, &test_pool, &old, &seen)?;
        let memory_pool: Vec<&LabeledFeature> = state
            .memory
            .iter()
            .filter(|ex| old_set.contains(&ex.label))
            .collect();
        let on_memory = if memory_pool.is_empty() {
            None
        } else {
            Some(metrics::old_task_probability_mass(
                clf,
                &memory_pool,
                &old,
                &seen,
            )?)
        };
        (Some(on_test), on_memory)
    } else {
        (None, None)
    };

    Ok(PhaseMetrics {
        phase,
        per_task_accuracy,
        incremental_accuracy,
        indicator_test,
        indicator_memory,
    })
}

fn final_confusion(classifier: &Classifier, stream: &TaskStream) -> Result<ConfusionMatrix> {
    let labels = stream.all_labels();
    let sets: Vec<&crate::data::LabeledFeatureSet> =
        stream.tasks.iter().map(|t| &t.test).collect();
    metrics::confusion_matrix(classifier, &sets, &labels)
}
