//! Evaluation quantities: per-task and pooled accuracy, averages over the
//! task sequence, preserved accuracy under restricted label sets, confusion
//! matrices, and the inter-task probability indicator.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classifier::{softmax, Classifier};
use crate::data::{ClassId, LabeledFeature, LabeledFeatureSet};
use crate::error::{Error, Result};

/// Fraction of `test_set` examples whose prediction over
/// `evaluation_label_set` matches the ground truth.
pub fn task_accuracy(
    classifier: &Classifier,
    test_set: &LabeledFeatureSet,
    evaluation_label_set: &[ClassId],
) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::Metric("accuracy over an empty test set".into()));
    }
    let mut correct = 0usize;
    for ex in test_set.examples() {
        if classifier.predict(&ex.feature, Some(evaluation_label_set))? == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_set.len() as f64)
}

/// Micro-averaged accuracy over several pooled test sets: every example
/// counts equally regardless of its task.
pub fn pooled_accuracy(
    classifier: &Classifier,
    test_sets: &[&LabeledFeatureSet],
    evaluation_label_set: &[ClassId],
) -> Result<f64> {
    let total: usize = test_sets.iter().map(|s| s.len()).sum();
    if total == 0 {
        return Err(Error::Metric("pooled accuracy over empty test sets".into()));
    }
    let mut correct = 0usize;
    for set in test_sets {
        for ex in set.examples() {
            if classifier.predict(&ex.feature, Some(evaluation_label_set))? == ex.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Arithmetic mean of per-task accuracies.
pub fn average_accuracy(per_task: &[f64]) -> Result<f64> {
    if per_task.is_empty() {
        return Err(Error::Metric("average over an empty accuracy list".into()));
    }
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

/// Arithmetic mean of the per-phase pooled accuracies.
pub fn average_incremental_accuracy(alphas: &[f64]) -> Result<f64> {
    if alphas.is_empty() {
        return Err(Error::Metric(
            "average over an empty incremental-accuracy list".into(),
        ));
    }
    Ok(alphas.iter().sum::<f64>() / alphas.len() as f64)
}

/// Accuracy on one task's test set with predictions restricted to the label
/// sets seen up to and including that task, isolating retention from
/// label-set growth.
pub fn preserved_accuracy(
    classifier: &Classifier,
    test_set: &LabeledFeatureSet,
    labels_through_task: &[ClassId],
) -> Result<f64> {
    task_accuracy(classifier, test_set, labels_through_task)
}

/// Confusion counts; row = ground truth, column = prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Class ids indexing both rows and columns.
    pub labels: Vec<ClassId>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    /// Per-row ratios; an empty row normalizes to zeros.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let sum: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| {
                        if sum == 0 {
                            0.0
                        } else {
                            c as f64 / sum as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Elementwise sum with another matrix over the same labels.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.labels != other.labels {
            return Err(Error::Metric(
                "cannot merge confusion matrices over different label sets".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Fraction of examples whose ground truth lies outside `newest` but
    /// whose prediction falls inside it. This is the prediction-bias mass
    /// captured by the most recent task.
    pub fn newest_task_capture_fraction(&self, newest: &[ClassId]) -> f64 {
        let newest: BTreeSet<ClassId> = newest.iter().copied().collect();
        let mut old_total = 0u64;
        let mut captured = 0u64;
        for (ri, row) in self.counts.iter().enumerate() {
            if newest.contains(&self.labels[ri]) {
                continue;
            }
            for (ci, &count) in row.iter().enumerate() {
                old_total += count;
                if newest.contains(&self.labels[ci]) {
                    captured += count;
                }
            }
        }
        if old_total == 0 {
            0.0
        } else {
            captured as f64 / old_total as f64
        }
    }

    /// Write row-normalized ratios as CSV: one header row of predicted
    /// labels, then one row per ground-truth label.
    pub fn write_ratio_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        write!(w, "label")?;
        for label in &self.labels {
            write!(w, ",{label}")?;
        }
        writeln!(w)?;
        for (label, row) in self.labels.iter().zip(self.row_normalized()) {
            write!(w, "{label}")?;
            for ratio in row {
                write!(w, ",{ratio:.6}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Confusion matrix of predictions over `labels` across the given test sets.
pub fn confusion_matrix(
    classifier: &Classifier,
    test_sets: &[&LabeledFeatureSet],
    labels: &[ClassId],
) -> Result<ConfusionMatrix> {
    let index: std::collections::HashMap<ClassId, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i))
        .collect();
    let mut counts = vec![vec![0u64; labels.len()]; labels.len()];
    for set in test_sets {
        for ex in set.examples() {
            let truth = *index
                .get(&ex.label)
                .ok_or_else(|| Error::Metric(format!("truth label {} not evaluated", ex.label)))?;
            let predicted = classifier.predict(&ex.feature, Some(labels))?;
            counts[truth][index[&predicted]] += 1;
        }
    }
    Ok(ConfusionMatrix {
        labels: labels.to_vec(),
        counts,
    })
}

/// Mean softmax mass assigned to `old_labels` columns, over samples that all
/// belong to old classes. Near 1 means the model still separates old tasks
/// from the newest one.
pub fn old_task_probability_mass(
    classifier: &Classifier,
    samples: &[&LabeledFeature],
    old_labels: &[ClassId],
    all_labels: &[ClassId],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Metric("indicator over an empty sample set".into()));
    }
    let old: BTreeSet<ClassId> = old_labels.iter().copied().collect();
    for (i, ex) in samples.iter().enumerate() {
        if !old.contains(&ex.label) {
            return Err(Error::Metric(format!(
                "sample {i} has current-task label {}; the indicator is defined over old-class samples",
                ex.label
            )));
        }
    }
    let mut total = 0.0f64;
    for ex in samples {
        let logits = classifier.logits(&ex.feature, Some(all_labels))?;
        let probs = softmax(&logits)?;
        total += all_labels
            .iter()
            .zip(&probs)
            .filter(|(l, _)| old.contains(l))
            .map(|(_, p)| p)
            .sum::<f64>();
    }
    Ok(total / samples.len() as f64)
}

/// Metrics recorded after one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    /// 1-based phase index.
    pub phase: usize,
    /// Accuracy on each task seen so far, evaluated over all seen classes.
    pub per_task_accuracy: Vec<f64>,
    /// Pooled accuracy over all seen test examples.
    pub incremental_accuracy: f64,
    /// Indicator over held-out old-task test examples; absent at phase 1.
    pub indicator_test: Option<f64>,
    /// Indicator over old-class memory slots; absent at phase 1 or without
    /// a memory.
    pub indicator_memory: Option<f64>,
}

/// Full record of one seeded sequence run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format_version: u32,
    /// Configuration echo, verbatim from the caller.
    pub config: serde_json::Value,
    pub seed: u64,
    pub phases: Vec<PhaseMetrics>,
    pub average_accuracy: f64,
    pub average_incremental_accuracy: f64,
    /// Preserved accuracy for each task, computed with the final classifier.
    pub preserved_accuracy: Vec<f64>,
    pub confusion: ConfusionMatrix,
    /// Excluded from serialization so identical configurations serialize to
    /// identical bytes.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

pub const REPORT_FORMAT_VERSION: u32 = 1;

impl ExperimentReport {
    /// Internal-consistency checks over the report itself.
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        for pm in &self.phases {
            if !in_unit(pm.incremental_accuracy) {
                return Err(Error::Invariant(format!(
                    "phase {}: incremental accuracy {} outside [0,1]",
                    pm.phase, pm.incremental_accuracy
                )));
            }
            if pm.per_task_accuracy.len() != pm.phase {
                return Err(Error::Invariant(format!(
                    "phase {}: expected {} per-task accuracies, got {}",
                    pm.phase,
                    pm.phase,
                    pm.per_task_accuracy.len()
                )));
            }
            for (k, &a) in pm.per_task_accuracy.iter().enumerate() {
                if !in_unit(a) {
                    return Err(Error::Invariant(format!(
                        "phase {}: task {} accuracy {a} outside [0,1]",
                        pm.phase,
                        k + 1
                    )));
                }
            }
            for ind in [pm.indicator_test, pm.indicator_memory].into_iter().flatten() {
                if !in_unit(ind) {
                    return Err(Error::Invariant(format!(
                        "phase {}: indicator {ind} outside [0,1]",
                        pm.phase
                    )));
                }
            }
        }
        let last = self
            .phases
            .last()
            .ok_or_else(|| Error::Invariant("report has no phases".into()))?;
        let a_t = average_accuracy(&last.per_task_accuracy)?;
        if (a_t - self.average_accuracy).abs() > 1e-12 {
            return Err(Error::Invariant(format!(
                "average accuracy {} does not match recomputed {a_t}",
                self.average_accuracy
            )));
        }
        let alphas: Vec<f64> = self.phases.iter().map(|p| p.incremental_accuracy).collect();
        let aia = average_incremental_accuracy(&alphas)?;
        if (aia - self.average_incremental_accuracy).abs() > 1e-12 {
            return Err(Error::Invariant(format!(
                "average incremental accuracy {} does not match recomputed {aia}",
                self.average_incremental_accuracy
            )));
        }
        if self.preserved_accuracy.len() != self.phases.len() {
            return Err(Error::Invariant(
                "preserved-accuracy count does not match phase count".into(),
            ));
        }
        if !self.preserved_accuracy.iter().all(|&p| in_unit(p)) {
            return Err(Error::Invariant("preserved accuracy outside [0,1]".into()));
        }
        Ok(())
    }
}
