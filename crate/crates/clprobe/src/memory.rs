//! Capacity-bounded episodic memory with greedy class-balanced updates.
//!
//! At each task boundary every seen class gets a quota of
//! `capacity / seen_classes`, with the remainder spread over the lowest class
//! ids. Over-quota classes evict uniformly at random; new classes fill their
//! quota with a uniform sample from the task's training set.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::data::io::write_feature_file;
use crate::data::{ClassId, LabeledFeature, LabeledFeatureSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EpisodicMemory {
    capacity: usize,
    /// Stored samples, grouped per class. Class order is ascending, slot
    /// order within a class is insertion order.
    slots: BTreeMap<ClassId, Vec<LabeledFeature>>,
}

impl EpisodicMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            slots: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.values().all(Vec::is_empty)
    }

    pub fn class_count(&self) -> usize {
        self.slots.values().filter(|v| !v.is_empty()).count()
    }

    pub fn per_class_counts(&self) -> BTreeMap<ClassId, usize> {
        self.slots
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(&c, v)| (c, v.len()))
            .collect()
    }

    /// Max minus min per-class count over classes present.
    pub fn count_spread(&self) -> usize {
        let counts: Vec<usize> = self
            .slots
            .values()
            .map(Vec::len)
            .filter(|&n| n > 0)
            .collect();
        match (counts.iter().max(), counts.iter().min()) {
            (Some(max), Some(min)) => max - min,
            _ => 0,
        }
    }

    /// Stored samples in deterministic order: class ascending, then insertion
    /// order within the class.
    pub fn iter(&self) -> impl Iterator<Item = &LabeledFeature> {
        self.slots.values().flatten()
    }

    /// Rebalance at a task boundary.
    ///
    /// `seen_labels` is the full set of classes seen so far, including the
    /// incoming task's. Quotas are `capacity / seen` with the remainder going
    /// to the lowest class ids. Classes above quota evict uniformly at
    /// random; classes from the new task insert a uniform sample without
    /// replacement from `task_train` (fewer if the class is short).
    ///
    /// A zero-capacity memory is disabled and ignores updates.
    pub fn update(
        &mut self,
        task_train: &LabeledFeatureSet,
        seen_labels: &[ClassId],
        rng: &mut impl Rng,
    ) -> Result<()> {
        if self.capacity == 0 {
            return Ok(());
        }
        let seen: BTreeSet<ClassId> = seen_labels.iter().copied().collect();
        for class in self.slots.keys() {
            if !seen.contains(class) {
                return Err(Error::Label(format!(
                    "memory holds class {class} missing from the seen label set"
                )));
            }
        }
        for class in task_train.label_universe() {
            if !seen.contains(class) {
                return Err(Error::Label(format!(
                    "task class {class} missing from the seen label set"
                )));
            }
            if self.slots.get(class).is_some_and(|v| !v.is_empty()) {
                return Err(Error::Label(format!(
                    "task class {class} is already stored in memory"
                )));
            }
        }

        let quotas = class_quotas(self.capacity, &seen);

        // Evict over-quota classes, ascending class order.
        for (class, samples) in self.slots.iter_mut() {
            let quota = quotas[class];
            if samples.len() > quota {
                let excess = samples.len() - quota;
                let mut victims = index::sample(rng, samples.len(), excess).into_vec();
                victims.sort_unstable_by(|a, b| b.cmp(a));
                for v in victims {
                    samples.remove(v);
                }
            }
        }

        // Insert new-task classes up to quota, ascending class order.
        for &class in task_train.label_universe() {
            let pool: Vec<&LabeledFeature> = task_train
                .examples()
                .iter()
                .filter(|ex| ex.label == class)
                .collect();
            let take = quotas[&class].min(pool.len());
            let mut chosen = index::sample(rng, pool.len(), take).into_vec();
            chosen.sort_unstable();
            let entry = self.slots.entry(class).or_default();
            for i in chosen {
                entry.push(pool[i].clone());
            }
        }
        Ok(())
    }

    /// Draw a replay batch: without replacement when the batch fits in
    /// memory, with replacement otherwise so the batch size is always met.
    pub fn sample_replay_batch(
        &self,
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<LabeledFeature>> {
        if self.is_empty() {
            return Err(Error::Replay("cannot sample from an empty memory".into()));
        }
        if batch_size == 0 {
            return Err(Error::Replay("replay batch size must be at least 1".into()));
        }
        let flat: Vec<&LabeledFeature> = self.iter().collect();
        let picks: Vec<usize> = if batch_size <= flat.len() {
            index::sample(rng, flat.len(), batch_size).into_vec()
        } else {
            (0..batch_size)
                .map(|_| rng.random_range(0..flat.len()))
                .collect()
        };
        Ok(picks.into_iter().map(|i| flat[i].clone()).collect())
    }

    /// Flatten the memory into a dataset, e.g. for snapshotting.
    pub fn snapshot_set(&self) -> Result<LabeledFeatureSet> {
        let examples: Vec<LabeledFeature> = self.iter().cloned().collect();
        let dimension = examples
            .first()
            .map(|ex| ex.feature.len())
            .ok_or_else(|| Error::Replay("cannot snapshot an empty memory".into()))?;
        LabeledFeatureSet::from_examples(dimension, examples)
    }

    /// Write the stored samples in the binary feature-file format.
    pub fn write_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        write_feature_file(path, &self.snapshot_set()?)
    }

    /// Rebuild a memory from a snapshot file. Labels are taken verbatim
    /// (no remapping), slot order within a class is preserved.
    pub fn load_snapshot(path: impl AsRef<Path>, capacity: usize) -> Result<EpisodicMemory> {
        let set = crate::data::io::read_feature_file(path)?;
        if set.len() > capacity {
            return Err(Error::Replay(format!(
                "snapshot holds {} samples but the capacity is {capacity}",
                set.len()
            )));
        }
        let mut slots: BTreeMap<ClassId, Vec<LabeledFeature>> = BTreeMap::new();
        for ex in set.examples() {
            slots.entry(ex.label).or_default().push(ex.clone());
        }
        Ok(EpisodicMemory { capacity, slots })
    }
}

/// Per-class quota: `capacity / n` each, remainder to the lowest class ids.
fn class_quotas(capacity: usize, seen: &BTreeSet<ClassId>) -> BTreeMap<ClassId, usize> {
    let n = seen.len().max(1);
    let base = capacity / n;
    let remainder = capacity % n;
    seen.iter()
        .enumerate()
        .map(|(i, &c)| (c, base + usize::from(i < remainder)))
        .collect()
}
