//! One-layer softmax classifier over frozen features.
//!
//! The weight matrix holds one column per seen class. Columns left of the
//! frozen boundary are excluded from updates but still participate in the
//! softmax denominator, so restricted predictions over old classes stay
//! numerically constant while new classes train. All accumulation is in f64
//! even though stored features are f32.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, LabeledFeature, LabeledFeatureSet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// SGD hyperparameters for one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 32,
            epochs: 1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Initialization for newly appended class columns.
#[derive(Debug, Clone, Copy)]
pub enum InitMode<'a> {
    /// Zero columns: softmax over zeros is uniform.
    Zeros,
    /// Column = mean training feature of the class, computed on the given set.
    ClassMean(&'a LabeledFeatureSet),
}

/// Gradient over the unfrozen column slice, plus the scalar loss it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSlice {
    /// One gradient column per unfrozen classifier column, in column order.
    pub columns: Vec<Vec<f64>>,
    pub loss_value: f64,
}

impl GradientSlice {
    /// Add another slice of identical shape into this one.
    pub fn accumulate(&mut self, other: &GradientSlice) -> Result<()> {
        if self.columns.len() != other.columns.len() {
            return Err(Error::Shape(format!(
                "gradient slices differ in column count: {} vs {}",
                self.columns.len(),
                other.columns.len()
            )));
        }
        for (a, b) in self.columns.iter_mut().zip(&other.columns) {
            if a.len() != b.len() {
                return Err(Error::Shape("gradient slices differ in dimension".into()));
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.loss_value += other.loss_value;
        Ok(())
    }
}

/// Numerically stable softmax (max-subtraction). Entries are positive and
/// sum to 1 within 1e-9.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Numeric("softmax over empty logits".into()));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit {bad}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

fn argmax_label(logits: &[f64], labels: &[ClassId]) -> Result<ClassId> {
    if logits.is_empty() {
        return Err(Error::Label("cannot predict over an empty label set".into()));
    }
    let mut best_logit = f64::NEG_INFINITY;
    let mut best_label = ClassId::MAX;
    for (&z, &label) in logits.iter().zip(labels) {
        if z > best_logit || (z == best_logit && label < best_label) {
            best_logit = z;
            best_label = label;
        }
    }
    Ok(best_label)
}

/// One-layer softmax classifier with a frozen-column boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    dim: usize,
    /// One weight column of length `dim` per class, in arrival order.
    columns: Vec<Vec<f64>>,
    /// Leading columns excluded from updates.
    frozen_boundary: usize,
    /// Class id of each column.
    label_order: Vec<ClassId>,
    index_of: HashMap<ClassId, usize>,
}

impl Classifier {
    /// Empty classifier over features of the given dimension.
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            columns: Vec::new(),
            frozen_boundary: 0,
            label_order: Vec::new(),
            index_of: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn column_count(&self) -> usize {
        self.columns.len()
    }

    pub fn frozen_boundary(&self) -> usize {
        self.frozen_boundary
    }

    pub fn label_order(&self) -> &[ClassId] {
        &self.label_order
    }

    pub fn column(&self, index: usize) -> &[f64] {
        &self.columns[index]
    }

    fn column_index(&self, label: ClassId) -> Result<usize> {
        self.index_of
            .get(&label)
            .copied()
            .ok_or_else(|| Error::Label(format!("class {label} not in classifier")))
    }

    /// Append columns for new classes. When `freeze_old` is set, the frozen
    /// boundary advances to the previous column count first, so every column
    /// that existed before this call stops receiving updates.
    pub fn expand(
        &mut self,
        new_labels: &[ClassId],
        init: InitMode<'_>,
        freeze_old: bool,
    ) -> Result<()> {
        let mut incoming = std::collections::BTreeSet::new();
        for &label in new_labels {
            if self.index_of.contains_key(&label) {
                return Err(Error::Label(format!("class {label} already present")));
            }
            if !incoming.insert(label) {
                return Err(Error::Label(format!("duplicate class {label} in expansion")));
            }
        }
        if freeze_old {
            self.frozen_boundary = self.columns.len();
        }
        for &label in new_labels {
            let column = match init {
                InitMode::Zeros => vec![0.0; self.dim],
                InitMode::ClassMean(train) => {
                    let mean = train.class_mean(label).ok_or_else(|| {
                        Error::Label(format!("no training examples for class {label}"))
                    })?;
                    if mean.len() != self.dim {
                        return Err(Error::Shape(format!(
                            "class-mean dimension {} does not match classifier dimension {}",
                            mean.len(),
                            self.dim
                        )));
                    }
                    mean
                }
            };
            self.index_of.insert(label, self.columns.len());
            self.label_order.push(label);
            self.columns.push(column);
        }
        Ok(())
    }

    fn dot(&self, column: usize, feature: &[f32]) -> f64 {
        self.columns[column]
            .iter()
            .zip(feature)
            .map(|(w, x)| w * f64::from(*x))
            .sum()
    }

    /// Raw scores `w_i . h(x)`. With a subset, scores come back in subset
    /// order; otherwise in column order.
    pub fn logits(&self, feature: &[f32], subset: Option<&[ClassId]>) -> Result<Vec<f64>> {
        if feature.len() != self.dim {
            return Err(Error::Shape(format!(
                "feature dimension {} does not match classifier dimension {}",
                feature.len(),
                self.dim
            )));
        }
        match subset {
            None => Ok((0..self.columns.len())
                .map(|i| self.dot(i, feature))
                .collect()),
            Some(labels) => labels
                .iter()
                .map(|&l| Ok(self.dot(self.column_index(l)?, feature)))
                .collect(),
        }
    }

    /// Argmax prediction over the requested columns; exact ties break to the
    /// lowest class id.
    pub fn predict(&self, feature: &[f32], subset: Option<&[ClassId]>) -> Result<ClassId> {
        let logits = self.logits(feature, subset)?;
        argmax_label(&logits, subset.unwrap_or(&self.label_order))
    }

    /// Mean cross-entropy over the batch, scaled by `weight_on_batch`, with
    /// the gradient restricted to the unfrozen columns.
    ///
    /// The loss is taken over all current columns: frozen columns stay in the
    /// softmax denominator, their gradient is computed and then discarded.
    pub fn loss_and_grad_masked(
        &self,
        batch: &[&LabeledFeature],
        weight_on_batch: f64,
    ) -> Result<GradientSlice> {
        if self.columns.is_empty() {
            return Err(Error::Strategy("classifier has no classes yet".into()));
        }
        if batch.is_empty() {
            return Err(Error::Sampling("loss over an empty batch".into()));
        }
        let cols = self.columns.len();
        let mut grad = vec![vec![0.0f64; self.dim]; cols];
        let mut loss_sum = 0.0f64;
        let mut probs = vec![0.0f64; cols];
        for ex in batch {
            if ex.feature.len() != self.dim {
                return Err(Error::Shape(format!(
                    "batch feature dimension {} does not match classifier dimension {}",
                    ex.feature.len(),
                    self.dim
                )));
            }
            let target = self.column_index(ex.label)?;
            let logits: Vec<f64> = (0..cols).map(|i| self.dot(i, &ex.feature)).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0f64;
            for (p, z) in probs.iter_mut().zip(&logits) {
                *p = (z - max).exp();
                denom += *p;
            }
            // -ln p_y via log-sum-exp
            loss_sum += max + denom.ln() - logits[target];
            for (i, g) in grad.iter_mut().enumerate() {
                let coeff = probs[i] / denom - f64::from(u8::from(i == target));
                for (gj, xj) in g.iter_mut().zip(&ex.feature) {
                    *gj += coeff * f64::from(*xj);
                }
            }
        }
        let scale = weight_on_batch / batch.len() as f64;
        for g in &mut grad {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
        let columns = grad.split_off(self.frozen_boundary);
        Ok(GradientSlice {
            columns,
            loss_value: scale * loss_sum,
        })
    }

    /// Apply one SGD step to the unfrozen columns. Frozen columns are never
    /// touched, so their bytes are preserved exactly.
    pub fn sgd_step(&mut self, slice: &GradientSlice, learning_rate: f64) -> Result<()> {
        let unfrozen = self.columns.len() - self.frozen_boundary;
        if slice.columns.len() != unfrozen {
            return Err(Error::Shape(format!(
                "gradient has {} columns but {} are unfrozen",
                slice.columns.len(),
                unfrozen
            )));
        }
        for (col, g) in self.columns[self.frozen_boundary..]
            .iter_mut()
            .zip(&slice.columns)
        {
            if g.len() != col.len() {
                return Err(Error::Shape("gradient column dimension mismatch".into()));
            }
            for (w, gv) in col.iter_mut().zip(g) {
                *w -= learning_rate * gv;
            }
        }
        Ok(())
    }

    /// Serialize to the checkpoint layout: magic, version, dimension, column
    /// count, frozen boundary, label order, then column-major f64 weights,
    /// all little-endian.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(
            18 + self.label_order.len() * 4 + self.columns.len() * self.dim * 8,
        );
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.dim as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.columns.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.frozen_boundary as u32).to_le_bytes());
        for label in &self.label_order {
            bytes.extend_from_slice(&label.to_le_bytes());
        }
        for column in &self.columns {
            for w in column {
                bytes.extend_from_slice(&w.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Classifier> {
        let ck = Checkpoint::parse(bytes)?;
        let columns: Vec<Vec<f64>> = ck
            .column_bytes
            .iter()
            .map(|col| {
                col.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            })
            .collect();
        let index_of = ck
            .label_order
            .iter()
            .enumerate()
            .map(|(i, &l)| (l, i))
            .collect();
        Ok(Classifier {
            dim: ck.dim,
            columns,
            frozen_boundary: ck.frozen_boundary,
            label_order: ck.label_order,
            index_of,
        })
    }
}

/// Parsed view of a classifier checkpoint, keeping the raw column bytes so
/// callers can compare frozen columns bit for bit.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dim: usize,
    pub frozen_boundary: usize,
    pub label_order: Vec<ClassId>,
    pub column_bytes: Vec<Vec<u8>>,
}

impl Checkpoint {
    pub fn parse(bytes: &[u8]) -> Result<Checkpoint> {
        let fail = |reason: &str| Error::Data(format!("checkpoint: {reason}"));
        if bytes.len() < 18 || &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(fail("bad magic or truncated header"));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let frozen_boundary = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
        if frozen_boundary > cols {
            return Err(fail("frozen boundary exceeds column count"));
        }
        let labels_end = 18 + cols * 4;
        let expected = labels_end + cols * dim * 8;
        if bytes.len() != expected {
            return Err(fail(&format!(
                "expected {expected} bytes, got {}",
                bytes.len()
            )));
        }
        let label_order: Vec<ClassId> = bytes[18..labels_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let column_bytes: Vec<Vec<u8>> = bytes[labels_end..]
            .chunks_exact(dim * 8)
            .map(|c| c.to_vec())
            .collect();
        Ok(Checkpoint {
            dim,
            frozen_boundary,
            label_order,
            column_bytes,
        })
    }
}
