//! Continual-learning linear probing engine.
//!
//! Trains a one-layer softmax classifier over frozen feature vectors across a
//! sequence of class-disjoint tasks, with an episodic replay memory, the
//! finetune/er/er-fix/er-bal/taer strategy lattice, a metric suite, and a
//! deterministic experiment runner.

pub mod classifier;
pub mod data;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod runner;
pub mod strategies;

pub use error::{Error, Result};
