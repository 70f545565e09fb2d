//! Shared fixture for the acceptance suite: the standard synthetic benchmark
//! and the five-variant experiment results computed once per test binary.
//!
//! The stream is 100 classes in 64 dimensions, 10 equal tasks, 20 train and
//! 20 test examples per class, cluster spread 0.20 (joint training lands in
//! the mid 90s). The experiment optimizer is lr 8.0, batch 32, 20 epochs per
//! task: synthetic features are unit-norm, so a large step size stands in for
//! the larger feature norms of a real backbone and lets every phase train to
//! saturation instead of stopping step-limited.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use clprobe::classifier::OptimizerConfig;
use clprobe::data::{Protocol, TaskStream};
use clprobe::runner::{
    build_stream, run_experiment, AggregateReport, DataSource, ExperimentConfig, SyntheticShape,
};
use clprobe::strategies::{StrategyConfig, Variant};

pub const STANDARD_CLASSES: u32 = 100;
pub const STANDARD_DIM: usize = 64;
pub const STANDARD_TASKS: usize = 10;
pub const STANDARD_TRAIN_PER_CLASS: usize = 20;
pub const STANDARD_TEST_PER_CLASS: usize = 20;
pub const STANDARD_SPREAD: f64 = 0.20;
pub const STANDARD_LEARNING_RATE: f64 = 8.0;
pub const STANDARD_BATCH: usize = 32;
pub const STANDARD_EPOCHS: usize = 20;
pub const STANDARD_MEMORY: usize = 200;
pub const STANDARD_BASE_SEED: u64 = 1;
pub const STANDARD_RUNS: usize = 3;

pub fn standard_experiment(variant: Variant) -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::Synthetic(SyntheticShape {
            class_count: STANDARD_CLASSES,
            dimension: STANDARD_DIM,
            train_per_class: STANDARD_TRAIN_PER_CLASS,
            test_per_class: STANDARD_TEST_PER_CLASS,
            cluster_spread: STANDARD_SPREAD,
        }),
        task_count: STANDARD_TASKS,
        protocol: Protocol::EqualSplit,
        strategy: StrategyConfig {
            variant,
            optimizer: OptimizerConfig {
                learning_rate: STANDARD_LEARNING_RATE,
                batch_size: STANDARD_BATCH,
                epochs: STANDARD_EPOCHS,
            },
            memory_capacity: STANDARD_MEMORY,
            class_mean_init: false,
        },
        run_count: STANDARD_RUNS,
        base_seed: STANDARD_BASE_SEED,
    }
}

pub fn standard_stream() -> TaskStream {
    build_stream(&standard_experiment(Variant::TaEr)).expect("standard stream")
}

pub struct StandardResults {
    pub by_variant: BTreeMap<&'static str, AggregateReport>,
    pub seconds: f64,
}

impl StandardResults {
    pub fn mean_a_t(&self, variant: Variant) -> f64 {
        self.by_variant[variant.name()].mean_average_accuracy
    }
}

static RESULTS: OnceLock<StandardResults> = OnceLock::new();

/// All five variants on the standard stream, three seeded runs each.
/// Computed once and shared across the acceptance criteria.
pub fn standard_results() -> &'static StandardResults {
    RESULTS.get_or_init(|| {
        let start = Instant::now();
        let by_variant = Variant::ALL
            .iter()
            .map(|&variant| {
                let agg = run_experiment(&standard_experiment(variant))
                    .unwrap_or_else(|e| panic!("{} experiment failed: {e}", variant.name()));
                (variant.name(), agg)
            })
            .collect();
        StandardResults {
            by_variant,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}
