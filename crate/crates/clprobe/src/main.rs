//! `clprobe` command line: run seeded experiments, sweep the memory-size or
//! task-count axes, or run the built-in self checks.
//!
//! Flags may also come from a flat `key = value` config file (`--config`);
//! explicit CLI flags win over file entries.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use clprobe::classifier::OptimizerConfig;
use clprobe::data::Protocol;
use clprobe::error::{Error, Result};
use clprobe::runner::{
    self, build_stream, defaults, load_config_file, merged_confusion, run_experiment, sweep,
    write_aggregate_report, write_sweep_csv, DataSource, ExperimentConfig, SweepAxis,
    SyntheticShape,
};
use clprobe::strategies::{StrategyConfig, Variant};

const OUT_DIR_ENV: &str = "CLPROBE_OUT_DIR";

#[derive(Parser)]
#[command(name = "clprobe", version, about = "Continual-learning linear probing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report.
    Run(RunArgs),
    /// Run one experiment per value along a sweep axis and emit a CSV table.
    Sweep(SweepArgs),
    /// Execute the built-in invariant battery.
    Selfcheck,
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// Flat key=value config file; CLI flags override file entries.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Train features file (binary or CSV).
    #[arg(long)]
    train_features: Option<PathBuf>,

    /// Test features file (binary or CSV).
    #[arg(long)]
    test_features: Option<PathBuf>,

    /// Use the synthetic Gaussian-cluster stream instead of files.
    #[arg(long)]
    synthetic: bool,

    /// Synthetic: number of classes.
    #[arg(long)]
    classes: Option<u32>,

    /// Synthetic: feature dimension.
    #[arg(long)]
    dim: Option<usize>,

    /// Synthetic: training examples per class.
    #[arg(long)]
    train_per_class: Option<usize>,

    /// Synthetic: test examples per class.
    #[arg(long)]
    test_per_class: Option<usize>,

    /// Synthetic: within-class standard deviation.
    #[arg(long)]
    spread: Option<f64>,

    /// Number of tasks in the sequence.
    #[arg(long)]
    tasks: Option<usize>,

    /// Class-to-task protocol: equal | half-first.
    #[arg(long)]
    protocol: Option<String>,

    /// Strategy: finetune | er | er-fix | er-bal | taer.
    #[arg(long)]
    strategy: Option<String>,

    /// Episodic memory capacity.
    #[arg(long)]
    memory: Option<usize>,

    /// SGD learning rate.
    #[arg(long)]
    lr: Option<f64>,

    /// Epochs per task.
    #[arg(long)]
    epochs: Option<usize>,

    /// Batch size (current-task and replay batches are equal-sized).
    #[arg(long)]
    batch: Option<usize>,

    /// Initialize new classifier columns with class-mean features.
    #[arg(long)]
    class_mean_init: bool,

    /// Number of seeded runs to aggregate.
    #[arg(long)]
    runs: Option<usize>,

    /// Base seed; run i trains with seed base+i.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Write the aggregate report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,

    /// Write the final confusion matrix (row-normalized) as CSV.
    #[arg(long)]
    confusion: Option<PathBuf>,

    /// Verify report invariants after the run; exit 3 on violation.
    #[arg(long)]
    self_check: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Sweep axis: memory | tasks.
    #[arg(long)]
    axis: Option<String>,

    /// Comma-separated axis values, e.g. 50,100,200,500.
    #[arg(long)]
    values: Option<String>,

    /// CSV output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// File-backed view over the CLI flags: explicit flags win, then file
/// entries, then defaults.
struct Merged {
    file: BTreeMap<String, String>,
}

impl Merged {
    fn new(config: Option<&Path>) -> Result<Self> {
        let file = match config {
            Some(path) => load_config_file(path)?,
            None => BTreeMap::new(),
        };
        Ok(Self { file })
    }

    fn value<T: FromStr>(&self, cli: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = cli {
            return Ok(v);
        }
        match self.file.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Config(format!("config file: invalid value '{raw}' for {key}"))),
            None => Ok(default),
        }
    }

    fn optional<T: FromStr>(&self, cli: Option<T>, key: &str) -> Result<Option<T>> {
        if cli.is_some() {
            return Ok(cli);
        }
        match self.file.get(key) {
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("config file: invalid value '{raw}' for {key}"))),
            None => Ok(None),
        }
    }

    fn flag(&self, cli: bool, key: &str) -> Result<bool> {
        if cli {
            return Ok(true);
        }
        match self.file.get(key).map(String::as_str) {
            None => Ok(false),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(other) => Err(Error::Config(format!(
                "config file: invalid boolean '{other}' for {key}"
            ))),
        }
    }
}

fn build_experiment_config(args: &CommonArgs) -> Result<(ExperimentConfig, Merged)> {
    let merged = Merged::new(args.config.as_deref())?;

    let synthetic = merged.flag(args.synthetic, "synthetic")?;
    let train_features = merged.optional(args.train_features.clone(), "train-features")?;
    let test_features = merged.optional(args.test_features.clone(), "test-features")?;

    let data = match (synthetic, train_features, test_features) {
        (true, None, None) => DataSource::Synthetic(SyntheticShape {
            class_count: merged.value(args.classes, "classes", defaults::CLASSES)?,
            dimension: merged.value(args.dim, "dim", defaults::DIM)?,
            train_per_class: merged.value(
                args.train_per_class,
                "train-per-class",
                defaults::TRAIN_PER_CLASS,
            )?,
            test_per_class: merged.value(
                args.test_per_class,
                "test-per-class",
                defaults::TEST_PER_CLASS,
            )?,
            cluster_spread: merged.value(args.spread, "spread", defaults::CLUSTER_SPREAD)?,
        }),
        (false, Some(train), Some(test)) => DataSource::Files { train, test },
        (true, _, _) => {
            return Err(Error::Config(
                "--synthetic conflicts with --train-features/--test-features".into(),
            ))
        }
        (false, None, None) => {
            return Err(Error::Config(
                "no data source: pass --synthetic or both --train-features and --test-features"
                    .into(),
            ))
        }
        (false, _, _) => {
            return Err(Error::Config(
                "feature files require both --train-features and --test-features".into(),
            ))
        }
    };

    let protocol: Protocol = merged
        .value(
            args.protocol.clone(),
            "protocol",
            "equal".to_string(),
        )?
        .parse()?;
    let variant: Variant = merged
        .value(args.strategy.clone(), "strategy", "taer".to_string())?
        .parse()?;

    let config = ExperimentConfig {
        data,
        task_count: merged.value(args.tasks, "tasks", defaults::TASKS)?,
        protocol,
        strategy: StrategyConfig {
            variant,
            optimizer: OptimizerConfig {
                learning_rate: merged.value(args.lr, "lr", defaults::LEARNING_RATE)?,
                batch_size: merged.value(args.batch, "batch", defaults::BATCH)?,
                epochs: merged.value(args.epochs, "epochs", defaults::EPOCHS)?,
            },
            memory_capacity: merged.value(args.memory, "memory", defaults::MEMORY)?,
            class_mean_init: merged.flag(args.class_mean_init, "class-mean-init")?,
        },
        run_count: merged.value(args.runs, "runs", defaults::RUNS)?,
        base_seed: merged.value(args.seed, "seed", defaults::SEED)?,
    };
    Ok((config, merged))
}

/// Resolve an output path against `CLPROBE_OUT_DIR` when relative.
fn out_path(path: PathBuf) -> PathBuf {
    if path.is_absolute() {
        return path;
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir).join(path),
        _ => path,
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let (config, merged) = build_experiment_config(&args.common)?;
    let report_path = merged.optional(args.report, "report")?;
    let confusion_path = merged.optional(args.confusion, "confusion")?;
    let self_check = merged.flag(args.self_check, "self-check")?;
    let aggregate = run_experiment(&config)?;

    println!(
        "strategy {} | {} run(s), base seed {}",
        config.strategy.variant, config.run_count, config.base_seed
    );
    for (seed, run) in aggregate.seeds.iter().zip(&aggregate.runs) {
        println!(
            "  seed {seed}: A_T {:.4}  AIA_T {:.4}  ({:.2}s)",
            run.average_accuracy, run.average_incremental_accuracy, run.wall_clock_seconds
        );
    }
    println!(
        "mean A_T {:.4} +- {:.4} | mean AIA_T {:.4} +- {:.4}",
        aggregate.mean_average_accuracy,
        aggregate.std_average_accuracy,
        aggregate.mean_average_incremental_accuracy,
        aggregate.std_average_incremental_accuracy
    );

    if self_check {
        let stream = build_stream(&config)?;
        for run in &aggregate.runs {
            runner::validate_report_against_stream(run, &stream)?;
        }
        println!("self-check: report invariants hold");
    }

    if let Some(path) = report_path {
        let path = out_path(path);
        write_aggregate_report(&aggregate, &path)?;
        println!("report written to {}", path.display());
    }
    if let Some(path) = confusion_path {
        let path = out_path(path);
        let merged = merged_confusion(&aggregate)?;
        let mut w = BufWriter::new(File::create(&path)?);
        merged.write_ratio_csv(&mut w)?;
        w.flush()?;
        println!("confusion matrix written to {}", path.display());
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let (config, merged) = build_experiment_config(&args.common)?;
    let axis: SweepAxis = merged
        .optional(args.axis, "axis")?
        .ok_or_else(|| Error::Config("sweep needs --axis memory|tasks".into()))?
        .parse()?;
    let values_raw: String = merged
        .optional(args.values, "values")?
        .ok_or_else(|| Error::Config("sweep needs --values, e.g. 50,100,200".into()))?;
    let values: Vec<usize> = values_raw
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid sweep value '{v}'")))
        })
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let out = merged.optional(args.out, "out")?;

    let cells = sweep(&config, axis, &values);
    for cell in &cells {
        match (&cell.mean_average_accuracy, &cell.error) {
            (Some(mean), _) => println!("{} {}: mean A_T {:.4}", axis, cell.value, mean),
            (None, Some(err)) => println!("{} {}: failed ({err})", axis, cell.value),
            _ => {}
        }
    }
    match out {
        Some(path) => {
            let path = out_path(path);
            let mut w = BufWriter::new(File::create(&path)?);
            write_sweep_csv(&cells, &mut w)?;
            w.flush()?;
            println!("sweep table written to {}", path.display());
        }
        None => {
            let mut out = Vec::new();
            write_sweep_csv(&cells, &mut out)?;
            print!("{}", String::from_utf8_lossy(&out));
        }
    }
    Ok(())
}

fn cmd_selfcheck() -> Result<()> {
    for name in runner::self_check()? {
        println!("ok {name}");
    }
    println!("all self checks passed");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Selfcheck => cmd_selfcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
