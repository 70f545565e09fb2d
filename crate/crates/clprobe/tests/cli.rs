//! End-to-end checks of the `clprobe` binary: exit codes, config-file
//! merging, output routing, sweeps, and feature-file ingestion.

use std::path::Path;
use std::process::{Command, Output};

fn clprobe(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_clprobe"));
    cmd.args(args);
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn clprobe")
}

fn small_synth_args() -> Vec<&'static str> {
    vec![
        "--synthetic",
        "--classes",
        "10",
        "--dim",
        "8",
        "--tasks",
        "5",
        "--train-per-class",
        "6",
        "--test-per-class",
        "4",
        "--seed",
        "3",
    ]
}

#[test]
fn selfcheck_passes() {
    let out = run(&mut clprobe(&["selfcheck"]));
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("ok softmax-uniform"));
    assert!(text.contains("all self checks passed"));
}

#[test]
fn unknown_strategy_is_a_config_error() {
    let mut args = vec!["run"];
    args.extend(small_synth_args());
    args.extend(["--strategy", "nonsense"]);
    let out = run(&mut clprobe(&args));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown strategy"));
}

#[test]
fn missing_data_source_is_a_config_error() {
    let out = run(&mut clprobe(&["run", "--strategy", "taer"]));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no data source"));
}

#[test]
fn missing_feature_file_is_a_data_error() {
    let out = run(&mut clprobe(&[
        "run",
        "--train-features",
        "/nonexistent/train.bin",
        "--test-features",
        "/nonexistent/test.bin",
    ]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn indivisible_task_count_is_a_config_error() {
    let mut args = vec!["run"];
    args.extend(small_synth_args());
    // 10 classes cannot split into 3 equal tasks
    let args: Vec<&str> = args
        .into_iter()
        .map(|a| if a == "5" { "3" } else { a })
        .collect();
    let out = run(&mut clprobe(&args));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_writes_report_and_confusion() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("out.json");
    let confusion = dir.path().join("out.csv");
    let mut args = vec!["run"];
    args.extend(small_synth_args());
    args.extend(["--strategy", "er", "--runs", "2", "--self-check"]);
    let out = run(clprobe(&args)
        .arg("--report")
        .arg(&report)
        .arg("--confusion")
        .arg(&confusion));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report_json["config"]["strategy"]["variant"], "er");
    assert_eq!(report_json["runs"].as_array().unwrap().len(), 2);
    assert_eq!(report_json["seeds"], serde_json::json!([3, 4]));

    let csv = std::fs::read_to_string(&confusion).unwrap();
    // header plus one row per class
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.starts_with("label,0,1,2"));
}

#[test]
fn config_file_supplies_flags_and_cli_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("exp.conf");
    std::fs::write(
        &conf,
        "synthetic = true\nclasses = 10\ndim = 8\ntasks = 5\ntrain-per-class = 6\n\
         test-per-class = 4\nseed = 3\nstrategy = er\nruns = 1\n",
    )
    .unwrap();
    let report = dir.path().join("from-file.json");

    // file alone
    let out = run(clprobe(&["run", "--config"])
        .arg(&conf)
        .arg("--report")
        .arg(&report));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report_json["config"]["strategy"]["variant"], "er");

    // CLI flag wins over the file entry
    let report2 = dir.path().join("override.json");
    let out = run(clprobe(&["run", "--config"])
        .arg(&conf)
        .args(["--strategy", "taer"])
        .arg("--report")
        .arg(&report2));
    assert!(out.status.success());
    let report_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report2).unwrap()).unwrap();
    assert_eq!(report_json["config"]["strategy"]["variant"], "taer");

    // output path supplied by the file itself
    let report3 = dir.path().join("from-key.json");
    let mut conf_text = std::fs::read_to_string(&conf).unwrap();
    conf_text.push_str(&format!("report = {}\n", report3.display()));
    std::fs::write(&conf, conf_text).unwrap();
    let out = run(clprobe(&["run", "--config"]).arg(&conf));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(report3.exists(), "report path from config file not honored");
}

#[test]
fn out_dir_env_var_anchors_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run"];
    args.extend(small_synth_args());
    args.extend(["--report", "report.json"]);
    let out = run(clprobe(&args).env("CLPROBE_OUT_DIR", dir.path()));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn sweep_emits_csv_with_failed_cells_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("sweep.csv");
    let mut args = vec!["sweep"];
    args.extend(small_synth_args());
    args.extend(["--axis", "tasks", "--values", "2,3,5"]);
    let out = run(clprobe(&args).arg("--out").arg(&csv_path));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "axis,value,runs,mean_average_accuracy,std_average_accuracy,error");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("tasks,2,"));
    assert!(!lines[1].contains("divisible"));
    assert!(lines[2].contains("not divisible"), "line: {}", lines[2]);
    assert!(lines[3].starts_with("tasks,5,"));
}

#[test]
fn memory_sweep_runs_each_capacity() {
    let mut args = vec!["sweep"];
    args.extend(small_synth_args());
    args.extend(["--axis", "memory", "--values", "10,20"]);
    let out = run(&mut clprobe(&args));
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("memory,10,"));
    assert!(text.contains("memory,20,"));
}

#[test]
fn feature_files_round_trip_through_the_cli() {
    use clprobe::data::io::write_feature_file;
    use clprobe::data::{LabeledFeature, LabeledFeatureSet};
    use rand::{Rng, SeedableRng};

    let dir = tempfile::tempdir().unwrap();
    let train_path = dir.path().join("train.bin");
    let test_path = dir.path().join("test.csv");

    // 6 classes, 8 dims; binary train file and CSV test file
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
    let mut make = |per_class: usize| -> Vec<LabeledFeature> {
        (0..6u32)
            .flat_map(|c| {
                let mut rows = Vec::new();
                for _ in 0..per_class {
                    let feature: Vec<f32> = (0..8)
                        .map(|j| if j == c as usize { 1.0 } else { rng.random_range(-0.05..0.05) })
                        .collect();
                    rows.push(LabeledFeature { feature, label: c });
                }
                rows
            })
            .collect()
    };
    let train = LabeledFeatureSet::from_examples(8, make(6)).unwrap();
    write_feature_file(&train_path, &train).unwrap();

    let mut csv = String::from("label,f0,f1,f2,f3,f4,f5,f6,f7\n");
    for ex in make(2) {
        csv.push_str(&ex.label.to_string());
        for v in &ex.feature {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    std::fs::write(&test_path, csv).unwrap();

    let report = dir.path().join("files.json");
    let out = run(clprobe(&["run"])
        .arg("--train-features")
        .arg(&train_path)
        .arg("--test-features")
        .arg(&test_path)
        .args(["--tasks", "3", "--strategy", "taer", "--memory", "12", "--seed", "2"])
        .arg("--report")
        .arg(&report));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report_json["runs"][0]["phases"].as_array().unwrap().len(), 3);
}

#[test]
fn half_first_protocol_runs_from_the_cli() {
    let out = run(&mut clprobe(&[
        "run",
        "--synthetic",
        "--classes",
        "12",
        "--dim",
        "8",
        "--tasks",
        "4",
        "--protocol",
        "half-first",
        "--train-per-class",
        "6",
        "--test-per-class",
        "4",
        "--strategy",
        "taer",
        "--class-mean-init",
        "--seed",
        "4",
    ]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn binary_exists() -> bool {
    Path::new(env!("CARGO_BIN_EXE_clprobe")).exists()
}

#[test]
fn binary_is_built() {
    assert!(binary_exists());
}
