use std::path::Path;
use std::process::{Command, Output};

fn icebench(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icebench"))
        .current_dir(dir)
        .env_remove("ICEBENCH_OUT")
        .args(["--log-level", "warn", "--workers", "2"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const RUN: &str = r#"{
  "train_manifest": "data/train.json",
  "test_manifest": "data/test.json",
  "climatology": "data/climatology.json",
  "regions": "data/regions.json",
  "holdout": {"fixed_count": 1},
  "sampling": {"patch_size": 16, "stride": 8},
  "training": {"learning_rate": 0.5, "max_epochs": 20, "early_stop_patience": 5}
}"#;

fn synth(dir: &Path, n_scenes: usize) {
    let spec = format!(
        r#"{{"preset": "separable", "n_scenes": {n_scenes}, "n_test": 4, "height": 64, "width": 64, "n_polygons": 6}}"#
    );
    std::fs::write(dir.join("synth.json"), spec).unwrap();
    ok(&icebench(
        dir,
        &["--out", "data", "synth", "--config", "synth.json"],
    ));
    std::fs::write(dir.join("run.json"), RUN).unwrap();
}

#[test]
fn synth_train_evaluate_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 10);
    ok(&icebench(
        d,
        &["--config", "run.json", "--out", "res", "train"],
    ));
    for f in [
        "model.icbm",
        "model.json",
        "normalization.json",
        "run_config.json",
        "training_log.jsonl",
    ] {
        assert!(d.join("res/model").join(f).is_file(), "{f} missing");
    }
    let out = icebench(d, &["--config", "run.json", "--out", "res", "evaluate"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("F1"));

    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("res/metrics.json")).unwrap())
            .unwrap();
    let f1 = metrics["weighted"]["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert!(d.join("res/confusion.json").is_file());

    // same seed, same bytes
    ok(&icebench(
        d,
        &["--config", "run.json", "--out", "again", "train"],
    ));
    ok(&icebench(
        d,
        &["--config", "run.json", "--out", "again", "evaluate"],
    ));
    assert_eq!(
        std::fs::read(d.join("res/metrics.json")).unwrap(),
        std::fs::read(d.join("again/metrics.json")).unwrap()
    );
}

#[test]
fn evaluate_without_model_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 6);
    let out = icebench(d, &["--config", "run.json", "--out", "empty", "evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no trained model"));
}

#[test]
fn missing_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = icebench(dir.path(), &["--config", "absent.json", "train"]);
    assert_eq!(out.status.code(), Some(2));
    let out = icebench(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn transfer_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 28);
    let cfg = format!(
        r#"{{"name": "seasons", "run": {RUN}, "experiment": {{"kind": "transfer", "preset": "seasons"}}}}"#
    );
    std::fs::write(d.join("transfer.json"), cfg).unwrap();
    ok(&icebench(
        d,
        &["--config", "transfer.json", "--out", "t", "transfer"],
    ));
    let csv = std::fs::read_to_string(d.join("t/cells.csv")).unwrap();
    // five training rows (four seasons and a baseline) by four test seasons
    assert_eq!(csv.lines().count(), 1 + 5 * 4);
    assert!(d.join("t/report.json").is_file());
    assert!(d.join("t/plotdata/f1.tsv").is_file());

    // a transfer config handed to another subcommand is rejected
    let out = icebench(d, &["--config", "transfer.json", "--out", "t2", "sweep"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failing_sweep_cell_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 8);
    let cfg = format!(
        r#"{{"name": "sw", "run": {RUN}, "experiment": {{"kind": "sweep", "axis": "patch_size", "values": [16, 128]}}}}"#
    );
    std::fs::write(d.join("sweep.json"), cfg).unwrap();
    let out = icebench(d, &["--config", "sweep.json", "--out", "s", "sweep"]);
    assert_eq!(out.status.code(), Some(1));
    let csv = std::fs::read_to_string(d.join("s/cells.csv")).unwrap();
    assert!(csv.contains("patch_size=16,") && csv.contains("error"));
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 6);
    for cmd in ["train", "prepare", "labels", "patches", "partition"] {
        ok(&icebench(
            d,
            &["--config", "run.json", "--out", "dry", "--dry-run", cmd],
        ));
    }
    ok(&icebench(
        d,
        &[
            "--config",
            "synth.json",
            "--out",
            "dry",
            "--dry-run",
            "synth",
        ],
    ));
    assert!(!d.join("dry").exists());
}

#[test]
fn report_regenerates_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 8);
    let cfg =
        format!(r#"{{"name": "fc", "run": {RUN}, "experiment": {{"kind": "fair_compare"}}}}"#);
    std::fs::write(d.join("fc.json"), cfg).unwrap();
    ok(&icebench(
        d,
        &["--config", "fc.json", "--out", "a", "fair-compare"],
    ));
    ok(&icebench(
        d,
        &["--config", "a/report.json", "--out", "b", "report"],
    ));
    for f in ["cells.csv", "metrics.json", "plotdata/iou.tsv"] {
        assert_eq!(
            std::fs::read(d.join("a").join(f)).unwrap(),
            std::fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}
