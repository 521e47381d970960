use std::path::Path;

use icebench::experiments::{
    emit_report, run_experiment, run_sweep, run_transferability, CellStatus, ExperimentConfig,
    ExperimentKind, PrepToggles, SweepAxis, TransferPreset, CELLS_FILE, METRICS_FILE, PLOT_DIR,
    REPORT_FILE,
};
use icebench::model::TrainConfig;
use icebench::partition::{Holdout, SceneFilter, Season};
use icebench::pipeline::{
    fit_normalization, model_channels, prepare_splits, run, to_inputs, train_model, RunConfig,
};
use icebench::sampling::SamplingConfig;
use icebench::synth::{generate, Preset, SynthSpec};

fn config(dir: &Path, n_scenes: usize) -> RunConfig {
    let spec = SynthSpec {
        n_scenes,
        n_test: 4,
        height: 64,
        width: 64,
        n_polygons: 6,
        ..SynthSpec::preset(Preset::Separable)
    };
    let out = generate(&spec, dir).unwrap();
    RunConfig {
        train_manifest: out.train,
        test_manifest: out.test,
        climatology: Some(out.climatology),
        regions: Some(out.regions),
        holdout: Holdout::FixedCount(1),
        sampling: SamplingConfig {
            patch_size: Some(16),
            stride: 8,
            ..SamplingConfig::default()
        },
        training: TrainConfig {
            learning_rate: 0.5,
            max_epochs: 30,
            early_stop_patience: 5,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn season_matrix_has_one_cell_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 28);
    let (rows, cols) = TransferPreset::Seasons.cells();
    let cells = run_transferability(&cfg, &rows, &cols).unwrap();
    assert_eq!(cells.len(), rows.len() * cols.len());
    for c in &cells {
        assert!(
            !matches!(c.status, CellStatus::Error { .. }),
            "{}: {:?}",
            c.key,
            c.status
        );
        if c.status == CellStatus::Ok {
            assert!(c.metrics.is_some());
        }
    }
    let baseline_ok = cells
        .iter()
        .filter(|c| c.row == "Baseline" && c.status == CellStatus::Ok)
        .count();
    assert!(baseline_ok > 0);

    // a cell trained and tested on one partition equals a plain run with that filter
    let cell = cells
        .iter()
        .find(|c| c.row == "Baseline" && c.status == CellStatus::Ok)
        .unwrap();
    let season = match cell.col.as_deref().unwrap() {
        "spring" => Season::Spring,
        "summer" => Season::Summer,
        "fall" => Season::Fall,
        _ => Season::Winter,
    };
    let plain = run(&RunConfig {
        test_filter: SceneFilter {
            season: Some(vec![season]),
            ..Default::default()
        },
        ..cfg.clone()
    })
    .unwrap();
    assert_eq!(cell.metrics.as_ref().unwrap(), &plain.metrics);
}

#[test]
fn sparse_partitions_are_skipped_not_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 6);
    let (rows, cols) = TransferPreset::Regions.cells();
    let cells = run_transferability(&cfg, &rows, &cols).unwrap();
    assert!(cells
        .iter()
        .any(|c| matches!(c.status, CellStatus::Skipped { .. })));
    assert!(cells
        .iter()
        .all(|c| !matches!(c.status, CellStatus::Error { .. })));
}

#[test]
fn oversized_patch_is_an_error_cell_and_the_sweep_continues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 10);
    let cells = run_sweep(&cfg, SweepAxis::PatchSize, &[16, 500]).unwrap();
    assert_eq!(cells[0].status, CellStatus::Ok);
    assert!(
        matches!(&cells[1].status, CellStatus::Error { message } if message.contains("patch_size=500"))
    );
}

#[test]
fn data_size_sweep_is_nested() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 10);
    let cells = run_sweep(&cfg, SweepAxis::DataSize, &[5, 20, 1_000_000]).unwrap();
    let n: Vec<usize> = cells.iter().map(|c| c.n_train_samples.unwrap()).collect();
    assert_eq!(&n[..2], &[5, 20]);
    assert!(n[2] >= 20);

    let splits = prepare_splits(&cfg).unwrap();
    let channels = model_channels(&cfg.preprocess, &splits.train);
    let stats = fit_normalization(&splits.train, &channels, &cfg.preprocess).unwrap();
    let tr = to_inputs(&splits.train, &stats, &channels, &cfg).unwrap();
    let va = to_inputs(&splits.val, &stats, &channels, &cfg).unwrap();
    let samples = |size| {
        let c = RunConfig {
            data_size: Some(size),
            ..cfg.clone()
        };
        train_model(&tr, &va, &channels, &c).unwrap().2.records
    };
    let (small, big) = (samples(5), samples(20));
    assert!(small.iter().all(|r| big.contains(r)));
}

#[test]
fn wider_border_trains_on_a_subset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 8);
    let splits = prepare_splits(&cfg).unwrap();
    let channels = model_channels(&cfg.preprocess, &splits.train);
    let stats = fit_normalization(&splits.train, &channels, &cfg.preprocess).unwrap();
    let tr = to_inputs(&splits.train, &stats, &channels, &cfg).unwrap();
    let va = to_inputs(&splits.val, &stats, &channels, &cfg).unwrap();
    let records = |border| {
        let toggles = PrepToggles {
            augmentation: false,
            include_land: false,
            border_distance: border,
        };
        train_model(&tr, &va, &channels, &toggles.apply(&cfg))
            .unwrap()
            .2
            .records
    };
    let (near, far) = (records(0), records(3));
    assert!(far.len() < near.len());
    assert!(far.iter().all(|r| near.contains(r)));
}

#[test]
fn report_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let run = config(&dir.path().join("data"), 8);
    let exp = ExperimentConfig {
        name: "ablate".into(),
        run,
        experiment: ExperimentKind::PrepAblation {
            rows: vec![
                PrepToggles {
                    augmentation: false,
                    include_land: false,
                    border_distance: 0,
                },
                PrepToggles {
                    augmentation: true,
                    include_land: false,
                    border_distance: 0,
                },
            ],
        },
    };
    let report = run_experiment(&exp).unwrap();
    assert!(!report.has_errors());
    let (a, b) = (&report.cells[0].stage_hashes, &report.cells[1].stage_hashes);
    assert_ne!(a["sampling"], b["sampling"]);
    assert_eq!(a["preprocess"], b["preprocess"]);
    assert!(!report.provenance.file_hashes.is_empty());

    let out = dir.path().join("report");
    emit_report(&report, &out).unwrap();
    for f in [REPORT_FILE, METRICS_FILE, CELLS_FILE] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert!(out.join(PLOT_DIR).join("f1.tsv").is_file());
    let csv = std::fs::read_to_string(out.join(CELLS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn experiment_config_rejects_missing_files() {
    let exp = ExperimentConfig {
        name: "x".into(),
        run: RunConfig {
            train_manifest: "/nonexistent/train.json".into(),
            test_manifest: "/nonexistent/test.json".into(),
            ..RunConfig::default()
        },
        experiment: ExperimentKind::Baseline,
    };
    assert!(exp.validate().unwrap_err().is_config());
}
