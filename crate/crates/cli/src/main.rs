//! `icebench` command-line entry point.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use icebench::experiments::{self, ExperimentConfig, ExperimentKind, ExperimentReport};
use icebench::labels::rasterize_labels;
use icebench::metrics::MetricsReport;
use icebench::model::{ModelMeta, TrainedModel, LOG_FILE};
use icebench::partition::{
    make_splits, patch_class_distribution, pixel_class_distribution, PartitionKey,
};
use icebench::pipeline::{self, RunConfig};
use icebench::preprocess::NormalizationStats;
use icebench::sampling::{extract_all, write_jsonl};
use icebench::scene::{load_scene, write_scene, DatasetManifest, Split};
use icebench::synth::{self, ShiftKind, SynthSpec};
use icebench::{parallel, Error};
use log::info;
use serde::Serialize;

const NORMALIZATION_FILE: &str = "normalization.json";
const RUN_CONFIG_FILE: &str = "run_config.json";
const MODEL_DIR: &str = "model";

#[derive(Parser, Debug)]
#[command(
    name = "icebench",
    version,
    about = "Sea-ice classification benchmark harness"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Configuration file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(
        long,
        global = true,
        env = "ICEBENCH_OUT",
        default_value = "icebench_out"
    )]
    out: PathBuf,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    /// Validate configuration without running.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Shift {
    Season,
    Region,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Emit a paired shift dataset instead of a single corpus.
        #[arg(long, value_enum)]
        shift: Option<Shift>,
        /// Keep the class sets of the two shift groups disjoint.
        #[arg(long)]
        disjoint: bool,
    },
    /// Label, align and downscale scenes, and fit normalization on the training split.
    Prepare,
    /// Rasterize per-pixel labels for every scene.
    Labels,
    /// Extract training patches to JSONL.
    Patches,
    /// Split the training manifest and report class distributions.
    Partition,
    /// Train a reference model.
    Train,
    /// Score a trained model on the test manifest.
    Evaluate {
        /// Model directory; defaults to `<out>/model`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train on each partition and score on each partition.
    Transfer,
    /// Vary one setting.
    Sweep,
    /// Toggle augmentation, land handling and border distance.
    AblatePrep,
    /// Compare patch and pixel models at pixel granularity.
    FairCompare,
    /// Channel attribution by replacement.
    FeatureAblation {
        /// Ablate a saved model on the test manifest instead of training one.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Regenerate tables and plot data from a saved report.
    Report,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl fmt::Display) -> Self {
        Self {
            code: 2,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl fmt::Display) -> Self {
        Self {
            code: 1,
            message: message.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() || matches!(e, Error::UntrainedModel) {
            Failure::config(e)
        } else {
            Failure::runtime(e)
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn config_path(g: &Global) -> CliResult<&Path> {
    let p = g
        .config
        .as_deref()
        .ok_or_else(|| Failure::config("--config is required for this subcommand"))?;
    if !p.is_file() {
        return Err(Failure::config(format!(
            "config file {} does not exist",
            p.display()
        )));
    }
    Ok(p)
}

fn load_run(g: &Global) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::read(config_path(g)?).map_err(|e| match e {
        Error::Io { .. } => Failure::config(e),
        other => other.into(),
    })?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    for p in [&cfg.train_manifest, &cfg.test_manifest] {
        if !p.is_file() {
            return Err(Failure::config(format!(
                "manifest {} does not exist",
                p.display()
            )));
        }
    }
    Ok(cfg)
}

fn load_experiment(g: &Global, expected: &str) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::read(config_path(g)?)?;
    if let Some(s) = g.seed {
        cfg.run.seed = s;
    }
    if cfg.experiment.name() != expected {
        return Err(Failure::config(format!(
            "config describes a {} experiment, expected {expected}",
            cfg.experiment.name()
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(p: &Path) -> CliResult {
    std::fs::create_dir_all(p)
        .map_err(|e| Failure::config(format!("cannot create {}: {e}", p.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(Failure::runtime)?;
    std::fs::write(path, text + "\n")
        .map_err(|e| Failure::runtime(format!("writing {}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("parsing {}: {e}", path.display())))
}

fn print_metrics(label: &str, m: &MetricsReport) {
    let w = m.weighted;
    println!(
        "{label}: accuracy {:.4}  precision {:.4}  recall {:.4}  F1 {:.4}  IoU {:.4}  (n={})",
        w.accuracy, w.precision, w.recall, w.f1, w.iou, m.n_samples
    );
}

fn cmd_synth(g: &Global, shift: Option<Shift>, disjoint: bool) -> CliResult {
    let mut spec = SynthSpec::read(config_path(g)?)?;
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    spec.validate()?;
    if g.dry_run {
        println!(
            "synthetic spec ok: {} scenes of {}x{}",
            spec.n_scenes, spec.height, spec.width
        );
        return Ok(());
    }
    create_dir(&g.out)?;
    let out = match shift {
        None => synth::generate(&spec, &g.out)?,
        Some(s) => {
            let kind = match s {
                Shift::Season => ShiftKind::Season,
                Shift::Region => ShiftKind::Region,
            };
            synth::generate_paired_shift(&spec, kind, disjoint, &g.out)?
        }
    };
    println!(
        "wrote {} scenes to {} (train manifest {}, test manifest {})",
        out.scene_dirs.len(),
        g.out.display(),
        out.train.display(),
        out.test.display()
    );
    for (name, path) in &out.groups {
        println!("group {name}: {}", path.display());
    }
    Ok(())
}

fn cmd_prepare(g: &Global) -> CliResult {
    let cfg = load_run(g)?;
    if g.dry_run {
        println!("run config ok");
        return Ok(());
    }
    let splits = pipeline::prepare_splits(&cfg)?;
    let channels = pipeline::model_channels(&cfg.preprocess, &splits.train);
    let stats = pipeline::fit_normalization(&splits.train, &channels, &cfg.preprocess)?;
    let id = stats.id();
    let dir = g.out.join("prepared");
    let mut manifests: BTreeMap<&str, Vec<PathBuf>> = BTreeMap::new();
    for (name, scenes) in [
        ("train", &splits.train),
        ("validation", &splits.val),
        ("test", &splits.test),
    ] {
        for p in scenes {
            let mut scene = p.scene.clone();
            if let Some(prov) = scene.provenance.as_mut() {
                prov.normalization_id = Some(id.clone());
            }
            let scene_dir = dir.join(&scene.scene_id);
            write_scene(&scene, &scene_dir)?;
            p.labels.write(
                &scene_dir,
                &scene.scene_id,
                cfg.labeling.dominance_threshold,
            )?;
            manifests
                .entry(name)
                .or_default()
                .push(PathBuf::from(&scene.scene_id));
        }
    }
    for (name, scenes) in manifests {
        let split = match name {
            "train" => Split::Train,
            "validation" => Split::Validation,
            _ => Split::Test,
        };
        DatasetManifest { split, scenes }.write(dir.join(format!("{name}.json")))?;
    }
    write_json(&dir.join(NORMALIZATION_FILE), &stats)?;
    println!(
        "prepared {} train / {} validation / {} test scenes into {} (normalization {id})",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        dir.display()
    );
    Ok(())
}

fn all_scene_paths(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let mut paths = DatasetManifest::read(&cfg.train_manifest)?.scenes;
    paths.extend(DatasetManifest::read(&cfg.test_manifest)?.scenes);
    paths.sort();
    paths.dedup();
    Ok(paths)
}

fn cmd_labels(g: &Global) -> CliResult {
    let cfg = load_run(g)?;
    if g.dry_run {
        println!("run config ok");
        return Ok(());
    }
    let dir = g.out.join("labels");
    let mut counts = [0u64; icebench::N_CLASSES + 1];
    for path in all_scene_paths(&cfg)? {
        let scene = load_scene(&path)
            .map_err(|e| Failure::runtime(format!("scene {}: {e}", path.display())))?;
        let labels = rasterize_labels(&scene, &cfg.labeling);
        for &v in labels.values.as_slice() {
            counts[(v as usize).min(icebench::N_CLASSES)] += 1;
        }
        labels.write(&dir, &scene.scene_id, cfg.labeling.dominance_threshold)?;
    }
    println!("labels written to {}", dir.display());
    for class in icebench::IceClass::ALL {
        println!("  {:<12} {}", class.name(), counts[class.index() as usize]);
    }
    println!("  {:<12} {}", "ignore", counts[icebench::N_CLASSES]);
    Ok(())
}

fn train_inputs(
    cfg: &RunConfig,
) -> CliResult<(pipeline::PreparedSplits, Vec<String>, NormalizationStats)> {
    let splits = pipeline::prepare_splits(cfg)?;
    let channels = pipeline::model_channels(&cfg.preprocess, &splits.train);
    let stats = pipeline::fit_normalization(&splits.train, &channels, &cfg.preprocess)?;
    Ok((splits, channels, stats))
}

fn cmd_patches(g: &Global, workers: usize) -> CliResult {
    let cfg = load_run(g)?;
    if g.dry_run {
        println!("run config ok");
        return Ok(());
    }
    let (splits, channels, stats) = train_inputs(&cfg)?;
    let inputs = pipeline::to_inputs(&splits.train, &stats, &channels, &cfg)?;
    let records = extract_all(&inputs, &cfg.effective_sampling(), workers)?;
    let path = g.out.join("patches.jsonl");
    let summary = write_jsonl(&records, &path)?;
    write_json(&g.out.join("patches_summary.json"), &summary)?;
    println!(
        "{} patches from {} scenes -> {}",
        summary.n_samples,
        inputs.len(),
        path.display()
    );
    for class in icebench::IceClass::ALL {
        println!(
            "  {:<12} {}",
            class.name(),
            summary.class_counts[class.index() as usize]
        );
    }
    Ok(())
}

fn cmd_partition(g: &Global) -> CliResult {
    let cfg = load_run(g)?;
    let ctx = cfg.partition_context()?;
    if g.dry_run {
        println!("run config ok");
        return Ok(());
    }
    let manifest = DatasetManifest::read(&cfg.train_manifest)?;
    let headers = manifest.headers()?;
    let (train, val) = make_splits(
        &manifest,
        &headers,
        &cfg.train_filter,
        cfg.holdout,
        cfg.seed,
        &ctx,
    )?;
    create_dir(&g.out)?;
    train.write(g.out.join("train_split.json"))?;
    val.write(g.out.join("validation_split.json"))?;

    let mut prepared = pipeline::prepare_paths(&train.scenes, &cfg.labeling, &cfg.preprocess)?;
    prepared.extend(pipeline::prepare_paths(
        &val.scenes,
        &cfg.labeling,
        &cfg.preprocess,
    )?);
    let channels = pipeline::model_channels(&cfg.preprocess, &prepared);
    let stats = pipeline::fit_normalization(&prepared, &channels, &cfg.preprocess)?;
    let inputs = pipeline::to_inputs(&prepared, &stats, &channels, &cfg)?;
    let records = pipeline::extract_records(&inputs, &cfg.effective_sampling());
    let input_headers: Vec<_> = inputs.iter().map(|i| i.header.clone()).collect();
    let mut table = BTreeMap::new();
    for key in [
        PartitionKey::All,
        PartitionKey::Season,
        PartitionKey::Cryo,
        PartitionKey::Region,
    ] {
        let key_name = serde_json::to_value(key).map_err(Failure::runtime)?;
        let key_name = key_name.as_str().unwrap_or("key").to_string();
        let pixels = pixel_class_distribution(&inputs, key, &ctx);
        let patches = patch_class_distribution(&records, &input_headers, key, &ctx);
        match (pixels, patches) {
            (Ok(px), Ok(pt)) => {
                table.insert(key_name, serde_json::json!({"pixels": px, "patches": pt}));
            }
            (Err(e), _) | (_, Err(e)) => info!("skipping {key_name} distribution: {e}"),
        }
    }
    write_json(&g.out.join("class_distribution.json"), &table)?;
    println!(
        "{} train / {} validation scenes; splits and class_distribution.json in {}",
        train.scenes.len(),
        val.scenes.len(),
        g.out.display()
    );
    Ok(())
}

fn cmd_train(g: &Global) -> CliResult {
    let cfg = load_run(g)?;
    if g.dry_run {
        println!("run config ok");
        return Ok(());
    }
    let (splits, channels, stats) = train_inputs(&cfg)?;
    let train = pipeline::to_inputs(&splits.train, &stats, &channels, &cfg)?;
    let val = pipeline::to_inputs(&splits.val, &stats, &channels, &cfg)?;
    let (model, log, samples) = pipeline::train_model(&train, &val, &channels, &cfg)?;
    let dir = g.out.join(MODEL_DIR);
    let meta = ModelMeta {
        normalization_id: Some(stats.id()),
        ..model.meta()
    };
    model.save(&dir, &meta)?;
    write_json(&dir.join(NORMALIZATION_FILE), &stats)?;
    write_json(&dir.join(RUN_CONFIG_FILE), &cfg)?;
    std::fs::write(dir.join(LOG_FILE), log.to_jsonl())
        .map_err(|e| Failure::runtime(format!("writing log: {e}")))?;
    if let Some(w) = &log.warning {
        println!("warning: {w}");
    }
    println!(
        "trained {} model on {} samples for {} epochs (best epoch {}, val loss {:.5}) -> {}",
        meta.kind,
        samples.n_samples,
        log.epochs.len(),
        log.best_epoch,
        log.best_val_loss().unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

fn load_model_dir(dir: &Path) -> CliResult<(TrainedModel, ModelMeta, NormalizationStats)> {
    let (model, meta) = TrainedModel::load(dir).map_err(|e| match e {
        Error::UntrainedModel => Failure::config(format!(
            "no trained model in {}; run `train` first",
            dir.display()
        )),
        other => other.into(),
    })?;
    let stats: NormalizationStats = read_json(&dir.join(NORMALIZATION_FILE))?;
    if meta
        .normalization_id
        .as_deref()
        .is_some_and(|id| id != stats.id())
    {
        return Err(Failure::config(format!(
            "normalization stats in {} do not match the model",
            dir.display()
        )));
    }
    Ok((model, meta, stats))
}

fn test_inputs(
    cfg: &RunConfig,
    meta: &ModelMeta,
    stats: &NormalizationStats,
) -> CliResult<Vec<icebench::preprocess::ModelInput>> {
    let ctx = cfg.partition_context()?;
    let manifest = DatasetManifest::read(&cfg.test_manifest)?;
    let headers = manifest.headers()?;
    let keep = icebench::partition::filter_indices(&headers, &cfg.test_filter, &ctx)?;
    let paths: Vec<PathBuf> = keep.iter().map(|&i| manifest.scenes[i].clone()).collect();
    let prepared = pipeline::prepare_paths(&paths, &cfg.labeling, &cfg.preprocess)?;
    Ok(pipeline::to_inputs(&prepared, stats, &meta.channels, cfg)?)
}

fn cmd_evaluate(g: &Global, model_dir: Option<PathBuf>) -> CliResult {
    let cfg = load_run(g)?;
    let dir = model_dir.unwrap_or_else(|| g.out.join(MODEL_DIR));
    let (model, meta, stats) = load_model_dir(&dir)?;
    if g.dry_run {
        println!("run config and model ok");
        return Ok(());
    }
    let test = test_inputs(&cfg, &meta, &stats)?;
    let cm = pipeline::evaluate(&model, &test, &cfg.effective_sampling())?;
    let report = cm.report()?;
    write_json(&g.out.join("metrics.json"), &report)?;
    write_json(&g.out.join("confusion.json"), &cm)?;
    print_metrics(
        &format!("{} model on {} test scenes", meta.kind, test.len()),
        &report,
    );
    Ok(())
}

fn finish_experiment(g: &Global, report: &ExperimentReport) -> CliResult {
    experiments::emit_report(report, &g.out)?;
    print_report(report);
    if report.has_errors() {
        return Err(Failure::runtime(format!(
            "{} cell(s) failed; see {}",
            error_count(report),
            g.out.display()
        )));
    }
    Ok(())
}

fn error_count(report: &ExperimentReport) -> usize {
    report
        .cells
        .iter()
        .filter(|c| matches!(c.status, experiments::CellStatus::Error { .. }))
        .count()
}

fn print_report(report: &ExperimentReport) {
    println!(
        "{} ({}): {} cells",
        report.name,
        report.kind,
        report.cells.len()
    );
    for c in &report.cells {
        match (&c.status, &c.metrics) {
            (experiments::CellStatus::Ok, Some(m)) => print_metrics(&format!("  {}", c.key), m),
            (experiments::CellStatus::Skipped { reason }, _) => {
                println!("  {}: skipped ({reason})", c.key)
            }
            (experiments::CellStatus::Error { message }, _) => {
                println!("  {}: error ({message})", c.key)
            }
            _ => println!("  {}: no metrics", c.key),
        }
    }
    if let Some(attr) = &report.attributions {
        println!("  channel attribution (F1 drop):");
        for a in attr {
            println!("    {:<24} {:+.4}", a.channel, a.f1_drop);
        }
    }
}

fn cmd_experiment(g: &Global, kind: &str) -> CliResult {
    let cfg = load_experiment(g, kind)?;
    if g.dry_run {
        println!("{kind} config ok");
        return Ok(());
    }
    let report = experiments::run_experiment(&cfg)?;
    finish_experiment(g, &report)
}

fn cmd_feature_ablation(g: &Global, model_dir: Option<PathBuf>) -> CliResult {
    let Some(dir) = model_dir else {
        return cmd_experiment(g, "feature_ablation");
    };
    let cfg = load_experiment(g, "feature_ablation")?;
    let ExperimentKind::FeatureAblation { baseline } = cfg.experiment else {
        unreachable!("kind checked by load_experiment");
    };
    let (model, meta, stats) = load_model_dir(&dir)?;
    if g.dry_run {
        println!("feature_ablation config and model ok");
        return Ok(());
    }
    let test = test_inputs(&cfg.run, &meta, &stats)?;
    let sampling = cfg.run.effective_sampling();
    let full = pipeline::evaluate(&model, &test, &sampling)?.report()?;
    let attr = experiments::feature_ablation(&model, &test, &sampling, baseline)?;
    let mut cell = experiments::CellReport {
        key: "full".into(),
        row: "full".into(),
        col: None,
        status: experiments::CellStatus::Ok,
        metrics: Some(full),
        efficiency: None,
        config: cfg.run.clone(),
        stage_hashes: experiments::stage_hashes(&cfg.run),
        n_train_samples: None,
    };
    cell.stage_hashes
        .insert("model".into(), experiments::hash_dir(&dir)?);
    let report = ExperimentReport {
        name: cfg.name.clone(),
        kind: cfg.experiment.name().into(),
        cells: vec![cell],
        attributions: Some(attr),
        provenance: experiments::ReportProvenance {
            seed: cfg.run.seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            file_hashes: BTreeMap::new(),
        },
    };
    finish_experiment(g, &report)
}

fn cmd_report(g: &Global) -> CliResult {
    let path = config_path(g)?;
    let report = experiments::read_report(path)?;
    if g.dry_run {
        println!("report ok: {} cells", report.cells.len());
        return Ok(());
    }
    experiments::emit_report(&report, &g.out)?;
    print_report(&report);
    Ok(())
}

fn dispatch(cli: &Cli, workers: usize) -> CliResult {
    let g = &cli.global;
    match &cli.command {
        Command::Synth { shift, disjoint } => cmd_synth(g, *shift, *disjoint),
        Command::Prepare => cmd_prepare(g),
        Command::Labels => cmd_labels(g),
        Command::Patches => cmd_patches(g, workers),
        Command::Partition => cmd_partition(g),
        Command::Train => cmd_train(g),
        Command::Evaluate { model } => cmd_evaluate(g, model.clone()),
        Command::Transfer => cmd_experiment(g, "transfer"),
        Command::Sweep => cmd_experiment(g, "sweep"),
        Command::AblatePrep => cmd_experiment(g, "prep_ablation"),
        Command::FairCompare => cmd_experiment(g, "fair_compare"),
        Command::FeatureAblation { model } => cmd_feature_ablation(g, model.clone()),
        Command::Report => cmd_report(g),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.global.log_level)
        .init();
    let workers = cli
        .global
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        eprintln!("error: --workers must be at least 1");
        return ExitCode::from(2);
    }
    let result =
        parallel::install(workers, || dispatch(&cli, workers)).unwrap_or_else(|e| Err(e.into()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
