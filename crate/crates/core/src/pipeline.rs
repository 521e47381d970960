//! End-to-end run: load, label, prepare, normalize, sample, train, evaluate.

use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{rasterize_labels, LabelRaster, LabelingConfig, IGNORE};
use crate::metrics::{
    confusion_rasters, summarize_phase, ConfusionMatrix, EfficiencyReport, MetricsReport, Phase,
    ResourceMonitor,
};
use crate::model::{
    ModelContract, PatchRefModel, PatchSet, PixelRefModel, PixelSampling, TrainConfig,
    TrainedModel, TrainingLog,
};
use crate::partition::{
    filter_indices, split_indices, Holdout, MeltClimatology, PartitionContext, RegionMap,
    SceneFilter,
};
use crate::preprocess::{
    align_scene, apply_mask_and_normalize, compute_normalization, downscale_labels,
    downscale_scene, AlignmentPolicy, DegeneratePolicy, LandPolicy, ModelInput, NormalizationStats,
};
use crate::rng::StreamKey;
use crate::sampling::{
    extract_patches, AugmentationConfig, PatchRecord, SamplingConfig, SamplingMode,
};
use crate::scene::{load_scene, DatasetManifest, Scene, SceneHeader, MONTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    #[default]
    Patch,
    Pixel,
}

impl std::fmt::Display for Paradigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Paradigm::Patch => "patch",
            Paradigm::Pixel => "pixel",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub downscale_ratio: usize,
    pub alignment: AlignmentPolicy,
    pub land_policy: LandPolicy,
    pub degenerate: DegeneratePolicy,
    /// Model channels in order; defaults to every scene channel plus `month`.
    pub channels: Option<Vec<String>>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            downscale_ratio: 1,
            alignment: AlignmentPolicy::default(),
            land_policy: LandPolicy::default(),
            degenerate: DegeneratePolicy::Exempt,
            channels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub climatology: Option<PathBuf>,
    pub regions: Option<PathBuf>,
    pub paradigm: Paradigm,
    pub labeling: LabelingConfig,
    pub preprocess: PreprocessConfig,
    pub sampling: SamplingConfig,
    pub augmentation: AugmentationConfig,
    pub training: TrainConfig,
    pub holdout: Holdout,
    pub train_filter: SceneFilter,
    pub test_filter: SceneFilter,
    /// Cap on training samples (patches, or windows for pixel models),
    /// taken as a prefix of one seeded shuffle so smaller sets nest.
    pub data_size: Option<usize>,
    pub seed: u64,
    pub monitor_interval_ms: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            train_manifest: PathBuf::new(),
            test_manifest: PathBuf::new(),
            climatology: None,
            regions: None,
            paradigm: Paradigm::Patch,
            labeling: LabelingConfig::default(),
            preprocess: PreprocessConfig::default(),
            sampling: SamplingConfig::default(),
            augmentation: AugmentationConfig::default(),
            training: TrainConfig::default(),
            holdout: Holdout::default(),
            train_filter: SceneFilter::default(),
            test_filter: SceneFilter::default(),
            data_size: None,
            seed: 0,
            monitor_interval_ms: 50,
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if !p.as_os_str().is_empty() && p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::json("run config", e))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text, path.parent().unwrap_or_else(|| Path::new(".")))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.train_manifest);
        resolve(base, &mut self.test_manifest);
        for p in [&mut self.climatology, &mut self.regions]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.labeling.validate()?;
        self.effective_sampling().validate()?;
        self.augmentation.validate()?;
        self.training.validate()?;
        if self.preprocess.downscale_ratio == 0 {
            return Err(Error::Config("downscale_ratio must be at least 1".into()));
        }
        if self.data_size == Some(0) {
            return Err(Error::Config("data_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Sampling settings with the mode implied by the paradigm and the run seed.
    pub fn effective_sampling(&self) -> SamplingConfig {
        SamplingConfig {
            mode: match self.paradigm {
                Paradigm::Patch => SamplingMode::Patch,
                Paradigm::Pixel => SamplingMode::Crop,
            },
            seed: self.seed,
            ..self.sampling.clone()
        }
    }

    pub fn effective_training(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.training.clone()
        }
    }

    pub fn partition_context(&self) -> Result<PartitionContext> {
        Ok(PartitionContext {
            seasons: Default::default(),
            climatology: match &self.climatology {
                Some(p) => MeltClimatology::read(p)?,
                None => MeltClimatology::default(),
            },
            regions: match &self.regions {
                Some(p) => RegionMap::read(p)?,
                None => RegionMap::default(),
            },
        })
    }
}

/// A scene after labeling, alignment and downscaling, before normalization.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub header: SceneHeader,
    pub scene: Scene,
    pub labels: LabelRaster,
}

pub fn prepare_scene(
    scene: &Scene,
    labeling: &LabelingConfig,
    pre: &PreprocessConfig,
) -> Result<PreparedScene> {
    let labels = rasterize_labels(scene, labeling);
    let aligned = align_scene(scene, &pre.alignment)?;
    let scene = downscale_scene(
        &aligned,
        pre.downscale_ratio,
        &pre.alignment,
        labeling.land_zone,
    )?;
    let labels = downscale_labels(&labels, pre.downscale_ratio)?;
    Ok(PreparedScene {
        header: scene.header(),
        scene,
        labels,
    })
}

pub fn prepare_paths(
    paths: &[PathBuf],
    labeling: &LabelingConfig,
    pre: &PreprocessConfig,
) -> Result<Vec<PreparedScene>> {
    paths
        .par_iter()
        .map(|p| prepare_scene(&load_scene(p)?, labeling, pre))
        .collect()
}

/// Every channel of the first scene plus `month`, unless configured.
pub fn model_channels(pre: &PreprocessConfig, scenes: &[PreparedScene]) -> Vec<String> {
    if let Some(c) = &pre.channels {
        return c.clone();
    }
    let mut names: Vec<String> = scenes
        .first()
        .map(|s| {
            s.scene
                .channel_names()
                .into_iter()
                .map(String::from)
                .collect()
        })
        .unwrap_or_default();
    names.push(MONTH.to_string());
    names
}

pub fn fit_normalization(
    train: &[PreparedScene],
    channels: &[String],
    pre: &PreprocessConfig,
) -> Result<NormalizationStats> {
    let scenes: Vec<Scene> = train.iter().map(|p| p.scene.clone()).collect();
    compute_normalization(&scenes, channels, pre.degenerate)
}

pub fn to_inputs(
    prepared: &[PreparedScene],
    stats: &NormalizationStats,
    channels: &[String],
    cfg: &RunConfig,
) -> Result<Vec<ModelInput>> {
    prepared
        .par_iter()
        .map(|p| {
            apply_mask_and_normalize(
                &p.scene,
                &p.labels,
                stats,
                channels,
                cfg.preprocess.land_policy,
                cfg.labeling.land_zone,
            )
        })
        .collect()
}

/// Grid patches of every input, in input order.
pub fn extract_records(inputs: &[ModelInput], sampling: &SamplingConfig) -> Vec<PatchRecord> {
    inputs
        .par_iter()
        .map(|i| extract_patches(i, sampling))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// First `n` records of a seeded shuffle; prefixes of one shuffle nest.
pub fn nested_subset(records: &[PatchRecord], n: usize, seed: u64) -> Vec<PatchRecord> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut StreamKey::new(seed).with_str("data_size").rng());
    order.truncate(n);
    order.sort_unstable();
    order.into_iter().map(|i| records[i].clone()).collect()
}

/// Samples a model was trained on, for provenance and subset checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSamples {
    pub records: Vec<PatchRecord>,
    pub n_samples: usize,
}

pub fn train_model(
    train: &[ModelInput],
    val: &[ModelInput],
    channels: &[String],
    cfg: &RunConfig,
) -> Result<(TrainedModel, TrainingLog, TrainingSamples)> {
    let sampling = cfg.effective_sampling();
    let training = cfg.effective_training();
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientScenes {
            needed: 2,
            available: train.len() + val.len(),
        });
    }
    match cfg.paradigm {
        Paradigm::Patch => {
            let mut records = extract_records(train, &sampling);
            if let Some(n) = cfg.data_size {
                records = nested_subset(&records, n, cfg.seed);
            }
            let val_records = extract_records(
                val,
                &SamplingConfig {
                    border_distance: 0,
                    ..sampling.clone()
                },
            );
            if records.is_empty() || val_records.is_empty() {
                return Err(Error::InsufficientScenes {
                    needed: 1,
                    available: 0,
                });
            }
            let mut model = PatchRefModel::new(channels.to_vec(), sampling.size());
            let log = model.fit(
                PatchSet {
                    inputs: train,
                    records: &records,
                },
                PatchSet {
                    inputs: val,
                    records: &val_records,
                },
                &training,
                &cfg.augmentation,
            )?;
            let n = records.len();
            Ok((
                TrainedModel::Patch(model),
                log,
                TrainingSamples {
                    records,
                    n_samples: n,
                },
            ))
        }
        Paradigm::Pixel => {
            let (plan, samples) = match cfg.data_size {
                Some(n) => {
                    let windows = extract_records(
                        train,
                        &SamplingConfig {
                            mode: SamplingMode::Patch,
                            purity: 0.51,
                            ..sampling.clone()
                        },
                    );
                    let chosen = nested_subset(&windows, n, cfg.seed);
                    let count = chosen.len();
                    (
                        PixelSampling::Windows(chosen.clone()),
                        TrainingSamples {
                            records: chosen,
                            n_samples: count,
                        },
                    )
                }
                None => (
                    PixelSampling::Crops(sampling.clone()),
                    TrainingSamples {
                        records: Vec::new(),
                        n_samples: training.epoch_steps,
                    },
                ),
            };
            if let PixelSampling::Windows(w) = &plan {
                if w.is_empty() {
                    return Err(Error::InsufficientScenes {
                        needed: 1,
                        available: 0,
                    });
                }
            }
            let mut model = PixelRefModel::new(channels.to_vec());
            let log = model.fit(train, val, &plan, &training, &cfg.augmentation)?;
            Ok((TrainedModel::Pixel(model), log, samples))
        }
    }
}

/// Scores `model` on `test`: patch models on grid patches of the test
/// scenes, pixel models on every labeled pixel.
pub fn evaluate(
    model: &TrainedModel,
    test: &[ModelInput],
    sampling: &SamplingConfig,
) -> Result<ConfusionMatrix> {
    let per_scene: Vec<Result<ConfusionMatrix>> = match model {
        TrainedModel::Patch(m) => {
            let eval = SamplingConfig {
                mode: SamplingMode::Patch,
                patch_size: Some(m.patch_size),
                border_distance: 0,
                ..sampling.clone()
            };
            test.par_iter()
                .map(|input| {
                    let mut cm = ConfusionMatrix::default();
                    for r in extract_patches(input, &eval) {
                        let Some(label) = r.label else { continue };
                        let pred = m.predict_patch(&input.features.window(r.row, r.col, r.size))?;
                        cm.record(label, pred.index())?;
                    }
                    Ok(cm)
                })
                .collect()
        }
        TrainedModel::Pixel(m) => test
            .par_iter()
            .map(|input| confusion_rasters(&input.labels, &m.predict_pixels(&input.features)?))
            .collect(),
    };
    let mut total = ConfusionMatrix::default();
    for cm in per_scene {
        total.merge(&cm?);
    }
    Ok(total)
}

/// Prepared splits of one run, before normalization.
pub struct PreparedSplits {
    pub train: Vec<PreparedScene>,
    pub val: Vec<PreparedScene>,
    pub test: Vec<PreparedScene>,
}

pub fn prepare_splits(cfg: &RunConfig) -> Result<PreparedSplits> {
    let ctx = cfg.partition_context()?;
    let train_manifest = DatasetManifest::read(&cfg.train_manifest)?;
    let test_manifest = DatasetManifest::read(&cfg.test_manifest)?;
    let train_headers = train_manifest.headers()?;
    let test_headers = test_manifest.headers()?;
    let keep = filter_indices(&train_headers, &cfg.train_filter, &ctx)?;
    let (tr, va) = split_indices(keep.len(), cfg.holdout, cfg.seed)?;
    let pick = |idx: &[usize]| {
        idx.iter()
            .map(|&i| train_manifest.scenes[keep[i]].clone())
            .collect::<Vec<_>>()
    };
    let test_keep = filter_indices(&test_headers, &cfg.test_filter, &ctx)?;
    if test_keep.is_empty() {
        return Err(Error::InsufficientScenes {
            needed: 1,
            available: 0,
        });
    }
    let test_paths: Vec<PathBuf> = test_keep
        .iter()
        .map(|&i| test_manifest.scenes[i].clone())
        .collect();
    Ok(PreparedSplits {
        train: prepare_paths(&pick(&tr), &cfg.labeling, &cfg.preprocess)?,
        val: prepare_paths(&pick(&va), &cfg.labeling, &cfg.preprocess)?,
        test: prepare_paths(&test_paths, &cfg.labeling, &cfg.preprocess)?,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: TrainedModel,
    pub log: TrainingLog,
    pub samples: TrainingSamples,
    pub stats: NormalizationStats,
    pub channels: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    pub efficiency: EfficiencyReport,
}

/// Trains on `splits.train`, selects on `splits.val`, scores on `splits.test`.
pub fn run_prepared(splits: &PreparedSplits, cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let channels = model_channels(&cfg.preprocess, &splits.train);
    let stats = fit_normalization(&splits.train, &channels, &cfg.preprocess)?;
    let train = to_inputs(&splits.train, &stats, &channels, cfg)?;
    let val = to_inputs(&splits.val, &stats, &channels, cfg)?;
    let test = to_inputs(&splits.test, &stats, &channels, cfg)?;
    let interval = Duration::from_millis(cfg.monitor_interval_ms.max(1));
    let units = rayon::current_num_threads() as u32;

    let monitor = ResourceMonitor::start(Phase::Training, interval, units);
    let trained = train_model(&train, &val, &channels, cfg);
    let training_phase = monitor.finish();
    let (model, log, samples) = trained?;

    let monitor = ResourceMonitor::start(Phase::Inference, interval, units);
    let confusion = evaluate(&model, &test, &cfg.effective_sampling());
    let inference_phase = monitor.finish();
    let confusion = confusion?;
    let metrics = confusion.report()?;
    let efficiency = EfficiencyReport::from_phases(
        &summarize_phase(&training_phase)?,
        &summarize_phase(&inference_phase)?,
        log.epochs.len(),
    );
    Ok(RunOutcome {
        model,
        log,
        samples,
        stats,
        channels,
        confusion,
        metrics,
        efficiency,
    })
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    run_prepared(&prepare_splits(cfg)?, cfg)
}

/// Number of labeled pixels in `inputs`.
pub fn labeled_pixels(inputs: &[ModelInput]) -> usize {
    inputs
        .iter()
        .map(|i| {
            i.labels
                .values
                .as_slice()
                .iter()
                .filter(|&&v| v != IGNORE)
                .count()
        })
        .sum()
}
