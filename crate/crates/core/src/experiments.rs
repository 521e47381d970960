//! Config-driven studies built from repeated pipeline runs, and their reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labels::{LabelRaster, N_CLASSES};
use crate::metrics::{confusion_rasters, EfficiencyReport, MetricsReport};
use crate::model::{ModelContract, TrainedModel};
use crate::partition::{split_indices, CryoSeason, PartitionContext, Region, SceneFilter, Season};
use crate::pipeline::{
    evaluate, fit_normalization, model_channels, prepare_paths, run_prepared, to_inputs,
    train_model, Paradigm, PreparedScene, PreparedSplits, RunConfig,
};
use crate::preprocess::{FeatureStack, LandPolicy, ModelInput};
use crate::raster::Raster;
use crate::scene::DatasetManifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedFilter {
    pub key: String,
    #[serde(default)]
    pub filter: SceneFilter,
}

impl NamedFilter {
    fn new(key: &str, filter: SceneFilter) -> Self {
        Self {
            key: key.to_string(),
            filter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferPreset {
    /// Rows: each conventional season and `Baseline`; columns: each season.
    Seasons,
    /// Rows: melt, freeze and `Baseline`; columns: melt and freeze.
    Cryo,
    /// Rows: each region and `All`; columns: each region.
    Regions,
}

impl TransferPreset {
    pub fn cells(self) -> (Vec<NamedFilter>, Vec<NamedFilter>) {
        let season = |s: Season| {
            NamedFilter::new(
                &s.to_string(),
                SceneFilter {
                    season: Some(vec![s]),
                    ..Default::default()
                },
            )
        };
        let cryo = |c: CryoSeason| {
            NamedFilter::new(
                &c.to_string(),
                SceneFilter {
                    cryo: Some(vec![c]),
                    ..Default::default()
                },
            )
        };
        let region = |r: Region| {
            NamedFilter::new(
                &r.to_string(),
                SceneFilter {
                    region: Some(vec![r]),
                    ..Default::default()
                },
            )
        };
        let regions = [
            Region::East,
            Region::West,
            Region::CanadianArctic,
            Region::North,
        ];
        match self {
            TransferPreset::Seasons => {
                let cols: Vec<_> = Season::ALL.iter().map(|&s| season(s)).collect();
                let mut rows = cols.clone();
                rows.push(NamedFilter::new("Baseline", SceneFilter::default()));
                (rows, cols)
            }
            TransferPreset::Cryo => {
                let cols = vec![cryo(CryoSeason::Melt), cryo(CryoSeason::Freeze)];
                let mut rows = cols.clone();
                rows.push(NamedFilter::new("Baseline", SceneFilter::default()));
                (rows, cols)
            }
            TransferPreset::Regions => {
                let cols: Vec<_> = regions.iter().map(|&r| region(r)).collect();
                let mut rows = cols.clone();
                rows.push(NamedFilter::new(
                    "All",
                    SceneFilter {
                        region: Some(regions.to_vec()),
                        ..Default::default()
                    },
                ));
                (rows, cols)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Downscale,
    PatchSize,
    DataSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepToggles {
    pub augmentation: bool,
    pub include_land: bool,
    pub border_distance: usize,
}

impl PrepToggles {
    pub fn key(&self) -> String {
        format!(
            "aug={},land={},border={}",
            if self.augmentation { "on" } else { "off" },
            if self.include_land {
                "include"
            } else {
                "remove"
            },
            self.border_distance
        )
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.augmentation.enabled = self.augmentation;
        cfg.preprocess.land_policy = if self.include_land {
            LandPolicy::Include
        } else {
            LandPolicy::Exclude
        };
        cfg.sampling.allow_land = self.include_land;
        cfg.sampling.border_distance = self.border_distance;
        cfg
    }
}

/// How patch predictions are painted back onto the pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tiling {
    /// Non-overlapping windows; the last window per axis is clamped to the
    /// scene edge and overwrites the overlap.
    #[default]
    Clamped,
    /// Windows every `stride` pixels; each pixel takes the most frequent
    /// prediction among the windows covering it (smaller class on ties).
    Vote { stride: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationBaseline {
    #[default]
    ChannelMean,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentKind {
    Baseline,
    Transfer {
        #[serde(default)]
        preset: Option<TransferPreset>,
        #[serde(default)]
        rows: Vec<NamedFilter>,
        #[serde(default)]
        cols: Vec<NamedFilter>,
    },
    Sweep {
        axis: SweepAxis,
        values: Vec<usize>,
    },
    PrepAblation {
        rows: Vec<PrepToggles>,
    },
    FairCompare {
        #[serde(default)]
        tiling: Tiling,
        /// Crop edge for the pixel model; defaults to the run's patch size.
        #[serde(default)]
        crop_size: Option<usize>,
    },
    FeatureAblation {
        #[serde(default)]
        baseline: AblationBaseline,
    },
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Baseline => "baseline",
            ExperimentKind::Transfer { .. } => "transfer",
            ExperimentKind::Sweep { .. } => "sweep",
            ExperimentKind::PrepAblation { .. } => "prep_ablation",
            ExperimentKind::FairCompare { .. } => "fair_compare",
            ExperimentKind::FeatureAblation { .. } => "feature_ablation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub run: RunConfig,
    pub experiment: ExperimentKind,
}

impl ExperimentConfig {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
        cfg.run
            .resolve_paths(path.parent().unwrap_or_else(|| Path::new(".")));
        Ok(cfg)
    }

    /// Checks settings and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        let mut files = vec![&self.run.train_manifest, &self.run.test_manifest];
        files.extend(self.run.climatology.iter());
        files.extend(self.run.regions.iter());
        for f in files {
            if !f.is_file() {
                return Err(Error::Config(format!(
                    "referenced file {} does not exist",
                    f.display()
                )));
            }
        }
        match &self.experiment {
            ExperimentKind::Transfer { preset, rows, cols } => {
                if preset.is_none() && (rows.is_empty() || cols.is_empty()) {
                    return Err(Error::Config(
                        "transfer needs a preset or explicit rows and cols".into(),
                    ));
                }
            }
            ExperimentKind::Sweep { axis, values } => {
                if values.is_empty() || values.contains(&0) {
                    return Err(Error::Config(format!(
                        "{axis:?} sweep needs positive values"
                    )));
                }
            }
            ExperimentKind::PrepAblation { rows } if rows.is_empty() => {
                return Err(Error::Config("prep_ablation needs at least one row".into()));
            }
            ExperimentKind::FairCompare {
                tiling: Tiling::Vote { stride: 0 },
                ..
            } => return Err(Error::Config("vote tiling stride must be positive".into())),
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Skipped { reason: String },
    Error { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub key: String,
    pub row: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col: Option<String>,
    #[serde(flatten)]
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub efficiency: Option<EfficiencyReport>,
    /// Configuration that reproduces this cell.
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stage_hashes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_train_samples: Option<usize>,
}

impl CellReport {
    fn new(row: &str, col: Option<&str>, config: &RunConfig) -> Self {
        Self {
            key: match col {
                Some(c) => format!("{row}->{c}"),
                None => row.to_string(),
            },
            row: row.to_string(),
            col: col.map(String::from),
            status: CellStatus::Ok,
            metrics: None,
            efficiency: None,
            config: config.clone(),
            stage_hashes: BTreeMap::new(),
            n_train_samples: None,
        }
    }

    fn fail(mut self, err: Error) -> Self {
        self.status = match err {
            Error::InsufficientScenes { .. } => CellStatus::Skipped {
                reason: err.to_string(),
            },
            _ => CellStatus::Error {
                message: format!("cell {}: {err}", self.key),
            },
        };
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub channel: String,
    pub f1_drop: f64,
    /// Recall drop per class index.
    pub recall_drop: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub seed: u64,
    pub tool_version: String,
    pub created_unix: u64,
    /// sha256 of manifests and of each scene directory.
    pub file_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub kind: String,
    pub cells: Vec<CellReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributions: Option<Vec<Attribution>>,
    pub provenance: ReportProvenance,
}

impl ExperimentReport {
    pub fn has_errors(&self) -> bool {
        self.cells
            .iter()
            .any(|c| matches!(c.status, CellStatus::Error { .. }))
    }

    pub fn cell(&self, key: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.key == key)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn json_hash(v: &impl Serialize) -> String {
    sha256_hex(
        serde_json::to_string(v)
            .expect("config serializes")
            .as_bytes(),
    )
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash over the sorted file names and contents of a directory.
pub fn hash_dir(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(
            p.file_name()
                .map(|n| n.as_encoded_bytes())
                .unwrap_or_default(),
        );
        h.update(std::fs::read(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Config hash per pipeline stage. Augmentation belongs to sampling.
pub fn stage_hashes(cfg: &RunConfig) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    out.insert("labeling".into(), json_hash(&cfg.labeling));
    out.insert("preprocess".into(), json_hash(&cfg.preprocess));
    out.insert(
        "sampling".into(),
        json_hash(&(&cfg.effective_sampling(), &cfg.augmentation, cfg.data_size)),
    );
    out.insert(
        "training".into(),
        json_hash(&(&cfg.effective_training(), cfg.paradigm)),
    );
    out.insert(
        "split".into(),
        json_hash(&(&cfg.holdout, &cfg.train_filter, &cfg.test_filter, cfg.seed)),
    );
    out
}

fn provenance(cfg: &RunConfig) -> Result<ReportProvenance> {
    let mut file_hashes = BTreeMap::new();
    let mut scene_dirs = Vec::new();
    for m in [&cfg.train_manifest, &cfg.test_manifest] {
        file_hashes.insert(m.display().to_string(), hash_file(m)?);
        scene_dirs.extend(DatasetManifest::read(m)?.scenes);
    }
    for p in [&cfg.climatology, &cfg.regions].into_iter().flatten() {
        file_hashes.insert(p.display().to_string(), hash_file(p)?);
    }
    scene_dirs.sort();
    scene_dirs.dedup();
    let hashes: Vec<(String, Result<String>)> = scene_dirs
        .par_iter()
        .map(|d| (d.display().to_string(), hash_dir(d)))
        .collect();
    for (k, h) in hashes {
        file_hashes.insert(k, h?);
    }
    Ok(ReportProvenance {
        seed: cfg.seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        file_hashes,
    })
}

fn run_cell(splits: &PreparedSplits, cfg: &RunConfig, mut cell: CellReport) -> CellReport {
    cell.stage_hashes = stage_hashes(cfg);
    match run_prepared(splits, cfg) {
        Ok(out) => {
            cell.metrics = Some(out.metrics);
            cell.efficiency = Some(out.efficiency);
            cell.n_train_samples = Some(out.samples.n_samples);
            cell
        }
        Err(e) => cell.fail(e),
    }
}

/// Raw material shared by every cell: manifests resolved to prepared scenes.
struct Corpus {
    train: Vec<PreparedScene>,
    test: Vec<PreparedScene>,
    ctx: PartitionContext,
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let train = DatasetManifest::read(&cfg.train_manifest)?;
    let test = DatasetManifest::read(&cfg.test_manifest)?;
    Ok(Corpus {
        train: prepare_paths(&train.scenes, &cfg.labeling, &cfg.preprocess)?,
        test: prepare_paths(&test.scenes, &cfg.labeling, &cfg.preprocess)?,
        ctx: cfg.partition_context()?,
    })
}

fn select(
    scenes: &[PreparedScene],
    filter: &SceneFilter,
    ctx: &PartitionContext,
) -> Result<Vec<PreparedScene>> {
    let mut out = Vec::new();
    for s in scenes {
        if filter.accepts(&s.header, ctx)? {
            out.push(s.clone());
        }
    }
    Ok(out)
}

fn split_train(
    scenes: Vec<PreparedScene>,
    cfg: &RunConfig,
) -> Result<(Vec<PreparedScene>, Vec<PreparedScene>)> {
    let (tr, va) = split_indices(scenes.len(), cfg.holdout, cfg.seed)?;
    Ok((
        tr.iter().map(|&i| scenes[i].clone()).collect(),
        va.iter().map(|&i| scenes[i].clone()).collect(),
    ))
}

fn splits_for(corpus: &Corpus, cfg: &RunConfig) -> Result<PreparedSplits> {
    let (train, val) = split_train(select(&corpus.train, &cfg.train_filter, &corpus.ctx)?, cfg)?;
    let test = select(&corpus.test, &cfg.test_filter, &corpus.ctx)?;
    if test.is_empty() {
        return Err(Error::InsufficientScenes {
            needed: 1,
            available: 0,
        });
    }
    Ok(PreparedSplits { train, val, test })
}

/// One model per row partition, scored on every column partition. Rows or
/// columns without enough scenes are marked skipped.
pub fn run_transferability(
    cfg: &RunConfig,
    rows: &[NamedFilter],
    cols: &[NamedFilter],
) -> Result<Vec<CellReport>> {
    let corpus = load_corpus(cfg)?;
    let per_row: Vec<Vec<CellReport>> = rows
        .par_iter()
        .map(|row| {
            let row_cfg = RunConfig {
                train_filter: row.filter.clone(),
                ..cfg.clone()
            };
            let cell_cfg = |col: &NamedFilter| RunConfig {
                test_filter: col.filter.clone(),
                ..row_cfg.clone()
            };
            let blank = |col: &NamedFilter| {
                let mut c = CellReport::new(&row.key, Some(&col.key), &cell_cfg(col));
                c.stage_hashes = stage_hashes(&c.config);
                c
            };
            let trained = (|| {
                let (train, val) =
                    split_train(select(&corpus.train, &row.filter, &corpus.ctx)?, &row_cfg)?;
                let channels = model_channels(&row_cfg.preprocess, &train);
                let stats = fit_normalization(&train, &channels, &row_cfg.preprocess)?;
                let tr = to_inputs(&train, &stats, &channels, &row_cfg)?;
                let va = to_inputs(&val, &stats, &channels, &row_cfg)?;
                let (model, _log, samples) = train_model(&tr, &va, &channels, &row_cfg)?;
                Ok::<_, Error>((model, stats, channels, samples.n_samples))
            })();
            let (model, stats, channels, n) = match trained {
                Ok(t) => t,
                Err(e) => {
                    let msg = e.to_string();
                    let skipped = matches!(e, Error::InsufficientScenes { .. });
                    return cols
                        .iter()
                        .map(|col| {
                            let mut c = blank(col);
                            c.status = if skipped {
                                CellStatus::Skipped {
                                    reason: msg.clone(),
                                }
                            } else {
                                CellStatus::Error {
                                    message: format!("cell {}: {msg}", c.key),
                                }
                            };
                            c
                        })
                        .collect();
                }
            };
            cols.iter()
                .map(|col| {
                    let mut c = blank(col);
                    c.n_train_samples = Some(n);
                    let scored = (|| {
                        let test = select(&corpus.test, &col.filter, &corpus.ctx)?;
                        if test.is_empty() {
                            return Err(Error::InsufficientScenes {
                                needed: 1,
                                available: 0,
                            });
                        }
                        let inputs = to_inputs(&test, &stats, &channels, &c.config)?;
                        evaluate(&model, &inputs, &c.config.effective_sampling())?.report()
                    })();
                    match scored {
                        Ok(m) => {
                            c.metrics = Some(m);
                            c
                        }
                        Err(e) => c.fail(e),
                    }
                })
                .collect()
        })
        .collect();
    Ok(per_row.into_iter().flatten().collect())
}

/// Re-runs the pipeline once per value of `axis`, everything else fixed.
pub fn run_sweep(cfg: &RunConfig, axis: SweepAxis, values: &[usize]) -> Result<Vec<CellReport>> {
    let corpus = if axis == SweepAxis::Downscale {
        None
    } else {
        Some(load_corpus(cfg)?)
    };
    let raw = if axis == SweepAxis::Downscale {
        let train = DatasetManifest::read(&cfg.train_manifest)?;
        let test = DatasetManifest::read(&cfg.test_manifest)?;
        Some((train, test, cfg.partition_context()?))
    } else {
        None
    };
    Ok(values
        .par_iter()
        .map(|&v| {
            let mut vcfg = cfg.clone();
            let label = match axis {
                SweepAxis::Downscale => {
                    vcfg.preprocess.downscale_ratio = v;
                    format!("downscale={v}")
                }
                SweepAxis::PatchSize => {
                    vcfg.sampling.patch_size = Some(v);
                    format!("patch_size={v}")
                }
                SweepAxis::DataSize => {
                    vcfg.data_size = Some(v);
                    format!("data_size={v}")
                }
            };
            let cell = CellReport::new(&label, None, &vcfg);
            let splits = match (&corpus, &raw) {
                (Some(c), _) => {
                    let min_dim = c
                        .train
                        .iter()
                        .chain(&c.test)
                        .map(|s| s.scene.height.min(s.scene.width))
                        .min();
                    if axis == SweepAxis::PatchSize && min_dim.is_some_and(|d| v > d) {
                        return cell.fail(Error::Config(format!(
                            "patch_size {v} exceeds the smallest scene edge {}",
                            min_dim.unwrap_or(0)
                        )));
                    }
                    splits_for(c, &vcfg)
                }
                (None, Some((train, test, ctx))) => (|| {
                    let c = Corpus {
                        train: prepare_paths(&train.scenes, &vcfg.labeling, &vcfg.preprocess)?,
                        test: prepare_paths(&test.scenes, &vcfg.labeling, &vcfg.preprocess)?,
                        ctx: ctx.clone(),
                    };
                    splits_for(&c, &vcfg)
                })(),
                _ => unreachable!("one corpus source is always set"),
            };
            match splits {
                Ok(s) => run_cell(&s, &vcfg, cell),
                Err(e) => cell.fail(e),
            }
        })
        .collect())
}

/// One pipeline run per toggle row on the same split and seed.
pub fn run_preparation_ablation(cfg: &RunConfig, rows: &[PrepToggles]) -> Result<Vec<CellReport>> {
    let raw_train = DatasetManifest::read(&cfg.train_manifest)?;
    let raw_test = DatasetManifest::read(&cfg.test_manifest)?;
    let ctx = cfg.partition_context()?;
    Ok(rows
        .par_iter()
        .map(|t| {
            let rcfg = t.apply(cfg);
            let cell = CellReport::new(&t.key(), None, &rcfg);
            let splits = (|| {
                let c = Corpus {
                    train: prepare_paths(&raw_train.scenes, &rcfg.labeling, &rcfg.preprocess)?,
                    test: prepare_paths(&raw_test.scenes, &rcfg.labeling, &rcfg.preprocess)?,
                    ctx: ctx.clone(),
                };
                splits_for(&c, &rcfg)
            })();
            match splits {
                Ok(s) => run_cell(&s, &rcfg, cell),
                Err(e) => cell.fail(e),
            }
        })
        .collect())
}

/// Window origins along one axis for tiles of `size` every `stride`, with the
/// last origin clamped so the tile ends at the edge.
fn tile_origins(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    if dim <= size {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&o| o + size < dim)
        .collect();
    out.push(dim - size);
    out
}

/// Pixel raster painted from patch predictions.
pub fn tile_predict(
    model: &dyn ModelContract,
    stack: &FeatureStack,
    size: usize,
    tiling: Tiling,
) -> Result<LabelRaster> {
    let (h, w) = stack.dims();
    let stride = match tiling {
        Tiling::Clamped => size,
        Tiling::Vote { stride } => stride,
    };
    let (eh, ew) = (size.min(h), size.min(w));
    let rows = tile_origins(h, eh, stride);
    let cols = tile_origins(w, ew, stride);
    let mut preds = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            let window = FeatureStack {
                names: stack.names.clone(),
                channels: stack
                    .channels
                    .iter()
                    .map(|ch| ch.window(r, c, eh, ew))
                    .collect(),
            };
            preds.push((r, c, model.predict_patch(&window)?.index()));
        }
    }
    let mut out = Raster::filled(h, w, 0u8);
    match tiling {
        Tiling::Clamped => {
            for (r, c, p) in preds {
                for rr in r..r + eh {
                    out.as_mut_slice()[rr * w + c..rr * w + c + ew].fill(p);
                }
            }
        }
        Tiling::Vote { .. } => {
            let mut votes = vec![[0u32; N_CLASSES]; h * w];
            for (r, c, p) in preds {
                for rr in r..r + eh {
                    for v in &mut votes[rr * w + c..rr * w + c + ew] {
                        v[p as usize] += 1;
                    }
                }
            }
            for (o, v) in out.as_mut_slice().iter_mut().zip(&votes) {
                let mut best = 0;
                for k in 1..N_CLASSES {
                    if v[k] > v[best] {
                        best = k;
                    }
                }
                *o = best as u8;
            }
        }
    }
    Ok(out.into())
}

impl From<Raster<u8>> for LabelRaster {
    fn from(values: Raster<u8>) -> Self {
        LabelRaster { values }
    }
}

/// Pixel-granularity scores of a patch model (via tiling) and a pixel model
/// on the same inputs and masks.
pub fn fair_compare(
    patch_model: &TrainedModel,
    pixel_model: &TrainedModel,
    test: &[ModelInput],
    tiling: Tiling,
) -> Result<(MetricsReport, MetricsReport)> {
    let TrainedModel::Patch(pm) = patch_model else {
        return Err(Error::Config(
            "fair_compare needs a patch model first".into(),
        ));
    };
    let TrainedModel::Pixel(xm) = pixel_model else {
        return Err(Error::Config(
            "fair_compare needs a pixel model second".into(),
        ));
    };
    let pairs: Vec<Result<_>> = test
        .par_iter()
        .map(|input| {
            let from_patches = tile_predict(pm, &input.features, pm.patch_size, tiling)?;
            let direct = xm.predict_pixels(&input.features)?;
            Ok((
                confusion_rasters(&input.labels, &from_patches)?,
                confusion_rasters(&input.labels, &direct)?,
            ))
        })
        .collect();
    let (mut a, mut b) = (
        crate::metrics::ConfusionMatrix::default(),
        crate::metrics::ConfusionMatrix::default(),
    );
    for p in pairs {
        let (x, y) = p?;
        a.merge(&x);
        b.merge(&y);
    }
    Ok((a.report()?, b.report()?))
}

/// Replacement value per channel for feature ablation.
pub fn ablation_values(inputs: &[ModelInput], baseline: AblationBaseline) -> Vec<f32> {
    let n = inputs.first().map_or(0, |i| i.features.n_channels());
    (0..n)
        .map(|c| match baseline {
            AblationBaseline::Zero => 0.0,
            AblationBaseline::ChannelMean => {
                let (mut s, mut k) = (0.0f64, 0u64);
                for i in inputs {
                    for &v in i.features.channels[c].as_slice() {
                        if v.is_finite() {
                            s += v as f64;
                            k += 1;
                        }
                    }
                }
                if k == 0 {
                    0.0
                } else {
                    (s / k as f64) as f32
                }
            }
        })
        .collect()
}

/// Score drop when each channel in turn is replaced by its baseline value.
pub fn feature_ablation(
    model: &TrainedModel,
    inputs: &[ModelInput],
    sampling: &crate::sampling::SamplingConfig,
    baseline: AblationBaseline,
) -> Result<Vec<Attribution>> {
    if inputs.is_empty() {
        return Err(Error::InsufficientScenes {
            needed: 1,
            available: 0,
        });
    }
    let full = evaluate(model, inputs, sampling)?.report()?;
    let values = ablation_values(inputs, baseline);
    let names = inputs[0].features.names.clone();
    names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let replaced: Vec<ModelInput> = inputs
                .iter()
                .map(|i| {
                    let mut j = i.clone();
                    j.features.channels[c].as_mut_slice().fill(values[c]);
                    j
                })
                .collect();
            let r = evaluate(model, &replaced, sampling)?.report()?;
            Ok(Attribution {
                channel: name.clone(),
                f1_drop: full.weighted.f1 - r.weighted.f1,
                recall_drop: full
                    .per_class
                    .iter()
                    .zip(&r.per_class)
                    .map(|(a, b)| a.recall - b.recall)
                    .collect(),
            })
        })
        .collect()
}

/// Runs the configured study.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let base = &cfg.run;
    let mut attributions = None;
    let cells = match &cfg.experiment {
        ExperimentKind::Baseline => {
            let corpus = load_corpus(base)?;
            let cell = CellReport::new("baseline", None, base);
            vec![match splits_for(&corpus, base) {
                Ok(s) => run_cell(&s, base, cell),
                Err(e) => cell.fail(e),
            }]
        }
        ExperimentKind::Transfer { preset, rows, cols } => {
            let (r, c) = match preset {
                Some(p) => p.cells(),
                None => (rows.clone(), cols.clone()),
            };
            run_transferability(base, &r, &c)?
        }
        ExperimentKind::Sweep { axis, values } => run_sweep(base, *axis, values)?,
        ExperimentKind::PrepAblation { rows } => run_preparation_ablation(base, rows)?,
        ExperimentKind::FairCompare { tiling, crop_size } => {
            let corpus = load_corpus(base)?;
            let patch_cfg = RunConfig {
                paradigm: Paradigm::Patch,
                ..base.clone()
            };
            let mut pixel_cfg = RunConfig {
                paradigm: Paradigm::Pixel,
                ..base.clone()
            };
            if crop_size.is_some() {
                pixel_cfg.sampling.patch_size = *crop_size;
            }
            let mut patch_cell = CellReport::new("patch_mapped", None, &patch_cfg);
            let mut pixel_cell = CellReport::new("pixel", None, &pixel_cfg);
            let outcome = (|| {
                let s = splits_for(&corpus, base)?;
                let channels = model_channels(&base.preprocess, &s.train);
                let stats = fit_normalization(&s.train, &channels, &base.preprocess)?;
                let tr = to_inputs(&s.train, &stats, &channels, base)?;
                let va = to_inputs(&s.val, &stats, &channels, base)?;
                let te = to_inputs(&s.test, &stats, &channels, base)?;
                let (pm, _, pn) = train_model(&tr, &va, &channels, &patch_cfg)?;
                let (xm, _, xn) = train_model(&tr, &va, &channels, &pixel_cfg)?;
                let (a, b) = fair_compare(&pm, &xm, &te, *tiling)?;
                Ok::<_, Error>((a, b, pn.n_samples, xn.n_samples))
            })();
            match outcome {
                Ok((a, b, pn, xn)) => {
                    patch_cell.metrics = Some(a);
                    patch_cell.n_train_samples = Some(pn);
                    pixel_cell.metrics = Some(b);
                    pixel_cell.n_train_samples = Some(xn);
                    vec![patch_cell, pixel_cell]
                }
                Err(e) => {
                    let msg = e.to_string();
                    pixel_cell = pixel_cell.fail(Error::Domain(msg));
                    vec![patch_cell.fail(e), pixel_cell]
                }
            }
        }
        ExperimentKind::FeatureAblation { baseline } => {
            let corpus = load_corpus(base)?;
            let mut cell = CellReport::new("full", None, base);
            let outcome = (|| {
                let s = splits_for(&corpus, base)?;
                let channels = model_channels(&base.preprocess, &s.train);
                let stats = fit_normalization(&s.train, &channels, &base.preprocess)?;
                let tr = to_inputs(&s.train, &stats, &channels, base)?;
                let va = to_inputs(&s.val, &stats, &channels, base)?;
                let te = to_inputs(&s.test, &stats, &channels, base)?;
                let (model, _, n) = train_model(&tr, &va, &channels, base)?;
                let sampling = base.effective_sampling();
                let full = evaluate(&model, &te, &sampling)?.report()?;
                let attr = feature_ablation(&model, &te, &sampling, *baseline)?;
                Ok::<_, Error>((full, attr, n.n_samples))
            })();
            match outcome {
                Ok((full, attr, n)) => {
                    cell.metrics = Some(full);
                    cell.n_train_samples = Some(n);
                    attributions = Some(attr);
                    vec![cell]
                }
                Err(e) => vec![cell.fail(e)],
            }
        }
    };
    Ok(ExperimentReport {
        name: cfg.name.clone(),
        kind: cfg.experiment.name().to_string(),
        cells,
        attributions,
        provenance: provenance(base)?,
    })
}

/// The reproducible part of a report: cell keys, statuses and metrics.
pub fn deterministic_metrics(report: &ExperimentReport) -> serde_json::Value {
    serde_json::json!({
        "name": report.name,
        "kind": report.kind,
        "cells": report.cells.iter().map(|c| serde_json::json!({
            "key": c.key,
            "row": c.row,
            "col": c.col,
            "status": c.status,
            "metrics": c.metrics,
            "n_train_samples": c.n_train_samples,
        })).collect::<Vec<_>>(),
        "attributions": report.attributions,
    })
}

pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const CELLS_FILE: &str = "cells.csv";
pub const PLOT_DIR: &str = "plotdata";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn cells_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("key,row,col,status,accuracy,precision,recall,f1,iou,n_samples\n");
    for c in &report.cells {
        let status = match &c.status {
            CellStatus::Ok => "ok",
            CellStatus::Skipped { .. } => "skipped",
            CellStatus::Error { .. } => "error",
        };
        let m = c.metrics.as_ref().map_or_else(
            || ",,,,,".to_string(),
            |m| {
                let w = m.weighted;
                format!(
                    "{},{},{},{},{},{}",
                    w.accuracy, w.precision, w.recall, w.f1, w.iou, m.n_samples
                )
            },
        );
        let _ = writeln!(
            out,
            "{},{},{},{},{m}",
            csv_field(&c.key),
            csv_field(&c.row),
            csv_field(c.col.as_deref().unwrap_or("")),
            status
        );
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes report.json, metrics.json, cells.csv and plotdata/*.tsv.
pub fn emit_report(report: &ExperimentReport, out_dir: impl AsRef<Path>) -> Result<()> {
    let out = out_dir.as_ref();
    let plot = out.join(PLOT_DIR);
    std::fs::create_dir_all(&plot)
        .map_err(|e| Error::io(format!("creating {}", plot.display()), e))?;
    write_text(&out.join(REPORT_FILE), &to_pretty(report)?)?;
    write_text(
        &out.join(METRICS_FILE),
        &to_pretty(&deterministic_metrics(report))?,
    )?;
    write_text(&out.join(CELLS_FILE), &cells_csv(report))?;
    for metric in ["accuracy", "precision", "recall", "f1", "iou"] {
        let mut tsv = format!("x\t{metric}\n");
        for c in &report.cells {
            if let Some(m) = &c.metrics {
                let w = m.weighted;
                let v = match metric {
                    "accuracy" => w.accuracy,
                    "precision" => w.precision,
                    "recall" => w.recall,
                    "f1" => w.f1,
                    _ => w.iou,
                };
                let _ = writeln!(tsv, "{}\t{v}", c.key);
            }
        }
        write_text(&plot.join(format!("{metric}.tsv")), &tsv)?;
    }
    if let Some(attr) = &report.attributions {
        let mut tsv = String::from("channel\tf1_drop\n");
        for a in attr {
            let _ = writeln!(tsv, "{}\t{}", a.channel, a.f1_drop);
        }
        write_text(&plot.join("attribution_f1.tsv"), &tsv)?;
        let mut tsv = String::from("channel\tclass\trecall_drop\n");
        for a in attr {
            for (k, d) in a.recall_drop.iter().enumerate() {
                let _ = writeln!(tsv, "{}\t{k}\t{d}", a.channel);
            }
        }
        write_text(&plot.join("attribution_recall.tsv"), &tsv)?;
    }
    Ok(())
}

fn to_pretty(v: &impl Serialize) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::json("serializing report", e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<ExperimentReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PatchRefModel, SoftmaxLinear};

    #[test]
    fn clamped_origins_cover_the_edge() {
        assert_eq!(tile_origins(10, 4, 4), vec![0, 4, 6]);
        assert_eq!(tile_origins(8, 4, 4), vec![0, 4]);
        assert_eq!(tile_origins(3, 4, 4), vec![0]);
    }

    #[test]
    fn tiling_paints_every_pixel() {
        let mut m = PatchRefModel::new(vec!["a".into()], 4);
        m.state = Some(SoftmaxLinear::constant(N_CLASSES, 2, 3));
        let stack = FeatureStack {
            names: vec!["a".into()],
            channels: vec![Raster::filled(10, 7, 0.0)],
        };
        for tiling in [Tiling::Clamped, Tiling::Vote { stride: 2 }] {
            let out = tile_predict(&m, &stack, 4, tiling).unwrap();
            assert_eq!(out.dims(), (10, 7));
            assert!(out.values.as_slice().iter().all(|&v| v == 3));
        }
    }

    #[test]
    fn augmentation_only_touches_sampling_hash() {
        let base = RunConfig::default();
        let on = PrepToggles {
            augmentation: true,
            include_land: false,
            border_distance: 0,
        };
        let off = PrepToggles {
            augmentation: false,
            ..on
        };
        let (a, b) = (
            stage_hashes(&on.apply(&base)),
            stage_hashes(&off.apply(&base)),
        );
        for (k, v) in &a {
            assert_eq!(v == &b[k], k != "sampling", "stage {k}");
        }
    }

    #[test]
    fn preset_shapes() {
        let (r, c) = TransferPreset::Seasons.cells();
        assert_eq!((r.len(), c.len()), (5, 4));
        assert_eq!(r.last().unwrap().key, "Baseline");
        let (r, _) = TransferPreset::Regions.cells();
        assert_eq!(r.last().unwrap().key, "All");
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let cfg = RunConfig::default();
        let report = ExperimentReport {
            name: "x".into(),
            kind: "sweep".into(),
            cells: vec![
                CellReport::new("a", None, &cfg),
                CellReport::new("b", Some("c"), &cfg).fail(Error::InsufficientScenes {
                    needed: 1,
                    available: 0,
                }),
            ],
            attributions: None,
            provenance: ReportProvenance {
                seed: 0,
                tool_version: "0".into(),
                created_unix: 0,
                file_hashes: BTreeMap::new(),
            },
        };
        assert_eq!(cells_csv(&report).lines().count(), 3);
        assert!(!report.has_errors());
        let dir = tempfile::tempdir().unwrap();
        emit_report(&report, dir.path()).unwrap();
        assert_eq!(read_report(dir.path().join(REPORT_FILE)).unwrap(), report);
    }
}
