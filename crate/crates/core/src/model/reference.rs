use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{IceClass, LabelRaster, IGNORE, N_CLASSES};
use crate::model::features::{patch_features, pixel_features};
use crate::model::linear::{
    fit_softmax, Batch, BatchSource, ShuffledBatches, SoftmaxLinear, TrainConfig, TrainingLog,
};
use crate::preprocess::{FeatureStack, ModelInput};
use crate::raster::Raster;
use crate::rng::StreamKey;
use crate::sampling::{augment, random_crop, AugmentationConfig, PatchRecord, SamplingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Patch,
    Pixel,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Patch => "patch",
            ModelKind::Pixel => "pixel",
        })
    }
}

/// What the pipeline needs from a classifier. A model implements the
/// capability that matches its paradigm; the other one reports an error.
pub trait ModelContract: Send + Sync {
    fn kind(&self) -> ModelKind;

    /// Channel names expected, in order.
    fn channels(&self) -> &[String];

    fn state(&self) -> Option<&SoftmaxLinear>;

    fn predict_patch(&self, _window: &FeatureStack) -> Result<IceClass> {
        Err(Error::Domain(format!(
            "{} model has no patch prediction",
            self.kind()
        )))
    }

    fn predict_pixels(&self, _stack: &FeatureStack) -> Result<LabelRaster> {
        Err(Error::Domain(format!(
            "{} model has no pixel prediction",
            self.kind()
        )))
    }
}

fn trained(state: &Option<SoftmaxLinear>) -> Result<&SoftmaxLinear> {
    state.as_ref().ok_or(Error::UntrainedModel)
}

fn classes_present(counts: &[u64; N_CLASSES]) -> Vec<u8> {
    (0..N_CLASSES as u8)
        .filter(|&c| counts[c as usize] > 0)
        .collect()
}

fn scene_index(inputs: &[ModelInput]) -> HashMap<&str, &ModelInput> {
    inputs.iter().map(|i| (i.scene_id(), i)).collect()
}

/// Patch records together with the prepared scenes they point into.
#[derive(Clone, Copy)]
pub struct PatchSet<'a> {
    pub inputs: &'a [ModelInput],
    pub records: &'a [PatchRecord],
}

impl<'a> PatchSet<'a> {
    fn resolve(&self) -> Result<Vec<(&'a ModelInput, &'a PatchRecord, u8)>> {
        let by_id = scene_index(self.inputs);
        self.records
            .iter()
            .filter_map(|r| r.label.map(|l| (r, l)))
            .map(|(r, l)| {
                let input =
                    by_id
                        .get(r.scene_id.as_str())
                        .copied()
                        .ok_or_else(|| Error::InvalidScene {
                            field: "scene_id".into(),
                            reason: format!("patch refers to unknown scene {}", r.scene_id),
                        })?;
                Ok((input, r, l))
            })
            .collect()
    }

    /// Feature matrix of every labeled record, optionally augmented.
    pub fn design(&self, aug: Option<(&AugmentationConfig, StreamKey)>) -> Result<Batch> {
        let items = self.resolve()?;
        let rows: Vec<Result<(Vec<f64>, u8)>> = items
            .par_iter()
            .enumerate()
            .map(|(i, (input, r, l))| {
                let window = input.features.window(r.row, r.col, r.size);
                let window = match aug {
                    Some((cfg, key)) if cfg.enabled => {
                        augment(&window, None, cfg, key.with_u64(i as u64)).0
                    }
                    _ => window,
                };
                Ok((patch_features(&window)?, *l))
            })
            .collect();
        let dim = 2 * self.inputs.first().map_or(0, |i| i.features.n_channels());
        let mut batch = Batch::new(dim);
        for row in rows {
            let (x, y) = row?;
            batch.push(&x, y);
        }
        Ok(batch)
    }
}

/// Softmax over per-patch channel means and standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRefModel {
    pub channels: Vec<String>,
    pub patch_size: usize,
    pub state: Option<SoftmaxLinear>,
}

struct AugmentedPatches<'a> {
    set: PatchSet<'a>,
    aug: AugmentationConfig,
    seed: u64,
    batch_size: usize,
    epoch: usize,
    data: Batch,
}

impl BatchSource for AugmentedPatches<'_> {
    fn steps_per_epoch(&self) -> usize {
        self.set
            .records
            .iter()
            .filter(|r| r.label.is_some())
            .count()
            .div_ceil(self.batch_size)
    }

    fn batch(&mut self, epoch: usize, step: usize) -> Result<Option<Batch>> {
        if self.epoch != epoch {
            let key = StreamKey::new(self.seed)
                .with_str("augment")
                .with_u64(epoch as u64);
            self.data = self.set.design(Some((&self.aug, key)))?;
            self.epoch = epoch;
        }
        let mut inner = ShuffledBatches::new(&self.data, self.batch_size, self.seed);
        inner.batch(epoch, step)
    }
}

impl PatchRefModel {
    pub fn new(channels: Vec<String>, patch_size: usize) -> Self {
        Self {
            channels,
            patch_size,
            state: None,
        }
    }

    pub fn fit(
        &mut self,
        train: PatchSet<'_>,
        val: PatchSet<'_>,
        cfg: &TrainConfig,
        aug: &AugmentationConfig,
    ) -> Result<TrainingLog> {
        let val_batch = val.design(None)?;
        let mut counts = [0u64; N_CLASSES];
        for r in train.records {
            if let Some(l) = r.label {
                counts[l as usize] += 1;
            }
        }
        let present = classes_present(&counts);
        let dim = 2 * self.channels.len();
        let (model, log) = if aug.enabled {
            let mut src = AugmentedPatches {
                set: train,
                aug: *aug,
                seed: cfg.seed,
                batch_size: cfg.batch_size,
                epoch: 0,
                data: Batch::new(dim),
            };
            fit_softmax(N_CLASSES, dim, &present, &mut src, &val_batch, cfg)?
        } else {
            let data = train.design(None)?;
            let mut src = ShuffledBatches::new(&data, cfg.batch_size, cfg.seed);
            fit_softmax(N_CLASSES, dim, &present, &mut src, &val_batch, cfg)?
        };
        self.state = Some(model);
        Ok(log)
    }

    pub fn predict_features(&self, x: &[f64]) -> Result<IceClass> {
        let m = trained(&self.state)?;
        Ok(IceClass::from_index(m.predict(x)).expect("class index in range"))
    }
}

impl ModelContract for PatchRefModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Patch
    }

    fn channels(&self) -> &[String] {
        &self.channels
    }

    fn state(&self) -> Option<&SoftmaxLinear> {
        self.state.as_ref()
    }

    fn predict_patch(&self, window: &FeatureStack) -> Result<IceClass> {
        trained(&self.state)?;
        self.predict_features(&patch_features(window)?)
    }
}

/// How the pixel model draws its training windows.
#[derive(Debug, Clone)]
pub enum PixelSampling {
    /// `epoch_steps` keyed random crops per epoch.
    Crops(SamplingConfig),
    /// A fixed window list, visited once per epoch in shuffled order.
    Windows(Vec<PatchRecord>),
}

/// Softmax over per-pixel values and 3x3 local means.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelRefModel {
    pub channels: Vec<String>,
    pub state: Option<SoftmaxLinear>,
}

fn labeled_pixels(stack: &FeatureStack, labels: &LabelRaster, stride: usize, into: &mut Batch) {
    let f = pixel_features(stack);
    let mut k = 0usize;
    for (i, &l) in labels.values.as_slice().iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        if k % stride == 0 {
            into.push(&f.data[i * f.dim..(i + 1) * f.dim], l);
        }
        k += 1;
    }
}

struct PixelSource<'a> {
    inputs: &'a [ModelInput],
    by_id: HashMap<&'a str, &'a ModelInput>,
    sampling: &'a PixelSampling,
    aug: AugmentationConfig,
    seed: u64,
    epoch_steps: usize,
    order: Vec<usize>,
    order_epoch: usize,
    dim: usize,
}

impl PixelSource<'_> {
    fn finish(&self, features: FeatureStack, labels: LabelRaster, g: u64) -> Batch {
        let key = StreamKey::new(self.seed).with_str("augment").with_u64(g);
        let (features, labels) = augment(&features, Some(&labels), &self.aug, key);
        let mut b = Batch::new(self.dim);
        labeled_pixels(
            &features,
            &labels.expect("labels passed through"),
            1,
            &mut b,
        );
        b
    }
}

impl BatchSource for PixelSource<'_> {
    fn steps_per_epoch(&self) -> usize {
        match self.sampling {
            PixelSampling::Crops(_) => self.epoch_steps,
            PixelSampling::Windows(w) => w.len(),
        }
    }

    fn batch(&mut self, epoch: usize, step: usize) -> Result<Option<Batch>> {
        let g = ((epoch - 1) * self.steps_per_epoch() + step) as u64;
        match self.sampling {
            PixelSampling::Crops(cfg) => {
                let mut rng = StreamKey::new(self.seed)
                    .with_str("scene")
                    .with_u64(g)
                    .rng();
                let input = &self.inputs[rng.random_range(0..self.inputs.len())];
                let Some(crop) = random_crop(input, cfg, g)? else {
                    return Ok(None);
                };
                Ok(Some(self.finish(crop.features, crop.labels, g)))
            }
            PixelSampling::Windows(windows) => {
                if self.order_epoch != epoch {
                    self.order = (0..windows.len()).collect();
                    let mut rng = StreamKey::new(self.seed)
                        .with_str("windows")
                        .with_u64(epoch as u64)
                        .rng();
                    self.order.shuffle(&mut rng);
                    self.order_epoch = epoch;
                }
                let w = &windows[self.order[step]];
                let input =
                    self.by_id
                        .get(w.scene_id.as_str())
                        .ok_or_else(|| Error::InvalidScene {
                            field: "scene_id".into(),
                            reason: format!("window refers to unknown scene {}", w.scene_id),
                        })?;
                let features = input.features.window(w.row, w.col, w.size);
                let labels = LabelRaster {
                    values: input.labels.values.window(w.row, w.col, w.size, w.size),
                };
                Ok(Some(self.finish(features, labels, g)))
            }
        }
    }
}

impl PixelRefModel {
    pub fn new(channels: Vec<String>) -> Self {
        Self {
            channels,
            state: None,
        }
    }

    /// Labeled validation pixels, thinned by a fixed stride to at most `cap`.
    pub fn validation_batch(inputs: &[ModelInput], cap: usize) -> Batch {
        let dim = 2 * inputs.first().map_or(0, |i| i.features.n_channels());
        let labeled: usize = inputs
            .iter()
            .map(|i| {
                i.labels
                    .values
                    .as_slice()
                    .iter()
                    .filter(|&&v| v != IGNORE)
                    .count()
            })
            .sum();
        let stride = labeled.div_ceil(cap.max(1)).max(1);
        let mut b = Batch::new(dim);
        for input in inputs {
            labeled_pixels(&input.features, &input.labels, stride, &mut b);
        }
        b
    }

    pub fn fit(
        &mut self,
        train: &[ModelInput],
        val: &[ModelInput],
        sampling: &PixelSampling,
        cfg: &TrainConfig,
        aug: &AugmentationConfig,
    ) -> Result<TrainingLog> {
        if train.is_empty() {
            return Err(Error::InsufficientScenes {
                needed: 1,
                available: 0,
            });
        }
        let mut counts = [0u64; N_CLASSES];
        match sampling {
            PixelSampling::Crops(_) => {
                for input in train {
                    for &v in input.labels.values.as_slice() {
                        if v != IGNORE {
                            counts[v as usize] += 1;
                        }
                    }
                }
            }
            PixelSampling::Windows(windows) => {
                let by_id = scene_index(train);
                for w in windows {
                    if let Some(input) = by_id.get(w.scene_id.as_str()) {
                        let win = input.labels.values.window(w.row, w.col, w.size, w.size);
                        for &v in win.as_slice() {
                            if v != IGNORE {
                                counts[v as usize] += 1;
                            }
                        }
                    }
                }
            }
        }
        let dim = 2 * self.channels.len();
        let val_batch = Self::validation_batch(val, cfg.val_pixel_cap);
        let mut src = PixelSource {
            inputs: train,
            by_id: scene_index(train),
            sampling,
            aug: *aug,
            seed: cfg.seed,
            epoch_steps: cfg.epoch_steps,
            order: Vec::new(),
            order_epoch: 0,
            dim,
        };
        let (model, log) = fit_softmax(
            N_CLASSES,
            dim,
            &classes_present(&counts),
            &mut src,
            &val_batch,
            cfg,
        )?;
        self.state = Some(model);
        Ok(log)
    }
}

impl ModelContract for PixelRefModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Pixel
    }

    fn channels(&self) -> &[String] {
        &self.channels
    }

    fn state(&self) -> Option<&SoftmaxLinear> {
        self.state.as_ref()
    }

    fn predict_pixels(&self, stack: &FeatureStack) -> Result<LabelRaster> {
        let m = trained(&self.state)?;
        let f = pixel_features(stack);
        let preds: Vec<u8> = f
            .data
            .par_chunks(f.dim.max(1))
            .map(|x| m.predict(x))
            .collect();
        let (h, w) = stack.dims();
        Ok(LabelRaster {
            values: Raster::new(h, w, preds)?,
        })
    }
}
