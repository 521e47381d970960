//! Training and evaluation samples: pure fixed-size patches for patch
//! classifiers, keyed random crops for pixel classifiers, and augmentation.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelRaster, IGNORE, N_CLASSES};
use crate::preprocess::{FeatureStack, ModelInput};
use crate::raster::{IntegralCount, Raster};
use crate::rng::StreamKey;

/// Attempts at drawing a crop with at least one labeled pixel.
pub const CROP_REDRAWS: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    Patch,
    Crop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BorderMetric {
    #[default]
    Chebyshev,
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub mode: SamplingMode,
    /// Window edge in pixels; defaults to 224 for patches and 256 for crops.
    pub patch_size: Option<usize>,
    pub stride: usize,
    pub purity: f64,
    pub border_distance: usize,
    pub border_metric: BorderMetric,
    pub allow_land: bool,
    pub reject_nonfinite: bool,
    pub seed: u64,
    pub epoch_steps: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            mode: SamplingMode::Patch,
            patch_size: None,
            stride: 100,
            purity: 1.0,
            border_distance: 0,
            border_metric: BorderMetric::Chebyshev,
            allow_land: false,
            reject_nonfinite: true,
            seed: 0,
            epoch_steps: 500,
        }
    }
}

impl SamplingConfig {
    pub fn size(&self) -> usize {
        self.patch_size.unwrap_or(match self.mode {
            SamplingMode::Patch => 224,
            SamplingMode::Crop => 256,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.size() == 0 || self.stride == 0 {
            return Err(Error::Config(
                "patch_size and stride must be at least 1".into(),
            ));
        }
        if !(self.purity > 0.5 && self.purity <= 1.0) {
            return Err(Error::Config(format!(
                "purity {} must lie in (0.5, 1.0]",
                self.purity
            )));
        }
        Ok(())
    }
}

/// Reference to an accepted window; pixels are re-read from the scene on demand.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRecord {
    pub scene_id: String,
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub label: Option<u8>,
}

/// Number of grid origins along one axis.
pub fn candidate_count(dim: usize, size: usize, stride: usize) -> usize {
    if dim < size {
        0
    } else {
        (dim - size) / stride + 1
    }
}

struct WindowIndex {
    classes: Vec<IntegralCount>,
    land: IntegralCount,
    nonfinite: IntegralCount,
}

impl WindowIndex {
    fn build(input: &ModelInput) -> Self {
        let labels = &input.labels.values;
        let classes = (0..N_CLASSES as u8)
            .map(|k| IntegralCount::build(labels, |v| v == k))
            .collect();
        let land = IntegralCount::build(&input.land, |v| v);
        let (h, w) = input.dims();
        let mut bad = Raster::filled(h, w, false);
        for ch in &input.features.channels {
            for (b, v) in bad.as_mut_slice().iter_mut().zip(ch.as_slice()) {
                *b |= !v.is_finite();
            }
        }
        let nonfinite = IntegralCount::build(&bad, |v| v);
        Self {
            classes,
            land,
            nonfinite,
        }
    }
}

/// Dominant class of a window if it meets `purity`; smallest class wins ties.
fn window_class(counts: &[u32; N_CLASSES], purity: f64) -> Option<u8> {
    let total: u32 = counts.iter().sum();
    if total == 0 {
        return None;
    }
    let (mut best, mut best_n) = (0u8, 0u32);
    for (k, &n) in counts.iter().enumerate() {
        if n > best_n {
            best = k as u8;
            best_n = n;
        }
    }
    if best_n as f64 >= purity * total as f64 - 1e-9 {
        Some(best)
    } else {
        None
    }
}

fn near_other_class(
    input: &ModelInput,
    index: &WindowIndex,
    (row, col, size): (usize, usize, usize),
    label: u8,
    cfg: &SamplingConfig,
) -> bool {
    let d = cfg.border_distance;
    let (h, w) = input.dims();
    let (r0, c0) = (row.saturating_sub(d), col.saturating_sub(d));
    let (r1, c1) = ((row + size + d).min(h), (col + size + d).min(w));
    let other: u32 = (0..N_CLASSES as u8)
        .filter(|&k| k != label)
        .map(|k| index.classes[k as usize].count(r0, c0, r1, c1))
        .sum();
    if other == 0 {
        return false;
    }
    match cfg.border_metric {
        BorderMetric::Chebyshev => true,
        BorderMetric::Euclidean => {
            let d2 = (d * d) as i64;
            let labels = &input.labels.values;
            for r in r0..r1 {
                for c in c0..c1 {
                    let v = labels.get(r, c);
                    if v == label || v == IGNORE {
                        continue;
                    }
                    let dr = gap(r, row, row + size - 1);
                    let dc = gap(c, col, col + size - 1);
                    if dr * dr + dc * dc <= d2 {
                        return true;
                    }
                }
            }
            false
        }
    }
}

fn gap(x: usize, lo: usize, hi: usize) -> i64 {
    if x < lo {
        (lo - x) as i64
    } else if x > hi {
        (x - hi) as i64
    } else {
        0
    }
}

/// Grid-origin patch extraction with land, finiteness, purity and
/// border-distance filters. Records come out in row-major origin order.
pub fn extract_patches(input: &ModelInput, cfg: &SamplingConfig) -> Vec<PatchRecord> {
    let size = cfg.size();
    let (h, w) = input.dims();
    let (nr, nc) = (
        candidate_count(h, size, cfg.stride),
        candidate_count(w, size, cfg.stride),
    );
    if nr == 0 || nc == 0 {
        return Vec::new();
    }
    let index = WindowIndex::build(input);
    let mut out = Vec::new();
    for i in 0..nr {
        let row = i * cfg.stride;
        for j in 0..nc {
            let col = j * cfg.stride;
            let (r1, c1) = (row + size, col + size);
            if !cfg.allow_land && index.land.count(row, col, r1, c1) > 0 {
                continue;
            }
            if cfg.reject_nonfinite && index.nonfinite.count(row, col, r1, c1) > 0 {
                continue;
            }
            let mut counts = [0u32; N_CLASSES];
            for (k, ic) in index.classes.iter().enumerate() {
                counts[k] = ic.count(row, col, r1, c1);
            }
            let Some(label) = window_class(&counts, cfg.purity) else {
                continue;
            };
            if cfg.border_distance > 0
                && near_other_class(input, &index, (row, col, size), label, cfg)
            {
                continue;
            }
            out.push(PatchRecord {
                scene_id: input.scene_id().to_string(),
                row,
                col,
                size,
                label: Some(label),
            });
        }
    }
    out
}

/// A materialized window.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub features: FeatureStack,
    pub labels: LabelRaster,
}

pub fn crop_at(input: &ModelInput, row: usize, col: usize, size: usize) -> Crop {
    Crop {
        row,
        col,
        size,
        features: input.features.window(row, col, size),
        labels: LabelRaster {
            values: input.labels.values.window(row, col, size, size),
        },
    }
}

/// Origin of the crop for `(seed, scene, step)`, or `None` when every
/// attempt landed on an all-ignore window.
pub fn random_crop_origin(
    input: &ModelInput,
    cfg: &SamplingConfig,
    step_index: u64,
) -> Result<Option<(usize, usize)>> {
    let size = cfg.size();
    let (h, w) = input.dims();
    if h < size || w < size {
        return Err(Error::SceneTooSmall {
            scene_id: input.scene_id().to_string(),
            dims: (h, w),
            size,
        });
    }
    let (nr, nc) = (h - size + 1, w - size + 1);
    let key = StreamKey::new(cfg.seed)
        .with_str(input.scene_id())
        .with_u64(step_index);
    for attempt in 0..CROP_REDRAWS {
        let mut rng = key.with_u64(attempt).rng();
        let idx = rng.random_range(0..nr * nc);
        let (row, col) = (idx / nc, idx % nc);
        let labels = &input.labels.values;
        let labeled =
            (row..row + size).any(|r| labels.row(r)[col..col + size].iter().any(|&v| v != IGNORE));
        if labeled {
            return Ok(Some((row, col)));
        }
    }
    Ok(None)
}

pub fn random_crop(
    input: &ModelInput,
    cfg: &SamplingConfig,
    step_index: u64,
) -> Result<Option<Crop>> {
    Ok(random_crop_origin(input, cfg, step_index)?.map(|(r, c)| crop_at(input, r, c, cfg.size())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub enabled: bool,
    pub rotation_max_deg: f64,
    pub vertical_flip: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            rotation_max_deg: 10.0,
            vertical_flip: true,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=45.0).contains(&self.rotation_max_deg) {
            return Err(Error::Config(format!(
                "rotation_max_deg {} must lie in [0, 45]",
                self.rotation_max_deg
            )));
        }
        Ok(())
    }
}

fn flip_rows<T: Copy>(r: &Raster<T>) -> Raster<T> {
    let h = r.height();
    Raster::from_fn(h, r.width(), |row, col| r.get(h - 1 - row, col))
}

fn bilinear(src: &Raster<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = src.dims();
    let eps = 1e-9;
    if y < -eps || x < -eps || y > (h - 1) as f64 + eps || x > (w - 1) as f64 + eps {
        return f32::NAN;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let mut acc = 0.0f64;
    for (yy, xx, wgt) in [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ] {
        if wgt > 0.0 {
            acc += wgt * src.get(yy, xx) as f64;
        }
    }
    acc as f32
}

/// Source coordinate for output pixel `(r, c)` under a rotation by `deg` about the center.
fn rotate_source(h: usize, w: usize, deg: f64, r: usize, c: usize) -> (f64, f64) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, co) = deg.to_radians().sin_cos();
    let (dy, dx) = (r as f64 - cy, c as f64 - cx);
    (cy + co * dy - s * dx, cx + s * dy + co * dx)
}

pub fn rotate_features(src: &Raster<f32>, deg: f64) -> Raster<f32> {
    let (h, w) = src.dims();
    Raster::from_fn(h, w, |r, c| {
        let (y, x) = rotate_source(h, w, deg, r, c);
        bilinear(src, y, x)
    })
}

pub fn rotate_labels(src: &Raster<u8>, deg: f64) -> Raster<u8> {
    let (h, w) = src.dims();
    Raster::from_fn(h, w, |r, c| {
        let (y, x) = rotate_source(h, w, deg, r, c);
        let (y, x) = (y.round(), x.round());
        if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
            IGNORE
        } else {
            src.get(y as usize, x as usize)
        }
    })
}

/// Random vertical flip (p = 0.5) followed by a uniform rotation in
/// `[-rotation_max_deg, rotation_max_deg]`. Features are resampled
/// bilinearly and labels by nearest neighbour; pixels rotated in from outside
/// become NaN / ignore. Draws are fully determined by `key`.
pub fn augment(
    features: &FeatureStack,
    labels: Option<&LabelRaster>,
    cfg: &AugmentationConfig,
    key: StreamKey,
) -> (FeatureStack, Option<LabelRaster>) {
    if !cfg.enabled {
        return (features.clone(), labels.cloned());
    }
    let mut rng = key.rng();
    let flip = rng.random_bool(0.5) && cfg.vertical_flip;
    let deg = if cfg.rotation_max_deg > 0.0 {
        rng.random_range(-cfg.rotation_max_deg..=cfg.rotation_max_deg)
    } else {
        0.0
    };
    let transform_f = |r: &Raster<f32>| {
        let r = if flip { flip_rows(r) } else { r.clone() };
        if deg != 0.0 {
            rotate_features(&r, deg)
        } else {
            r
        }
    };
    let transform_l = |r: &Raster<u8>| {
        let r = if flip { flip_rows(r) } else { r.clone() };
        if deg != 0.0 {
            rotate_labels(&r, deg)
        } else {
            r
        }
    };
    let out_f = FeatureStack {
        names: features.names.clone(),
        channels: features.channels.iter().map(transform_f).collect(),
    };
    let out_l = labels.map(|l| LabelRaster {
        values: transform_l(&l.values),
    });
    (out_f, out_l)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSummary {
    pub n_samples: u64,
    pub class_counts: [u64; N_CLASSES],
}

impl PatchSummary {
    pub fn of(records: &[PatchRecord]) -> Self {
        let mut class_counts = [0u64; N_CLASSES];
        for r in records {
            if let Some(k) = r.label {
                class_counts[k as usize] += 1;
            }
        }
        Self {
            n_samples: records.len() as u64,
            class_counts,
        }
    }
}

/// Runs extraction over `inputs` on `workers` threads; output keeps input order.
pub fn extract_all(
    inputs: &[ModelInput],
    cfg: &SamplingConfig,
    workers: usize,
) -> Result<Vec<PatchRecord>> {
    use rayon::prelude::*;
    cfg.validate()?;
    let per_scene = crate::parallel::install(workers, || {
        inputs
            .par_iter()
            .map(|i| extract_patches(i, cfg))
            .collect::<Vec<_>>()
    })?;
    Ok(per_scene.into_iter().flatten().collect())
}

pub fn write_jsonl(records: &[PatchRecord], path: impl AsRef<Path>) -> Result<PatchSummary> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    let file =
        fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line =
            serde_json::to_string(r).map_err(|e| Error::json("serializing patch record", e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    out.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(PatchSummary::of(records))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<PatchRecord>> {
    let path = path.as_ref();
    let file =
        fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("parsing {}", path.display()), e))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneHeader;
    use chrono::NaiveDate;

    pub(crate) fn input_from(labels: Raster<u8>) -> ModelInput {
        let (h, w) = labels.dims();
        ModelInput {
            header: SceneHeader {
                scene_id: "t".into(),
                location_id: "l".into(),
                acquisition_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
                height: h,
                width: w,
            },
            features: FeatureStack {
                names: vec!["a".into()],
                channels: vec![Raster::filled(h, w, 0.0)],
            },
            labels: LabelRaster { values: labels },
            land: Raster::filled(h, w, false),
        }
    }

    #[test]
    fn candidate_grid() {
        assert_eq!(candidate_count(400, 224, 100), 2);
        assert_eq!(candidate_count(224, 224, 100), 1);
        assert_eq!(candidate_count(100, 224, 100), 0);
        let input = input_from(Raster::filled(400, 400, 3));
        let recs = extract_patches(&input, &SamplingConfig::default());
        assert_eq!(recs.len(), 4);
        assert!(recs.iter().all(|r| r.label == Some(3)));
        let origins: Vec<_> = recs.iter().map(|r| (r.row, r.col)).collect();
        assert_eq!(origins, vec![(0, 0), (0, 100), (100, 0), (100, 100)]);
    }

    #[test]
    fn land_and_nonfinite_filters() {
        let mut input = input_from(Raster::filled(400, 400, 1));
        input.land.set(300, 300, true);
        input.features.channels[0].set(10, 10, f32::NAN);
        let recs = extract_patches(&input, &SamplingConfig::default());
        let origins: Vec<_> = recs.iter().map(|r| (r.row, r.col)).collect();
        assert_eq!(origins, vec![(0, 100), (100, 0)]);
        let cfg = SamplingConfig {
            allow_land: true,
            reject_nonfinite: false,
            ..Default::default()
        };
        assert_eq!(extract_patches(&input, &cfg).len(), 4);
    }

    #[test]
    fn purity_threshold() {
        // 10x10 windows; 30% of the first window is class 2
        let labels = Raster::from_fn(10, 10, |r, _| if r < 3 { 2 } else { 0 });
        let input = input_from(labels);
        let mut cfg = SamplingConfig {
            patch_size: Some(10),
            ..Default::default()
        };
        assert!(extract_patches(&input, &cfg).is_empty());
        cfg.purity = 0.7;
        assert_eq!(extract_patches(&input, &cfg)[0].label, Some(0));
        cfg.purity = 0.71;
        assert!(extract_patches(&input, &cfg).is_empty());
    }

    #[test]
    fn all_ignore_window_rejected() {
        let input = input_from(Raster::filled(10, 10, IGNORE));
        let cfg = SamplingConfig {
            patch_size: Some(5),
            stride: 5,
            ..Default::default()
        };
        assert!(extract_patches(&input, &cfg).is_empty());
    }

    #[test]
    fn euclidean_is_looser_than_chebyshev_at_corners() {
        // other class only diagonally off the window corner at (dr, dc) = (2, 2)
        let mut labels = Raster::filled(20, 20, 1u8);
        labels.set(11, 11, 4);
        let input = input_from(labels);
        let mut cfg = SamplingConfig {
            patch_size: Some(10),
            stride: 10,
            purity: 1.0,
            border_distance: 2,
            ..Default::default()
        };
        let cheb: Vec<_> = extract_patches(&input, &cfg)
            .iter()
            .map(|r| (r.row, r.col))
            .collect();
        assert!(!cheb.contains(&(0, 0)));
        cfg.border_metric = BorderMetric::Euclidean;
        let eucl: Vec<_> = extract_patches(&input, &cfg)
            .iter()
            .map(|r| (r.row, r.col))
            .collect();
        assert!(eucl.contains(&(0, 0)));
    }

    #[test]
    fn crop_determinism_and_single_origin() {
        let input = input_from(Raster::filled(256, 256, 1));
        let cfg = SamplingConfig {
            mode: SamplingMode::Crop,
            ..Default::default()
        };
        for step in 0..5 {
            assert_eq!(
                random_crop_origin(&input, &cfg, step).unwrap(),
                Some((0, 0))
            );
        }
        let input = input_from(Raster::filled(300, 300, 1));
        assert_eq!(
            random_crop_origin(&input, &cfg, 9).unwrap(),
            random_crop_origin(&input, &cfg, 9).unwrap()
        );
        let small = input_from(Raster::filled(100, 300, 1));
        assert!(matches!(
            random_crop(&small, &cfg, 0),
            Err(Error::SceneTooSmall { .. })
        ));
    }

    #[test]
    fn all_ignore_crop_is_skipped() {
        let input = input_from(Raster::filled(40, 40, IGNORE));
        let cfg = SamplingConfig {
            mode: SamplingMode::Crop,
            patch_size: Some(8),
            ..Default::default()
        };
        assert_eq!(random_crop(&input, &cfg, 0).unwrap(), None);
    }

    #[test]
    fn flip_only_reverses_rows() {
        let feats = FeatureStack {
            names: vec!["a".into()],
            channels: vec![Raster::from_fn(4, 4, |r, c| (r * 4 + c) as f32)],
        };
        let labels = LabelRaster {
            values: Raster::from_fn(4, 4, |r, _| r as u8),
        };
        let cfg = AugmentationConfig {
            enabled: true,
            rotation_max_deg: 0.0,
            vertical_flip: true,
        };
        // find a key whose coin flip says "flip"
        let (f, l) = (0..64)
            .map(|k| augment(&feats, Some(&labels), &cfg, StreamKey::new(k)))
            .find(|(f, _)| f.channels[0].get(0, 0) != 0.0)
            .unwrap();
        assert_eq!(f.channels[0], flip_rows(&feats.channels[0]));
        assert_eq!(l.unwrap().values, flip_rows(&labels.values));
    }

    #[test]
    fn disabled_is_identity() {
        let feats = FeatureStack {
            names: vec!["a".into()],
            channels: vec![Raster::from_fn(5, 5, |r, c| (r + c) as f32)],
        };
        let cfg = AugmentationConfig::default();
        let (f, l) = augment(&feats, None, &cfg, StreamKey::new(3));
        assert_eq!(f, feats);
        assert!(l.is_none());
    }

    #[test]
    fn rotation_round_trip_keeps_uniform_interior() {
        let src = Raster::filled(32, 32, 1.5f32);
        let back = rotate_features(&rotate_features(&src, 10.0), -10.0);
        for r in 8..24 {
            for c in 8..24 {
                assert!((back.get(r, c) - 1.5).abs() < 1e-6);
            }
        }
        let lab = rotate_labels(&Raster::filled(32, 32, 3u8), 10.0);
        assert_eq!(lab.get(16, 16), 3);
        assert_eq!(lab.get(0, 0), IGNORE);
    }
}
