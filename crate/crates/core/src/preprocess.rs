//! Co-registration, downscaling, standardization and land masking.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labels::{LabelRaster, IGNORE, N_CLASSES};
use crate::raster::Raster;
use crate::scene::{Channel, ChannelSpec, Provenance, Scene, SceneHeader, DISTANCE_MAP, MONTH};

/// Resampling kernel used when bringing a channel onto the reference grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    BlockAverage,
    BlockMax,
    NearestReplicate,
}

/// Block reduction used by [`downscale`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Average,
    Max,
}

/// Per-channel kernel assignment.
///
/// Channels without an override get `nearest_replicate` when their native
/// grid is coarser than the reference grid, `block_max` for the categorical
/// `distance_map`, and `block_average` otherwise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentPolicy {
    pub overrides: BTreeMap<String, Kernel>,
}

impl AlignmentPolicy {
    pub fn kernel_for(&self, spec: &ChannelSpec, reference: (usize, usize)) -> Kernel {
        if let Some(k) = self.overrides.get(&spec.name) {
            return *k;
        }
        if spec.native_height < reference.0 || spec.native_width < reference.1 {
            Kernel::NearestReplicate
        } else if spec.name == DISTANCE_MAP {
            Kernel::BlockMax
        } else {
            Kernel::BlockAverage
        }
    }

    /// Pool used when the aligned channel is later downscaled.
    pub fn pool_for(&self, name: &str) -> Pool {
        match self.overrides.get(name) {
            Some(Kernel::BlockMax) => Pool::Max,
            Some(_) => Pool::Average,
            None if name == DISTANCE_MAP => Pool::Max,
            None => Pool::Average,
        }
    }

    pub fn describe(&self) -> String {
        if self.overrides.is_empty() {
            return "default".to_string();
        }
        let parts: Vec<String> = self
            .overrides
            .iter()
            .map(|(k, v)| format!("{k}={}", serde_json::to_value(v).unwrap().as_str().unwrap()))
            .collect();
        format!("default;{}", parts.join(","))
    }
}

fn pool_block(raster: &Raster<f32>, r0: usize, c0: usize, bh: usize, bw: usize, pool: Pool) -> f32 {
    match pool {
        Pool::Average => {
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for r in r0..r0 + bh {
                for &v in &raster.row(r)[c0..c0 + bw] {
                    if v.is_finite() {
                        sum += v as f64;
                        n += 1;
                    }
                }
            }
            if n == 0 {
                f32::NAN
            } else {
                (sum / n as f64) as f32
            }
        }
        Pool::Max => {
            let mut best = f32::NEG_INFINITY;
            let mut any = false;
            for r in r0..r0 + bh {
                for &v in &raster.row(r)[c0..c0 + bw] {
                    if v.is_finite() {
                        any = true;
                        if v > best {
                            best = v;
                        }
                    }
                }
            }
            if any {
                best
            } else {
                f32::NAN
            }
        }
    }
}

fn block_reduce(
    raster: &Raster<f32>,
    bh: usize,
    bw: usize,
    out: (usize, usize),
    pool: Pool,
) -> Raster<f32> {
    Raster::from_fn(out.0, out.1, |r, c| {
        pool_block(raster, r * bh, c * bw, bh, bw, pool)
    })
}

fn nearest_resample<T: Copy>(raster: &Raster<T>, out: (usize, usize)) -> Raster<T> {
    let (nh, nw) = raster.dims();
    Raster::from_fn(out.0, out.1, |r, c| {
        raster.get(r * nh / out.0, c * nw / out.1)
    })
}

/// Brings one raster onto `reference` dims with `kernel`.
pub fn align_raster(
    name: &str,
    raster: &Raster<f32>,
    reference: (usize, usize),
    kernel: Kernel,
) -> Result<Raster<f32>> {
    let (nh, nw) = raster.dims();
    let (h, w) = reference;
    if (nh, nw) == (h, w) {
        return Ok(raster.clone());
    }
    let incompatible = || Error::IncompatibleGrid {
        channel: name.to_string(),
        native: (nh, nw),
        reference,
    };
    if nh <= h && nw <= w {
        // upsampling: block kernels cannot invent cells, so every kernel replicates
        return Ok(nearest_resample(raster, reference));
    }
    if nh >= h && nw >= w && nh % h == 0 && nw % w == 0 {
        let (bh, bw) = (nh / h, nw / w);
        return Ok(match kernel {
            Kernel::BlockAverage => block_reduce(raster, bh, bw, reference, Pool::Average),
            Kernel::BlockMax => block_reduce(raster, bh, bw, reference, Pool::Max),
            Kernel::NearestReplicate => nearest_resample(raster, reference),
        });
    }
    Err(incompatible())
}

/// Returns a copy of `scene` with every channel on the reference grid.
pub fn align_scene(scene: &Scene, policy: &AlignmentPolicy) -> Result<Scene> {
    let reference = scene.dims();
    let channels = scene
        .channels
        .iter()
        .map(|ch| {
            let kernel = policy.kernel_for(&ch.spec, reference);
            let raster = align_raster(&ch.spec.name, &ch.raster, reference, kernel)?;
            Ok(Channel {
                spec: ChannelSpec {
                    native_height: reference.0,
                    native_width: reference.1,
                    ..ch.spec.clone()
                },
                raster,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        channels,
        ..scene.clone()
    })
}

fn downscaled_dims(dims: (usize, usize), ratio: usize) -> Result<(usize, usize)> {
    if ratio == 0 {
        return Err(Error::Config("downscale ratio must be at least 1".into()));
    }
    let out = (dims.0 / ratio, dims.1 / ratio);
    if out.0 == 0 || out.1 == 0 {
        return Err(Error::EmptyOutput { dims, ratio });
    }
    Ok(out)
}

/// Block-reduces by `ratio`; trailing rows and columns that do not fill a block are dropped.
pub fn downscale(raster: &Raster<f32>, ratio: usize, pool: Pool) -> Result<Raster<f32>> {
    let out = downscaled_dims(raster.dims(), ratio)?;
    if ratio == 1 {
        return Ok(raster.clone());
    }
    Ok(block_reduce(raster, ratio, ratio, out, pool))
}

/// Majority vote per block over labeled pixels; smallest class wins ties and
/// an all-ignore block stays ignore.
pub fn downscale_labels(labels: &LabelRaster, ratio: usize) -> Result<LabelRaster> {
    let out = downscaled_dims(labels.dims(), ratio)?;
    if ratio == 1 {
        return Ok(labels.clone());
    }
    let src = &labels.values;
    let values = Raster::from_fn(out.0, out.1, |r, c| {
        let mut counts = [0u32; N_CLASSES];
        for rr in r * ratio..(r + 1) * ratio {
            for &v in &src.row(rr)[c * ratio..(c + 1) * ratio] {
                if (v as usize) < N_CLASSES {
                    counts[v as usize] += 1;
                }
            }
        }
        let mut best = IGNORE;
        let mut best_n = 0;
        for (k, &n) in counts.iter().enumerate() {
            if n > best_n {
                best = k as u8;
                best_n = n;
            }
        }
        best
    });
    Ok(LabelRaster { values })
}

fn mode_ids(src: &Raster<i32>, ratio: usize, out: (usize, usize)) -> Raster<i32> {
    Raster::from_fn(out.0, out.1, |r, c| {
        let mut ids: Vec<i32> = Vec::with_capacity(ratio * ratio);
        for rr in r * ratio..(r + 1) * ratio {
            ids.extend(
                src.row(rr)[c * ratio..(c + 1) * ratio]
                    .iter()
                    .copied()
                    .filter(|&v| v >= 0),
            );
        }
        if ids.is_empty() {
            return -1;
        }
        ids.sort_unstable();
        let (mut best, mut best_n) = (ids[0], 0);
        let mut i = 0;
        while i < ids.len() {
            let mut j = i;
            while j < ids.len() && ids[j] == ids[i] {
                j += 1;
            }
            if j - i > best_n {
                best = ids[i];
                best_n = j - i;
            }
            i = j;
        }
        best
    })
}

/// Downscales an aligned scene. Channels use their policy pool, the polygon
/// raster takes the per-block modal id, and land becomes an explicit mask
/// marking blocks that are more than half land.
pub fn downscale_scene(
    scene: &Scene,
    ratio: usize,
    policy: &AlignmentPolicy,
    land_zone: f32,
) -> Result<Scene> {
    let out = downscaled_dims(scene.dims(), ratio)?;
    let land = scene.land(land_zone);
    let land_mask = if ratio == 1 {
        land.map(u8::from)
    } else {
        Raster::from_fn(out.0, out.1, |r, c| {
            let mut n = 0;
            for rr in r * ratio..(r + 1) * ratio {
                n += land.row(rr)[c * ratio..(c + 1) * ratio]
                    .iter()
                    .filter(|&&v| v)
                    .count();
            }
            u8::from(2 * n > ratio * ratio)
        })
    };
    let channels = scene
        .channels
        .iter()
        .map(|ch| {
            if ch.raster.dims() != scene.dims() {
                return Err(Error::IncompatibleGrid {
                    channel: ch.spec.name.clone(),
                    native: ch.raster.dims(),
                    reference: scene.dims(),
                });
            }
            Ok(Channel {
                spec: ChannelSpec {
                    native_height: out.0,
                    native_width: out.1,
                    ..ch.spec.clone()
                },
                raster: downscale(&ch.raster, ratio, policy.pool_for(&ch.spec.name))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let polygon_raster = if ratio == 1 {
        scene.polygon_raster.clone()
    } else {
        mode_ids(&scene.polygon_raster, ratio, out)
    };
    Ok(Scene {
        height: out.0,
        width: out.1,
        channels,
        polygon_raster,
        land_mask: Some(land_mask),
        provenance: Some(Provenance {
            downscale_ratio: ratio,
            alignment_policy: policy.describe(),
            normalization_id: None,
        }),
        ..scene.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-channel standardization statistics, frozen once computed from a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub channels: BTreeMap<String, ChannelStats>,
}

impl NormalizationStats {
    /// Content hash identifying these statistics.
    pub fn id(&self) -> String {
        let text = serde_json::to_string(self).expect("stats serialize");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn get(&self, name: &str) -> Result<ChannelStats> {
        self.channels
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingStats(name.to_string()))
    }
}

/// What to do with a channel whose finite pixels are all equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegeneratePolicy {
    #[default]
    Error,
    /// Record the channel with unit std so it is only centered.
    Exempt,
}

/// Mean and population std over the finite pixels of `channels` across `scenes`,
/// accumulated in scene order. The `month` pseudo-channel is skipped.
pub fn compute_normalization(
    scenes: &[Scene],
    channels: &[String],
    degenerate: DegeneratePolicy,
) -> Result<NormalizationStats> {
    let mut out = BTreeMap::new();
    for name in channels.iter().filter(|n| n.as_str() != MONTH) {
        let rasters = scenes
            .iter()
            .map(|s| s.channel_raster(name))
            .collect::<Result<Vec<_>>>()?;
        let mut sum = 0.0f64;
        let mut n = 0u64;
        for r in &rasters {
            for &v in r.as_slice() {
                if v.is_finite() {
                    sum += v as f64;
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(Error::NoFinitePixels(name.clone()));
        }
        let mean = sum / n as f64;
        let mut ss = 0.0f64;
        for r in &rasters {
            for &v in r.as_slice() {
                if v.is_finite() {
                    let d = v as f64 - mean;
                    ss += d * d;
                }
            }
        }
        let std = (ss / n as f64).sqrt();
        let std = if std > 0.0 {
            std
        } else {
            match degenerate {
                DegeneratePolicy::Error => return Err(Error::DegenerateChannel(name.clone())),
                DegeneratePolicy::Exempt => 1.0,
            }
        };
        out.insert(name.clone(), ChannelStats { mean, std });
    }
    Ok(NormalizationStats { channels: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandPolicy {
    Include,
    #[default]
    Exclude,
}

/// Fixed affine used for the month pseudo-channel.
pub fn month_feature(month: u32) -> f32 {
    ((month as f64 - 6.5) / 3.45) as f32
}

/// Standardized, co-registered channels of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub names: Vec<String>,
    pub channels: Vec<Raster<f32>>,
}

impl FeatureStack {
    pub fn dims(&self) -> (usize, usize) {
        self.channels.first().map_or((0, 0), |r| r.dims())
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn window(&self, row: usize, col: usize, size: usize) -> FeatureStack {
        FeatureStack {
            names: self.names.clone(),
            channels: self
                .channels
                .iter()
                .map(|r| r.window(row, col, size, size))
                .collect(),
        }
    }
}

/// Everything a model consumes from one prepared scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub header: SceneHeader,
    pub features: FeatureStack,
    pub labels: LabelRaster,
    pub land: Raster<bool>,
}

impl ModelInput {
    pub fn scene_id(&self) -> &str {
        &self.header.scene_id
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }
}

/// Standardizes `channels` of a prepared scene with `stats` and applies the
/// land policy. `labels` must be on the scene grid.
pub fn apply_mask_and_normalize(
    scene: &Scene,
    labels: &LabelRaster,
    stats: &NormalizationStats,
    channels: &[String],
    land_policy: LandPolicy,
    land_zone: f32,
) -> Result<ModelInput> {
    if labels.dims() != scene.dims() {
        return Err(Error::ShapeMismatch {
            left: format!("labels {:?}", labels.dims()),
            right: format!("scene {:?}", scene.dims()),
        });
    }
    let land = scene.land(land_zone);
    let exclude = land_policy == LandPolicy::Exclude;
    let mut rasters = Vec::with_capacity(channels.len());
    for name in channels {
        let mut r = if name == MONTH {
            Raster::filled(scene.height, scene.width, month_feature(scene.month()))
        } else {
            let src = scene.channel_raster(name)?;
            if src.dims() != scene.dims() {
                return Err(Error::IncompatibleGrid {
                    channel: name.clone(),
                    native: src.dims(),
                    reference: scene.dims(),
                });
            }
            let st = stats.get(name)?;
            src.map(|v| ((v as f64 - st.mean) / st.std) as f32)
        };
        if exclude {
            for (v, &is_land) in r.as_mut_slice().iter_mut().zip(land.as_slice()) {
                if is_land {
                    *v = 0.0;
                }
            }
        }
        rasters.push(r);
    }
    let mut labels = labels.clone();
    if exclude {
        for (v, &is_land) in labels.values.as_mut_slice().iter_mut().zip(land.as_slice()) {
            if is_land {
                *v = IGNORE;
            }
        }
    }
    Ok(ModelInput {
        header: scene.header(),
        features: FeatureStack {
            names: channels.to_vec(),
            channels: rasters,
        },
        labels,
        land,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(h: usize, w: usize, v: &[f32]) -> Raster<f32> {
        Raster::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn nearest_upsample_replicates_blocks() {
        let src = r(2, 2, &[1., 1., 3., 3.]);
        let up = align_raster("x", &src, (4, 4), Kernel::NearestReplicate).unwrap();
        assert_eq!(
            up.as_slice(),
            &[1., 1., 1., 1., 1., 1., 1., 1., 3., 3., 3., 3., 3., 3., 3., 3.]
        );
    }

    #[test]
    fn matching_dims_is_identity() {
        let src = Raster::filled(4, 4, 2.5f32);
        assert_eq!(
            align_raster("x", &src, (4, 4), Kernel::BlockAverage).unwrap(),
            src
        );
    }

    #[test]
    fn incompatible_grid() {
        let src = Raster::filled(6, 6, 1.0f32);
        assert!(matches!(
            align_raster("x", &src, (4, 4), Kernel::BlockAverage),
            Err(Error::IncompatibleGrid { .. })
        ));
        let src = Raster::filled(8, 2, 1.0f32);
        assert!(align_raster("x", &src, (4, 4), Kernel::BlockAverage).is_err());
    }

    #[test]
    fn block_kernels() {
        let src = r(2, 2, &[1., 1., 3., 3.]);
        assert_eq!(
            downscale(&src, 2, Pool::Average).unwrap().as_slice(),
            &[2.0]
        );
        assert_eq!(downscale(&src, 2, Pool::Max).unwrap().as_slice(), &[3.0]);
        assert!(matches!(
            downscale(&src, 3, Pool::Average),
            Err(Error::EmptyOutput { .. })
        ));
    }

    #[test]
    fn nan_policy() {
        let src = r(
            2,
            4,
            &[
                f32::NAN,
                2.,
                f32::NAN,
                f32::NAN,
                4.,
                f32::NAN,
                f32::NAN,
                f32::NAN,
            ],
        );
        let out = downscale(&src, 2, Pool::Average).unwrap();
        assert_eq!(out.get(0, 0), 3.0);
        assert!(out.get(0, 1).is_nan());
    }

    #[test]
    fn label_pooling_rules() {
        let lab = |v: &[u8], w| LabelRaster {
            values: Raster::new(v.len() / w, w, v.to_vec()).unwrap(),
        };
        assert_eq!(
            downscale_labels(&lab(&[4, 4, 4, 4], 2), 2)
                .unwrap()
                .values
                .as_slice(),
            &[4]
        );
        assert_eq!(
            downscale_labels(&lab(&[4, 4, 5, 255], 2), 2)
                .unwrap()
                .values
                .as_slice(),
            &[4]
        );
        assert_eq!(
            downscale_labels(&lab(&[2, 3, 3, 2], 2), 2)
                .unwrap()
                .values
                .as_slice(),
            &[2]
        );
        assert_eq!(
            downscale_labels(&lab(&[2, 255, 255, 3], 2), 2)
                .unwrap()
                .values
                .as_slice(),
            &[2]
        );
        assert_eq!(
            downscale_labels(&lab(&[255; 4], 2), 2)
                .unwrap()
                .values
                .as_slice(),
            &[255]
        );
    }

    #[test]
    fn month_affine() {
        assert!((month_feature(7) as f64 - 0.5 / 3.45).abs() < 1e-7);
        assert!((month_feature(7) - 0.1449).abs() < 1e-4);
    }
}
