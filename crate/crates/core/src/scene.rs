//! Scene container format.
//!
//! A scene is a directory holding `manifest.json` plus headerless
//! little-endian row-major payloads: one `f32` file per channel at the
//! channel's native resolution, an `i32` polygon-id raster and an optional
//! `u8` land mask, both on the reference (SAR) grid.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DISTANCE_MAP: &str = "distance_map";
/// Pseudo-channel materialized from the acquisition date.
pub const MONTH: &str = "month";

/// Rounding slack allowed between summed partial concentrations and total SIC.
pub const PARTIAL_SUM_SLACK: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub native_height: usize,
    pub native_width: usize,
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partial {
    pub sod_code: i32,
    pub concentration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IceChartPolygon {
    pub id: i32,
    pub total_sic: f64,
    #[serde(default)]
    pub partials: Vec<Partial>,
}

impl IceChartPolygon {
    fn validate(&self) -> Result<()> {
        let field = format!("polygons[id={}]", self.id);
        let bad = |reason: String| Error::InvalidScene {
            field: field.clone(),
            reason,
        };
        if self.id < 0 {
            return Err(bad("id must be non-negative".into()));
        }
        if !(0.0..=100.0).contains(&self.total_sic) {
            return Err(bad(format!("total_sic {} outside 0..=100", self.total_sic)));
        }
        if self.partials.len() > 3 {
            return Err(bad(format!("{} partials (max 3)", self.partials.len())));
        }
        let mut sum = 0.0;
        for p in &self.partials {
            if !(0.0..=100.0).contains(&p.concentration) {
                return Err(bad(format!(
                    "partial concentration {} outside 0..=100",
                    p.concentration
                )));
            }
            sum += p.concentration;
        }
        if sum > self.total_sic + PARTIAL_SUM_SLACK {
            return Err(bad(format!(
                "partials sum {sum} exceeds total_sic {} by more than {PARTIAL_SUM_SLACK}",
                self.total_sic
            )));
        }
        Ok(())
    }
}

/// Record of the preparation steps applied to a re-persisted scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub downscale_ratio: usize,
    pub alignment_policy: String,
    pub normalization_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub spec: ChannelSpec,
    pub raster: Raster<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub location_id: String,
    pub acquisition_date: NaiveDate,
    pub height: usize,
    pub width: usize,
    pub channels: Vec<Channel>,
    pub polygon_raster: Raster<i32>,
    pub polygons: Vec<IceChartPolygon>,
    pub land_mask: Option<Raster<u8>>,
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PayloadRef {
    file: String,
    dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestJson {
    scene_id: String,
    location_id: String,
    acquisition_date: String,
    height: usize,
    width: usize,
    channels: Vec<ChannelSpec>,
    polygon_raster: PayloadRef,
    polygons: Vec<IceChartPolygon>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    land_mask: Option<PayloadRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

/// Scene metadata read from `manifest.json` alone, without payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneHeader {
    pub scene_id: String,
    pub location_id: String,
    pub acquisition_date: NaiveDate,
    pub height: usize,
    pub width: usize,
}

impl SceneHeader {
    pub fn month(&self) -> u32 {
        self.acquisition_date.month()
    }

    pub fn day_of_year(&self) -> u32 {
        self.acquisition_date.ordinal()
    }
}

fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| Error::MalformedDate {
        value: s.to_string(),
    })
}

fn read_manifest(dir: &Path) -> Result<ManifestJson> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                field: MANIFEST_FILE.into(),
                path: path.clone(),
            }
        } else {
            Error::io(format!("reading {}", path.display()), e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))
}

pub fn read_header(dir: impl AsRef<Path>) -> Result<SceneHeader> {
    let m = read_manifest(dir.as_ref())?;
    Ok(SceneHeader {
        acquisition_date: parse_date(&m.acquisition_date)?,
        scene_id: m.scene_id,
        location_id: m.location_id,
        height: m.height,
        width: m.width,
    })
}

fn read_payload(dir: &Path, field: &str, file: &str, expected: u64) -> Result<Vec<u8>> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                field: field.to_string(),
                path: path.clone(),
            }
        } else {
            Error::io(format!("reading {}", path.display()), e)
        }
    })?;
    if bytes.len() as u64 != expected {
        return Err(Error::PayloadSizeMismatch {
            field: field.to_string(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

fn check_dtype(field: &str, dtype: &str, want: &str) -> Result<()> {
    if dtype != want {
        return Err(Error::UnknownDtype {
            field: field.to_string(),
            dtype: dtype.to_string(),
        });
    }
    Ok(())
}

pub fn load_scene(dir: impl AsRef<Path>) -> Result<Scene> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let acquisition_date = parse_date(&m.acquisition_date)?;
    if m.height == 0 || m.width == 0 {
        return Err(Error::InvalidScene {
            field: "height/width".into(),
            reason: "reference grid must be at least 1x1".into(),
        });
    }
    let cells = (m.height * m.width) as u64;

    let mut channels = Vec::with_capacity(m.channels.len());
    for spec in &m.channels {
        let field = format!("channels[{}]", spec.name);
        check_dtype(&field, &spec.dtype, "f32")?;
        if spec.native_height == 0 || spec.native_width == 0 {
            return Err(Error::InvalidScene {
                field,
                reason: "native dims must be at least 1".into(),
            });
        }
        let n = spec.native_height * spec.native_width;
        let bytes = read_payload(dir, &field, &spec.file, n as u64 * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        channels.push(Channel {
            spec: spec.clone(),
            raster: Raster::new(spec.native_height, spec.native_width, data)?,
        });
    }

    check_dtype("polygon_raster", &m.polygon_raster.dtype, "i32")?;
    let bytes = read_payload(dir, "polygon_raster", &m.polygon_raster.file, cells * 4)?;
    let ids = bytes
        .chunks_exact(4)
        .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let polygon_raster = Raster::new(m.height, m.width, ids)?;

    let land_mask = match &m.land_mask {
        Some(p) => {
            check_dtype("land_mask", &p.dtype, "u8")?;
            let bytes = read_payload(dir, "land_mask", &p.file, cells)?;
            Some(Raster::new(m.height, m.width, bytes)?)
        }
        None => None,
    };

    let scene = Scene {
        scene_id: m.scene_id,
        location_id: m.location_id,
        acquisition_date,
        height: m.height,
        width: m.width,
        channels,
        polygon_raster,
        polygons: m.polygons,
        land_mask,
        provenance: m.provenance,
    };
    scene.validate()?;
    Ok(scene)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_scene(scene: &Scene, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;

    for ch in &scene.channels {
        let mut buf = Vec::with_capacity(ch.raster.as_slice().len() * 4);
        for v in ch.raster.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write_bytes(&dir.join(&ch.spec.file), &buf)?;
    }
    let mut buf = Vec::with_capacity(scene.polygon_raster.as_slice().len() * 4);
    for v in scene.polygon_raster.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let polygon_file = "polygons.i32".to_string();
    write_bytes(&dir.join(&polygon_file), &buf)?;

    let land_mask = match &scene.land_mask {
        Some(mask) => {
            let file = "land_mask.u8".to_string();
            write_bytes(&dir.join(&file), mask.as_slice())?;
            Some(PayloadRef {
                file,
                dtype: "u8".into(),
            })
        }
        None => None,
    };

    let manifest = ManifestJson {
        scene_id: scene.scene_id.clone(),
        location_id: scene.location_id.clone(),
        acquisition_date: scene.acquisition_date.format("%Y-%m-%d").to_string(),
        height: scene.height,
        width: scene.width,
        channels: scene.channels.iter().map(|c| c.spec.clone()).collect(),
        polygon_raster: PayloadRef {
            file: polygon_file,
            dtype: "i32".into(),
        },
        polygons: scene.polygons.clone(),
        land_mask,
        provenance: scene.provenance.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json("serializing manifest", e))?;
    write_bytes(&dir.join(MANIFEST_FILE), text.as_bytes())
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.polygon_raster.dims() != (self.height, self.width) {
            return Err(Error::InvalidScene {
                field: "polygon_raster".into(),
                reason: format!(
                    "dims {:?} differ from reference grid",
                    self.polygon_raster.dims()
                ),
            });
        }
        if let Some(mask) = &self.land_mask {
            if mask.dims() != (self.height, self.width) {
                return Err(Error::InvalidScene {
                    field: "land_mask".into(),
                    reason: format!("dims {:?} differ from reference grid", mask.dims()),
                });
            }
        }
        let mut names = HashSet::new();
        for ch in &self.channels {
            if !names.insert(ch.spec.name.as_str()) {
                return Err(Error::InvalidScene {
                    field: format!("channels[{}]", ch.spec.name),
                    reason: "duplicate channel name".into(),
                });
            }
            if ch.raster.dims() != (ch.spec.native_height, ch.spec.native_width) {
                return Err(Error::InvalidScene {
                    field: format!("channels[{}]", ch.spec.name),
                    reason: "raster dims differ from declared native dims".into(),
                });
            }
        }
        let mut ids = HashSet::new();
        for p in &self.polygons {
            p.validate()?;
            if !ids.insert(p.id) {
                return Err(Error::InvalidScene {
                    field: format!("polygons[id={}]", p.id),
                    reason: "duplicate polygon id".into(),
                });
            }
        }
        for &v in self.polygon_raster.as_slice() {
            if v >= 0 && !ids.contains(&v) {
                return Err(Error::OrphanPolygonId { id: v });
            }
            if v < -1 {
                return Err(Error::InvalidScene {
                    field: "polygon_raster".into(),
                    reason: format!("value {v} below the -1 uncharted sentinel"),
                });
            }
        }
        Ok(())
    }

    pub fn header(&self) -> SceneHeader {
        SceneHeader {
            scene_id: self.scene_id.clone(),
            location_id: self.location_id.clone(),
            acquisition_date: self.acquisition_date,
            height: self.height,
            width: self.width,
        }
    }

    pub fn month(&self) -> u32 {
        self.acquisition_date.month()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn channel(&self, name: &str) -> Result<&Channel> {
        self.channels
            .iter()
            .find(|c| c.spec.name == name)
            .ok_or_else(|| Error::UnknownChannel(name.to_string()))
    }

    /// Native-resolution raster for `name`; co-registration happens in preprocessing.
    pub fn channel_raster(&self, name: &str) -> Result<&Raster<f32>> {
        Ok(&self.channel(name)?.raster)
    }

    pub fn channel_names(&self) -> Vec<&str> {
        self.channels.iter().map(|c| c.spec.name.as_str()).collect()
    }

    pub fn polygon_lookup(&self) -> HashMap<i32, &IceChartPolygon> {
        self.polygons.iter().map(|p| (p.id, p)).collect()
    }

    pub fn referenced_polygon_ids(&self) -> BTreeSet<i32> {
        self.polygon_raster
            .as_slice()
            .iter()
            .copied()
            .filter(|&v| v >= 0)
            .collect()
    }

    /// Land pixels on the reference grid.
    ///
    /// An explicit mask wins. Otherwise pixels whose `distance_map` value is at
    /// most `land_zone` are land, sampling `distance_map` at the nearest native
    /// cell when it is not on the reference grid. With neither, no pixel is land.
    pub fn land(&self, land_zone: f32) -> Raster<bool> {
        if let Some(mask) = &self.land_mask {
            return mask.map(|v| v != 0);
        }
        match self.channel(DISTANCE_MAP) {
            Ok(ch) => {
                let (nh, nw) = ch.raster.dims();
                Raster::from_fn(self.height, self.width, |r, c| {
                    let v = ch.raster.get(r * nh / self.height, c * nw / self.width);
                    v.is_finite() && v <= land_zone
                })
            }
            Err(_) => Raster::filled(self.height, self.width, false),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// A list of scene container directories forming one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub scenes: Vec<PathBuf>,
}

impl DatasetManifest {
    /// Reads a manifest; relative scene paths are resolved against the manifest's directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in &mut m.scenes {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json("serializing dataset manifest", e))?;
        write_bytes(path, text.as_bytes())
    }

    pub fn headers(&self) -> Result<Vec<SceneHeader>> {
        let headers = self
            .scenes
            .iter()
            .map(read_header)
            .collect::<Result<Vec<_>>>()?;
        check_unique(headers.iter().map(|h| h.scene_id.as_str()))?;
        Ok(headers)
    }

    /// Loads every scene, in manifest order.
    pub fn load_all(&self) -> Result<Vec<Scene>> {
        use rayon::prelude::*;
        let scenes = self
            .scenes
            .par_iter()
            .map(load_scene)
            .collect::<Result<Vec<_>>>()?;
        check_unique(scenes.iter().map(|s| s.scene_id.as_str()))?;
        Ok(scenes)
    }
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::InvalidScene {
                field: "scene_id".into(),
                reason: format!("duplicate scene id {id:?} in manifest"),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scene() -> Scene {
        Scene {
            scene_id: "s0".into(),
            location_id: "loc".into(),
            acquisition_date: NaiveDate::from_ymd_opt(2020, 7, 14).unwrap(),
            height: 4,
            width: 4,
            channels: vec![
                Channel {
                    spec: ChannelSpec {
                        name: "nersc_sar_primary".into(),
                        native_height: 4,
                        native_width: 4,
                        dtype: "f32".into(),
                        file: "nersc_sar_primary.f32".into(),
                    },
                    raster: Raster::from_fn(4, 4, |r, c| {
                        if r == 0 {
                            f32::NAN
                        } else {
                            (r * 4 + c) as f32
                        }
                    }),
                },
                Channel {
                    spec: ChannelSpec {
                        name: "btemp_18_7v".into(),
                        native_height: 2,
                        native_width: 2,
                        dtype: "f32".into(),
                        file: "btemp_18_7v.f32".into(),
                    },
                    raster: Raster::filled(2, 2, 250.0),
                },
            ],
            polygon_raster: Raster::from_fn(4, 4, |_, c| if c == 0 { -1 } else { 1 }),
            polygons: vec![IceChartPolygon {
                id: 1,
                total_sic: 90.0,
                partials: vec![Partial {
                    sod_code: 83,
                    concentration: 70.0,
                }],
            }],
            land_mask: None,
            provenance: None,
        }
    }

    #[test]
    fn round_trip_preserves_nan_bits() {
        let dir = tempfile::tempdir().unwrap();
        let s = tiny_scene();
        write_scene(&s, dir.path()).unwrap();
        let back = load_scene(dir.path()).unwrap();
        let a: Vec<u32> = s.channels[0]
            .raster
            .as_slice()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let b: Vec<u32> = back.channels[0]
            .raster
            .as_slice()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(a, b);
        assert_eq!(back.polygon_raster, s.polygon_raster);
        assert_eq!(back.polygons, s.polygons);
    }

    #[test]
    fn absent_land_mask_is_omitted_from_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_scene(&tiny_scene(), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v.get("land_mask").is_none());
    }

    #[test]
    fn missing_channel_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_scene(&tiny_scene(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("btemp_18_7v.f32")).unwrap();
        match load_scene(dir.path()) {
            Err(Error::MissingFile { field, .. }) => assert_eq!(field, "channels[btemp_18_7v]"),
            other => panic!("expected MissingFile, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_scene(&tiny_scene(), dir.path()).unwrap();
        fs::write(dir.path().join("polygons.i32"), [0u8; 10]).unwrap();
        assert!(matches!(
            load_scene(dir.path()),
            Err(Error::PayloadSizeMismatch {
                expected: 64,
                actual: 10,
                ..
            })
        ));
    }

    #[test]
    fn orphan_polygon_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = tiny_scene();
        s.polygon_raster.set(2, 2, 7);
        write_scene(&s, dir.path()).unwrap();
        assert!(matches!(
            load_scene(dir.path()),
            Err(Error::OrphanPolygonId { id: 7 })
        ));
    }

    #[test]
    fn bad_date_and_dtype_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_scene(&tiny_scene(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("2020-07-14", "2020-13-40")).unwrap();
        assert!(matches!(
            load_scene(dir.path()),
            Err(Error::MalformedDate { .. })
        ));
        fs::write(&path, text.replacen("\"f32\"", "\"f64\"", 1)).unwrap();
        assert!(matches!(
            load_scene(dir.path()),
            Err(Error::UnknownDtype { .. })
        ));
    }

    #[test]
    fn channel_lookup() {
        let s = tiny_scene();
        assert_eq!(s.channel_raster("btemp_18_7v").unwrap().dims(), (2, 2));
        assert!(matches!(
            s.channel_raster("no_such"),
            Err(Error::UnknownChannel(_))
        ));
    }

    #[test]
    fn land_from_distance_map_zone_zero() {
        let mut s = tiny_scene();
        s.channels.push(Channel {
            spec: ChannelSpec {
                name: DISTANCE_MAP.into(),
                native_height: 4,
                native_width: 4,
                dtype: "f32".into(),
                file: "distance_map.f32".into(),
            },
            raster: Raster::from_fn(4, 4, |_, c| c as f32),
        });
        let land = s.land(0.0);
        assert!(land.get(0, 0) && !land.get(0, 1));
        let land = s.land(1.0);
        assert!(land.get(3, 1) && !land.get(3, 2));
    }
}
