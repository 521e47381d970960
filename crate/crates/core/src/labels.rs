//! Ice-chart label derivation: SIGRID-3 stage-of-development decoding, the
//! normalized dominance rule, and per-pixel rasterization.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::scene::{IceChartPolygon, Scene};

/// Label value for land, uncharted, ambiguous and out-of-swath pixels.
pub const IGNORE: u8 = 255;
pub const N_CLASSES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum IceClass {
    OpenWater = 0,
    NewIce = 1,
    YoungIce = 2,
    ThinFirstYear = 3,
    ThickFirstYear = 4,
    OldIce = 5,
}

impl IceClass {
    pub const ALL: [IceClass; N_CLASSES] = [
        IceClass::OpenWater,
        IceClass::NewIce,
        IceClass::YoungIce,
        IceClass::ThinFirstYear,
        IceClass::ThickFirstYear,
        IceClass::OldIce,
    ];

    pub fn from_index(v: u8) -> Option<IceClass> {
        IceClass::ALL.get(v as usize).copied()
    }

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            IceClass::OpenWater => "Open Water",
            IceClass::NewIce => "New Ice",
            IceClass::YoungIce => "Young Ice",
            IceClass::ThinFirstYear => "Thin FYI",
            IceClass::ThickFirstYear => "Thick FYI",
            IceClass::OldIce => "Old Ice",
        }
    }

    /// SIGRID-3 stage-of-development codes that decode to this class.
    pub fn sigrid_codes(self) -> &'static [i32] {
        match self {
            IceClass::OpenWater => &[0, 80],
            IceClass::NewIce => &[81, 82],
            IceClass::YoungIce => &[83, 84, 85],
            IceClass::ThinFirstYear => &[87, 88, 89],
            IceClass::ThickFirstYear => &[86, 91, 93],
            IceClass::OldIce => &[95, 96, 97],
        }
    }
}

impl fmt::Display for IceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Decodes a SIGRID-3 SOD code; `None` means the code is not in the class table.
///
/// Code 86 belongs to thick first-year ice while 87–89 are thin first-year ice.
pub fn map_sigrid_code(sod_code: i32) -> Option<IceClass> {
    match sod_code {
        0 | 80 => Some(IceClass::OpenWater),
        81 | 82 => Some(IceClass::NewIce),
        83..=85 => Some(IceClass::YoungIce),
        87..=89 => Some(IceClass::ThinFirstYear),
        86 | 91 | 93 => Some(IceClass::ThickFirstYear),
        95..=97 => Some(IceClass::OldIce),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingConfig {
    pub dominance_threshold: f64,
    /// Polygons with total SIC at or below this percentage are open water.
    pub open_water_sic_max: f64,
    /// `distance_map` zones at or below this value count as land when a scene
    /// carries no explicit mask.
    pub land_zone: f32,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            dominance_threshold: 0.65,
            open_water_sic_max: 0.0,
            land_zone: 0.0,
        }
    }
}

impl LabelingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dominance_threshold > 0.5 && self.dominance_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "dominance_threshold {} must lie in (0.5, 1.0]",
                self.dominance_threshold
            )));
        }
        if !(0.0..=100.0).contains(&self.open_water_sic_max) {
            return Err(Error::Config(format!(
                "open_water_sic_max {} must lie in [0, 100]",
                self.open_water_sic_max
            )));
        }
        Ok(())
    }
}

/// Class of a polygon under the dominance rule; `None` is ignore.
pub fn polygon_label(poly: &IceChartPolygon, cfg: &LabelingConfig) -> Option<IceClass> {
    if poly.total_sic <= cfg.open_water_sic_max {
        return Some(IceClass::OpenWater);
    }
    let mut best: Option<(f64, i32)> = None;
    for p in &poly.partials {
        let share = p.concentration.min(poly.total_sic) / poly.total_sic;
        if best.is_none_or(|(s, _)| share > s) {
            best = Some((share, p.sod_code));
        }
    }
    let (share, code) = best?;
    if share >= cfg.dominance_threshold {
        map_sigrid_code(code)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRaster {
    pub values: Raster<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSidecar {
    pub scene_id: String,
    pub height: usize,
    pub width: usize,
    pub threshold: f64,
}

impl LabelRaster {
    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values.get(row, col)
    }

    /// Writes `<scene_id>.labels.u8` and its JSON sidecar into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, scene_id: &str, threshold: f64) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let bin = dir.join(format!("{scene_id}.labels.u8"));
        fs::write(&bin, self.values.as_slice())
            .map_err(|e| Error::io(format!("writing {}", bin.display()), e))?;
        let sidecar = LabelSidecar {
            scene_id: scene_id.to_string(),
            height: self.values.height(),
            width: self.values.width(),
            threshold,
        };
        let json = dir.join(format!("{scene_id}.labels.json"));
        let text = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::json("serializing label sidecar", e))?;
        fs::write(&json, text).map_err(|e| Error::io(format!("writing {}", json.display()), e))
    }

    pub fn read(dir: impl AsRef<Path>, scene_id: &str) -> Result<(Self, LabelSidecar)> {
        let dir = dir.as_ref();
        let json = dir.join(format!("{scene_id}.labels.json"));
        let text = fs::read_to_string(&json)
            .map_err(|e| Error::io(format!("reading {}", json.display()), e))?;
        let sidecar: LabelSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::json(format!("parsing {}", json.display()), e))?;
        let bin = dir.join(format!("{scene_id}.labels.u8"));
        let bytes =
            fs::read(&bin).map_err(|e| Error::io(format!("reading {}", bin.display()), e))?;
        if bytes.len() != sidecar.height * sidecar.width {
            return Err(Error::PayloadSizeMismatch {
                field: "labels".into(),
                expected: (sidecar.height * sidecar.width) as u64,
                actual: bytes.len() as u64,
            });
        }
        let values = Raster::new(sidecar.height, sidecar.width, bytes)?;
        Ok((LabelRaster { values }, sidecar))
    }
}

/// Per-pixel labels on the scene's reference grid. Uncharted pixels, land and
/// polygons without a dominant known type get [`IGNORE`].
pub fn rasterize_labels(scene: &Scene, cfg: &LabelingConfig) -> LabelRaster {
    let lookup = scene.polygon_lookup();
    let mut table = std::collections::HashMap::with_capacity(lookup.len());
    for (id, poly) in &lookup {
        table.insert(
            *id,
            polygon_label(poly, cfg).map_or(IGNORE, IceClass::index),
        );
    }
    let land = scene.land(cfg.land_zone);
    let ids = &scene.polygon_raster;
    let values = Raster::from_fn(scene.height, scene.width, |r, c| {
        let id = ids.get(r, c);
        if id < 0 || land.get(r, c) {
            IGNORE
        } else {
            table.get(&id).copied().unwrap_or(IGNORE)
        }
    });
    LabelRaster { values }
}
