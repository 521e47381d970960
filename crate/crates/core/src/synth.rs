//! Synthetic scene generator.
//!
//! Scenes are partitioned into Voronoi cells (or a checkerboard), each cell is
//! given a class, its pixels are drawn from that class's per-channel normal
//! distribution, and a chart entry consistent with the class is written.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{IceClass, N_CLASSES};
use crate::partition::{MeltClimatology, MeltRecord, Region, RegionMap};
use crate::raster::Raster;
use crate::rng::StreamKey;
use crate::scene::{
    write_scene, Channel, ChannelSpec, DatasetManifest, IceChartPolygon, Partial, Scene, Split,
    DISTANCE_MAP, MONTH,
};

pub const SAR_PRIMARY: &str = "nersc_sar_primary";
pub const SAR_SECONDARY: &str = "nersc_sar_secondary";
pub const BTEMP_LOW: &str = "btemp_18_7v";
pub const BTEMP_HIGH: &str = "btemp_36_5v";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Separable,
    Ambiguous,
    Checkerboard,
    SingleInformative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthChannel {
    pub name: String,
    /// Native grid is the scene grid divided by this factor.
    #[serde(default = "one")]
    pub coarse_factor: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSignature {
    pub class: u8,
    pub prior: f64,
    /// `[mean, std]` per entry of `SynthSpec::channels`.
    pub stats: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthLocation {
    pub id: String,
    pub region: Region,
    pub melt_doy: u32,
    pub freeze_doy: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    Voronoi,
    /// Square blocks alternating between the first two classes.
    Checkerboard {
        block: usize,
    },
}

/// A run of scenes sharing dates, locations and class priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthGroup {
    pub name: String,
    pub n_scenes: usize,
    #[serde(default)]
    pub priors: Option<BTreeMap<u8, f64>>,
    #[serde(default)]
    pub months: Option<Vec<u32>>,
    #[serde(default)]
    pub locations: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_scenes: usize,
    pub height: usize,
    pub width: usize,
    pub n_polygons: usize,
    pub layout: Layout,
    pub channels: Vec<SynthChannel>,
    pub classes: Vec<ClassSignature>,
    /// Fraction of polygons charted with two equal partials of different classes.
    pub ambiguous_fraction: f64,
    /// Fraction of labeled polygons whose chart names a wrong class.
    pub label_noise: f64,
    /// Width in columns of a land strip on the western edge.
    pub land_strip: usize,
    pub locations: Vec<SynthLocation>,
    pub year: i32,
    pub months: Vec<u32>,
    pub n_test: usize,
    #[serde(default)]
    pub groups: Vec<SynthGroup>,
    pub seed: u64,
}

fn hexagon_palette() -> Vec<ClassSignature> {
    (0..N_CLASSES as u8)
        .map(|k| {
            let a = (60.0 * k as f64).to_radians();
            ClassSignature {
                class: k,
                prior: 1.0 / N_CLASSES as f64,
                stats: vec![
                    [6.0 * a.cos(), 1.0],
                    [6.0 * a.sin(), 1.0],
                    [-5.0 + 2.0 * k as f64, 1.0],
                    [5.0 - 2.0 * k as f64, 1.0],
                ],
            }
        })
        .collect()
}

fn default_channels() -> Vec<SynthChannel> {
    vec![
        SynthChannel {
            name: SAR_PRIMARY.into(),
            coarse_factor: 1,
        },
        SynthChannel {
            name: SAR_SECONDARY.into(),
            coarse_factor: 1,
        },
        SynthChannel {
            name: BTEMP_LOW.into(),
            coarse_factor: 10,
        },
        SynthChannel {
            name: BTEMP_HIGH.into(),
            coarse_factor: 10,
        },
    ]
}

fn default_locations() -> Vec<SynthLocation> {
    [
        ("loc_east", Region::East, 152, 258),
        ("loc_west", Region::West, 160, 250),
        ("loc_canadian", Region::CanadianArctic, 170, 245),
        ("loc_north", Region::North, 182, 236),
    ]
    .into_iter()
    .map(|(id, region, melt_doy, freeze_doy)| SynthLocation {
        id: id.into(),
        region,
        melt_doy,
        freeze_doy,
    })
    .collect()
}

impl SynthSpec {
    pub fn preset(p: Preset) -> Self {
        let base = SynthSpec {
            n_scenes: 20,
            height: 400,
            width: 400,
            n_polygons: 12,
            layout: Layout::Voronoi,
            channels: default_channels(),
            classes: hexagon_palette(),
            ambiguous_fraction: 0.0,
            label_noise: 0.0,
            land_strip: 0,
            locations: default_locations(),
            year: 2019,
            months: (1..=12).collect(),
            n_test: 4,
            groups: Vec::new(),
            seed: 0,
        };
        match p {
            Preset::Separable => base,
            Preset::Ambiguous => SynthSpec {
                ambiguous_fraction: 0.3,
                ..base
            },
            Preset::Checkerboard => SynthSpec {
                layout: Layout::Checkerboard { block: 16 },
                classes: vec![
                    ClassSignature {
                        class: 0,
                        prior: 0.5,
                        stats: vec![[-3.0, 1.0], [-3.0, 1.0], [0.0, 1.0], [0.0, 1.0]],
                    },
                    ClassSignature {
                        class: 4,
                        prior: 0.5,
                        stats: vec![[3.0, 1.0], [3.0, 1.0], [0.0, 1.0], [0.0, 1.0]],
                    },
                ],
                ..base
            },
            Preset::SingleInformative => SynthSpec {
                classes: [(0u8, -5.0), (2, 0.0), (4, 5.0)]
                    .into_iter()
                    .map(|(class, m)| ClassSignature {
                        class,
                        prior: 1.0 / 3.0,
                        stats: vec![[m, 1.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]],
                    })
                    .collect(),
                ..base
            },
        }
    }

    /// Parses a JSON spec. An optional `"preset"` key supplies defaults that
    /// the remaining keys override.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Spec(format!("invalid synth spec JSON: {e}")))?;
        let serde_json::Value::Object(mut obj) = value else {
            return Err(Error::Spec("synth spec must be a JSON object".into()));
        };
        let preset = match obj.remove("preset") {
            Some(p) => {
                serde_json::from_value(p).map_err(|e| Error::Spec(format!("preset: {e}")))?
            }
            None => Preset::Separable,
        };
        let mut merged = serde_json::to_value(Self::preset(preset)).expect("spec serializes");
        let target = merged.as_object_mut().expect("spec is an object");
        for (k, v) in obj {
            target.insert(k, v);
        }
        let spec: SynthSpec =
            serde_json::from_value(merged).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.n_scenes == 0 || self.height == 0 || self.width == 0 || self.n_polygons == 0 {
            return bad("n_scenes, height, width and n_polygons must be positive".into());
        }
        if self.n_test >= self.n_scenes {
            return bad(format!(
                "n_test {} must be below n_scenes {}",
                self.n_test, self.n_scenes
            ));
        }
        if self.classes.is_empty() {
            return bad("at least one class signature required".into());
        }
        if let Layout::Checkerboard { block } = self.layout {
            if block == 0 || self.classes.len() < 2 {
                return bad("checkerboard needs block >= 1 and two classes".into());
            }
        }
        let mut names = std::collections::HashSet::new();
        for ch in &self.channels {
            if ch.name == MONTH || ch.name == DISTANCE_MAP || !names.insert(ch.name.as_str()) {
                return bad(format!(
                    "channel name {:?} is reserved or duplicated",
                    ch.name
                ));
            }
            if ch.coarse_factor == 0 || ch.coarse_factor > self.height.min(self.width) {
                return bad(format!(
                    "coarse_factor {} of {} out of range",
                    ch.coarse_factor, ch.name
                ));
            }
        }
        let mut seen = [false; N_CLASSES];
        for c in &self.classes {
            if c.class as usize >= N_CLASSES || std::mem::replace(&mut seen[c.class as usize], true)
            {
                return bad(format!("class {} invalid or repeated", c.class));
            }
            if !(c.prior >= 0.0)
                || c.stats.len() != self.channels.len()
                || c.stats.iter().any(|s| !(s[1] >= 0.0))
            {
                return bad(format!(
                    "class {}: prior must be >= 0, one [mean, std>=0] per channel",
                    c.class
                ));
            }
        }
        if self.classes.iter().map(|c| c.prior).sum::<f64>() <= 0.0 {
            return bad("class priors sum to zero".into());
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction)
            || !(0.0..=1.0).contains(&self.label_noise)
        {
            return bad("ambiguous_fraction and label_noise must lie in [0, 1]".into());
        }
        if self.land_strip >= self.width {
            return bad("land_strip must be narrower than the scene".into());
        }
        if self.locations.is_empty()
            || self.months.is_empty()
            || self.months.iter().any(|m| !(1..=12).contains(m))
        {
            return bad("need at least one location and months within 1..=12".into());
        }
        for g in &self.groups {
            if let Some(p) = &g.priors {
                if p.keys()
                    .any(|k| !self.classes.iter().any(|c| c.class == *k))
                    || p.values().sum::<f64>() <= 0.0
                {
                    return bad(format!(
                        "group {}: priors must name palette classes",
                        g.name
                    ));
                }
            }
            if g.months
                .as_ref()
                .is_some_and(|m| m.is_empty() || m.iter().any(|m| !(1..=12).contains(m)))
            {
                return bad(format!("group {}: bad months", g.name));
            }
            if let Some(locs) = &g.locations {
                if locs.is_empty()
                    || locs
                        .iter()
                        .any(|l| !self.locations.iter().any(|x| &x.id == l))
                {
                    return bad(format!("group {}: unknown location", g.name));
                }
            }
        }
        if !self.groups.is_empty()
            && self.groups.iter().map(|g| g.n_scenes).sum::<usize>() != self.n_scenes
        {
            return bad("group sizes must add up to n_scenes".into());
        }
        Ok(())
    }

    fn effective_groups(&self) -> Vec<SynthGroup> {
        if self.groups.is_empty() {
            vec![SynthGroup {
                name: "all".into(),
                n_scenes: self.n_scenes,
                priors: None,
                months: None,
                locations: None,
            }]
        } else {
            self.groups.clone()
        }
    }

    fn signature(&self, class: u8) -> &ClassSignature {
        self.classes
            .iter()
            .find(|c| c.class == class)
            .expect("validated class")
    }
}

/// Cells of one scene before classes are assigned.
struct CellLayout {
    ids: Raster<i32>,
    areas: Vec<u64>,
}

fn voronoi(spec: &SynthSpec, key: StreamKey) -> CellLayout {
    let mut rng = key.with_str("voronoi").rng();
    let seeds: Vec<(f64, f64)> = (0..spec.n_polygons)
        .map(|_| {
            (
                rng.random_range(0.0..spec.height as f64),
                rng.random_range(0.0..spec.width as f64),
            )
        })
        .collect();
    let mut areas = vec![0u64; spec.n_polygons];
    let ids = Raster::from_fn(spec.height, spec.width, |r, c| {
        if c < spec.land_strip {
            return -1;
        }
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, (sy, sx)) in seeds.iter().enumerate() {
            let d = (y - sy).powi(2) + (x - sx).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        areas[best] += 1;
        best as i32
    });
    CellLayout { ids, areas }
}

fn checkerboard(spec: &SynthSpec, block: usize) -> CellLayout {
    let per_row = spec.width.div_ceil(block);
    let n = spec.height.div_ceil(block) * per_row;
    let mut areas = vec![0u64; n];
    let ids = Raster::from_fn(spec.height, spec.width, |r, c| {
        if c < spec.land_strip {
            return -1;
        }
        let id = (r / block) * per_row + c / block;
        areas[id] += 1;
        id as i32
    });
    CellLayout { ids, areas }
}

#[derive(Debug, Clone, Copy)]
struct CellPlan {
    /// Class whose signature generates the pixels.
    class: u8,
    /// Second class of an ambiguous chart entry.
    ambiguous_with: Option<u8>,
    /// Class named by the chart.
    charted: u8,
}

struct ScenePlan {
    scene_id: String,
    group: usize,
    location: String,
    date: NaiveDate,
    layout: CellLayout,
    cells: Vec<CellPlan>,
}

fn days_in_month(year: i32, month: u32) -> u32 {
    let next = if month == 12 {
        NaiveDate::from_ymd_opt(year + 1, 1, 1)
    } else {
        NaiveDate::from_ymd_opt(year, month + 1, 1)
    };
    next.expect("valid date")
        .pred_opt()
        .expect("valid date")
        .day()
}

fn chart_entry(id: i32, plan: &CellPlan, rng: &mut ChaCha8Rng) -> IceChartPolygon {
    let code = |class: u8, rng: &mut ChaCha8Rng| -> i32 {
        *IceClass::from_index(class)
            .expect("valid class")
            .sigrid_codes()
            .choose(rng)
            .expect("class has codes")
    };
    if let Some(other) = plan.ambiguous_with {
        return IceChartPolygon {
            id,
            total_sic: 80.0,
            partials: vec![
                Partial {
                    sod_code: code(plan.charted.max(1), rng),
                    concentration: 40.0,
                },
                Partial {
                    sod_code: code(other.max(1), rng),
                    concentration: 40.0,
                },
            ],
        };
    }
    if plan.charted == IceClass::OpenWater.index() {
        return IceChartPolygon {
            id,
            total_sic: 0.0,
            partials: Vec::new(),
        };
    }
    let total = rng.random_range(70..=100) as f64;
    let dominant = (total * rng.random_range(0.7..=1.0)).round();
    let mut partials = vec![Partial {
        sod_code: code(plan.charted, rng),
        concentration: dominant,
    }];
    if total - dominant > 0.0 {
        let others: Vec<u8> = (1..N_CLASSES as u8)
            .filter(|&c| c != plan.charted)
            .collect();
        let other = *others.choose(rng).expect("other classes");
        partials.push(Partial {
            sod_code: code(other, rng),
            concentration: total - dominant,
        });
    }
    IceChartPolygon {
        id,
        total_sic: total,
        partials,
    }
}

fn plan_scenes(spec: &SynthSpec) -> Vec<ScenePlan> {
    let groups = spec.effective_groups();
    let mut slots = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        for _ in 0..g.n_scenes {
            slots.push(gi);
        }
    }
    let layouts: Vec<CellLayout> = (0..slots.len())
        .into_par_iter()
        .map(|i| {
            let key = StreamKey::new(spec.seed).with_u64(i as u64);
            match spec.layout {
                Layout::Voronoi => voronoi(spec, key),
                Layout::Checkerboard { block } => checkerboard(spec, block),
            }
        })
        .collect();

    // Class assignment runs sequentially so labeled pixel fractions track the
    // priors across the whole group.
    let mut assigned: Vec<[f64; N_CLASSES]> = vec![[0.0; N_CLASSES]; groups.len()];
    let mut within_group = vec![0usize; groups.len()];
    let mut plans = Vec::with_capacity(slots.len());
    for (i, (gi, layout)) in slots.into_iter().zip(layouts).enumerate() {
        let g = &groups[gi];
        let mut rng = StreamKey::new(spec.seed)
            .with_u64(i as u64)
            .with_str("plan")
            .rng();
        let priors: Vec<(u8, f64)> = match &g.priors {
            Some(p) => p.iter().map(|(&k, &v)| (k, v)).collect(),
            None => spec.classes.iter().map(|c| (c.class, c.prior)).collect(),
        };
        let prior_sum: f64 = priors.iter().map(|p| p.1).sum();
        let months = g.months.as_ref().unwrap_or(&spec.months);
        let month = *months.choose(&mut rng).expect("months");
        let day = rng.random_range(1..=days_in_month(spec.year, month));
        let locations: Vec<&str> = match &g.locations {
            Some(l) => l.iter().map(String::as_str).collect(),
            None => spec.locations.iter().map(|l| l.id.as_str()).collect(),
        };
        let location = locations[within_group[gi] % locations.len()].to_string();
        within_group[gi] += 1;

        let mut order: Vec<usize> = (0..layout.areas.len()).collect();
        order.sort_by_key(|&k| (std::cmp::Reverse(layout.areas[k]), k));
        let mut cells = vec![
            CellPlan {
                class: 0,
                ambiguous_with: None,
                charted: 0,
            };
            layout.areas.len()
        ];
        for k in order {
            let area = layout.areas[k] as f64;
            if area == 0.0 {
                continue;
            }
            let class = if let Layout::Checkerboard { block } = spec.layout {
                let per_row = spec.width.div_ceil(block);
                let parity = (k / per_row + k % per_row) % 2;
                spec.classes[parity].class
            } else {
                let acc = &assigned[gi];
                let total: f64 = acc.iter().sum::<f64>() + area;
                let mut best = priors[0].0;
                let mut best_gap = f64::NEG_INFINITY;
                for &(c, p) in &priors {
                    let gap = p / prior_sum * total - acc[c as usize];
                    if gap > best_gap {
                        best_gap = gap;
                        best = c;
                    }
                }
                best
            };
            let ambiguous = rng.random_bool(spec.ambiguous_fraction);
            let mut plan = CellPlan {
                class,
                ambiguous_with: None,
                charted: class,
            };
            if ambiguous {
                let others: Vec<u8> = spec
                    .classes
                    .iter()
                    .map(|c| c.class)
                    .filter(|&c| c != class)
                    .collect();
                let other = others
                    .choose(&mut rng)
                    .copied()
                    .unwrap_or((class + 1) % N_CLASSES as u8);
                plan.ambiguous_with = Some(other);
            } else {
                assigned[gi][class as usize] += area;
                if rng.random_bool(spec.label_noise) {
                    let others: Vec<u8> = (0..N_CLASSES as u8).filter(|&c| c != class).collect();
                    plan.charted = *others.choose(&mut rng).expect("other classes");
                }
            }
            cells[k] = plan;
        }
        plans.push(ScenePlan {
            scene_id: format!("S{i:04}"),
            group: gi,
            location,
            date: NaiveDate::from_ymd_opt(spec.year, month, day).expect("valid date"),
            layout,
            cells,
        });
    }
    plans
}

fn render(spec: &SynthSpec, plan: &ScenePlan, index: usize) -> Scene {
    let (h, w) = (spec.height, spec.width);
    let key = StreamKey::new(spec.seed).with_u64(index as u64);
    let cell_class = |r: usize, c: usize| -> Option<u8> {
        let id = plan.layout.ids.get(r, c);
        (id >= 0).then(|| plan.cells[id as usize].class)
    };
    let mut channels = Vec::with_capacity(spec.channels.len() + 1);
    for (ci, ch) in spec.channels.iter().enumerate() {
        let mut rng = key.with_str("pixels").with_str(&ch.name).rng();
        let f = ch.coarse_factor;
        let (nh, nw) = (h / f, w / f);
        let raster = Raster::from_fn(nh, nw, |r, c| {
            let (cr, cc) = (r * f + f / 2, c * f + f / 2);
            let [mean, std] = match cell_class(cr.min(h - 1), cc.min(w - 1)) {
                Some(class) => spec.signature(class).stats[ci],
                None => [0.0, 1.0],
            };
            let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
            (mean + std * z) as f32
        });
        channels.push(Channel {
            spec: ChannelSpec {
                name: ch.name.clone(),
                native_height: nh,
                native_width: nw,
                dtype: "f32".into(),
                file: format!("{}.f32", ch.name),
            },
            raster,
        });
    }
    let strip = spec.land_strip;
    let distance = Raster::from_fn(h, w, |_, c| {
        if c < strip {
            0.0
        } else {
            (1 + (c - strip) / 20) as f32
        }
    });
    channels.push(Channel {
        spec: ChannelSpec {
            name: DISTANCE_MAP.into(),
            native_height: h,
            native_width: w,
            dtype: "f32".into(),
            file: format!("{DISTANCE_MAP}.f32"),
        },
        raster: distance,
    });
    let mut rng = key.with_str("chart").rng();
    let polygons = plan
        .cells
        .iter()
        .enumerate()
        .filter(|(k, _)| plan.layout.areas[*k] > 0)
        .map(|(k, cell)| chart_entry(k as i32, cell, &mut rng))
        .collect();
    Scene {
        scene_id: plan.scene_id.clone(),
        location_id: plan.location.clone(),
        acquisition_date: plan.date,
        height: h,
        width: w,
        channels,
        polygon_raster: plan.layout.ids.clone(),
        polygons,
        land_mask: None,
        provenance: None,
    }
}

pub const ALL_MANIFEST: &str = "all.json";
pub const TRAIN_MANIFEST: &str = "train.json";
pub const TEST_MANIFEST: &str = "test.json";
pub const CLIMATOLOGY_FILE: &str = "climatology.json";
pub const REGIONS_FILE: &str = "regions.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub scene_dirs: Vec<PathBuf>,
    pub all: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub climatology: PathBuf,
    pub regions: PathBuf,
    /// Manifest per group, keyed by group name.
    pub groups: BTreeMap<String, PathBuf>,
}

/// Builds every scene in memory, without touching disk.
pub fn generate_scenes(spec: &SynthSpec) -> Result<Vec<Scene>> {
    spec.validate()?;
    let plans = plan_scenes(spec);
    plans
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let scene = render(spec, p, i);
            scene.validate()?;
            Ok(scene)
        })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes scene containers under `out_dir/scenes/` plus manifests and the
/// partition tables for the spec's locations.
pub fn generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<SynthOutput> {
    let out = out_dir.as_ref();
    spec.validate()?;
    let plans = plan_scenes(spec);
    let scenes_dir = out.join("scenes");
    std::fs::create_dir_all(&scenes_dir)
        .map_err(|e| Error::io(format!("creating {}", scenes_dir.display()), e))?;
    plans
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let scene = render(spec, p, i);
            scene.validate()?;
            write_scene(&scene, scenes_dir.join(&scene.scene_id))
        })
        .collect::<Result<Vec<()>>>()?;

    let rel: Vec<PathBuf> = plans
        .iter()
        .map(|p| Path::new("scenes").join(&p.scene_id))
        .collect();
    let mut order: Vec<usize> = (0..plans.len()).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut StreamKey::new(spec.seed).with_str("test-split").rng());
    }
    let mut test_idx: Vec<usize> = order[..spec.n_test].to_vec();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| rel[i].clone()).collect::<Vec<_>>();
    let train_idx: Vec<usize> = (0..plans.len()).filter(|i| !test_idx.contains(i)).collect();

    let manifest = |split, scenes| DatasetManifest { split, scenes };
    let paths = SynthOutput {
        scene_dirs: rel.iter().map(|r| out.join(r)).collect(),
        all: out.join(ALL_MANIFEST),
        train: out.join(TRAIN_MANIFEST),
        test: out.join(TEST_MANIFEST),
        climatology: out.join(CLIMATOLOGY_FILE),
        regions: out.join(REGIONS_FILE),
        groups: spec
            .effective_groups()
            .iter()
            .map(|g| (g.name.clone(), out.join(format!("group_{}.json", g.name))))
            .collect(),
    };
    manifest(Split::Train, rel.clone()).write(&paths.all)?;
    manifest(Split::Train, pick(&train_idx)).write(&paths.train)?;
    manifest(Split::Test, pick(&test_idx)).write(&paths.test)?;
    for (gi, g) in spec.effective_groups().iter().enumerate() {
        let idx: Vec<usize> = (0..plans.len()).filter(|&i| plans[i].group == gi).collect();
        manifest(Split::Train, pick(&idx)).write(&paths.groups[&g.name])?;
    }
    let clim = MeltClimatology(
        spec.locations
            .iter()
            .map(|l| {
                (
                    l.id.clone(),
                    MeltRecord {
                        melt_doy: l.melt_doy,
                        freeze_doy: l.freeze_doy,
                    },
                )
            })
            .collect(),
    );
    write_json(&paths.climatology, &clim)?;
    write_json(
        &paths.regions,
        &RegionMap(
            spec.locations
                .iter()
                .map(|l| (l.id.clone(), l.region))
                .collect(),
        ),
    )?;
    Ok(paths)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKind {
    Season,
    Region,
}

/// Splits `spec` into two groups that differ in dates (season) or location
/// (region). With `disjoint` the first group draws classes {0, 4} and the
/// second {1, 2}; otherwise both keep the spec priors.
pub fn paired_shift_spec(spec: &SynthSpec, shift: ShiftKind, disjoint: bool) -> Result<SynthSpec> {
    let mut out = spec.clone();
    let (a, b) = (spec.n_scenes.div_ceil(2), spec.n_scenes / 2);
    let priors = |classes: [u8; 2]| {
        disjoint.then(|| {
            classes
                .iter()
                .map(|&c| (c, 0.5))
                .collect::<BTreeMap<_, _>>()
        })
    };
    let region_loc = |r: Region| -> Result<String> {
        spec.locations
            .iter()
            .find(|l| l.region == r)
            .map(|l| l.id.clone())
            .ok_or_else(|| Error::Spec(format!("no location in region {r}")))
    };
    out.groups = match shift {
        ShiftKind::Season => vec![
            SynthGroup {
                name: "summer".into(),
                n_scenes: a,
                priors: priors([0, 4]),
                months: Some(vec![6, 7, 8]),
                locations: None,
            },
            SynthGroup {
                name: "winter".into(),
                n_scenes: b,
                priors: priors([1, 2]),
                months: Some(vec![12, 1, 2]),
                locations: None,
            },
        ],
        ShiftKind::Region => vec![
            SynthGroup {
                name: "east".into(),
                n_scenes: a,
                priors: priors([0, 4]),
                months: None,
                locations: Some(vec![region_loc(Region::East)?]),
            },
            SynthGroup {
                name: "west".into(),
                n_scenes: b,
                priors: priors([1, 2]),
                months: None,
                locations: Some(vec![region_loc(Region::West)?]),
            },
        ],
    };
    out.validate()?;
    Ok(out)
}

pub fn generate_paired_shift(
    spec: &SynthSpec,
    shift: ShiftKind,
    disjoint: bool,
    out_dir: impl AsRef<Path>,
) -> Result<SynthOutput> {
    generate(&paired_shift_spec(spec, shift, disjoint)?, out_dir)
}
