//! Seasonal, cryospheric and regional partitions, holdout splits and class
//! distributions.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{IGNORE, N_CLASSES};
use crate::preprocess::ModelInput;
use crate::rng::StreamKey;
use crate::sampling::PatchRecord;
use crate::scene::{DatasetManifest, SceneHeader, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Season {
    Spring,
    Summer,
    Fall,
    Winter,
}

impl Season {
    pub const ALL: [Season; 4] = [Season::Spring, Season::Summer, Season::Fall, Season::Winter];
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Season::Spring => "spring",
            Season::Summer => "summer",
            Season::Fall => "fall",
            Season::Winter => "winter",
        })
    }
}

/// Month (1–12) to season table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonRule {
    pub months: [Season; 12],
}

impl Default for SeasonRule {
    fn default() -> Self {
        use Season::*;
        Self {
            months: [
                Winter, Winter, Spring, Spring, Spring, Summer, Summer, Summer, Fall, Fall, Fall,
                Winter,
            ],
        }
    }
}

impl SeasonRule {
    pub fn season_of(&self, month: u32) -> Season {
        self.months[(month as usize - 1) % 12]
    }
}

pub fn conventional_season(header: &SceneHeader, rule: &SeasonRule) -> Season {
    rule.season_of(header.month())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CryoSeason {
    Melt,
    Freeze,
    Undefined,
}

impl fmt::Display for CryoSeason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CryoSeason::Melt => "melt",
            CryoSeason::Freeze => "freeze",
            CryoSeason::Undefined => "undefined",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeltRecord {
    pub melt_doy: u32,
    pub freeze_doy: u32,
}

/// Average melt-onset and freeze-onset day of year per location.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeltClimatology(pub BTreeMap<String, MeltRecord>);

impl MeltClimatology {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let clim: Self = read_json(path.as_ref())?;
        for (loc, rec) in &clim.0 {
            let ok = (1..=366).contains(&rec.melt_doy)
                && (1..=366).contains(&rec.freeze_doy)
                && rec.melt_doy < rec.freeze_doy;
            if !ok {
                return Err(Error::Config(format!(
                    "climatology for {loc}: need 1 <= melt_doy < freeze_doy <= 366, got {rec:?}"
                )));
            }
        }
        Ok(clim)
    }
}

pub fn cryo_season(header: &SceneHeader, clim: &MeltClimatology) -> CryoSeason {
    let Some(rec) = clim.0.get(&header.location_id) else {
        return CryoSeason::Undefined;
    };
    let doy = header.day_of_year();
    if doy >= rec.melt_doy && doy < rec.freeze_doy {
        CryoSeason::Melt
    } else {
        CryoSeason::Freeze
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    East,
    West,
    CanadianArctic,
    North,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::East => "East",
            Region::West => "West",
            Region::CanadianArctic => "CanadianArctic",
            Region::North => "North",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionMap(pub BTreeMap<String, Region>);

impl RegionMap {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

pub fn region_of(header: &SceneHeader, map: &RegionMap) -> Result<Region> {
    map.0
        .get(&header.location_id)
        .copied()
        .ok_or_else(|| Error::UnknownLocation(header.location_id.clone()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))
}

/// Partition tables needed by filters and keys.
#[derive(Debug, Clone, Default)]
pub struct PartitionContext {
    pub seasons: SeasonRule,
    pub climatology: MeltClimatology,
    pub regions: RegionMap,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneFilter {
    pub season: Option<Vec<Season>>,
    pub cryo: Option<Vec<CryoSeason>>,
    pub region: Option<Vec<Region>>,
}

impl SceneFilter {
    pub fn is_empty(&self) -> bool {
        self.season.is_none() && self.cryo.is_none() && self.region.is_none()
    }

    pub fn accepts(&self, header: &SceneHeader, ctx: &PartitionContext) -> Result<bool> {
        if let Some(seasons) = &self.season {
            if !seasons.contains(&conventional_season(header, &ctx.seasons)) {
                return Ok(false);
            }
        }
        if let Some(cryo) = &self.cryo {
            if !cryo.contains(&cryo_season(header, &ctx.climatology)) {
                return Ok(false);
            }
        }
        if let Some(regions) = &self.region {
            if !regions.contains(&region_of(header, &ctx.regions)?) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Holdout {
    FixedCount(usize),
    Fraction(f64),
}

impl Default for Holdout {
    fn default() -> Self {
        Holdout::Fraction(0.1)
    }
}

impl Holdout {
    pub fn count_for(&self, n: usize) -> Result<usize> {
        let k = match *self {
            Holdout::FixedCount(k) => k,
            Holdout::Fraction(f) => {
                if !(0.0..1.0).contains(&f) {
                    return Err(Error::Config(format!(
                        "holdout fraction {f} must lie in [0, 1)"
                    )));
                }
                ((f * n as f64).round() as usize).max(1)
            }
        };
        if k >= n {
            return Err(Error::InsufficientScenes {
                needed: k + 1,
                available: n,
            });
        }
        Ok(k)
    }
}

/// Indices of `headers` passing `filter`, in input order.
pub fn filter_indices(
    headers: &[SceneHeader],
    filter: &SceneFilter,
    ctx: &PartitionContext,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if filter.accepts(h, ctx)? {
            out.push(i);
        }
    }
    Ok(out)
}

/// Splits `n` items into (train, validation) index sets, each in ascending order.
pub fn split_indices(n: usize, holdout: Holdout, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InsufficientScenes {
            needed: 2,
            available: n,
        });
    }
    let k = holdout.count_for(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut StreamKey::new(seed).with_str("holdout").rng());
    let mut val: Vec<usize> = order[..k].to_vec();
    let mut train: Vec<usize> = order[k..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Filter-then-split of a manifest into disjoint train and validation manifests.
pub fn make_splits(
    manifest: &DatasetManifest,
    headers: &[SceneHeader],
    filter: &SceneFilter,
    holdout: Holdout,
    seed: u64,
    ctx: &PartitionContext,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if headers.len() != manifest.scenes.len() {
        return Err(Error::ShapeMismatch {
            left: format!("{} headers", headers.len()),
            right: format!("{} manifest entries", manifest.scenes.len()),
        });
    }
    let kept = filter_indices(headers, filter, ctx)?;
    let (train, val) = split_indices(kept.len(), holdout, seed)?;
    let pick = |idx: &[usize], split| DatasetManifest {
        split,
        scenes: idx
            .iter()
            .map(|&i| manifest.scenes[kept[i]].clone())
            .collect(),
    };
    Ok((pick(&train, Split::Train), pick(&val, Split::Validation)))
}

/// Grouping used by [`class_distribution`] and transfer experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKey {
    #[default]
    All,
    Season,
    Cryo,
    Region,
    Location,
}

pub fn partition_key(
    header: &SceneHeader,
    key: PartitionKey,
    ctx: &PartitionContext,
) -> Result<String> {
    Ok(match key {
        PartitionKey::All => "all".to_string(),
        PartitionKey::Season => conventional_season(header, &ctx.seasons).to_string(),
        PartitionKey::Cryo => cryo_season(header, &ctx.climatology).to_string(),
        PartitionKey::Region => region_of(header, &ctx.regions)?.to_string(),
        PartitionKey::Location => header.location_id.clone(),
    })
}

/// Per-class fractions of labeled pixels, grouped by partition key.
pub fn pixel_class_distribution(
    inputs: &[ModelInput],
    key: PartitionKey,
    ctx: &PartitionContext,
) -> Result<BTreeMap<String, [f64; N_CLASSES]>> {
    let mut counts: BTreeMap<String, [u64; N_CLASSES]> = BTreeMap::new();
    for input in inputs {
        let entry = counts
            .entry(partition_key(&input.header, key, ctx)?)
            .or_default();
        for &v in input.labels.values.as_slice() {
            if v != IGNORE && (v as usize) < N_CLASSES {
                entry[v as usize] += 1;
            }
        }
    }
    Ok(normalize_counts(counts))
}

/// Per-class fractions of accepted patches, grouped by the key of each patch's scene.
pub fn patch_class_distribution(
    records: &[PatchRecord],
    headers: &[SceneHeader],
    key: PartitionKey,
    ctx: &PartitionContext,
) -> Result<BTreeMap<String, [f64; N_CLASSES]>> {
    let by_id: HashMap<&str, &SceneHeader> =
        headers.iter().map(|h| (h.scene_id.as_str(), h)).collect();
    let mut counts: BTreeMap<String, [u64; N_CLASSES]> = BTreeMap::new();
    for r in records {
        let h = by_id
            .get(r.scene_id.as_str())
            .ok_or_else(|| Error::InvalidScene {
                field: "scene_id".into(),
                reason: format!("patch references unknown scene {}", r.scene_id),
            })?;
        if let Some(k) = r.label {
            counts.entry(partition_key(h, key, ctx)?).or_default()[k as usize] += 1;
        }
    }
    Ok(normalize_counts(counts))
}

fn normalize_counts(
    counts: BTreeMap<String, [u64; N_CLASSES]>,
) -> BTreeMap<String, [f64; N_CLASSES]> {
    counts
        .into_iter()
        .filter_map(|(k, c)| {
            let total: u64 = c.iter().sum();
            if total == 0 {
                return None;
            }
            let mut f = [0.0; N_CLASSES];
            for (o, n) in f.iter_mut().zip(c) {
                *o = n as f64 / total as f64;
            }
            Some((k, f))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn header(loc: &str, y: i32, m: u32, d: u32) -> SceneHeader {
        SceneHeader {
            scene_id: format!("{loc}-{y}{m:02}{d:02}"),
            location_id: loc.into(),
            acquisition_date: NaiveDate::from_ymd_opt(y, m, d).unwrap(),
            height: 1,
            width: 1,
        }
    }

    #[test]
    fn conventional_seasons() {
        let rule = SeasonRule::default();
        assert_eq!(
            conventional_season(&header("a", 2020, 7, 1), &rule),
            Season::Summer
        );
        assert_eq!(
            conventional_season(&header("a", 2020, 12, 1), &rule),
            Season::Winter
        );
        assert_eq!(
            conventional_season(&header("a", 2020, 3, 1), &rule),
            Season::Spring
        );
        assert_eq!(
            conventional_season(&header("a", 2020, 10, 1), &rule),
            Season::Fall
        );
    }

    #[test]
    fn cryo_rule() {
        let mut clim = MeltClimatology::default();
        clim.0.insert(
            "a".into(),
            MeltRecord {
                melt_doy: 150,
                freeze_doy: 280,
            },
        );
        // 2019 is not a leap year: doy 200 = July 19, 300 = Oct 27, 100 = Apr 10
        assert_eq!(
            cryo_season(&header("a", 2019, 7, 19), &clim),
            CryoSeason::Melt
        );
        assert_eq!(
            cryo_season(&header("a", 2019, 10, 27), &clim),
            CryoSeason::Freeze
        );
        assert_eq!(
            cryo_season(&header("a", 2019, 4, 10), &clim),
            CryoSeason::Freeze
        );
        // boundaries: melt day is melt, freeze day is freeze
        assert_eq!(
            cryo_season(&header("a", 2019, 5, 30), &clim),
            CryoSeason::Melt
        );
        assert_eq!(
            cryo_season(&header("a", 2019, 10, 7), &clim),
            CryoSeason::Freeze
        );
        assert_eq!(
            cryo_season(&header("b", 2019, 7, 19), &clim),
            CryoSeason::Undefined
        );
    }

    #[test]
    fn region_lookup() {
        let mut map = RegionMap::default();
        map.0.insert("loc_east_1".into(), Region::East);
        assert_eq!(
            region_of(&header("loc_east_1", 2020, 1, 1), &map).unwrap(),
            Region::East
        );
        assert!(matches!(
            region_of(&header("nowhere", 2020, 1, 1), &map),
            Err(Error::UnknownLocation(_))
        ));
    }

    #[test]
    fn holdout_counts() {
        assert_eq!(Holdout::Fraction(0.1).count_for(40).unwrap(), 4);
        assert_eq!(Holdout::Fraction(0.1).count_for(3).unwrap(), 1);
        assert_eq!(Holdout::FixedCount(18).count_for(40).unwrap(), 18);
        assert!(matches!(
            Holdout::FixedCount(5).count_for(5),
            Err(Error::InsufficientScenes { .. })
        ));
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let (t, v) = split_indices(40, Holdout::Fraction(0.1), 11).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(t.len(), 36);
        assert!(v.iter().all(|i| !t.contains(i)));
        assert_eq!(
            split_indices(40, Holdout::Fraction(0.1), 11).unwrap(),
            (t, v)
        );
        assert!(split_indices(1, Holdout::Fraction(0.1), 0).is_err());
    }
}
