mod common;

use std::collections::BTreeSet;

use icebench::partition::{
    cryo_season, make_splits, patch_class_distribution, pixel_class_distribution, split_indices,
    CryoSeason, Holdout, MeltClimatology, PartitionContext, PartitionKey, RegionMap, SceneFilter,
    Season,
};
use icebench::pipeline::extract_records;
use icebench::sampling::SamplingConfig;
use icebench::synth::{generate, Preset, SynthSpec};
use icebench::DatasetManifest;
use proptest::prelude::*;

fn corpus(dir: &std::path::Path, seed: u64) -> (DatasetManifest, PartitionContext) {
    let spec = SynthSpec {
        n_scenes: 24,
        n_test: 4,
        height: 30,
        width: 30,
        seed,
        ..SynthSpec::preset(Preset::Separable)
    };
    let out = generate(&spec, dir).unwrap();
    let ctx = PartitionContext {
        seasons: Default::default(),
        climatology: MeltClimatology::read(&out.climatology).unwrap(),
        regions: RegionMap::read(&out.regions).unwrap(),
    };
    (DatasetManifest::read(&out.all).unwrap(), ctx)
}

#[test]
fn season_partitions_are_disjoint_and_exhaustive() {
    let dir = tempfile::tempdir().unwrap();
    let (all, ctx) = corpus(dir.path(), 3);
    let headers = all.headers().unwrap();
    let mut seen = BTreeSet::new();
    for s in Season::ALL {
        let f = SceneFilter {
            season: Some(vec![s]),
            ..Default::default()
        };
        for (i, h) in headers.iter().enumerate() {
            if f.accepts(h, &ctx).unwrap() {
                assert!(seen.insert(i), "scene {i} in two seasons");
            }
        }
    }
    assert_eq!(seen.len(), headers.len());

    let mut seen = BTreeSet::new();
    for c in [CryoSeason::Melt, CryoSeason::Freeze] {
        let f = SceneFilter {
            cryo: Some(vec![c]),
            ..Default::default()
        };
        for (i, h) in headers.iter().enumerate() {
            if f.accepts(h, &ctx).unwrap() {
                assert!(seen.insert(i));
            }
        }
    }
    assert_eq!(seen.len(), headers.len());
}

#[test]
fn scenes_without_climatology_are_undefined() {
    let dir = tempfile::tempdir().unwrap();
    let (all, _) = corpus(dir.path(), 1);
    for h in all.headers().unwrap() {
        assert_eq!(
            cryo_season(&h, &MeltClimatology::default()),
            CryoSeason::Undefined
        );
    }
}

#[test]
fn splits_are_deterministic_and_partition_the_kept_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let (all, ctx) = corpus(dir.path(), 9);
    let headers = all.headers().unwrap();
    let filter = SceneFilter::default();
    for seed in 0..5 {
        let a = make_splits(&all, &headers, &filter, Holdout::Fraction(0.25), seed, &ctx).unwrap();
        let b = make_splits(&all, &headers, &filter, Holdout::Fraction(0.25), seed, &ctx).unwrap();
        assert_eq!(a, b);
        let train: BTreeSet<_> = a.0.scenes.iter().collect();
        let val: BTreeSet<_> = a.1.scenes.iter().collect();
        assert!(train.is_disjoint(&val));
        assert_eq!(train.len() + val.len(), all.scenes.len());
        assert_eq!(val.len(), 6);
    }
    assert!(make_splits(&all, &headers, &filter, Holdout::FixedCount(24), 0, &ctx).is_err());
}

#[test]
fn class_distributions_are_normalized() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_scenes: 8,
        n_test: 2,
        height: 60,
        width: 60,
        ..SynthSpec::preset(Preset::Separable)
    };
    let out = generate(&spec, dir.path()).unwrap();
    let ctx = PartitionContext {
        seasons: Default::default(),
        climatology: MeltClimatology::read(&out.climatology).unwrap(),
        regions: RegionMap::read(&out.regions).unwrap(),
    };
    let inputs = common::synth_inputs(&spec);
    let headers: Vec<_> = inputs.iter().map(|i| i.header.clone()).collect();
    let records = extract_records(
        &inputs,
        &SamplingConfig {
            patch_size: Some(10),
            stride: 5,
            ..SamplingConfig::default()
        },
    );
    for key in [
        PartitionKey::All,
        PartitionKey::Season,
        PartitionKey::Cryo,
        PartitionKey::Region,
        PartitionKey::Location,
    ] {
        for rows in [
            pixel_class_distribution(&inputs, key, &ctx).unwrap(),
            patch_class_distribution(&records, &headers, key, &ctx).unwrap(),
        ] {
            assert!(!rows.is_empty());
            for (k, row) in rows {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{key:?} {k}");
            }
        }
    }
}

proptest! {
    #[test]
    fn split_indices_partition(n in 2usize..200, frac in 0.01f64..0.5, seed in any::<u64>()) {
        let (tr, va) = split_indices(n, Holdout::Fraction(frac), seed).unwrap();
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(!va.is_empty() && !tr.is_empty());
        prop_assert_eq!(split_indices(n, Holdout::Fraction(frac), seed).unwrap(), (tr, va));
    }
}
