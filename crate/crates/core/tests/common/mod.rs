#![allow(dead_code)]

use chrono::NaiveDate;
use icebench::labels::{IGNORE, N_CLASSES};
use icebench::pipeline::{
    fit_normalization, model_channels, prepare_scene, to_inputs, PreprocessConfig, RunConfig,
};
use icebench::preprocess::{FeatureStack, ModelInput};
use icebench::scene::SceneHeader;
use icebench::synth::{generate_scenes, SynthSpec};
use icebench::{LabelRaster, LabelingConfig, Raster};
use rand::Rng;

/// Weighted accuracy, precision, recall, F1 and IoU by direct counting over
/// the label vectors.
pub fn brute_metrics(t: &[u8], p: &[u8]) -> [f64; 5] {
    let pairs: Vec<(u8, u8)> = t
        .iter()
        .copied()
        .zip(p.iter().copied())
        .filter(|&(a, _)| a != IGNORE)
        .collect();
    let n = pairs.len() as f64;
    let acc = pairs.iter().filter(|(a, b)| a == b).count() as f64 / n;
    let mut out = [acc, 0.0, 0.0, 0.0, 0.0];
    for c in 0..N_CLASSES as u8 {
        let support = pairs.iter().filter(|(a, _)| *a == c).count() as f64;
        if support == 0.0 {
            continue;
        }
        let tp = pairs.iter().filter(|&&(a, b)| a == c && b == c).count() as f64;
        let fp = pairs.iter().filter(|&&(a, b)| a != c && b == c).count() as f64;
        let fneg = pairs.iter().filter(|&&(a, b)| a == c && b != c).count() as f64;
        let div = |x: f64, y: f64| if y == 0.0 { 0.0 } else { x / y };
        let prec = div(tp, tp + fp);
        let rec = div(tp, tp + fneg);
        let f1 = div(2.0 * prec * rec, prec + rec);
        let iou = div(tp, tp + fp + fneg);
        for (o, m) in out[1..].iter_mut().zip([prec, rec, f1, iou]) {
            *o += support / n * m;
        }
    }
    out
}

pub fn header(id: &str, h: usize, w: usize) -> SceneHeader {
    SceneHeader {
        scene_id: id.into(),
        location_id: "loc".into(),
        acquisition_date: NaiveDate::from_ymd_opt(2019, 3, 1).unwrap(),
        height: h,
        width: w,
    }
}

/// Input with a single all-zero feature channel and the given labels.
pub fn label_input(id: &str, labels: Raster<u8>) -> ModelInput {
    let (h, w) = labels.dims();
    ModelInput {
        header: header(id, h, w),
        features: FeatureStack {
            names: vec!["x".into()],
            channels: vec![Raster::filled(h, w, 0.0)],
        },
        labels: LabelRaster { values: labels },
        land: Raster::filled(h, w, false),
    }
}

/// Labels painted from a few random rectangles over a random background,
/// with some ignore rectangles.
pub fn blocky_labels(rng: &mut impl Rng, h: usize, w: usize) -> Raster<u8> {
    let mut r = Raster::filled(h, w, rng.random_range(0..N_CLASSES as u8));
    for _ in 0..rng.random_range(1..8) {
        let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (r1, c1) = (rng.random_range(r0..h) + 1, rng.random_range(c0..w) + 1);
        let v = if rng.random_bool(0.15) {
            IGNORE
        } else {
            rng.random_range(0..N_CLASSES as u8)
        };
        for row in r0..r1 {
            for col in c0..c1 {
                r.set(row, col, v);
            }
        }
    }
    r
}

/// Synthetic scenes carried through labeling and normalization in memory.
pub fn synth_inputs(spec: &SynthSpec) -> Vec<ModelInput> {
    let pre = PreprocessConfig::default();
    let labeling = LabelingConfig::default();
    let prepared: Vec<_> = generate_scenes(spec)
        .unwrap()
        .iter()
        .map(|s| prepare_scene(s, &labeling, &pre).unwrap())
        .collect();
    let channels = model_channels(&pre, &prepared);
    let stats = fit_normalization(&prepared, &channels, &pre).unwrap();
    to_inputs(&prepared, &stats, &channels, &RunConfig::default()).unwrap()
}
