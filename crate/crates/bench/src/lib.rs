//! Shared fixtures for the kernel benchmarks.

use icebench::pipeline::{
    fit_normalization, model_channels, prepare_scene, to_inputs, PreprocessConfig, RunConfig,
};
use icebench::preprocess::ModelInput;
use icebench::synth::{generate_scenes, Preset, SynthSpec};
use icebench::{LabelingConfig, Raster, N_CLASSES};

/// Normalized synthetic scenes of `size`×`size` pixels.
pub fn synthetic_inputs(n_scenes: usize, size: usize) -> Vec<ModelInput> {
    let spec = SynthSpec {
        n_scenes,
        n_test: 0,
        height: size,
        width: size,
        ..SynthSpec::preset(Preset::Separable)
    };
    let pre = PreprocessConfig::default();
    let labeling = LabelingConfig::default();
    let prepared: Vec<_> = generate_scenes(&spec)
        .expect("valid spec")
        .iter()
        .map(|s| prepare_scene(s, &labeling, &pre).expect("scene prepares"))
        .collect();
    let channels = model_channels(&pre, &prepared);
    let stats = fit_normalization(&prepared, &channels, &pre).expect("stats fit");
    to_inputs(&prepared, &stats, &channels, &RunConfig::default()).expect("inputs build")
}

/// Smooth deterministic raster.
pub fn ramp(h: usize, w: usize) -> Raster<f32> {
    let data = (0..h * w).map(|i| ((i % 97) as f32).sin()).collect();
    Raster::new(h, w, data).expect("dims match")
}

/// Label pairs that agree on roughly three quarters of the entries.
pub fn label_pairs(n: usize) -> (Vec<u8>, Vec<u8>) {
    let k = N_CLASSES as u64;
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    (0..n)
        .map(|_| {
            let t = (next() % k) as u8;
            let p = if next() % 4 == 0 {
                (next() % k) as u8
            } else {
                t
            };
            (t, p)
        })
        .unzip()
}
