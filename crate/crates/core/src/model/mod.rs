//! Reference classifiers: a softmax-linear core, its trainer, feature
//! extractors, and patch- and pixel-level wrappers.

pub mod features;
pub mod io;
pub mod linear;
pub mod reference;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use features::{patch_features, pixel_features, PixelFeatures};
pub use io::{load_model, save_model};
pub use linear::{
    fit_softmax, Batch, BatchSource, EpochLog, SoftmaxLinear, TrainConfig, TrainingLog,
};
pub use reference::{
    ModelContract, ModelKind, PatchRefModel, PatchSet, PixelRefModel, PixelSampling,
};

use crate::error::{Error, Result};

pub const WEIGHTS_FILE: &str = "model.icbm";
pub const META_FILE: &str = "model.json";
pub const LOG_FILE: &str = "training_log.jsonl";

/// Sidecar describing how to rebuild a saved model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: ModelKind,
    pub channels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Patch(PatchRefModel),
    Pixel(PixelRefModel),
}

impl TrainedModel {
    pub fn contract(&self) -> &dyn ModelContract {
        match self {
            TrainedModel::Patch(m) => m,
            TrainedModel::Pixel(m) => m,
        }
    }

    pub fn meta(&self) -> ModelMeta {
        match self {
            TrainedModel::Patch(m) => ModelMeta {
                kind: ModelKind::Patch,
                channels: m.channels.clone(),
                patch_size: Some(m.patch_size),
                normalization_id: None,
            },
            TrainedModel::Pixel(m) => ModelMeta {
                kind: ModelKind::Pixel,
                channels: m.channels.clone(),
                patch_size: None,
                normalization_id: None,
            },
        }
    }

    /// Writes weights and sidecar into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, meta: &ModelMeta) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let state = self.contract().state().ok_or(Error::UntrainedModel)?;
        save_model(state, dir.join(WEIGHTS_FILE))?;
        let path = dir.join(META_FILE);
        let text = serde_json::to_string_pretty(meta)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, ModelMeta)> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let weights_path = dir.join(WEIGHTS_FILE);
        for p in [&meta_path, &weights_path] {
            if !p.exists() {
                return Err(Error::UntrainedModel);
            }
        }
        let text = std::fs::read_to_string(&meta_path)
            .map_err(|e| Error::io(format!("reading {}", meta_path.display()), e))?;
        let meta: ModelMeta = serde_json::from_str(&text)
            .map_err(|e| Error::json(meta_path.display().to_string(), e))?;
        let state = load_model(&weights_path)?;
        if state.dim != 2 * meta.channels.len() || state.n_classes != crate::labels::N_CLASSES {
            return Err(Error::CorruptPayload(format!(
                "weights of dim {} do not fit {} channels",
                state.dim,
                meta.channels.len()
            )));
        }
        let model = match meta.kind {
            ModelKind::Patch => TrainedModel::Patch(PatchRefModel {
                channels: meta.channels.clone(),
                patch_size: meta.patch_size.ok_or_else(|| {
                    Error::CorruptPayload("patch model without patch_size".into())
                })?,
                state: Some(state),
            }),
            ModelKind::Pixel => TrainedModel::Pixel(PixelRefModel {
                channels: meta.channels.clone(),
                state: Some(state),
            }),
        };
        Ok((model, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saved_model_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = PatchRefModel::new(vec!["a".into(), "b".into()], 32);
        let mut s = SoftmaxLinear::zeros(6, 4);
        s.weights[5] = 0.125;
        m.state = Some(s);
        let t = TrainedModel::Patch(m);
        t.save(dir.path(), &t.meta()).unwrap();
        let (back, meta) = TrainedModel::load(dir.path()).unwrap();
        assert_eq!(back, t);
        assert_eq!(meta.patch_size, Some(32));
    }

    #[test]
    fn missing_model_is_untrained() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            TrainedModel::load(dir.path()),
            Err(Error::UntrainedModel)
        ));
    }
}
