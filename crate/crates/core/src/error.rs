use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file for {field}: {path}")]
    MissingFile { field: String, path: PathBuf },

    #[error("payload size mismatch for {field}: expected {expected} bytes, found {actual}")]
    PayloadSizeMismatch {
        field: String,
        expected: u64,
        actual: u64,
    },

    #[error("unknown dtype {dtype:?} for {field}")]
    UnknownDtype { field: String, dtype: String },

    #[error("polygon raster references id {id} which is not in the polygon table")]
    OrphanPolygonId { id: i32 },

    #[error("malformed acquisition_date {value:?}")]
    MalformedDate { value: String },

    #[error("invalid scene {field}: {reason}")]
    InvalidScene { field: String, reason: String },

    #[error("unknown channel {0:?}")]
    UnknownChannel(String),

    #[error("channel {channel:?} has native grid {native:?} incompatible with reference grid {reference:?}")]
    IncompatibleGrid {
        channel: String,
        native: (usize, usize),
        reference: (usize, usize),
    },

    #[error("downscaling {dims:?} by ratio {ratio} leaves an empty raster")]
    EmptyOutput { dims: (usize, usize), ratio: usize },

    #[error("channel {0:?} is constant over the split (std == 0)")]
    DegenerateChannel(String),

    #[error("no finite pixels for channel {0:?}")]
    NoFinitePixels(String),

    #[error("normalization stats missing for channel {0:?}")]
    MissingStats(String),

    #[error("scene {scene_id} ({dims:?}) is smaller than window size {size}")]
    SceneTooSmall {
        scene_id: String,
        dims: (usize, usize),
        size: usize,
    },

    #[error("location {0:?} has no region assignment")]
    UnknownLocation(String),

    #[error("insufficient scenes: need {needed}, have {available}")]
    InsufficientScenes { needed: usize, available: usize },

    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: String, right: String },

    #[error("label value {0} is neither a class index nor the ignore sentinel")]
    InvalidLabel(u8),

    #[error("metric undefined: no labeled samples")]
    EmptySupport,

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("model has not been trained")]
    UntrainedModel,

    #[error("model file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("corrupt model payload: {0}")]
    CorruptPayload(String),

    #[error("window has no finite pixels in channel {0}")]
    AllNonFinite(usize),

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied configuration rather than
    /// data or runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Spec(_) | Error::Json { .. })
    }
}
