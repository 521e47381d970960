//! Sea-ice type classification benchmark harness.
//!
//! The crate covers the whole data path from ice-chart polygons to scored
//! predictions: the on-disk scene container ([`scene`]), SIGRID-3 label
//! derivation ([`labels`]), co-registration and downscaling ([`preprocess`]),
//! patch and crop sampling ([`sampling`]), seasonal and regional partitions
//! ([`partition`]), accuracy and efficiency metrics ([`metrics`]), linear
//! reference models with an early-stopping trainer ([`model`]), the experiment
//! runner ([`experiments`]) and a synthetic scene generator ([`synth`]).

pub mod error;
pub mod experiments;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod partition;
pub mod pipeline;
pub mod preprocess;
pub mod raster;
pub mod rng;
pub mod sampling;
pub mod scene;
pub mod synth;

pub use error::{Error, Result};
pub use labels::{IceClass, LabelRaster, LabelingConfig, IGNORE, N_CLASSES};
pub use raster::Raster;
pub use scene::{DatasetManifest, IceChartPolygon, Scene};
