//! Accuracy metrics over class labels and resource-efficiency metrics.

mod accuracy;
mod efficiency;

pub use accuracy::{
    confusion, confusion_rasters, ClassMetrics, ConfusionMatrix, MetricsReport, WeightedMetrics,
};
pub use efficiency::{
    core_hours, summarize_phase, EfficiencyReport, Phase, PhaseRecord, PhaseSummary,
    ResourceMonitor, ResourceSample,
};
