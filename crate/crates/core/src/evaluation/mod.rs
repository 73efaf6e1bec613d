//! Classification metrics, ROC analysis, DeLong tests, Brier score and
//! report assembly.

pub mod metrics;
pub mod report;
pub mod roc;

pub use metrics::{brier_score, confusion_and_metrics, ClassMetrics, ClassificationMetrics, ConfusionMatrix};
pub use report::{
    assemble_report, build_report, compare, sha256_hex, split_id, stage_probabilities, DeLongComparison, MetricsReport,
    Provenance, PublishedReference,
};
pub use roc::{
    auroc_binary, auroc_macro_ovr, auroc_per_class, delong_ovr, delong_test, delong_variance, midranks,
    structural_components, two_sided_p, DeLongResult, StructuralComponents,
};
