//! Detection metrics and the experiment protocols built on them.

pub mod metrics;
mod protocol;

pub use metrics::{auc, histograms_csv, roc_csv, roc_curve, tpr_at_fpr, DetectionMetrics, Histogram, RocCurve, RocPoint};
pub use protocol::{
    confidence_histograms, evaluate_leg, plan, ConfidenceSummary, ExperimentReport, LegReport, LegSpec,
    OperatingPoint, Plan, SetReport, SetSpec, Split, CONFIDENCE_CEILING,
};
