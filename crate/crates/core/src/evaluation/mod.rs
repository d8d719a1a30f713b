//! Metrics, curves and reports over patch predictions.

mod metrics;
mod pages;
mod records;
mod report;
mod spatial;

pub use metrics::{
    average_ranks, bias, calibration_curve, default_confidence_grid, default_retain_fractions, error_cdf, kept_count,
    mae, mpiw, picp, reliability_diagram, selective_prediction, spearman, uncertainty_spearman, CalibrationPoint,
    CdfPoint, ReliabilityBin, SelectiveRow, SpearmanResult, UncertaintyKind,
};
pub use pages::{aggregate_pages, summarize_pages, PageSummary};
pub use records::{patch_meta, EvalSet, Method, PatchMeta, PredictionRecord, Predictive};
pub use report::{
    build_report, degradation_eval, read_predictions, write_calibration_csv, write_comparison_csv,
    write_degradation_csv, write_error_cdf_csv, write_predictions, write_reliability_csv, write_selective_csv,
    CodexBreakdown, ComparisonRow, DegradationRow, EvalReport, ReportOptions, REPORT_SCHEMA, REPORT_VERSION,
};
pub use spatial::{export_features, spatial_uncertainty_map, write_features_csv, write_matrix_csv, FeatureTable, SpatialMap};
