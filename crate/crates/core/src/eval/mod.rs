//! Datasets, benchmark runs, metrics and reports.

mod bench;
mod dataset;
mod metrics;
mod report;
pub mod synthetic;

pub use bench::{calibrate, run_benchmark, trace_dir, BenchmarkOutcome, CalibrationStatus, RunEvent, RunOptions};
pub use dataset::{load_dataset, DatasetManifest, Layout, ManifestRow, Split, SUPPORTED_SHOTS};
pub use metrics::{auroc, f1_max};
pub use report::{
    emit_report, read_traces, summarize, ClassMetrics, Counts, DatasetMetrics, MetricsSummary, TraceRecord,
    CLASS_METRICS_CSV, METRICS_CSV, METRICS_JSON,
};
