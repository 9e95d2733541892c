//! Experiment orchestration: configs, pipelines, sweeps, reports.

mod config;
mod pipeline;
pub mod report;
mod sweep;

pub use config::{parse_config, parse_config_str, DatasetSource, ExperimentConfig, KNOWN_KEYS};
pub use pipeline::{
    load_manifest, run_pipeline, run_stage, sha256_file, verify_manifest, ArtifactRecord,
    RunManifest, StageCommand, StageRecord, SummaryRow,
};
pub use report::{emit_report, render_summary_text, ReportFormat};
pub use sweep::{sweep, SweepAxis};
