//! Experiment grids: config files, orchestration of partitions × strategies ×
//! seeds, and comparison reports rebuilt from the per-run CSVs.

mod config;
mod report;
mod run;

pub use config::{
    load_config, ExperimentConfig, Mode, ModelConfig, PartitionEntry, PrecisionChoice,
    DEFAULT_BATCH_SIZE, DEFAULT_FORGETTING_WINDOW, DEFAULT_LEARNING_RATE, DEFAULT_TIMEOUT_SECS,
};
pub use report::{
    collect_report, emit_report, mean_std, CellStatus, CellSummary, ComparisonReport,
    PartitionBaseline, ReportRow, BASELINE_DIR, CELLS_DIR, CONVERGENCE_CSV, CONVERGENCE_TARGET,
    LOCAL_CSV, REPORT_CSV, REPORT_MD, RUN_CSV, SUMMARY_JSON,
};
pub use run::run_experiment;
