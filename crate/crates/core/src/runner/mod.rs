//! End-to-end experiment driver: configuration, training loop, evaluation
//! and sweeps over ablation variants and seeds.

mod config;
mod eval;
mod sweep;
mod train;

pub use config::{apply_override, DatasetSource, ModelConfig, PrototypeConfig, RunConfig, Variant, DEFAULT_RUN_LR};
pub use eval::{evaluate_run, report_file_name, save_reports, Evaluation, RunIdentity, OOD_SPLITS};
pub use sweep::{
    execute_run, load_run_record, mean_std, run_dir_name, save_trained, summarize, sweep, write_loss_curves_csv,
    MetricSummary, RunFailure, RunRecord, SweepOutcome, SweepSummary, RUN_SCHEMA_VERSION, SUMMARY_SCHEMA_VERSION,
};
pub use train::{train_run, EpochLog, TrainedRun};
