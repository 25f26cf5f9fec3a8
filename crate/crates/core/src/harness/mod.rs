//! Experiment runner: configuration, training loops, metrics and reports.

mod config;
mod metrics;
mod report;
mod run;

pub use config::{DataSource, ExperimentConfig, Method, OptimizerKind, Scenario, Trick};
pub use metrics::{
    average_accuracy, average_forgetting, evaluate_task_accuracies, mean_std, AccuracyMatrix,
    Classifier,
};
pub use report::{
    emit_report, emit_sweep_report, parse_summary, read_accuracy_csv, summarize_dir, summary_text,
    write_accuracy_csv, ReportSummary,
};
pub use run::{
    build_seed_tasks, build_spec, expand_axes, load_data, run_experiment, run_seed, sweep,
    RunResult, SeedResult, SweepCell,
};
