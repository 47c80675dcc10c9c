//! Experiment drivers, run records and result files.

pub mod config;
pub mod record;
pub mod runners;

pub use config::{ExperimentConfig, ExperimentKind};
pub use record::{emit_results, summary_from_csv, EpisodeRecord, MiRecord, OutputFiles, RunRecord, RunSummary, StepRecord, SCHEMA_VERSION};
pub use runners::{
    run_cautious_baseline, run_dynamic_exploration, run_episodic_rl, run_experiment, run_static_exploration,
    run_with_env, ASSUMPTION_CHECK_SAMPLES, ASSUMPTION_CHECK_SECONDS,
};
