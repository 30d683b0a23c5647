pub mod checkpoint;
pub mod config;
pub mod report;
pub mod runner;
pub mod sweep;

pub use checkpoint::Checkpoint;
pub use config::{BaseOptimizerKind, ExperimentConfig, Method, TauScheduleKind};
pub use report::{EpisodeMetrics, RunReport, TaskMetrics};
pub use runner::{evaluate, run_experiment, run_experiment_with_artifacts, run_on_dataset, single_task, RunArtifacts};
pub use sweep::{run_sweep, sweep_configs, SWEEP_PARAMETERS};
