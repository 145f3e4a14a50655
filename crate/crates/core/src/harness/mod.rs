//! Data ingestion, phase planning, experiment orchestration and the CLI.

pub mod cli;
pub mod config;
pub mod data;
pub mod experiment;

pub use cli::cli;
pub use config::{DatasetKind, ExperimentConfig, IdxPaths, VALID_KEYS};
pub use data::{
    encode_idx_images, encode_idx_labels, load_idx_dataset, split_class_incremental, synthetic_dataset,
    Dataset, PhasePlan, SyntheticSpec,
};
pub use experiment::{
    run_experiment, run_incremental, run_initial_stage, ExperimentData, ExperimentReport, InitialStage,
    PhaseMetrics, METRICS_HEADER,
};
