//! Data ingestion, experiment configuration and report emission.

mod dataset;
mod experiment;
mod idx;

pub use dataset::{randomize_labels, synthetic_gaussian, DatasetMeta, LabelRandomization, LabeledDataset};
pub use experiment::{
    emit_reports, resolve_output, run_experiment, run_experiment_config, select_beta, AttackScale, Beta,
    DatasetSpec, ExperimentConfig, ExperimentOutcome, ExperimentSummary, LabelNoise, RobustnessSpec,
    RunArtifacts, RunFailure, RunSummary, FAILURE_FILE, MAX_BETA_GRID, OUTPUT_ROOT_ENV, REPORT_FILES,
    SUMMARY_FILE,
};
pub use idx::{decode_idx, encode_idx, load_idx, write_idx};
