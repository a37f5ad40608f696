//! Scoring, multiple-imputation spreads, experiment configuration and the
//! orchestrator that ties data, masks, training and baselines together.

mod config;
mod metrics;
mod report;
mod runner;
mod uncertainty;

pub use config::{Arm, DataSource, EvalConfig, ExperimentConfig, SEED_ENV};
pub use metrics::{normalized_mse, scoring_mask, Normalization};
pub use report::{Cell, Failure, ImputationReport, MiRecord, Provenance, RunScore, RunSeed};
pub use runner::{dataset_names, prepare_runs, run_arm, run_experiment, run_experiment_with, ArmOutcome, PreparedRun, RunDataset};
pub use uncertainty::{median, mi_uncertainty, FeatureSpread, UncertaintyTable};
