//! Experiment harness: configuration, Monte-Carlo orchestration, and result
//! emission.

pub mod config;
pub mod experiment;
pub mod results;

pub use config::{
    Deployment, ExperimentConfig, ExperimentSection, FailPolicy, SolverConfig, SweepConfig,
    SweepVariable,
};
pub use experiment::{
    run_baseline, run_experiment, run_trial, AggregateRow, ExperimentOutput, TrialMetrics,
};
pub use results::{csv_string, emit_results, json_string, load_results, ResultsDocument};
