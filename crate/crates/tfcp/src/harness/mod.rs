//! Experiment configuration, grid orchestration, and result persistence.

pub mod config;
pub mod runner;

pub use config::{
    parse_config, CouplingMode, ExperimentConfig, GfMethodParams, LocalizationSpec, MethodSpec,
    ModelId, ModelParams, TfcpMethodParams,
};
pub use runner::{report, run_cell, run_experiment, CellResult, Problem, RunSummary, METRICS_HEADER};
