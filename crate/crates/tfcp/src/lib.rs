//! Ensemble filtering with coupling-based transport maps.
//!
//! The analysis step is framed as pushing the independent state-observation
//! coupling onto the simulated joint coupling by minimizing the kernel
//! maximum mean discrepancy between the two sample sets. Two variants are
//! provided: a training-free gradient flow whose velocity field is the
//! analytic steepest-descent direction of the MMD, and a trained variant
//! that parameterizes a nudging transport map with a small MLP. Classical
//! baselines, domain localization for high-dimensional states, benchmark
//! dynamical systems, evaluation metrics and an experiment harness round
//! out the library.

pub mod baselines;
pub mod core;
pub mod error;
pub mod gradient_flow;
pub mod harness;
pub mod localization;
pub mod kernels;
pub mod metrics;
pub mod neural;
pub mod models;

pub use crate::core::{
    forecast, forecast_keyed, make_coupled_samples, make_coupled_samples_independent,
    make_coupled_samples_with_permutation, CoupledSamples, DynamicsModel, Ensemble, Matrix,
    ObservationModel, RngStream,
};
pub use crate::error::{Error, Result};
pub use crate::kernels::{
    median_bandwidth, mmd2_empirical, mmd_velocity, rbf_kernel, velocity_between, Bandwidth,
    KernelConfig, ResolvedBandwidths, Standardizer, VelocityBandwidth, VelocityField,
};
pub use crate::models::{
    benes_exact_posterior, benes_simulate, lorenz63_drift, lorenz96_drift, numeric_bayes_1d,
    numeric_bayes_2d, quadratic_obs_1d, quadratic_obs_2d, rk4_maruyama_step, BenesParams,
    BenesPath, BenesPosterior, GridPdf, GridPdf2,
};
