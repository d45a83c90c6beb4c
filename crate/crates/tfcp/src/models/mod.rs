//! Benchmark systems and integrators: RK4 SDE stepping, Lorenz'63,
//! Lorenz'96, a one-dimensional diffusion with closed-form filtering
//! posterior, static quadratic observation operators, and grid-based
//! Bayes reference posteriors.

pub mod benes;
pub mod grid;

use std::sync::Arc;

use crate::core::model::{DriftFn, DynamicsModel};
use crate::core::rng::RngStream;
use crate::error::{Error, Result};

pub use benes::{benes_exact_posterior, benes_simulate, BenesParams, BenesPath, BenesPosterior};
pub use grid::{numeric_bayes_1d, numeric_bayes_2d, GridPdf, GridPdf2};

/// One step of the splitting scheme for `dx = drift(t, x) dt + gamma dB`:
/// a deterministic classical RK4 update of the drift followed by an
/// additive Gaussian increment `gamma_d * sqrt(dt) * xi_d` per dimension.
pub fn rk4_maruyama_step<F>(
    drift: F,
    t: f64,
    x: &[f64],
    dt: f64,
    gamma: &[f64],
    rng: &mut RngStream,
) -> Vec<f64>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let dim = x.len();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut stage = vec![0.0; dim];

    drift(t, x, &mut k1);
    for d in 0..dim {
        stage[d] = x[d] + 0.5 * dt * k1[d];
    }
    drift(t + 0.5 * dt, &stage, &mut k2);
    for d in 0..dim {
        stage[d] = x[d] + 0.5 * dt * k2[d];
    }
    drift(t + 0.5 * dt, &stage, &mut k3);
    for d in 0..dim {
        stage[d] = x[d] + dt * k3[d];
    }
    drift(t + dt, &stage, &mut k4);

    let sqrt_dt = dt.sqrt();
    let mut out = vec![0.0; dim];
    for d in 0..dim {
        out[d] = x[d] + dt / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
        if gamma[d] > 0.0 {
            out[d] += gamma[d] * sqrt_dt * rng.normal();
        }
    }
    out
}

/// Lorenz'63 drift in its standard form:
/// `(sigma (x2 - x1), x1 (rho - x3) - x2, x1 x2 - beta x3)`.
pub fn lorenz63_drift(x: &[f64], sigma: f64, rho: f64, beta: f64) -> [f64; 3] {
    [
        sigma * (x[1] - x[0]),
        x[0] * (rho - x[2]) - x[1],
        x[0] * x[1] - beta * x[2],
    ]
}

/// Lorenz'96 drift `(x_{i+1} - x_{i-2}) x_{i-1} - x_i + F` with cyclic
/// indexing. Requires at least four components.
pub fn lorenz96_drift(x: &[f64], forcing: f64) -> Result<Vec<f64>> {
    let j = x.len();
    if j < 4 {
        return Err(Error::InvalidParameter(format!(
            "Lorenz'96 needs at least 4 components, got {j}"
        )));
    }
    let mut out = vec![0.0; j];
    lorenz96_drift_into(x, forcing, &mut out);
    Ok(out)
}

fn lorenz96_drift_into(x: &[f64], forcing: f64, out: &mut [f64]) {
    let j = x.len();
    for i in 0..j {
        let ip1 = (i + 1) % j;
        let im1 = (i + j - 1) % j;
        let im2 = (i + j - 2) % j;
        out[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + forcing;
    }
}

/// Standard-parameter Lorenz'63 dynamics (`sigma=10, rho=28, beta=8/3`).
pub fn lorenz63_model(gamma: f64, dt: f64, steps_per_assimilation: usize) -> Result<DynamicsModel> {
    lorenz63_model_with(10.0, 28.0, 8.0 / 3.0, gamma, dt, steps_per_assimilation)
}

pub fn lorenz63_model_with(
    sigma: f64,
    rho: f64,
    beta: f64,
    gamma: f64,
    dt: f64,
    steps_per_assimilation: usize,
) -> Result<DynamicsModel> {
    let drift: DriftFn = Arc::new(move |_t, x: &[f64], out: &mut [f64]| {
        let d = lorenz63_drift(x, sigma, rho, beta);
        out.copy_from_slice(&d);
    });
    DynamicsModel::new(3, drift, vec![gamma; 3], dt, steps_per_assimilation)
}

/// Lorenz'96 dynamics with the given dimension and forcing.
pub fn lorenz96_model(
    dim: usize,
    forcing: f64,
    gamma: f64,
    dt: f64,
    steps_per_assimilation: usize,
) -> Result<DynamicsModel> {
    if dim < 4 {
        return Err(Error::InvalidParameter(format!(
            "Lorenz'96 needs at least 4 components, got {dim}"
        )));
    }
    let drift: DriftFn = Arc::new(move |_t, x: &[f64], out: &mut [f64]| {
        lorenz96_drift_into(x, forcing, out);
    });
    DynamicsModel::new(dim, drift, vec![gamma; dim], dt, steps_per_assimilation)
}

/// Scalar quadratic observation operator `x (x - 1)`.
pub fn quadratic_obs_1d(x: f64) -> f64 {
    x * (x - 1.0)
}

/// Squared-radius observation operator `x1^2 + x2^2`.
pub fn quadratic_obs_2d(x: &[f64]) -> f64 {
    x[0] * x[0] + x[1] * x[1]
}
