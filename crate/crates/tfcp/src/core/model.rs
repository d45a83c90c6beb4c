//! Observation and dynamics model interfaces plus the forecast step.

use std::sync::Arc;

use rayon::prelude::*;

use super::ensemble::{Ensemble, Matrix};
use super::rng::{domain, RngStream};
use crate::error::{Error, Result};
use crate::models::rk4_maruyama_step;

pub type ObsFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type NoiseFn = Arc<dyn Fn(&mut RngStream) -> Vec<f64> + Send + Sync>;
pub type LogLikFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
pub type DriftFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Observation operator H with an additive-noise sampler and an optional
/// log-likelihood (the latter is needed only by likelihood-based filters).
#[derive(Clone)]
pub struct ObservationModel {
    obs_dim: usize,
    h: ObsFn,
    noise: NoiseFn,
    log_likelihood: Option<LogLikFn>,
}

impl ObservationModel {
    pub fn new(obs_dim: usize, h: ObsFn, noise: NoiseFn) -> Self {
        ObservationModel {
            obs_dim,
            h,
            noise,
            log_likelihood: None,
        }
    }

    pub fn with_log_likelihood(mut self, f: LogLikFn) -> Self {
        self.log_likelihood = Some(f);
        self
    }

    /// H with iid Gaussian noise of the given per-component standard
    /// deviations. Also installs the matching log-likelihood.
    pub fn diag_gaussian(h: ObsFn, noise_std: Vec<f64>) -> Self {
        let obs_dim = noise_std.len();
        let std_for_noise = noise_std.clone();
        let noise: NoiseFn = Arc::new(move |rng: &mut RngStream| {
            std_for_noise.iter().map(|s| s * rng.normal()).collect()
        });
        let h_for_lik = h.clone();
        let std_for_lik = noise_std;
        let log_lik: LogLikFn = Arc::new(move |x: &[f64], y: &[f64]| {
            let hx = (h_for_lik)(x);
            let mut s = 0.0;
            for ((hv, yv), sd) in hx.iter().zip(y).zip(&std_for_lik) {
                let r = (yv - hv) / sd;
                s += r * r;
            }
            -0.5 * s
        });
        ObservationModel::new(obs_dim, h, noise).with_log_likelihood(log_lik)
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn h(&self, x: &[f64]) -> Vec<f64> {
        (self.h)(x)
    }

    /// H(x) + noise draw.
    pub fn observe(&self, x: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        let mut y = self.h(x);
        if y.len() != self.obs_dim {
            return Err(Error::DimensionMismatch {
                context: "observation operator output",
                expected: self.obs_dim,
                actual: y.len(),
            });
        }
        let eps = (self.noise)(rng);
        for (yv, e) in y.iter_mut().zip(&eps) {
            *yv += e;
        }
        Ok(y)
    }

    pub fn log_likelihood(&self, x: &[f64], y_obs: &[f64]) -> Result<f64> {
        match &self.log_likelihood {
            Some(f) => Ok(f(x, y_obs)),
            None => Err(Error::MissingLogLikelihood),
        }
    }

    pub fn has_log_likelihood(&self) -> bool {
        self.log_likelihood.is_some()
    }
}

/// Continuous dynamics discretized for forecasting: drift integrated with
/// RK4 plus an additive Gaussian increment per step.
#[derive(Clone)]
pub struct DynamicsModel {
    dim: usize,
    drift: DriftFn,
    noise_amplitude: Vec<f64>,
    dt: f64,
    steps_per_assimilation: usize,
}

impl DynamicsModel {
    pub fn new(
        dim: usize,
        drift: DriftFn,
        noise_amplitude: Vec<f64>,
        dt: f64,
        steps_per_assimilation: usize,
    ) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if steps_per_assimilation == 0 {
            return Err(Error::InvalidParameter(
                "steps_per_assimilation must be at least 1".into(),
            ));
        }
        if noise_amplitude.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "DynamicsModel noise amplitude",
                expected: dim,
                actual: noise_amplitude.len(),
            });
        }
        if noise_amplitude.iter().any(|g| *g < 0.0 || !g.is_finite()) {
            return Err(Error::InvalidParameter(
                "noise amplitudes must be nonnegative and finite".into(),
            ));
        }
        Ok(DynamicsModel {
            dim,
            drift,
            noise_amplitude,
            dt,
            steps_per_assimilation,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps_per_assimilation(&self) -> usize {
        self.steps_per_assimilation
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps_per_assimilation = steps.max(1);
        self
    }

    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out);
    }

    pub fn noise_amplitude(&self) -> &[f64] {
        &self.noise_amplitude
    }

    /// Advance one member by `steps` integrator steps, drawing noise from
    /// the provided stream. Errors name the member and step on a non-finite
    /// state.
    pub fn advance_member(
        &self,
        member_index: usize,
        x0: &[f64],
        steps: usize,
        rng: &mut RngStream,
    ) -> Result<Vec<f64>> {
        let mut x = x0.to_vec();
        for step in 0..steps {
            let t = step as f64 * self.dt;
            x = rk4_maruyama_step(
                |tt, xx, out| self.drift(tt, xx, out),
                t,
                &x,
                self.dt,
                &self.noise_amplitude,
                rng,
            );
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState {
                    member: member_index,
                    step,
                });
            }
        }
        Ok(x)
    }
}

/// Propagate every member through the dynamics for one assimilation window.
///
/// Noise streams are derived per member, so execution order (or parallel
/// scheduling) never changes the result.
pub fn forecast(ens: &Ensemble, dynamics: &DynamicsModel, rng: &RngStream) -> Result<Ensemble> {
    let keys: Vec<u64> = (0..ens.size() as u64).collect();
    forecast_keyed(ens, dynamics, rng, &keys)
}

/// [`forecast`] with explicit per-member noise keys. Forecasting commutes
/// with member reordering when the keys are reordered alongside the members.
pub fn forecast_keyed(
    ens: &Ensemble,
    dynamics: &DynamicsModel,
    rng: &RngStream,
    keys: &[u64],
) -> Result<Ensemble> {
    if ens.dim() != dynamics.dim() {
        return Err(Error::DimensionMismatch {
            context: "forecast state dimension",
            expected: dynamics.dim(),
            actual: ens.dim(),
        });
    }
    if keys.len() != ens.size() {
        return Err(Error::DimensionMismatch {
            context: "forecast noise keys",
            expected: ens.size(),
            actual: keys.len(),
        });
    }
    let steps = dynamics.steps_per_assimilation();
    let rows: Vec<Result<Vec<f64>>> = (0..ens.size())
        .into_par_iter()
        .map(|i| {
            let mut member_rng = rng.derive(&[domain::FORECAST_MEMBER, keys[i]]);
            dynamics.advance_member(i, ens.member(i), steps, &mut member_rng)
        })
        .collect();
    let mut out = Matrix::zeros(ens.size(), ens.dim());
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&row?);
    }
    Ensemble::new(out)
}
