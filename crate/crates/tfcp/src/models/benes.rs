//! One-dimensional nonlinear diffusion with a tanh drift whose filtering
//! posterior has a closed form: a two-component Gaussian mixture whose
//! parameters are explicit functions of time and of the observation path.
//! Used as a ground-truth reference for dynamic filtering tests.

use crate::core::rng::RngStream;
use crate::error::{Error, Result};
use crate::models::rk4_maruyama_step;

/// Problem parameters: state SDE `dX = mu sigma_b tanh(mu X / sigma_b) dt
/// + sigma_b dB`, observation process `dZ = (h1 X + h1 h2) dt + dW`.
#[derive(Clone, Copy, Debug)]
pub struct BenesParams {
    pub mu: f64,
    pub sigma_b: f64,
    pub h1: f64,
    pub h2: f64,
    pub x0: f64,
    pub dt: f64,
    pub horizon: f64,
}

impl BenesParams {
    /// The configuration used throughout the dynamic benchmarks:
    /// mu=0.5, sigma_b=0.8, h1=0.4, h2=0, horizon 3, dt=0.1.
    pub fn benchmark() -> Self {
        BenesParams {
            mu: 0.5,
            sigma_b: 0.8,
            h1: 0.4,
            h2: 0.0,
            x0: 0.0,
            dt: 0.1,
            horizon: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_b > 0.0) {
            return Err(Error::InvalidParameter("sigma_b must be positive".into()));
        }
        if self.h1 == 0.0 {
            return Err(Error::InvalidParameter("h1 must be nonzero".into()));
        }
        if !(self.dt > 0.0) || !(self.horizon > 0.0) {
            return Err(Error::InvalidParameter("dt and horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn drift(&self, x: f64) -> f64 {
        self.mu * self.sigma_b * ((self.mu / self.sigma_b) * x).tanh()
    }
}

/// A simulated state path plus the observation-increment path.
///
/// `states[k]` is the state at time `k * dt`; `increments[k]` is the
/// observation increment accumulated over `(k dt, (k+1) dt]`, generated
/// left-point style from `states[k]`.
#[derive(Clone, Debug)]
pub struct BenesPath {
    pub params: BenesParams,
    pub states: Vec<f64>,
    pub increments: Vec<f64>,
}

impl BenesPath {
    pub fn times(&self) -> Vec<f64> {
        (0..self.states.len()).map(|k| k as f64 * self.params.dt).collect()
    }

    /// Discrete observations for step-based filters: `increments[k] / dt`,
    /// assimilated at time `(k+1) dt` with observation operator
    /// `h1 x + h1 h2` and noise variance `1 / dt`.
    pub fn discrete_observations(&self) -> Vec<f64> {
        self.increments.iter().map(|dz| dz / self.params.dt).collect()
    }
}

/// Simulate a state path and its observation increments on the dt grid.
pub fn benes_simulate(params: &BenesParams, rng: &mut RngStream) -> Result<BenesPath> {
    params.validate()?;
    let steps = params.steps();
    let p = *params;
    let mut states = Vec::with_capacity(steps + 1);
    let mut increments = Vec::with_capacity(steps);
    states.push(params.x0);
    let sqrt_dt = params.dt.sqrt();
    for k in 0..steps {
        let x = states[k];
        // Observation increment over (k dt, (k+1) dt], left-point in x.
        let dz = (params.h1 * x + params.h1 * params.h2) * params.dt + sqrt_dt * rng.normal();
        increments.push(dz);
        let next = rk4_maruyama_step(
            |_t, xv: &[f64], out: &mut [f64]| out[0] = p.drift(xv[0]),
            0.0,
            &[x],
            params.dt,
            &[params.sigma_b],
            rng,
        );
        states.push(next[0]);
    }
    Ok(BenesPath {
        params: *params,
        states,
        increments,
    })
}

/// Exact filtering posterior: the Gaussian mixture
/// `omega N(a - b, sigma2) + (1 - omega) N(a + b, sigma2)`.
#[derive(Clone, Copy, Debug)]
pub struct BenesPosterior {
    pub omega: f64,
    pub a: f64,
    pub b: f64,
    pub sigma2: f64,
}

impl BenesPosterior {
    pub fn mean(&self) -> f64 {
        self.a + (1.0 - 2.0 * self.omega) * self.b
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let m1 = self.a - self.b;
        let m2 = self.a + self.b;
        self.omega * (m1 * m1 + self.sigma2) + (1.0 - self.omega) * (m2 * m2 + self.sigma2) - m * m
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let norm = |m: f64| {
            let d = x - m;
            (-(d * d) / (2.0 * self.sigma2)).exp() / (2.0 * std::f64::consts::PI * self.sigma2).sqrt()
        };
        self.omega * norm(self.a - self.b) + (1.0 - self.omega) * norm(self.a + self.b)
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        let mean = if rng.uniform() < self.omega {
            self.a - self.b
        } else {
            self.a + self.b
        };
        mean + self.sigma2.sqrt() * rng.normal()
    }

    /// Tabulate the mixture density on a regular grid wide enough to hold
    /// essentially all of its mass.
    pub fn grid_pdf(&self, points: usize) -> Result<super::grid::GridPdf> {
        let spread = self.b.abs() + 8.0 * self.sigma2.sqrt().max(1e-3);
        let lo = self.a - spread;
        let hi = self.a + spread;
        let grid: Vec<f64> = (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect();
        let density: Vec<f64> = grid.iter().map(|&x| self.pdf(x)).collect();
        super::grid::GridPdf::new(grid, density)
    }
}

/// Closed-form posterior parameters at a grid time `t`, driven by the
/// observation increments up to `t`. The path integral is discretized as a
/// left-point Riemann sum over the increments.
pub fn benes_exact_posterior(params: &BenesParams, increments: &[f64], t: f64) -> Result<BenesPosterior> {
    params.validate()?;
    if !(t > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "query time must be positive, got {t}"
        )));
    }
    let steps_to_t = (t / params.dt).round() as usize;
    if ((steps_to_t as f64) * params.dt - t).abs() > 1e-9 * params.dt.max(1.0) {
        return Err(Error::InvalidParameter(format!(
            "query time {t} is not on the dt grid"
        )));
    }
    if steps_to_t > increments.len() {
        return Err(Error::InvalidParameter(format!(
            "query time {t} is past the end of the increment path"
        )));
    }

    let c = params.h1 * params.sigma_b;
    let tanh_ct = (c * t).tanh();
    let sinh_ct = (c * t).sinh();
    let cosh_ct = (c * t).cosh();

    let b = params.mu / params.h1 * tanh_ct;
    let sigma2 = params.sigma_b / params.h1 * tanh_ct;

    let mut psi = 0.0;
    for (k, dz) in increments.iter().take(steps_to_t).enumerate() {
        let s = k as f64 * params.dt;
        psi += (c * s).sinh() / sinh_ct * dz;
    }

    let a = params.sigma_b * psi * tanh_ct + (params.h2 + params.x0) / cosh_ct - params.h2;
    let coth_ct = cosh_ct / sinh_ct;
    let omega = 1.0 / (1.0 + ((2.0 * a * b / params.sigma_b) * coth_ct).exp());

    Ok(BenesPosterior { omega, a, b, sigma2 })
}
