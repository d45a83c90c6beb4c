//! Training-free transport analysis step: a forward-Euler gradient flow on
//! particle positions whose velocity is the analytic MMD steepest-descent
//! direction. Auxiliary particles (forecast states paired with simulated
//! observations) generate the velocity field; conditioned particles (the
//! same states paired with the actual observation) ride along it and become
//! the posterior ensemble.

use crate::core::ensemble::{CoupledSamples, Ensemble, Matrix};
use crate::core::model::ObservationModel;
use crate::core::rng::RngStream;
use crate::error::{Error, Result};
use crate::kernels::{
    fold_velocity, kernel_self_sum, per_particle_gradient, velocity_between, KernelConfig,
    KernelTables, ResolvedBandwidths, Standardizer,
};

/// When to recompute the kernel bandwidths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BandwidthRefresh {
    /// Resolve once when the analysis starts and keep the objective fixed
    /// during the flow (default).
    OncePerAnalysis,
    /// Re-resolve from the current particle positions at every iteration.
    EveryIteration,
}

#[derive(Clone, Copy, Debug)]
pub struct GradientFlowConfig {
    /// Base Euler step size in standardized coordinates. Backtracking
    /// shrinks it per iteration whenever a step would increase the MMD, so
    /// large values are safe.
    pub step_size: f64,
    /// Total iteration budget across all annealing stages.
    pub max_iters: usize,
    /// Stop a stage when the MMD^2 decrease over the trailing window of
    /// accepted iterations falls below `rel_tol` times the stage-initial
    /// MMD^2. A single-iteration change is too noisy a signal: flows
    /// routinely cross short plateaus and keep descending.
    pub rel_tol: f64,
    pub kernel: KernelConfig,
    pub bandwidth_refresh: BandwidthRefresh,
    /// Coarse-to-fine kernel schedule: the first stage runs with both
    /// bandwidths scaled by this factor, intermediate stages interpolate
    /// geometrically, and the last stage uses the configured bandwidths.
    /// Wide kernels move the bulk quickly; narrow ones resolve detail.
    pub anneal_start_factor: f64,
    pub anneal_stages: usize,
}

impl Default for GradientFlowConfig {
    fn default() -> Self {
        GradientFlowConfig {
            step_size: 10.0,
            max_iters: 900,
            rel_tol: 1e-4,
            kernel: KernelConfig::default(),
            bandwidth_refresh: BandwidthRefresh::OncePerAnalysis,
            anneal_start_factor: 4.0,
            anneal_stages: 3,
        }
    }
}

impl GradientFlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gradient flow step size must be positive, got {}",
                self.step_size
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        if self.rel_tol < 0.0 || !self.rel_tol.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "rel_tol must be nonnegative, got {}",
                self.rel_tol
            )));
        }
        if self.anneal_stages == 0 {
            return Err(Error::InvalidParameter("anneal_stages must be at least 1".into()));
        }
        if !(self.anneal_start_factor >= 1.0) || !self.anneal_start_factor.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "anneal_start_factor must be at least 1, got {}",
                self.anneal_start_factor
            )));
        }
        Ok(())
    }

    /// Bandwidth scale factors per stage, geometrically interpolated from
    /// `anneal_start_factor` down to 1.
    pub fn anneal_factors(&self) -> Vec<f64> {
        if self.anneal_stages == 1 || self.anneal_start_factor == 1.0 {
            return vec![1.0];
        }
        let s = self.anneal_stages;
        (0..s)
            .map(|k| {
                self.anneal_start_factor
                    .powf((s - 1 - k) as f64 / (s - 1) as f64)
            })
            .collect()
    }
}

/// Backtracking trials per iteration before an iteration counts as stalled.
/// The range spans four decades below the starting step, so a single wild
/// velocity field cannot strand the flow.
const BACKTRACK_TRIALS: usize = 14;
/// Consecutive stalled iterations before the flow is declared divergent.
const MAX_STALLED_ITERS: usize = 5;
/// Relative MMD^2 increase treated as floating-point noise at a fixed point.
/// Relative MMD^2 increase at the smallest trial step that counts as a
/// materially wrong step size rather than convergence noise.
const STALL_MATERIAL: f64 = 1e-3;
/// Accepted iterations per stopping-rule window.
const STOP_WINDOW: usize = 25;

enum StepOutcome {
    Accepted,
    Converged,
    Stalled,
}

/// One analysis step's flow state. The reference coupling, the observation
/// blocks, the standardization and (by default) the bandwidths are frozen at
/// construction; only the state blocks of the auxiliary and conditioned
/// particles move.
pub struct GradientFlow {
    cfg: GradientFlowConfig,
    state_dim: usize,
    /// Frozen reference joint samples, standardized.
    reference: Matrix,
    /// Moving independent-coupling samples (the auxiliary particles),
    /// standardized. Observation columns never change.
    aux: Matrix,
    /// Moving conditioned particles paired with the actual observation,
    /// standardized. Observation columns never change.
    cond: Matrix,
    standardizer: Standardizer,
    /// Configured (unscaled) bandwidths; stages scale them.
    base_bandwidths: ResolvedBandwidths,
    bandwidths: ResolvedBandwidths,
    tables: KernelTables,
    ref_self_sum: f64,
    mmd_current: f64,
    mmd_initial: f64,
    /// Accepted-step MMD^2 values, one sequence per annealing stage; each
    /// stage has a fixed objective, and each sequence is non-increasing.
    stage_histories: Vec<Vec<f64>>,
    accepted_steps: Vec<f64>,
    /// Starting step for the next iteration's trials: the configured base,
    /// tempered by what recently succeeded.
    trial_start: f64,
    /// Raw observation blocks, reattached bit-exactly on extraction.
    raw_aux_obs: Matrix,
    raw_cond_obs: Matrix,
}

impl GradientFlow {
    pub fn new(
        coupled: &CoupledSamples,
        y_obs: &[f64],
        cond_init: &Ensemble,
        cfg: &GradientFlowConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let state_dim = coupled.state_dim();
        let obs_dim = coupled.obs_dim();
        if y_obs.len() != obs_dim {
            return Err(Error::DimensionMismatch {
                context: "gradient flow observation",
                expected: obs_dim,
                actual: y_obs.len(),
            });
        }
        if y_obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation vector".into()));
        }
        if cond_init.dim() != state_dim {
            return Err(Error::DimensionMismatch {
                context: "gradient flow conditioned states",
                expected: state_dim,
                actual: cond_init.dim(),
            });
        }

        let standardizer = Standardizer::fit_pooled(coupled.z(), coupled.z_tilde())?;
        let reference = standardizer.apply_matrix(coupled.z());
        let aux = standardizer.apply_matrix(coupled.z_tilde());

        let mut cond_raw = Matrix::zeros(cond_init.size(), state_dim + obs_dim);
        for i in 0..cond_init.size() {
            cond_raw.row_mut(i)[..state_dim].copy_from_slice(cond_init.member(i));
            cond_raw.row_mut(i)[state_dim..].copy_from_slice(y_obs);
        }
        let cond = standardizer.apply_matrix(&cond_raw);

        let pooled = Matrix::vcat(&reference, &aux)?;
        let base_bandwidths = cfg.kernel.resolve(&pooled)?;
        let first_factor = match cfg.bandwidth_refresh {
            BandwidthRefresh::EveryIteration => 1.0,
            BandwidthRefresh::OncePerAnalysis => cfg.anneal_factors()[0],
        };
        let bandwidths = ResolvedBandwidths::new(
            base_bandwidths.mmd * first_factor,
            base_bandwidths.velocity * first_factor,
        )?;
        let tables = KernelTables::build(&aux, &reference, bandwidths.mmd);
        let ref_self_sum = kernel_self_sum(&reference, bandwidths.mmd);
        let mmd_current = tables.mmd2(ref_self_sum, reference.rows());

        let obs_cols: Vec<usize> = (state_dim..state_dim + obs_dim).collect();
        let raw_aux_obs = coupled.z_tilde().select_columns(&obs_cols);
        let raw_cond_obs = cond_raw.select_columns(&obs_cols);

        Ok(GradientFlow {
            cfg: *cfg,
            state_dim,
            reference,
            aux,
            cond,
            standardizer,
            base_bandwidths,
            bandwidths,
            tables,
            ref_self_sum,
            mmd_current,
            mmd_initial: mmd_current,
            stage_histories: vec![vec![mmd_current]],
            accepted_steps: Vec::new(),
            trial_start: cfg.step_size,
            raw_aux_obs,
            raw_cond_obs,
        })
    }

    /// Switch the flow to a new bandwidth scale: rebuild the kernel tables
    /// and start a fresh objective history.
    fn enter_stage(&mut self, factor: f64) -> Result<()> {
        self.bandwidths = ResolvedBandwidths::new(
            self.base_bandwidths.mmd * factor,
            self.base_bandwidths.velocity * factor,
        )?;
        self.tables = KernelTables::build(&self.aux, &self.reference, self.bandwidths.mmd);
        self.ref_self_sum = kernel_self_sum(&self.reference, self.bandwidths.mmd);
        self.mmd_current = self.tables.mmd2(self.ref_self_sum, self.reference.rows());
        self.stage_histories.push(vec![self.mmd_current]);
        self.trial_start = self.cfg.step_size;
        Ok(())
    }

    fn refresh_bandwidths(&mut self) -> Result<()> {
        let pooled = Matrix::vcat(&self.reference, &self.aux)?;
        self.bandwidths = self.cfg.kernel.resolve(&pooled)?;
        self.tables = KernelTables::build(&self.aux, &self.reference, self.bandwidths.mmd);
        self.ref_self_sum = kernel_self_sum(&self.reference, self.bandwidths.mmd);
        self.mmd_current = self.tables.mmd2(self.ref_self_sum, self.reference.rows());
        Ok(())
    }

    /// Velocities at the auxiliary particles. The velocity-kernel weights
    /// `exp(-d^2/gamma^2)` are powers of the cached MMD-kernel entries
    /// `exp(-d^2/b^2)`; for the exponents that arise from the default
    /// bandwidth tie (gamma = 2b, power 1/4) and the plain tie (power 1)
    /// they are read from the table instead of re-evaluated.
    fn aux_velocities(&self, grad: &Matrix) -> Matrix {
        let n = self.aux.rows();
        let ratio = (self.bandwidths.mmd / self.bandwidths.velocity).powi(2);
        let weight_of: Option<fn(f64) -> f64> = if ratio == 1.0 {
            Some(|k| k)
        } else if ratio == 0.25 {
            Some(|k: f64| k.sqrt().sqrt())
        } else if ratio == 0.5 {
            Some(|k: f64| k.sqrt())
        } else {
            None
        };
        match weight_of {
            Some(f) => {
                let mut out = Matrix::zeros(n, self.state_dim);
                let mut scratch = vec![0.0; n];
                let mut weights = vec![0.0; n];
                for q in 0..n {
                    for (w, k) in weights.iter_mut().zip(&self.tables.ktt[q * n..(q + 1) * n]) {
                        *w = f(*k);
                    }
                    let row = out.row_mut(q);
                    for (c, slot) in row.iter_mut().enumerate() {
                        for i in 0..n {
                            scratch[i] = weights[i] * grad.row(i)[c];
                        }
                        *slot = -crate::kernels::pairwise_sum(&scratch);
                    }
                }
                out
            }
            None => fold_velocity(&self.aux, &self.aux, grad, self.bandwidths.velocity),
        }
    }

    fn step(&mut self) -> Result<StepOutcome> {
        if self.cfg.bandwidth_refresh == BandwidthRefresh::EveryIteration {
            self.refresh_bandwidths()?;
        }
        let grad = per_particle_gradient(
            &self.aux,
            &self.reference,
            &self.tables,
            self.bandwidths.mmd,
            self.state_dim,
        );
        let v_aux = self.aux_velocities(&grad);
        let v_cond = fold_velocity(&self.cond, &self.aux, &grad, self.bandwidths.velocity);

        let mut eps = self.trial_start;
        let mut best_ratio = f64::INFINITY;
        for _ in 0..BACKTRACK_TRIALS {
            let mut aux_trial = self.aux.clone();
            for i in 0..aux_trial.rows() {
                let row = aux_trial.row_mut(i);
                for (c, v) in v_aux.row(i).iter().enumerate() {
                    row[c] += eps * v;
                }
            }
            let tables_trial = KernelTables::build(&aux_trial, &self.reference, self.bandwidths.mmd);
            let mmd_trial = tables_trial.mmd2(self.ref_self_sum, self.reference.rows());
            if !mmd_trial.is_finite() {
                return Err(Error::NonFinite("gradient flow objective".into()));
            }
            if mmd_trial <= self.mmd_current {
                for i in 0..self.cond.rows() {
                    let row = self.cond.row_mut(i);
                    for (c, v) in v_cond.row(i).iter().enumerate() {
                        row[c] += eps * v;
                    }
                }
                self.aux = aux_trial;
                self.tables = tables_trial;
                self.mmd_current = mmd_trial;
                self.stage_histories.last_mut().expect("stage started").push(mmd_trial);
                self.accepted_steps.push(eps);
                self.trial_start = (eps * 4.0).min(self.cfg.step_size);
                return Ok(StepOutcome::Accepted);
            }
            best_ratio = best_ratio.min((mmd_trial - self.mmd_current) / self.mmd_current.max(f64::MIN_POSITIVE));
            eps *= 0.5;
        }
        // The kernel-smoothed velocity is not guaranteed to be a descent
        // direction arbitrarily close to a minimum of the empirical
        // objective, so a fully backtracked iteration after progress has
        // been made marks a fixed point. It is only evidence of a hopeless
        // step size when it happens before any step was ever accepted and
        // the smallest trial still increased the objective materially.
        if self.accepted_steps.is_empty() && best_ratio > STALL_MATERIAL {
            Ok(StepOutcome::Stalled)
        } else {
            Ok(StepOutcome::Converged)
        }
    }

    /// Iterate until the relative MMD^2 change drops below `rel_tol`, the
    /// iteration budget is exhausted, or the flow is declared divergent.
    pub fn run(&mut self) -> Result<()> {
        if self.mmd_initial <= 0.0 {
            return Ok(());
        }
        let factors = match self.cfg.bandwidth_refresh {
            BandwidthRefresh::EveryIteration => vec![1.0],
            BandwidthRefresh::OncePerAnalysis => self.cfg.anneal_factors(),
        };
        let stage_budget = self.cfg.max_iters.div_ceil(factors.len());
        let mut stalled = 0usize;
        for (stage, factor) in factors.into_iter().enumerate() {
            if stage > 0 {
                self.enter_stage(factor)?;
            }
            if self.mmd_current <= 0.0 {
                continue;
            }
            let stage_initial = self.mmd_current;
            for iter in 0..stage_budget {
                match self.step()? {
                    StepOutcome::Accepted => {
                        stalled = 0;
                        if !self.aux.is_finite() || !self.cond.is_finite() {
                            return Err(Error::NonFinite(format!(
                                "gradient flow state at iteration {iter} of stage {stage}"
                            )));
                        }
                        let hist = self.stage_histories.last().expect("stage started");
                        let len = hist.len();
                        if len > STOP_WINDOW {
                            let drop = hist[len - 1 - STOP_WINDOW] - hist[len - 1];
                            if drop / stage_initial < self.cfg.rel_tol {
                                break;
                            }
                        }
                    }
                    StepOutcome::Converged => break,
                    StepOutcome::Stalled => {
                        stalled += 1;
                        if stalled >= MAX_STALLED_ITERS {
                            return Err(Error::GradientFlowDiverged);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        self.accepted_steps.len()
    }

    /// Recorded MMD^2 values over accepted iterations of the final
    /// annealing stage (starting with the stage-initial value).
    /// Non-increasing by construction.
    pub fn mmd_history(&self) -> &[f64] {
        self.stage_histories.last().expect("stage started")
    }

    /// Accepted-step MMD^2 sequences for every annealing stage.
    pub fn stage_histories(&self) -> &[Vec<f64>] {
        &self.stage_histories
    }

    pub fn bandwidths(&self) -> &ResolvedBandwidths {
        &self.bandwidths
    }

    fn extract(&self, joint_std: &Matrix, raw_obs: &Matrix) -> Result<Matrix> {
        // Destandardize state columns; reattach the frozen observation
        // columns bit-exactly.
        let rows = joint_std.rows();
        let mut out = Matrix::zeros(rows, self.state_dim + raw_obs.cols());
        let state_std = self.standardizer.restrict(0..self.state_dim);
        for i in 0..rows {
            let raw_state = state_std.invert_row(&joint_std.row(i)[..self.state_dim]);
            out.row_mut(i)[..self.state_dim].copy_from_slice(&raw_state);
            out.row_mut(i)[self.state_dim..].copy_from_slice(raw_obs.row(i));
        }
        Ok(out)
    }

    /// Conditioned particles in raw coordinates: the posterior ensemble.
    pub fn cond_states(&self) -> Result<Ensemble> {
        let joint = self.extract(&self.cond, &self.raw_cond_obs)?;
        let states = joint.select_columns(&(0..self.state_dim).collect::<Vec<_>>());
        Ensemble::new(states)
    }

    /// Auxiliary joint particles in raw coordinates (states moved by the
    /// flow, observation block frozen).
    pub fn aux_joint(&self) -> Result<Matrix> {
        self.extract(&self.aux, &self.raw_aux_obs)
    }

    /// Conditioned joint particles in raw coordinates.
    pub fn cond_joint(&self) -> Result<Matrix> {
        self.extract(&self.cond, &self.raw_cond_obs)
    }
}

/// One raw forward-Euler step of the flow, in the caller's coordinates:
/// both the auxiliary and the conditioned states move by `step_size` times
/// the velocity field generated by the auxiliary particles against the
/// frozen reference coupling. Observation blocks are untouched.
pub fn gf_step(
    aux_states: &Ensemble,
    aux_obs: &Matrix,
    cond_states: &Ensemble,
    y_obs: &[f64],
    reference: &Matrix,
    bandwidths: &ResolvedBandwidths,
    step_size: f64,
) -> Result<(Ensemble, Ensemble)> {
    let state_dim = aux_states.dim();
    let obs_dim = aux_obs.cols();
    if aux_obs.rows() != aux_states.size() {
        return Err(Error::DimensionMismatch {
            context: "gf_step auxiliary observations",
            expected: aux_states.size(),
            actual: aux_obs.rows(),
        });
    }
    if y_obs.len() != obs_dim {
        return Err(Error::DimensionMismatch {
            context: "gf_step observation",
            expected: obs_dim,
            actual: y_obs.len(),
        });
    }
    let aux_joint = Matrix::hcat(aux_states.members(), aux_obs)?;
    let mut cond_joint = Matrix::zeros(cond_states.size(), state_dim + obs_dim);
    for i in 0..cond_states.size() {
        cond_joint.row_mut(i)[..state_dim].copy_from_slice(cond_states.member(i));
        cond_joint.row_mut(i)[state_dim..].copy_from_slice(y_obs);
    }

    let v_aux = velocity_between(&aux_joint, &aux_joint, reference, state_dim, bandwidths)?;
    let v_cond = velocity_between(&cond_joint, &aux_joint, reference, state_dim, bandwidths)?;

    let mut new_aux = aux_states.members().clone();
    for i in 0..new_aux.rows() {
        let row = new_aux.row_mut(i);
        for (c, v) in v_aux.row(i).iter().enumerate() {
            row[c] += step_size * v;
        }
    }
    let mut new_cond = cond_states.members().clone();
    for i in 0..new_cond.rows() {
        let row = new_cond.row_mut(i);
        for (c, v) in v_cond.row(i).iter().enumerate() {
            row[c] += step_size * v;
        }
    }
    if !new_aux.is_finite() || !new_cond.is_finite() {
        return Err(Error::NonFinite("gf_step update".into()));
    }
    Ok((Ensemble::new(new_aux)?, Ensemble::new(new_cond)?))
}

/// Full analysis step: simulate observations, build the couplings, run the
/// flow, and return the conditioned ensemble as the posterior.
pub fn gf_analysis(
    prior: &Ensemble,
    y_obs: &[f64],
    obs: &ObservationModel,
    cfg: &GradientFlowConfig,
    rng: &mut RngStream,
) -> Result<Ensemble> {
    prior.check_finite()?;
    let coupled = crate::core::make_coupled_samples(prior, obs, rng)?;
    gf_analysis_with_coupling(prior, y_obs, &coupled, cfg)
}

/// Deterministic entry: run the flow against a prebuilt coupling. The
/// conditioned ensemble is initialized from `cond_init` (conventionally the
/// forecast ensemble, i.e. the same states as `coupled.z_tilde`).
pub fn gf_analysis_with_coupling(
    cond_init: &Ensemble,
    y_obs: &[f64],
    coupled: &CoupledSamples,
    cfg: &GradientFlowConfig,
) -> Result<Ensemble> {
    let mut flow = GradientFlow::new(coupled, y_obs, cond_init, cfg)?;
    flow.run()?;
    flow.cond_states()
}
