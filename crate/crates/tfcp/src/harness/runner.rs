//! Experiment execution: builds the truth and observations for each grid
//! cell, runs the filter loop, and persists records, metrics and a manifest
//! sufficient to reproduce every byte.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use super::config::{
    config_hash, CouplingMode, ExperimentConfig, MethodSpec, ModelParams,
};
use crate::baselines::{enkf_analysis, letkf_analysis, sirpf_step, EnkfConfig, LetkfConfig};
use crate::core::ensemble::{Ensemble, Matrix};
use crate::core::model::{DynamicsModel, ObservationModel};
use crate::core::rng::{domain, RngStream};
use crate::core::{forecast, make_coupled_samples_independent};
use crate::error::{Error, Result};
use crate::gradient_flow::{gf_analysis, gf_analysis_with_coupling};
use crate::localization::{build_blocks, localized_analysis, BlockLayout, Topology};
use crate::metrics::{coverage_probability, rmse, RunRecord};
use crate::models::{self, BenesParams};
use crate::neural::{tfcp_analysis_detailed, MlpParams};

/// Everything one grid cell needs: the problem realization is fully
/// determined by (model, obs_interval, cycles, seed).
pub struct Problem {
    pub truth: Matrix,
    pub observations: Matrix,
    pub obs_model: ObservationModel,
    pub obs_noise_var: Vec<f64>,
    pub obs_coords: Vec<usize>,
    pub dynamics: Option<DynamicsModel>,
    pub initial: Box<dyn Fn(usize, &mut RngStream) -> Result<Ensemble> + Sync + Send>,
    pub topology: Topology,
    pub times: Vec<f64>,
}

fn build_problem(cfg: &ExperimentConfig, obs_interval: f64, seed: u64) -> Result<Problem> {
    let root = RngStream::from_seed(seed);
    let mut truth_rng = root.derive(&[domain::TRUTH]);
    let mut obs_rng = root.derive(&[domain::OBS_NOISE]);
    let cycles = cfg.cycles;

    match &cfg.model_params {
        ModelParams::Static1d {
            mu0,
            sigma0,
            obs_noise_var,
        } => {
            let (mu0, sigma0, var) = (*mu0, *sigma0, *obs_noise_var);
            let x_star = mu0 + sigma0 * truth_rng.normal();
            let h: crate::core::model::ObsFn =
                Arc::new(|x: &[f64]| vec![models::quadratic_obs_1d(x[0])]);
            let obs_model = ObservationModel::diag_gaussian(h, vec![var.sqrt()]);
            let y = obs_model.observe(&[x_star], &mut obs_rng)?;
            Ok(Problem {
                truth: Matrix::from_rows(&[vec![x_star]])?,
                observations: Matrix::from_rows(&[y])?,
                obs_model,
                obs_noise_var: vec![var],
                obs_coords: vec![0],
                dynamics: None,
                initial: Box::new(move |n, rng| {
                    Ensemble::gaussian(n, &[mu0], &[sigma0], rng)
                }),
                topology: Topology::Bounded,
                times: vec![0.0],
            })
        }
        ModelParams::Static2d {
            mu0,
            sigma0,
            obs_noise_var,
        } => {
            let (mu0, sigma0, var) = (*mu0, *sigma0, *obs_noise_var);
            let x_star = [
                mu0[0] + sigma0 * truth_rng.normal(),
                mu0[1] + sigma0 * truth_rng.normal(),
            ];
            let h: crate::core::model::ObsFn =
                Arc::new(|x: &[f64]| vec![models::quadratic_obs_2d(x)]);
            let obs_model = ObservationModel::diag_gaussian(h, vec![var.sqrt()]);
            let y = obs_model.observe(&x_star, &mut obs_rng)?;
            Ok(Problem {
                truth: Matrix::from_rows(&[x_star.to_vec()])?,
                observations: Matrix::from_rows(&[y])?,
                obs_model,
                obs_noise_var: vec![var],
                obs_coords: vec![0],
                dynamics: None,
                initial: Box::new(move |n, rng| {
                    Ensemble::gaussian(n, &mu0, &[sigma0, sigma0], rng)
                }),
                topology: Topology::Bounded,
                times: vec![0.0],
            })
        }
        ModelParams::Benes {
            mu,
            sigma_b,
            h1,
            h2,
            x0,
        } => {
            let params = BenesParams {
                mu: *mu,
                sigma_b: *sigma_b,
                h1: *h1,
                h2: *h2,
                x0: *x0,
                dt: obs_interval,
                horizon: obs_interval * cycles as f64,
            };
            let path = models::benes_simulate(&params, &mut truth_rng)?;
            let truth_rows: Vec<Vec<f64>> =
                (1..=cycles).map(|k| vec![path.states[k]]).collect();
            let obs_rows: Vec<Vec<f64>> = path
                .discrete_observations()
                .into_iter()
                .map(|y| vec![y])
                .collect();
            let (h1v, h2v) = (*h1, *h2);
            let h: crate::core::model::ObsFn =
                Arc::new(move |x: &[f64]| vec![h1v * x[0] + h1v * h2v]);
            let var = 1.0 / obs_interval;
            let obs_model = ObservationModel::diag_gaussian(h, vec![var.sqrt()]);
            let drift_params = params;
            let drift: crate::core::model::DriftFn = Arc::new(move |_t, x, out| {
                out[0] = drift_params.drift(x[0]);
            });
            let dynamics = DynamicsModel::new(1, drift, vec![*sigma_b], obs_interval, 1)?;
            let x0v = *x0;
            Ok(Problem {
                truth: Matrix::from_rows(&truth_rows)?,
                observations: Matrix::from_rows(&obs_rows)?,
                obs_model,
                obs_noise_var: vec![var],
                obs_coords: vec![0],
                dynamics: Some(dynamics),
                initial: Box::new(move |n, _| {
                    Ensemble::new(Matrix::from_flat(vec![x0v; n], n, 1)?)
                }),
                topology: Topology::Bounded,
                times: (1..=cycles).map(|k| k as f64 * obs_interval).collect(),
            })
        }
        ModelParams::Lorenz63 {
            sigma,
            rho,
            beta,
            gamma,
            dt,
            obs_noise_var,
        } => {
            let steps = (obs_interval / dt).round() as usize;
            let dynamics =
                models::lorenz63_model_with(*sigma, *rho, *beta, *gamma, *dt, steps)?;
            let mut x = vec![
                truth_rng.normal(),
                truth_rng.normal(),
                truth_rng.normal(),
            ];
            let mut truth_rows = Vec::with_capacity(cycles);
            let mut obs_rows = Vec::with_capacity(cycles);
            let h: crate::core::model::ObsFn = Arc::new(|x: &[f64]| vec![x[0]]);
            let obs_model = ObservationModel::diag_gaussian(h, vec![obs_noise_var.sqrt()]);
            for _ in 0..cycles {
                x = dynamics.advance_member(0, &x, steps, &mut truth_rng)?;
                truth_rows.push(x.clone());
                obs_rows.push(obs_model.observe(&x, &mut obs_rng)?);
            }
            Ok(Problem {
                truth: Matrix::from_rows(&truth_rows)?,
                observations: Matrix::from_rows(&obs_rows)?,
                obs_model,
                obs_noise_var: vec![*obs_noise_var],
                obs_coords: vec![0],
                dynamics: Some(dynamics),
                initial: Box::new(move |n, rng| {
                    Ensemble::gaussian(n, &[0.0; 3], &[1.0; 3], rng)
                }),
                topology: Topology::Bounded,
                times: (1..=cycles).map(|k| k as f64 * obs_interval).collect(),
            })
        }
        ModelParams::Lorenz96 {
            dim,
            forcing,
            gamma,
            dt,
            obs_noise_var,
        } => {
            let steps = (obs_interval / dt).round() as usize;
            let dynamics = models::lorenz96_model(*dim, *forcing, *gamma, *dt, steps)?;
            // Spin the truth onto the attractor before assimilation starts.
            let mut x: Vec<f64> = (0..*dim)
                .map(|_| forcing + 0.01 * truth_rng.normal())
                .collect();
            x = dynamics.advance_member(0, &x, 500, &mut truth_rng)?;
            let start = x.clone();
            let obs_coords: Vec<usize> = (0..*dim).step_by(2).collect();
            let std = obs_noise_var.sqrt();
            let coords = obs_coords.clone();
            let h: crate::core::model::ObsFn =
                Arc::new(move |x: &[f64]| coords.iter().map(|&c| x[c]).collect());
            let obs_model =
                ObservationModel::diag_gaussian(h, vec![std; obs_coords.len()]);
            let mut truth_rows = Vec::with_capacity(cycles);
            let mut obs_rows = Vec::with_capacity(cycles);
            for _ in 0..cycles {
                x = dynamics.advance_member(0, &x, steps, &mut truth_rng)?;
                truth_rows.push(x.clone());
                obs_rows.push(obs_model.observe(&x, &mut obs_rng)?);
            }
            let dim_v = *dim;
            Ok(Problem {
                truth: Matrix::from_rows(&truth_rows)?,
                observations: Matrix::from_rows(&obs_rows)?,
                obs_model,
                obs_noise_var: vec![*obs_noise_var; obs_coords.len()],
                obs_coords,
                dynamics: Some(dynamics),
                initial: Box::new(move |n, rng| {
                    Ensemble::gaussian(n, &start, &vec![1.0; dim_v], rng)
                }),
                topology: Topology::Periodic,
                times: (1..=cycles).map(|k| k as f64 * obs_interval).collect(),
            })
        }
    }
}

/// Observation model restricted to one extended block: it observes the
/// block-local positions of the assigned observed coordinates.
fn block_obs_model(
    problem: &Problem,
    layout: &BlockLayout,
    block: usize,
) -> (ObservationModel, Vec<f64>) {
    let blk = &layout.blocks[block];
    let positions: Vec<usize> = blk
        .obs
        .iter()
        .map(|&j| {
            let coord = problem.obs_coords[j];
            blk.extended
                .iter()
                .position(|&e| e == coord)
                .expect("assigned observation inside extended block")
        })
        .collect();
    let stds: Vec<f64> = blk.obs.iter().map(|&j| problem.obs_noise_var[j].sqrt()).collect();
    let pos = positions.clone();
    let h: crate::core::model::ObsFn =
        Arc::new(move |x: &[f64]| pos.iter().map(|&p| x[p]).collect());
    let vars: Vec<f64> = blk.obs.iter().map(|&j| problem.obs_noise_var[j]).collect();
    (ObservationModel::diag_gaussian(h, stds), vars)
}

struct MethodState {
    /// Warm-start parameters for the trained transport, carried across
    /// assimilation windows when enabled.
    warm_params: Option<MlpParams>,
}

fn analysis_step(
    method: &MethodSpec,
    problem: &Problem,
    layout: Option<&BlockLayout>,
    prior: &Ensemble,
    posterior_prev: Option<&Ensemble>,
    y_obs: &[f64],
    cycle: usize,
    root: &RngStream,
    state: &mut MethodState,
) -> Result<Ensemble> {
    let mut cycle_rng = root.derive(&[domain::ANALYSIS, cycle as u64]);
    match method {
        MethodSpec::TfcpGf(p) => {
            let run_global = |rng: &mut RngStream| -> Result<Ensemble> {
                match p.coupling {
                    CouplingMode::Shuffle => gf_analysis(prior, y_obs, &problem.obs_model, &p.flow, rng),
                    CouplingMode::SecondForecast => {
                        let second = second_copy(problem, posterior_prev, prior, cycle, root)?;
                        let coupled = make_coupled_samples_independent(
                            prior,
                            &second,
                            &problem.obs_model,
                            rng,
                        )?;
                        gf_analysis_with_coupling(prior, y_obs, &coupled, &p.flow)
                    }
                }
            };
            match layout {
                None => run_global(&mut cycle_rng),
                Some(layout) => {
                    let base = cycle_rng.clone();
                    localized_analysis(prior, y_obs, layout, |b, sub_prior, sub_obs| {
                        let (obs_model, _) = block_obs_model(problem, layout, b);
                        let mut block_rng = base.derive(&[domain::BLOCK, b as u64]);
                        gf_analysis(sub_prior, sub_obs, &obs_model, &p.flow, &mut block_rng)
                    })
                }
            }
        }
        MethodSpec::Tfcp(p) => match layout {
            None => {
                let warm = if p.warm_start { state.warm_params.as_ref() } else { None };
                let out = tfcp_analysis_detailed(
                    prior,
                    y_obs,
                    &problem.obs_model,
                    &p.train,
                    &mut cycle_rng,
                    warm,
                )?;
                if p.warm_start {
                    state.warm_params = Some(out.params);
                }
                Ok(out.posterior)
            }
            Some(layout) => {
                let base = cycle_rng.clone();
                localized_analysis(prior, y_obs, layout, |b, sub_prior, sub_obs| {
                    let (obs_model, _) = block_obs_model(problem, layout, b);
                    let mut block_rng = base.derive(&[domain::BLOCK, b as u64]);
                    let out = tfcp_analysis_detailed(
                        sub_prior,
                        sub_obs,
                        &obs_model,
                        &p.train,
                        &mut block_rng,
                        None,
                    )?;
                    Ok(out.posterior)
                })
            }
        },
        MethodSpec::Enkf { inflation } => {
            let cfg = EnkfConfig {
                inflation: *inflation,
                obs_noise_var: problem.obs_noise_var.clone(),
            };
            enkf_analysis(prior, y_obs, &problem.obs_model, &cfg, &mut cycle_rng)
        }
        MethodSpec::Sirpf => sirpf_step(prior, y_obs, &problem.obs_model, &mut cycle_rng),
        MethodSpec::Letkf { inflation } => {
            let cfg = LetkfConfig {
                inflation: *inflation,
                obs_noise_var: problem.obs_noise_var.clone(),
            };
            let global;
            let layout = match layout {
                Some(l) => l,
                None => {
                    global = build_blocks(
                        prior.dim(),
                        prior.dim(),
                        0,
                        &problem.obs_coords,
                        problem.topology,
                    )?;
                    &global
                }
            };
            letkf_analysis(prior, y_obs, &problem.obs_model, layout, &cfg)
        }
    }
}

/// Second independently forecast ensemble for the independent-copy coupling
/// mode: re-propagate the previous posterior with a different noise stream
/// (or redraw the initial ensemble for static problems).
fn second_copy(
    problem: &Problem,
    posterior_prev: Option<&Ensemble>,
    prior: &Ensemble,
    cycle: usize,
    root: &RngStream,
) -> Result<Ensemble> {
    let mut alt = root.derive(&[domain::FORECAST_MEMBER, 0xa17, cycle as u64]);
    match (&problem.dynamics, posterior_prev) {
        (Some(dynamics), Some(prev)) => forecast(prev, dynamics, &alt),
        _ => (problem.initial)(prior.size(), &mut alt),
    }
}

pub struct CellResult {
    pub method: String,
    pub n: usize,
    pub obs_interval: f64,
    pub seed: u64,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
    pub dir: String,
}

/// Run one grid cell: build the problem, loop forecast/analysis, and
/// return the per-step record.
pub fn run_cell(
    cfg: &ExperimentConfig,
    method: &MethodSpec,
    n_members: usize,
    obs_interval: f64,
    seed: u64,
) -> Result<(RunRecord, Problem)> {
    let problem = build_problem(cfg, obs_interval, seed)?;
    let root = RngStream::from_seed(seed).derive(&[
        domain::CELL,
        method_tag(method),
        n_members as u64,
        (obs_interval * 1e9).round() as u64,
    ]);
    let mut init_rng = root.derive(&[domain::INIT]);
    let mut ensemble = (problem.initial)(n_members, &mut init_rng)?;

    let layout = match (&cfg.localization, &cfg.model_params) {
        (Some(spec), ModelParams::Lorenz96 { dim, .. }) => Some(build_blocks(
            *dim,
            spec.block_size,
            spec.r_loc,
            &problem.obs_coords,
            Topology::Periodic,
        )?),
        _ => None,
    };

    let cycles = problem.truth.rows();
    let dim = problem.truth.cols();
    let mut means = Matrix::zeros(cycles, dim);
    let mut variances = Matrix::zeros(cycles, dim);
    let mut step_seconds = Vec::with_capacity(cycles);
    let mut method_state = MethodState { warm_params: None };
    let mut posterior_prev: Option<Ensemble> = None;

    for k in 0..cycles {
        let tick = Instant::now();
        let prior = match &problem.dynamics {
            Some(dynamics) => {
                let stream = root.derive(&[domain::FORECAST_MEMBER, k as u64]);
                forecast(&ensemble, dynamics, &stream)?
            }
            None => ensemble.clone(),
        };
        let posterior = analysis_step(
            method,
            &problem,
            layout.as_ref(),
            &prior,
            posterior_prev.as_ref(),
            problem.observations.row(k),
            k,
            &root,
            &mut method_state,
        )?;
        means.row_mut(k).copy_from_slice(&posterior.mean());
        variances
            .row_mut(k)
            .copy_from_slice(&posterior.variance_diag());
        step_seconds.push(tick.elapsed().as_secs_f64());
        posterior_prev = Some(prior);
        ensemble = posterior;
    }

    let record = RunRecord::new(means, variances, problem.truth.clone(), step_seconds)?;
    Ok((record, problem))
}

fn method_tag(method: &MethodSpec) -> u64 {
    match method {
        MethodSpec::TfcpGf(_) => 1,
        MethodSpec::Tfcp(_) => 2,
        MethodSpec::Enkf { .. } => 3,
        MethodSpec::Sirpf => 4,
        MethodSpec::Letkf { .. } => 5,
    }
}

fn float_token(v: f64) -> String {
    format!("{v}").replace('.', "p")
}

fn write_series_csv(path: &Path, prefix: &str, times: &[f64], data: &Matrix) -> Result<()> {
    let mut out = String::new();
    out.push_str("step,time");
    for c in 0..data.cols() {
        out.push_str(&format!(",{prefix}_{}", c + 1));
    }
    out.push('\n');
    for k in 0..data.rows() {
        out.push_str(&format!("{},{:.6}", k + 1, times[k]));
        for v in data.row(k) {
            out.push_str(&format!(",{v:.17e}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_estimate_csv(path: &Path, times: &[f64], rec: &RunRecord) -> Result<()> {
    let mut out = String::new();
    out.push_str("step,time");
    for c in 0..rec.state_dim() {
        out.push_str(&format!(",mean_{}", c + 1));
    }
    for c in 0..rec.state_dim() {
        out.push_str(&format!(",var_{}", c + 1));
    }
    out.push('\n');
    for k in 0..rec.steps() {
        out.push_str(&format!("{},{:.6}", k + 1, times[k]));
        for v in rec.means.row(k) {
            out.push_str(&format!(",{v:.17e}"));
        }
        for v in rec.variances.row(k) {
            out.push_str(&format!(",{v:.17e}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub struct RunSummary {
    pub out_dir: PathBuf,
    pub cells: Vec<CellResult>,
    pub failed: usize,
}

pub const METRICS_HEADER: &str = "method,model,N,obs_interval,r_loc,seed,rmse,cp95,wall_time_s";

/// Execute the whole grid and persist results. Cell failures are recorded
/// in the manifest and do not abort the remaining cells.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_override: Option<&Path>,
    seed_offset: u64,
) -> Result<RunSummary> {
    let out_dir = out_override
        .map(PathBuf::from)
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    fs::create_dir_all(out_dir.join("cells"))?;

    let mut grid: Vec<(usize, usize, f64, u64)> = Vec::new();
    for (mi, _) in cfg.methods.iter().enumerate() {
        for &n in &cfg.ensemble_sizes {
            for &interval in &cfg.obs_intervals {
                for &seed in &cfg.seeds {
                    grid.push((mi, n, interval, seed + seed_offset));
                }
            }
        }
    }

    let results: Vec<CellResult> = grid
        .par_iter()
        .map(|&(mi, n, interval, seed)| {
            let method = &cfg.methods[mi];
            let dir = format!(
                "{}_N{}_dt{}_seed{}",
                method.id(),
                n,
                float_token(interval),
                seed
            );
            match run_cell(cfg, method, n, interval, seed) {
                Ok((record, problem)) => {
                    let cell_dir = out_dir.join("cells").join(&dir);
                    let io = (|| -> Result<()> {
                        fs::create_dir_all(&cell_dir)?;
                        write_series_csv(&cell_dir.join("truth.csv"), "x", &problem.times, &problem.truth)?;
                        write_series_csv(
                            &cell_dir.join("obs.csv"),
                            "y",
                            &problem.times,
                            &problem.observations,
                        )?;
                        write_estimate_csv(&cell_dir.join("estimate.csv"), &problem.times, &record)
                    })();
                    match io {
                        Ok(()) => CellResult {
                            method: method.id().to_string(),
                            n,
                            obs_interval: interval,
                            seed,
                            record: Some(record),
                            error: None,
                            dir,
                        },
                        Err(e) => CellResult {
                            method: method.id().to_string(),
                            n,
                            obs_interval: interval,
                            seed,
                            record: None,
                            error: Some(format!("i/o: {e}")),
                            dir,
                        },
                    }
                }
                Err(e) => CellResult {
                    method: method.id().to_string(),
                    n,
                    obs_interval: interval,
                    seed,
                    record: None,
                    error: Some(e.to_string()),
                    dir,
                },
            }
        })
        .collect();

    // Metrics rows in deterministic grid order.
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let r_loc_token = cfg
        .localization
        .map(|l| l.r_loc.to_string())
        .unwrap_or_default();
    for cell in &results {
        if let Some(record) = &cell.record {
            let trimmed = record.after_spinup(cfg.spinup_fraction);
            metrics.push_str(&format!(
                "{},{},{},{},{},{},{:.12e},{:.6},{:.3}\n",
                cell.method,
                cfg.model.as_str(),
                cell.n,
                cell.obs_interval,
                r_loc_token,
                cell.seed,
                rmse(&trimmed),
                coverage_probability(&trimmed, 0.95),
                record.total_seconds(),
            ));
        }
    }
    fs::write(out_dir.join("metrics.csv"), metrics)?;

    let manifest = serde_json::json!({
        "tool": "tfcp",
        "version": env!("CARGO_PKG_VERSION"),
        "config_fnv1a64": format!("{:016x}", config_hash(&cfg.source_text)),
        "model": cfg.model.as_str(),
        "seed_offset": seed_offset,
        "seeds": cfg.seeds.iter().map(|s| s + seed_offset).collect::<Vec<_>>(),
        "cells": results.iter().map(|c| serde_json::json!({
            "method": c.method,
            "N": c.n,
            "obs_interval": c.obs_interval,
            "seed": c.seed,
            "dir": c.dir,
            "status": match &c.error { None => "ok".to_string(), Some(e) => format!("failed: {e}") },
        })).collect::<Vec<_>>(),
    });
    let mut file = fs::File::create(out_dir.join("manifest.json"))?;
    file.write_all(serde_json::to_string_pretty(&manifest).unwrap().as_bytes())?;
    file.write_all(b"\n")?;

    let failed = results.iter().filter(|c| c.error.is_some()).count();
    Ok(RunSummary {
        out_dir,
        cells: results,
        failed,
    })
}

/// Aggregate a metrics.csv into per-configuration mean and standard
/// deviation over seeds. Returns formatted table lines.
pub fn report(results_dir: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(results_dir.join("metrics.csv"))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != METRICS_HEADER {
        return Err(Error::InvalidParameter(format!(
            "unexpected metrics header: {header}"
        )));
    }
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::InvalidParameter(format!("bad metrics row: {line}")));
        }
        let key = format!(
            "{} model={} N={} dt={} r_loc={}",
            fields[0], fields[1], fields[2], fields[3],
            if fields[4].is_empty() { "-" } else { fields[4] }
        );
        let rmse_v: f64 = fields[6]
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("bad rmse in: {line}")))?;
        let cp: f64 = fields[7]
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("bad cp95 in: {line}")))?;
        groups.entry(key).or_default().push((rmse_v, cp));
    }
    let stat = |values: &[f64]| -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    };
    let mut out = Vec::new();
    out.push(format!(
        "{:<52} {:>7} {:>22} {:>22}",
        "configuration", "seeds", "rmse (mean +/- std)", "cp95 (mean +/- std)"
    ));
    for (key, rows) in groups {
        let rmses: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let cps: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let (rm, rs) = stat(&rmses);
        let (cm, cs) = stat(&cps);
        out.push(format!(
            "{key:<52} {:>7} {rm:>13.4} +/- {rs:<6.4} {cm:>13.4} +/- {cs:<6.4}",
            rows.len()
        ));
    }
    Ok(out)
}
