//! Trained transport analysis step: a nudging map `x + T(y - H(x))` whose
//! increment network `T` is a small residual MLP, fitted by minimizing the
//! empirical squared MMD between the transported independent coupling and
//! the reference coupling. Reverse-mode gradients are computed in-module
//! (the graph is small and fixed), and parameters are updated with AdamW.

use std::io::{BufRead, Write};

use crate::core::ensemble::{CoupledSamples, Ensemble, Matrix};
use crate::core::model::ObservationModel;
use crate::core::rng::{domain, RngStream};
use crate::error::{Error, Result};
use crate::kernels::{
    kernel_self_sum, pairwise_sum, per_particle_gradient, KernelConfig, KernelTables, Standardizer,
};

/// Dense layer `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl LinearLayer {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LinearLayer {
            w: Matrix::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    fn init_uniform(out_dim: usize, in_dim: usize, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut w = Matrix::zeros(out_dim, in_dim);
        for i in 0..out_dim {
            for v in w.row_mut(i) {
                *v = bound * (2.0 * rng.uniform() - 1.0);
            }
        }
        LinearLayer {
            w,
            b: vec![0.0; out_dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for (i, slot) in out.iter_mut().enumerate() {
            let row = self.w.row(i);
            let mut acc = 0.0;
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            *slot += acc;
        }
        out
    }

    /// Accumulate `dy (x)^T` into the weight gradient, `dy` into the bias
    /// gradient, and return `W^T dy`.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut LinearLayer) -> Vec<f64> {
        for (i, d) in dy.iter().enumerate() {
            let row = grad.w.row_mut(i);
            for (slot, xv) in row.iter_mut().zip(x) {
                *slot += d * xv;
            }
            grad.b[i] += d;
        }
        let mut dx = vec![0.0; self.w.cols()];
        for (i, d) in dy.iter().enumerate() {
            for (slot, wv) in dx.iter_mut().zip(self.w.row(i)) {
                *slot += wv * d;
            }
        }
        dx
    }
}

/// Residual block `v + W2 tanh(W1 v + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub inner: LinearLayer,
    pub outer: LinearLayer,
}

/// Parameters of the increment network: two dense tanh layers into two
/// residual blocks into a linear output layer. The output layer is
/// zero-initialized so a fresh map is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    input_dim: usize,
    hidden: usize,
    output_dim: usize,
    l_in: LinearLayer,
    l_mid: LinearLayer,
    res: [ResidualBlock; 2],
    l_out: LinearLayer,
}

struct ForwardCache {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    t0: Vec<f64>,
    r0: Vec<f64>,
    t1: Vec<f64>,
    r1: Vec<f64>,
}

impl MlpParams {
    pub fn init(input_dim: usize, output_dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let res0 = ResidualBlock {
            inner: LinearLayer::init_uniform(hidden, hidden, rng),
            outer: LinearLayer::init_uniform(hidden, hidden, rng),
        };
        let res1 = ResidualBlock {
            inner: LinearLayer::init_uniform(hidden, hidden, rng),
            outer: LinearLayer::init_uniform(hidden, hidden, rng),
        };
        MlpParams {
            input_dim,
            hidden,
            output_dim,
            l_in: LinearLayer::init_uniform(hidden, input_dim, rng),
            l_mid: LinearLayer::init_uniform(hidden, hidden, rng),
            res: [res0, res1],
            l_out: LinearLayer::zeros(output_dim, hidden),
        }
    }

    pub fn zeros(input_dim: usize, output_dim: usize, hidden: usize) -> Self {
        MlpParams {
            input_dim,
            hidden,
            output_dim,
            l_in: LinearLayer::zeros(hidden, input_dim),
            l_mid: LinearLayer::zeros(hidden, hidden),
            res: [
                ResidualBlock {
                    inner: LinearLayer::zeros(hidden, hidden),
                    outer: LinearLayer::zeros(hidden, hidden),
                },
                ResidualBlock {
                    inner: LinearLayer::zeros(hidden, hidden),
                    outer: LinearLayer::zeros(hidden, hidden),
                },
            ],
            l_out: LinearLayer::zeros(output_dim, hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams::zeros(self.input_dim, self.output_dim, self.hidden)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden
    }

    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.l_in.w.data(),
            &self.l_in.b,
            self.l_mid.w.data(),
            &self.l_mid.b,
            self.res[0].inner.w.data(),
            &self.res[0].inner.b,
            self.res[0].outer.w.data(),
            &self.res[0].outer.b,
            self.res[1].inner.w.data(),
            &self.res[1].inner.b,
            self.res[1].outer.w.data(),
            &self.res[1].outer.b,
            self.l_out.w.data(),
            &self.l_out.b,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let [res0, res1] = &mut self.res;
        vec![
            self.l_in.w.data_mut(),
            &mut self.l_in.b,
            self.l_mid.w.data_mut(),
            &mut self.l_mid.b,
            res0.inner.w.data_mut(),
            &mut res0.inner.b,
            res0.outer.w.data_mut(),
            &mut res0.outer.b,
            res1.inner.w.data_mut(),
            &mut res1.inner.b,
            res1.outer.w.data_mut(),
            &mut res1.outer.b,
            self.l_out.w.data_mut(),
            &mut self.l_out.b,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn forward_cached(&self, input: &[f64]) -> (Vec<f64>, ForwardCache) {
        let tanh_vec = |mut v: Vec<f64>| {
            v.iter_mut().for_each(|x| *x = x.tanh());
            v
        };
        let h1 = tanh_vec(self.l_in.apply(input));
        let h2 = tanh_vec(self.l_mid.apply(&h1));
        let t0 = tanh_vec(self.res[0].inner.apply(&h2));
        let mut r0 = self.res[0].outer.apply(&t0);
        for (r, h) in r0.iter_mut().zip(&h2) {
            *r += h;
        }
        let t1 = tanh_vec(self.res[1].inner.apply(&r0));
        let mut r1 = self.res[1].outer.apply(&t1);
        for (r, h) in r1.iter_mut().zip(&r0) {
            *r += h;
        }
        let out = self.l_out.apply(&r1);
        (
            out,
            ForwardCache {
                input: input.to_vec(),
                h1,
                h2,
                t0,
                r0,
                t1,
                r1,
            },
        )
    }

    /// Accumulate parameter gradients for one sample given the upstream
    /// gradient of the loss with respect to the network output.
    fn backward(&self, cache: &ForwardCache, d_out: &[f64], grad: &mut MlpParams) {
        let d_r1 = self.l_out.backward(&cache.r1, d_out, &mut grad.l_out);

        // Residual block 1: r1 = r0 + outer(tanh(inner(r0))).
        let d_t1 = self.res[1]
            .outer
            .backward(&cache.t1, &d_r1, &mut grad.res[1].outer);
        let d_u1: Vec<f64> = d_t1
            .iter()
            .zip(&cache.t1)
            .map(|(d, t)| d * (1.0 - t * t))
            .collect();
        let mut d_r0 = self.res[1]
            .inner
            .backward(&cache.r0, &d_u1, &mut grad.res[1].inner);
        for (slot, d) in d_r0.iter_mut().zip(&d_r1) {
            *slot += d;
        }

        // Residual block 0: r0 = h2 + outer(tanh(inner(h2))).
        let d_t0 = self.res[0]
            .outer
            .backward(&cache.t0, &d_r0, &mut grad.res[0].outer);
        let d_u0: Vec<f64> = d_t0
            .iter()
            .zip(&cache.t0)
            .map(|(d, t)| d * (1.0 - t * t))
            .collect();
        let mut d_h2 = self.res[0]
            .inner
            .backward(&cache.h2, &d_u0, &mut grad.res[0].inner);
        for (slot, d) in d_h2.iter_mut().zip(&d_r0) {
            *slot += d;
        }

        let d_a2: Vec<f64> = d_h2
            .iter()
            .zip(&cache.h2)
            .map(|(d, h)| d * (1.0 - h * h))
            .collect();
        let d_h1 = self.l_mid.backward(&cache.h1, &d_a2, &mut grad.l_mid);
        let d_a1: Vec<f64> = d_h1
            .iter()
            .zip(&cache.h1)
            .map(|(d, h)| d * (1.0 - h * h))
            .collect();
        self.l_in.backward(&cache.input, &d_a1, &mut grad.l_in);
    }

    /// Fold per-dimension input/output scalings into the first and last
    /// layers, so a network trained on scaled data becomes an equivalent
    /// raw-coordinate network.
    fn fold_scales(&self, input_scale: &[f64], output_scale: &[f64]) -> MlpParams {
        let mut out = self.clone();
        for i in 0..out.l_in.w.rows() {
            let row = out.l_in.w.row_mut(i);
            for (v, s) in row.iter_mut().zip(input_scale) {
                *v /= s;
            }
        }
        for (i, s) in output_scale.iter().enumerate() {
            for v in out.l_out.w.row_mut(i) {
                *v *= s;
            }
            out.l_out.b[i] *= s;
        }
        out
    }

    /// Inverse of [`fold_scales`].
    fn unfold_scales(&self, input_scale: &[f64], output_scale: &[f64]) -> MlpParams {
        let inv_in: Vec<f64> = input_scale.iter().map(|s| 1.0 / s).collect();
        let inv_out: Vec<f64> = output_scale.iter().map(|s| 1.0 / s).collect();
        self.fold_scales(&inv_in, &inv_out)
    }

    /// Write a versioned textual checkpoint (layer shapes plus row-major
    /// weights; values round-trip exactly at 17 significant digits).
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "tfcp-mlp v1")?;
        writeln!(w, "dims {} {} {}", self.input_dim, self.hidden, self.output_dim)?;
        let names = [
            "w_in", "b_in", "w_mid", "b_mid", "res0_w1", "res0_b1", "res0_w2", "res0_b2",
            "res1_w1", "res1_b1", "res1_w2", "res1_b2", "w_out", "b_out",
        ];
        for (name, tensor) in names.iter().zip(self.tensors()) {
            write!(w, "tensor {name} {}", tensor.len())?;
            for v in tensor {
                write!(w, " {v:.17e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self> {
        let bad = |msg: &str| Error::InvalidParameter(format!("mlp checkpoint: {msg}"));
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad("empty file"))??;
        if header.trim() != "tfcp-mlp v1" {
            return Err(bad("unknown header"));
        }
        let dims_line = lines.next().ok_or_else(|| bad("missing dims"))??;
        let dims: Vec<usize> = dims_line
            .split_whitespace()
            .skip(1)
            .map(|t| t.parse().map_err(|_| bad("bad dims")))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(bad("dims needs three entries"));
        }
        let mut params = MlpParams::zeros(dims[0], dims[2], dims[1]);
        {
            let mut tensors = params.tensors_mut();
            for tensor in tensors.iter_mut() {
                let line = lines.next().ok_or_else(|| bad("missing tensor"))??;
                let mut tokens = line.split_whitespace();
                if tokens.next() != Some("tensor") {
                    return Err(bad("expected tensor line"));
                }
                let _name = tokens.next().ok_or_else(|| bad("missing tensor name"))?;
                let len: usize = tokens
                    .next()
                    .ok_or_else(|| bad("missing tensor length"))?
                    .parse()
                    .map_err(|_| bad("bad tensor length"))?;
                if len != tensor.len() {
                    return Err(bad("tensor length mismatch"));
                }
                for slot in tensor.iter_mut() {
                    *slot = tokens
                        .next()
                        .ok_or_else(|| bad("missing value"))?
                        .parse()
                        .map_err(|_| bad("bad value"))?;
                }
            }
        }
        Ok(params)
    }
}

/// Deterministic forward pass through the increment network.
pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != params.input_dim {
        return Err(Error::DimensionMismatch {
            context: "mlp_forward input",
            expected: params.input_dim,
            actual: input.len(),
        });
    }
    Ok(params.forward_cached(input).0)
}

/// Nudging transport map `x + T(y - H(x))`. The observation block of the
/// corresponding joint map is the identity by construction.
pub fn tfcp_map(params: &MlpParams, x: &[f64], y: &[f64], obs: &ObservationModel) -> Result<Vec<f64>> {
    let hx = obs.h(x);
    if y.len() != hx.len() {
        return Err(Error::DimensionMismatch {
            context: "tfcp_map observation",
            expected: hx.len(),
            actual: y.len(),
        });
    }
    let innovation: Vec<f64> = y.iter().zip(&hx).map(|(a, b)| a - b).collect();
    let increment = mlp_forward(params, &innovation)?;
    if increment.len() != x.len() {
        return Err(Error::DimensionMismatch {
            context: "tfcp_map state increment",
            expected: x.len(),
            actual: increment.len(),
        });
    }
    Ok(x.iter().zip(&increment).map(|(a, b)| a + b).collect())
}

/// Empirical MMD^2 between the transported independent coupling and the
/// reference coupling, plus its parameter gradients. Shared by the public
/// operation and the standardized training loop.
pub(crate) fn loss_and_grad_core(
    params: &MlpParams,
    inputs: &Matrix,
    base_states: &Matrix,
    obs_block: &Matrix,
    reference: &Matrix,
    ref_self_sum: f64,
    bandwidth: f64,
) -> Result<(f64, MlpParams)> {
    let n = inputs.rows();
    let state_dim = base_states.cols();
    let mut transported = Matrix::zeros(n, state_dim + obs_block.cols());
    let mut caches = Vec::with_capacity(n);
    for i in 0..n {
        let (out, cache) = params.forward_cached(inputs.row(i));
        let row = transported.row_mut(i);
        for (c, slot) in row[..state_dim].iter_mut().enumerate() {
            *slot = base_states.row(i)[c] + out[c];
        }
        row[state_dim..].copy_from_slice(obs_block.row(i));
        caches.push(cache);
    }

    let tables = KernelTables::build(&transported, reference, bandwidth);
    let n2 = (n * n) as f64;
    let nm = (n * reference.rows()) as f64;
    let loss = pairwise_sum(&tables.ktt) / n2 - 2.0 * pairwise_sum(&tables.ktr) / nm
        + ref_self_sum / (reference.rows() * reference.rows()) as f64;

    let d_states = per_particle_gradient(&transported, reference, &tables, bandwidth, state_dim);
    let mut grads = params.zeros_like();
    for i in 0..n {
        params.backward(&caches[i], d_states.row(i), &mut grads);
    }
    Ok((loss, grads))
}

/// Loss and gradients for the spec-level operation: the transported point
/// is `(tfcp_map(x~, y_bar), y_bar)` per independent-coupling sample, the
/// reference is `coupled.z`, all in raw coordinates.
pub fn mmd_loss_and_grad(
    params: &MlpParams,
    coupled: &CoupledSamples,
    obs: &ObservationModel,
    kernel: &KernelConfig,
) -> Result<(f64, MlpParams)> {
    let n = coupled.len();
    let state_dim = coupled.state_dim();
    let obs_dim = coupled.obs_dim();
    if params.input_dim != obs_dim || params.output_dim != state_dim {
        return Err(Error::DimensionMismatch {
            context: "mmd_loss_and_grad network dims",
            expected: obs_dim,
            actual: params.input_dim,
        });
    }
    let state_cols: Vec<usize> = (0..state_dim).collect();
    let obs_cols: Vec<usize> = (state_dim..state_dim + obs_dim).collect();
    let base_states = coupled.z_tilde().select_columns(&state_cols);
    let obs_block = coupled.z_tilde().select_columns(&obs_cols);
    let mut inputs = Matrix::zeros(n, obs_dim);
    for i in 0..n {
        let hx = obs.h(base_states.row(i));
        let row = inputs.row_mut(i);
        for (c, slot) in row.iter_mut().enumerate() {
            *slot = obs_block.row(i)[c] - hx[c];
        }
    }
    let pooled = Matrix::vcat(coupled.z(), coupled.z_tilde())?;
    let bandwidth = kernel.resolve(&pooled)?.mmd;
    let ref_self = kernel_self_sum(coupled.z(), bandwidth);
    let (loss, grads) = loss_and_grad_core(
        params,
        &inputs,
        &base_states,
        &obs_block,
        coupled.z(),
        ref_self,
        bandwidth,
    )?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("mmd loss".into()));
    }
    Ok((loss, grads))
}

/// Training hyperparameters for the nudging network.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iters: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub hidden_width: usize,
    pub kernel: KernelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            iters: 200,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            hidden_width: 20,
            kernel: KernelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning rate must be positive".into()));
        }
        if self.iters == 0 {
            return Err(Error::InvalidParameter("training iterations must be at least 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidParameter("weight decay must be nonnegative".into()));
        }
        if self.hidden_width == 0 {
            return Err(Error::InvalidParameter("hidden width must be at least 1".into()));
        }
        Ok(())
    }
}

/// First and second moment accumulators for AdamW.
#[derive(Clone, Debug)]
pub struct AdamWState {
    m: MlpParams,
    v: MlpParams,
    t: usize,
}

impl AdamWState {
    pub fn new(params: &MlpParams) -> Self {
        AdamWState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Decoupled-weight-decay Adam update:
/// `m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;` bias-corrected, then
/// `theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
pub fn adamw_step(
    params: &mut MlpParams,
    grads: &MlpParams,
    state: &mut AdamWState,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut p_tensors = params.tensors_mut();
    let g_tensors = grads.tensors();
    let mut m_tensors = state.m.tensors_mut();
    let mut v_tensors = state.v.tensors_mut();
    for (((p, g), m), v) in p_tensors
        .iter_mut()
        .zip(g_tensors)
        .zip(m_tensors.iter_mut())
        .zip(v_tensors.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
        }
    }
}

/// Everything a trained analysis step produces.
pub struct TfcpOutcome {
    pub posterior: Ensemble,
    /// Trained map in raw coordinates (scalings folded into the first and
    /// last layers); usable directly with [`tfcp_map`] and reusable as a
    /// warm start.
    pub params: MlpParams,
    pub loss_history: Vec<f64>,
}

/// Trained-transport analysis step: build couplings, train the nudging
/// network on the MMD loss, then transport the forecast members with the
/// actual observation.
pub fn tfcp_analysis(
    prior: &Ensemble,
    y_obs: &[f64],
    obs: &ObservationModel,
    train: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Ensemble> {
    train.validate()?;
    Ok(tfcp_analysis_detailed(prior, y_obs, obs, train, rng, None)?.posterior)
}

/// [`tfcp_analysis`] with full outputs and an optional warm start from a
/// previously trained raw-coordinate network.
pub fn tfcp_analysis_detailed(
    prior: &Ensemble,
    y_obs: &[f64],
    obs: &ObservationModel,
    train: &TrainConfig,
    rng: &mut RngStream,
    warm_start: Option<&MlpParams>,
) -> Result<TfcpOutcome> {
    prior.check_finite()?;
    let state_dim = prior.dim();
    let obs_dim = obs.obs_dim();
    if y_obs.len() != obs_dim {
        return Err(Error::DimensionMismatch {
            context: "tfcp_analysis observation",
            expected: obs_dim,
            actual: y_obs.len(),
        });
    }
    let param_rng = rng.derive(&[domain::PARAM_INIT]);
    let coupled = crate::core::make_coupled_samples(prior, obs, rng)?;

    // Standardize the joint space and the innovation inputs; training runs
    // entirely in scaled coordinates so gradient magnitudes are balanced.
    let standardizer = Standardizer::fit_pooled(coupled.z(), coupled.z_tilde())?;
    let state_cols: Vec<usize> = (0..state_dim).collect();
    let obs_cols: Vec<usize> = (state_dim..state_dim + obs_dim).collect();
    let tilde_states = coupled.z_tilde().select_columns(&state_cols);
    let tilde_obs = coupled.z_tilde().select_columns(&obs_cols);

    let mut innovations = Matrix::zeros(coupled.len(), obs_dim);
    for i in 0..coupled.len() {
        let hx = obs.h(tilde_states.row(i));
        let row = innovations.row_mut(i);
        for (c, slot) in row.iter_mut().enumerate() {
            *slot = tilde_obs.row(i)[c] - hx[c];
        }
    }
    let innovation_scale: Vec<f64> = innovations
        .col_stds()
        .into_iter()
        .map(|s| s.max(1e-8))
        .collect();
    let mut inputs = innovations.clone();
    for i in 0..inputs.rows() {
        for (v, s) in inputs.row_mut(i).iter_mut().zip(&innovation_scale) {
            *v /= s;
        }
    }

    let reference_std = standardizer.apply_matrix(coupled.z());
    let tilde_std = standardizer.apply_matrix(coupled.z_tilde());
    let base_states_std = tilde_std.select_columns(&state_cols);
    let obs_block_std = tilde_std.select_columns(&obs_cols);
    let state_scale = standardizer.scale()[..state_dim].to_vec();

    let pooled = Matrix::vcat(&reference_std, &tilde_std)?;
    let bandwidth = train.kernel.resolve(&pooled)?.mmd;
    let ref_self = kernel_self_sum(&reference_std, bandwidth);

    let mut params = match warm_start {
        Some(raw) => raw.unfold_scales(&innovation_scale, &state_scale),
        None => {
            let mut r = param_rng.clone();
            MlpParams::init(obs_dim, state_dim, train.hidden_width, &mut r)
        }
    };
    let mut opt = AdamWState::new(&params);
    let mut loss_history = Vec::with_capacity(train.iters);
    for iter in 0..train.iters {
        let (loss, grads) = loss_and_grad_core(
            &params,
            &inputs,
            &base_states_std,
            &obs_block_std,
            &reference_std,
            ref_self,
            bandwidth,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(iter));
        }
        loss_history.push(loss);
        adamw_step(&mut params, &grads, &mut opt, train);
    }

    let raw_params = params.fold_scales(&innovation_scale, &state_scale);
    let mut posterior = Matrix::zeros(prior.size(), state_dim);
    for i in 0..prior.size() {
        let mapped = tfcp_map(&raw_params, prior.member(i), y_obs, obs)?;
        posterior.row_mut(i).copy_from_slice(&mapped);
    }
    let posterior = Ensemble::new(posterior)?;
    Ok(TfcpOutcome {
        posterior,
        params: raw_params,
        loss_history,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;

    fn small_net(seed: u64) -> MlpParams {
        let mut rng = RngStream::from_seed(seed);
        let mut p = MlpParams::init(2, 3, 4, &mut rng);
        // Tests need a nonzero output layer.
        for v in p.l_out.w.data_mut() {
            *v = 0.4 * (2.0 * rng.uniform() - 1.0);
        }
        for v in p.l_out.b.iter_mut() {
            *v = 0.2 * (2.0 * rng.uniform() - 1.0);
        }
        p
    }

    /// Straightforward re-implementation of the architecture with plain
    /// loops, sharing no code with the implementation under test.
    fn reference_forward(p: &MlpParams, input: &[f64]) -> Vec<f64> {
        let linear = |w: &Matrix, b: &[f64], x: &[f64]| -> Vec<f64> {
            (0..w.rows())
                .map(|i| {
                    let mut acc = b[i];
                    for (j, xv) in x.iter().enumerate() {
                        acc += w.row(i)[j] * xv;
                    }
                    acc
                })
                .collect()
        };
        let tanh_all = |v: Vec<f64>| v.into_iter().map(f64::tanh).collect::<Vec<_>>();
        let h1 = tanh_all(linear(&p.l_in.w, &p.l_in.b, input));
        let h2 = tanh_all(linear(&p.l_mid.w, &p.l_mid.b, &h1));
        let mut r0 = linear(
            &p.res[0].outer.w,
            &p.res[0].outer.b,
            &tanh_all(linear(&p.res[0].inner.w, &p.res[0].inner.b, &h2)),
        );
        for (r, h) in r0.iter_mut().zip(&h2) {
            *r += h;
        }
        let mut r1 = linear(
            &p.res[1].outer.w,
            &p.res[1].outer.b,
            &tanh_all(linear(&p.res[1].inner.w, &p.res[1].inner.b, &r0)),
        );
        for (r, h) in r1.iter_mut().zip(&r0) {
            *r += h;
        }
        linear(&p.l_out.w, &p.l_out.b, &r1)
    }

    #[test]
    fn zero_network_maps_everything_to_zero() {
        let p = MlpParams::zeros(3, 2, 8);
        let out = mlp_forward(&p, &[0.3, -1.0, 5.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn linear_layer_is_exact() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![-0.5, 3.0]]).unwrap();
        let layer = LinearLayer { w, b: vec![0.1, -0.2] };
        let out = layer.apply(&[2.0, -1.0]);
        assert_eq!(out, vec![1.0 * 2.0 + 2.0 * -1.0 + 0.1, -0.5 * 2.0 + 3.0 * -1.0 - 0.2]);
    }

    #[test]
    fn forward_matches_independent_reimplementation() {
        let p = small_net(1);
        let mut rng = RngStream::from_seed(2);
        for _ in 0..20 {
            let x = rng.normal_vec(2);
            let a = mlp_forward(&p, &x).unwrap();
            let b = reference_forward(&p, &x);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tfcp_map_is_identity_at_zero_network() {
        let p = MlpParams::zeros(1, 1, 6);
        let obs = ObservationModel::diag_gaussian(Arc::new(|x: &[f64]| x.to_vec()), vec![1.0]);
        let x = [1.7];
        let out = tfcp_map(&p, &x, &[5.0], &obs).unwrap();
        assert_eq!(out, vec![1.7]);
    }

    #[test]
    fn tfcp_map_composes_forward_and_nudging() {
        let p = small_net(3);
        let obs = ObservationModel::diag_gaussian(
            Arc::new(|x: &[f64]| vec![x[0] * x[0], x[1] + x[2]]),
            vec![1.0, 1.0],
        );
        let x = [0.4, -0.3, 1.1];
        let y = [0.9, 0.2];
        let hx = obs.h(&x);
        let innovation = [y[0] - hx[0], y[1] - hx[1]];
        let expected: Vec<f64> = mlp_forward(&p, &innovation)
            .unwrap()
            .iter()
            .zip(&x)
            .map(|(t, xv)| xv + t)
            .collect();
        let got = tfcp_map(&p, &x, &y, &obs).unwrap();
        assert_eq!(got, expected);
    }

    fn toy_coupling(seed: u64, n: usize) -> (CoupledSamples, ObservationModel) {
        let mut rng = RngStream::from_seed(seed);
        let prior = Ensemble::gaussian(n, &[0.0], &[1.0], &mut rng).unwrap();
        let obs = ObservationModel::diag_gaussian(Arc::new(|x: &[f64]| x.to_vec()), vec![0.7]);
        let coupled = crate::core::make_coupled_samples(&prior, &obs, &mut rng).unwrap();
        (coupled, obs)
    }

    #[test]
    fn matched_coupling_and_zero_network_give_zero_loss_and_grads() {
        let mut rng = RngStream::from_seed(4);
        let prior = Ensemble::gaussian(10, &[0.0], &[1.0], &mut rng).unwrap();
        let obs = ObservationModel::diag_gaussian(Arc::new(|x: &[f64]| x.to_vec()), vec![0.0]);
        let perm: Vec<usize> = (0..10).collect();
        let coupled = crate::core::make_coupled_samples_with_permutation(
            &prior, &obs, &mut rng, &perm,
        )
        .unwrap();
        let p = MlpParams::zeros(1, 1, 5);
        let (loss, grads) =
            mmd_loss_and_grad(&p, &coupled, &obs, &KernelConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        for t in grads.tensors() {
            assert!(t.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn loss_matches_hand_enumeration_for_three_members() {
        // Fixed tiny instance: enumerate all nine kernel terms per block.
        let z = Matrix::from_rows(&[vec![0.1, 0.4], vec![-0.6, 0.2], vec![0.9, -0.5]]).unwrap();
        let z_bar = Matrix::from_rows(&[vec![-0.6, 0.2], vec![0.9, -0.5], vec![0.1, 0.4]]).unwrap();
        let z_tilde = Matrix::from_rows(&[vec![0.1, 0.2], vec![-0.6, -0.5], vec![0.9, 0.4]]).unwrap();
        let coupled = CoupledSamples::new(z.clone(), z_bar, z_tilde.clone(), 1, 1).unwrap();
        let obs = ObservationModel::diag_gaussian(Arc::new(|x: &[f64]| x.to_vec()), vec![1.0]);

        let bw = 0.8;
        let kernel = KernelConfig {
            mmd: crate::kernels::Bandwidth::Fixed(bw),
            velocity: crate::kernels::VelocityBandwidth::SameAsMmd,
        };
        let p1 = {
            let mut rng = RngStream::from_seed(6);
            let mut q = MlpParams::init(1, 1, 4, &mut rng);
            for v in q.l_out.w.data_mut() {
                *v = 0.3;
            }
            q
        };
        let (loss, _) = mmd_loss_and_grad(&p1, &coupled, &obs, &kernel).unwrap();

        let k = |a: &[f64], b: &[f64]| crate::kernels::rbf_kernel(a, b, bw).unwrap();
        let mapped: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                let xi = z_tilde.row(i)[0];
                let yi = z_tilde.row(i)[1];
                let t = mlp_forward(&p1, &[yi - xi]).unwrap()[0];
                vec![xi + t, yi]
            })
            .collect();
        let mut expected = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                expected += k(&mapped[i], &mapped[j]) / 9.0;
                expected -= 2.0 * k(&mapped[i], z.row(j)) / 9.0;
                expected += k(z.row(i), z.row(j)) / 9.0;
            }
        }
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (coupled, obs) = toy_coupling(7, 12);
        let kernel = KernelConfig {
            mmd: crate::kernels::Bandwidth::Fixed(1.1),
            velocity: crate::kernels::VelocityBandwidth::SameAsMmd,
        };
        for trial in 0..3 {
            let mut p = small_net(20 + trial);
            // Replace dims: small_net is 2->3; rebuild for 1->1.
            let mut rng = RngStream::from_seed(30 + trial);
            p = MlpParams::init(1, 1, 4, &mut rng);
            for v in p.l_out.w.data_mut() {
                *v = 0.3 * (2.0 * rng.uniform() - 1.0);
            }
            let (_, grads) = mmd_loss_and_grad(&p, &coupled, &obs, &kernel).unwrap();

            let loss_at = |q: &MlpParams| mmd_loss_and_grad(q, &coupled, &obs, &kernel).unwrap().0;
            let g_tensors = grads.tensors();
            let mut max_fd = 0.0f64;
            let mut fd_all: Vec<Vec<f64>> = Vec::new();
            for ti in 0..g_tensors.len() {
                let len = g_tensors[ti].len();
                let mut fd_t = vec![0.0; len];
                for k in 0..len {
                    let h = 1e-6;
                    let mut up = p.clone();
                    up.tensors_mut()[ti][k] += h;
                    let mut down = p.clone();
                    down.tensors_mut()[ti][k] -= h;
                    let fd = (loss_at(&up) - loss_at(&down)) / (2.0 * h);
                    fd_t[k] = fd;
                    max_fd = max_fd.max(fd.abs());
                }
                fd_all.push(fd_t);
            }
            for (ti, fd_t) in fd_all.iter().enumerate() {
                for (k, fd) in fd_t.iter().enumerate() {
                    let g = g_tensors[ti][k];
                    let err = (g - fd).abs() / max_fd.max(1e-12);
                    assert!(err <= 1e-4, "tensor {ti} entry {k}: grad {g} fd {fd} rel {err}");
                }
            }
        }
    }

    #[test]
    fn adamw_trivial_cases() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = MlpParams::zeros(1, 1, 2);
        p.l_out.b[0] = 1.0;
        let grads = p.zeros_like();
        let mut state = AdamWState::new(&p);
        adamw_step(&mut p, &grads, &mut state, &cfg);
        assert_eq!(p.l_out.b[0], 1.0);

        // One step with unit gradient from zero state: theta ~ 1 - lr.
        let mut p = MlpParams::zeros(1, 1, 2);
        p.l_out.b[0] = 1.0;
        let mut g = p.zeros_like();
        g.l_out.b[0] = 1.0;
        let mut state = AdamWState::new(&p);
        adamw_step(&mut p, &g, &mut state, &cfg);
        assert!((p.l_out.b[0] - 0.9).abs() < 1e-7, "{}", p.l_out.b[0]);

        // Pure decoupled decay: theta <- theta - lr wd theta.
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut p = MlpParams::zeros(1, 1, 2);
        p.l_out.b[0] = 1.0;
        let grads = p.zeros_like();
        let mut state = AdamWState::new(&p);
        adamw_step(&mut p, &grads, &mut state, &cfg);
        assert!((p.l_out.b[0] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_keep_the_prior() {
        let mut rng = RngStream::from_seed(8);
        let prior = Ensemble::gaussian(20, &[0.0], &[1.0], &mut rng).unwrap();
        let obs = ObservationModel::diag_gaussian(Arc::new(|x: &[f64]| x.to_vec()), vec![1.0]);
        let train = TrainConfig {
            iters: 0,
            ..TrainConfig::default()
        };
        // Bypass validate(): the zero-iteration behavior is exercised via
        // the detailed entry point.
        let out = tfcp_analysis_detailed(&prior, &[0.5], &obs, &train, &mut rng, None).unwrap();
        assert_eq!(out.posterior, prior);
        assert!(out.loss_history.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut rng = RngStream::from_seed(9);
            let prior = Ensemble::gaussian(40, &[0.0], &[1.0], &mut rng).unwrap();
            let obs = ObservationModel::diag_gaussian(Arc::new(|x: &[f64]| x.to_vec()), vec![1.0]);
            let train = TrainConfig {
                iters: 30,
                ..TrainConfig::default()
            };
            tfcp_analysis_detailed(&prior, &[0.8], &obs, &train, &mut rng, None).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.posterior, b.posterior);
    }

    #[test]
    fn linear_gaussian_training_approaches_kalman() {
        let mut rng = RngStream::from_seed(10);
        let prior = Ensemble::gaussian(1000, &[0.0], &[1.0], &mut rng).unwrap();
        let obs = ObservationModel::diag_gaussian(Arc::new(|x: &[f64]| x.to_vec()), vec![1.0]);
        let train = TrainConfig::default();
        let out = tfcp_analysis_detailed(&prior, &[1.0], &obs, &train, &mut rng, None).unwrap();
        let first: f64 = out.loss_history[..20.min(out.loss_history.len())].iter().sum();
        let last: f64 = out.loss_history[out.loss_history.len() - 20..].iter().sum();
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        let mean = out.posterior.mean()[0];
        assert!((mean - 0.5).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = small_net(11);
        let mut buf = Vec::new();
        p.save(&mut buf).unwrap();
        let loaded = MlpParams::load(std::io::BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(p, loaded);
    }

    #[test]
    fn scale_folding_reproduces_the_standardized_map() {
        let p = small_net(12);
        let input_scale = vec![0.5, 4.0];
        let output_scale = vec![2.0, 0.25, 10.0];
        let folded = p.fold_scales(&input_scale, &output_scale);
        let mut rng = RngStream::from_seed(13);
        for _ in 0..10 {
            let x = rng.normal_vec(2);
            let scaled_input: Vec<f64> = x.iter().zip(&input_scale).map(|(v, s)| v / s).collect();
            let direct: Vec<f64> = mlp_forward(&p, &scaled_input)
                .unwrap()
                .iter()
                .zip(&output_scale)
                .map(|(v, s)| v * s)
                .collect();
            let via_folded = mlp_forward(&folded, &x).unwrap();
            for (a, b) in direct.iter().zip(&via_folded) {
                assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
            }
        }
        let back = folded.unfold_scales(&input_scale, &output_scale);
        for (t_orig, t_back) in p.tensors().iter().zip(back.tensors()) {
            for (a, b) in t_orig.iter().zip(t_back) {
                assert!((a - b).abs() < 1e-14 * a.abs().max(1.0));
            }
        }
    }
}
