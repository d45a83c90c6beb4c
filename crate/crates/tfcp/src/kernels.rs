//! Gaussian RBF kernel, bandwidth selection, the empirical squared maximum
//! mean discrepancy, and the analytic MMD steepest-descent velocity field
//! used by the gradient-flow analysis step.

use rayon::prelude::*;

use crate::core::ensemble::{CoupledSamples, Matrix};
use crate::core::rng::RngStream;
use crate::error::{Error, Result};

/// Pairwise (blocked) summation to bound floating-point error growth in the
/// long kernel reductions.
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if xs.len() <= BLOCK {
        let mut acc = 0.0;
        for x in xs {
            acc += x;
        }
        acc
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Gaussian RBF kernel `exp(-||z1 - z2||^2 / bandwidth^2)`.
pub fn rbf_kernel(z1: &[f64], z2: &[f64], bandwidth: f64) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::DimensionMismatch {
            context: "rbf_kernel",
            expected: z1.len(),
            actual: z2.len(),
        });
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidBandwidth(bandwidth));
    }
    Ok((-sq_dist(z1, z2) / (bandwidth * bandwidth)).exp())
}

/// Median of all pairwise Euclidean distances. Point clouds larger than
/// 2000 are subsampled (deterministically) before the quadratic pass.
pub fn median_bandwidth(points: &Matrix) -> Result<f64> {
    const MAX_POINTS: usize = 2000;
    if points.rows() < 2 {
        return Err(Error::InvalidParameter(
            "median bandwidth needs at least 2 points".into(),
        ));
    }
    let subset: Vec<usize> = if points.rows() > MAX_POINTS {
        let mut rng = RngStream::from_seed(0x6d65_6469_616e); // fixed: keeps the rule a pure function
        let mut idx: Vec<usize> = (0..points.rows()).collect();
        for i in 0..MAX_POINTS {
            let j = i + rng.index(idx.len() - i);
            idx.swap(i, j);
        }
        idx.truncate(MAX_POINTS);
        idx
    } else {
        (0..points.rows()).collect()
    };

    let k = subset.len();
    let mut dists = Vec::with_capacity(k * (k - 1) / 2);
    for a in 0..k {
        let ra = points.row(subset[a]);
        for b in (a + 1)..k {
            dists.push(sq_dist(ra, points.row(subset[b])).sqrt());
        }
    }
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        *dists
            .select_nth_unstable_by(mid, f64::total_cmp)
            .1
    } else {
        let hi = *dists.select_nth_unstable_by(mid, f64::total_cmp).1;
        let lo = dists[..mid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    };
    if median > 0.0 {
        return Ok(median);
    }
    // More than half the points coincide; fall back to the mean distance.
    let mean = pairwise_sum(&dists) / dists.len() as f64;
    if mean > 0.0 {
        Ok(mean)
    } else {
        Err(Error::DegeneratePointCloud)
    }
}

/// Bandwidth selection rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    MedianHeuristic,
    /// `factor` times the median pairwise distance. The plain median is too
    /// wide for sharp conditioning at moderate ensemble sizes; the MMD
    /// kernel defaults to half of it.
    ScaledMedian(f64),
}

/// Velocity-kernel bandwidth selection; by default tied to the MMD kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VelocityBandwidth {
    SameAsMmd,
    Fixed(f64),
    MedianHeuristic,
    ScaledMedian(f64),
}

/// Bandwidths for the MMD kernel and the velocity-field kernel.
#[derive(Clone, Copy, Debug)]
pub struct KernelConfig {
    pub mmd: Bandwidth,
    pub velocity: VelocityBandwidth,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            mmd: Bandwidth::ScaledMedian(0.5),
            velocity: VelocityBandwidth::ScaledMedian(1.0),
        }
    }
}

/// Concrete, validated bandwidth pair.
#[derive(Clone, Copy, Debug)]
pub struct ResolvedBandwidths {
    pub mmd: f64,
    pub velocity: f64,
}

impl ResolvedBandwidths {
    pub fn new(mmd: f64, velocity: f64) -> Result<Self> {
        for b in [mmd, velocity] {
            if !(b > 0.0) || !b.is_finite() {
                return Err(Error::InvalidBandwidth(b));
            }
        }
        Ok(ResolvedBandwidths { mmd, velocity })
    }
}

impl KernelConfig {
    /// Resolve the selection rules against a point cloud (conventionally the
    /// pooled reference-plus-independent joint samples).
    pub fn resolve(&self, pooled: &Matrix) -> Result<ResolvedBandwidths> {
        let needs_median = !matches!(self.mmd, Bandwidth::Fixed(_))
            || matches!(
                self.velocity,
                VelocityBandwidth::MedianHeuristic | VelocityBandwidth::ScaledMedian(_)
            );
        let median = if needs_median {
            median_bandwidth(pooled)?
        } else {
            f64::NAN
        };
        let mmd = match self.mmd {
            Bandwidth::Fixed(v) => v,
            Bandwidth::MedianHeuristic => median,
            Bandwidth::ScaledMedian(f) => f * median,
        };
        let velocity = match self.velocity {
            VelocityBandwidth::SameAsMmd => mmd,
            VelocityBandwidth::Fixed(v) => v,
            VelocityBandwidth::MedianHeuristic => median,
            VelocityBandwidth::ScaledMedian(f) => f * median,
        };
        ResolvedBandwidths::new(mmd, velocity)
    }
}

fn cross_sum(a: &Matrix, b: &Matrix, inv_bw2: f64) -> f64 {
    let row_sums: Vec<f64> = (0..a.rows())
        .into_par_iter()
        .map(|i| {
            let ra = a.row(i);
            let vals: Vec<f64> = (0..b.rows())
                .map(|j| (-sq_dist(ra, b.row(j)) * inv_bw2).exp())
                .collect();
            pairwise_sum(&vals)
        })
        .collect();
    pairwise_sum(&row_sums)
}

/// True when `a` precedes `b` in the canonical argument order used to make
/// the empirical MMD exactly symmetric.
fn canonical_order(a: &Matrix, b: &Matrix) -> bool {
    if a.rows() != b.rows() {
        return a.rows() < b.rows();
    }
    if a.cols() != b.cols() {
        return a.cols() < b.cols();
    }
    for (x, y) in a.data().iter().zip(b.data()) {
        if x.to_bits() != y.to_bits() {
            return x.to_bits() < y.to_bits();
        }
    }
    true
}

/// Empirical squared MMD between two sample sets (V-statistic: diagonal
/// terms included, `1/K^2` normalization). Symmetric in its arguments and
/// exactly zero when they are element-wise equal.
pub fn mmd2_empirical(a: &Matrix, b: &Matrix, bandwidth: f64) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            context: "mmd2_empirical",
            expected: a.cols(),
            actual: b.cols(),
        });
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidBandwidth(bandwidth));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::InvalidParameter("mmd2_empirical needs nonempty sample sets".into()));
    }
    let (p, q) = if canonical_order(a, b) { (a, b) } else { (b, a) };
    let inv_bw2 = 1.0 / (bandwidth * bandwidth);
    let kp = p.rows() as f64;
    let kq = q.rows() as f64;
    let t_pp = cross_sum(p, p, inv_bw2) / (kp * kp);
    let t_qq = cross_sum(q, q, inv_bw2) / (kq * kq);
    let t_pq = cross_sum(p, q, inv_bw2) / (kp * kq);
    Ok(t_pp + t_qq - 2.0 * t_pq)
}

/// The MMD steepest-descent directions evaluated at a set of query points.
/// Row `q` holds `-grad_x MMD^2` at query `q`, state block only (the
/// observation block of the flow is frozen, its velocity is identically
/// zero).
#[derive(Clone, Debug)]
pub struct VelocityField {
    values: Matrix,
}

impl VelocityField {
    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn row(&self, q: usize) -> &[f64] {
        self.values.row(q)
    }

    pub fn state_dim(&self) -> usize {
        self.values.cols()
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn max_norm(&self) -> f64 {
        self.values
            .iter_rows()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Full kernel matrices between the moving independent-coupling samples and
/// the frozen reference samples, with their sums. One instance per flow
/// position; the gradient, the velocity fold and the MMD value all read
/// from it.
pub(crate) struct KernelTables {
    /// k(tilde_i, tilde_j), row-major N x N.
    pub ktt: Vec<f64>,
    /// k(tilde_i, ref_j), row-major N x N.
    pub ktr: Vec<f64>,
    pub n: usize,
}

impl KernelTables {
    pub fn build(tilde: &Matrix, reference: &Matrix, bw_mmd: f64) -> Self {
        let n = tilde.rows();
        let inv_bw2 = 1.0 / (bw_mmd * bw_mmd);
        // The tilde-tilde table is symmetric with a unit diagonal; compute
        // the upper triangle only.
        let mut ktt = vec![0.0; n * n];
        ktt.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let ri = tilde.row(i);
            row[i] = 1.0;
            for (j, slot) in row.iter_mut().enumerate().skip(i + 1) {
                *slot = (-sq_dist(ri, tilde.row(j)) * inv_bw2).exp();
            }
        });
        for i in 0..n {
            for j in 0..i {
                ktt[i * n + j] = ktt[j * n + i];
            }
        }
        let mut ktr = vec![0.0; n * reference.rows()];
        ktr.par_chunks_mut(reference.rows())
            .enumerate()
            .for_each(|(i, row)| {
                let ri = tilde.row(i);
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = (-sq_dist(ri, reference.row(j)) * inv_bw2).exp();
                }
            });
        KernelTables { ktt, ktr, n }
    }

    /// MMD^2 between the tilde set and the reference set, given the
    /// reference self-term `sum_ij k(ref_i, ref_j)`.
    pub fn mmd2(&self, ref_self_sum: f64, m_ref: usize) -> f64 {
        let n2 = (self.n * self.n) as f64;
        let tt = pairwise_sum(&self.ktt) / n2;
        let tr = pairwise_sum(&self.ktr) / (self.n as f64 * m_ref as f64);
        let rr = ref_self_sum / (m_ref * m_ref) as f64;
        tt - 2.0 * tr + rr
    }
}

/// Sum of all kernel evaluations of a set against itself, accumulated in
/// the same flat order as [`KernelTables`] sums so that matched sets cancel
/// exactly in the MMD.
pub(crate) fn kernel_self_sum(points: &Matrix, bw: f64) -> f64 {
    let tables = KernelTables::build(points, points, bw);
    pairwise_sum(&tables.ktt)
}

/// Per-particle Euclidean gradient of the empirical MMD^2 with respect to
/// the state block of each tilde sample:
/// `G_i = (4 / (bw^2 N M)) [ sum_j ktr_ij (x~_i - xbar_j)
///                         - (M/N) sum_j ktt_ij (x~_i - x~_j) ]`
/// with N = M in the equal-size case used by the filters.
pub(crate) fn per_particle_gradient(
    tilde: &Matrix,
    reference: &Matrix,
    tables: &KernelTables,
    bw_mmd: f64,
    state_dim: usize,
) -> Matrix {
    let n = tilde.rows();
    let m = reference.rows();
    let coef_tt = 4.0 / (bw_mmd * bw_mmd * (n * n) as f64);
    let coef_tr = 4.0 / (bw_mmd * bw_mmd * (n * m) as f64);
    let mut grad = Matrix::zeros(n, state_dim);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = tilde.row(i);
            let ktt_row = &tables.ktt[i * n..(i + 1) * n];
            let ktr_row = &tables.ktr[i * m..(i + 1) * m];
            let mut out = vec![0.0; state_dim];
            let mut scratch = vec![0.0; n.max(m)];
            for (c, slot) in out.iter_mut().enumerate() {
                for j in 0..m {
                    scratch[j] = ktr_row[j] * (xi[c] - reference.row(j)[c]);
                }
                let attract = pairwise_sum(&scratch[..m]);
                for j in 0..n {
                    scratch[j] = ktt_row[j] * (xi[c] - tilde.row(j)[c]);
                }
                let repulse = pairwise_sum(&scratch[..n]);
                *slot = coef_tr * attract - coef_tt * repulse;
            }
            out
        })
        .collect();
    for (i, row) in rows.into_iter().enumerate() {
        grad.row_mut(i).copy_from_slice(&row);
    }
    grad
}

/// Smooth the per-particle gradients into a velocity field at the query
/// points: `v(z_q) = - sum_i k_gamma(tilde_i, z_q) G_i`.
pub(crate) fn fold_velocity(
    queries: &Matrix,
    tilde: &Matrix,
    grad: &Matrix,
    bw_velocity: f64,
) -> Matrix {
    let n = tilde.rows();
    let state_dim = grad.cols();
    let inv_g2 = 1.0 / (bw_velocity * bw_velocity);
    let mut out = Matrix::zeros(queries.rows(), state_dim);
    let rows: Vec<Vec<f64>> = (0..queries.rows())
        .into_par_iter()
        .map(|q| {
            let zq = queries.row(q);
            let weights: Vec<f64> = (0..n)
                .map(|i| (-sq_dist(tilde.row(i), zq) * inv_g2).exp())
                .collect();
            let mut v = vec![0.0; state_dim];
            let mut scratch = vec![0.0; n];
            for (c, slot) in v.iter_mut().enumerate() {
                for i in 0..n {
                    scratch[i] = weights[i] * grad.row(i)[c];
                }
                *slot = -pairwise_sum(&scratch);
            }
            v
        })
        .collect();
    for (q, row) in rows.into_iter().enumerate() {
        out.row_mut(q).copy_from_slice(&row);
    }
    out
}

/// Analytic MMD steepest-descent velocity at each query point, computed
/// from the independent-coupling samples (`coupled.z_tilde`) and the
/// reference coupling (`coupled.z`) with Monte-Carlo double sums.
pub fn mmd_velocity(
    queries: &Matrix,
    coupled: &CoupledSamples,
    bandwidths: &ResolvedBandwidths,
) -> Result<VelocityField> {
    velocity_between(
        queries,
        coupled.z_tilde(),
        coupled.z(),
        coupled.state_dim(),
        bandwidths,
    )
}

/// [`mmd_velocity`] on raw sample sets: `tilde` is the moving
/// independent-coupling set, `reference` the frozen joint coupling.
pub fn velocity_between(
    queries: &Matrix,
    tilde: &Matrix,
    reference: &Matrix,
    state_dim: usize,
    bandwidths: &ResolvedBandwidths,
) -> Result<VelocityField> {
    let joint = tilde.cols();
    if reference.cols() != joint {
        return Err(Error::DimensionMismatch {
            context: "velocity sample sets",
            expected: joint,
            actual: reference.cols(),
        });
    }
    if queries.cols() != joint {
        return Err(Error::DimensionMismatch {
            context: "velocity queries",
            expected: joint,
            actual: queries.cols(),
        });
    }
    if state_dim == 0 || state_dim > joint {
        return Err(Error::InvalidParameter(format!(
            "state dimension {state_dim} incompatible with joint dimension {joint}"
        )));
    }
    let tables = KernelTables::build(tilde, reference, bandwidths.mmd);
    let grad = per_particle_gradient(tilde, reference, &tables, bandwidths.mmd, state_dim);
    let values = fold_velocity(queries, tilde, &grad, bandwidths.velocity);
    Ok(VelocityField { values })
}

/// Per-dimension affine standardization fitted on a point cloud. State and
/// observation coordinates can live on wildly different scales; isotropic
/// kernels are applied in standardized coordinates and displacements mapped
/// back through the same scaling.
#[derive(Clone, Debug)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    const MIN_SCALE: f64 = 1e-8;

    pub fn fit(points: &Matrix) -> Self {
        let mean = points.col_means();
        let scale = points
            .col_stds()
            .into_iter()
            .map(|s| s.max(Self::MIN_SCALE))
            .collect();
        Standardizer { mean, scale }
    }

    pub fn fit_pooled(a: &Matrix, b: &Matrix) -> Result<Self> {
        Ok(Standardizer::fit(&Matrix::vcat(a, b)?))
    }

    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn invert_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((u, m), s)| m + s * u)
            .collect()
    }

    pub fn apply_matrix(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for ((v, mu), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - mu) / s;
            }
        }
        out
    }

    pub fn invert_matrix(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for ((v, mu), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = mu + s * *v;
            }
        }
        out
    }

    /// Restriction to a coordinate range (e.g. the state block of a joint
    /// standardizer).
    pub fn restrict(&self, range: std::ops::Range<usize>) -> Standardizer {
        Standardizer {
            mean: self.mean[range.clone()].to_vec(),
            scale: self.scale[range].to_vec(),
        }
    }
}
