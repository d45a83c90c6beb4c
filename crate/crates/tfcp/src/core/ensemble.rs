//! Ensemble and coupled-sample containers.

use crate::error::{Error, Result};

/// Dense row-major matrix of f64. Rows are samples/members, columns are
/// coordinates. Deliberately minimal: just what the filters need.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn from_flat(data: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "Matrix::from_flat",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Matrix { data, rows, cols })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::DimensionMismatch {
                    context: "Matrix::from_rows",
                    expected: c,
                    actual: rows[i].len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { data, rows: r, cols: c })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-column mean.
    pub fn col_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / self.rows as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }

    /// Per-column population standard deviation (divisor K).
    pub fn col_stds(&self) -> Vec<f64> {
        let means = self.col_means();
        let mut out = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for ((o, v), m) in out.iter_mut().zip(row).zip(&means) {
                let d = v - m;
                *o += d * d;
            }
        }
        let inv = 1.0 / self.rows as f64;
        out.iter_mut().for_each(|v| *v = (*v * inv).sqrt());
        out
    }

    /// New matrix whose row i is `self.row(perm[i])`.
    pub fn permuted(&self, perm: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(p));
        }
        out
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn hcat(left: &Matrix, right: &Matrix) -> Result<Matrix> {
        if left.rows != right.rows {
            return Err(Error::DimensionMismatch {
                context: "Matrix::hcat",
                expected: left.rows,
                actual: right.rows,
            });
        }
        let mut out = Matrix::zeros(left.rows, left.cols + right.cols);
        for i in 0..left.rows {
            out.row_mut(i)[..left.cols].copy_from_slice(left.row(i));
            out.row_mut(i)[left.cols..].copy_from_slice(right.row(i));
        }
        Ok(out)
    }

    /// Vertical concatenation.
    pub fn vcat(top: &Matrix, bottom: &Matrix) -> Result<Matrix> {
        if top.cols != bottom.cols {
            return Err(Error::DimensionMismatch {
                context: "Matrix::vcat",
                expected: top.cols,
                actual: bottom.cols,
            });
        }
        let mut data = top.data.clone();
        data.extend_from_slice(&bottom.data);
        Ok(Matrix {
            data,
            rows: top.rows + bottom.rows,
            cols: top.cols,
        })
    }

    /// Columns of this matrix restricted to `idx`, in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            let src = self.row(i);
            let dst = out.row_mut(i);
            for (k, &j) in idx.iter().enumerate() {
                dst[k] = src[j];
            }
        }
        out
    }
}

/// An ensemble of N state vectors of dimension n, stored row-major.
///
/// Invariants: N >= 2 (empirical MMD and covariances need at least two
/// members) and every entry finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    members: Matrix,
}

impl Ensemble {
    pub fn new(members: Matrix) -> Result<Self> {
        if members.rows() < 2 {
            return Err(Error::EnsembleTooSmall {
                min: 2,
                got: members.rows(),
            });
        }
        if !members.is_finite() {
            return Err(Error::NonFinite("ensemble members".into()));
        }
        Ok(Ensemble { members })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Ensemble::new(Matrix::from_rows(rows)?)
    }

    /// N iid Gaussian members with per-dimension mean and std.
    pub fn gaussian(
        n_members: usize,
        mean: &[f64],
        std: &[f64],
        rng: &mut super::rng::RngStream,
    ) -> Result<Self> {
        let dim = mean.len();
        if std.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "Ensemble::gaussian",
                expected: dim,
                actual: std.len(),
            });
        }
        let mut m = Matrix::zeros(n_members, dim);
        for i in 0..n_members {
            let row = m.row_mut(i);
            for d in 0..dim {
                row[d] = mean[d] + std[d] * rng.normal();
            }
        }
        Ensemble::new(m)
    }

    /// Number of members N.
    pub fn size(&self) -> usize {
        self.members.rows()
    }

    /// State dimension n.
    pub fn dim(&self) -> usize {
        self.members.cols()
    }

    pub fn member(&self, i: usize) -> &[f64] {
        self.members.row(i)
    }

    pub fn member_mut(&mut self, i: usize) -> &mut [f64] {
        self.members.row_mut(i)
    }

    pub fn members(&self) -> &Matrix {
        &self.members
    }

    pub fn into_matrix(self) -> Matrix {
        self.members
    }

    pub fn mean(&self) -> Vec<f64> {
        self.members.col_means()
    }

    /// Per-dimension sample variance (divisor N-1).
    pub fn variance_diag(&self) -> Vec<f64> {
        let means = self.mean();
        let n = self.size();
        let mut out = vec![0.0; self.dim()];
        for row in self.members.iter_rows() {
            for ((o, v), m) in out.iter_mut().zip(row).zip(&means) {
                let d = v - m;
                *o += d * d;
            }
        }
        let inv = 1.0 / (n as f64 - 1.0);
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }

    pub fn permuted(&self, perm: &[usize]) -> Ensemble {
        Ensemble {
            members: self.members.permuted(perm),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.members.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("ensemble members".into()))
        }
    }
}

/// The three joint sample sets used by coupling-based analysis steps.
///
/// `z = (X, Y)` pairs each state with its own simulated observation,
/// `z_bar = (X_bar, Y_bar)` is the image of `z` under a random member
/// permutation, and `z_tilde = (X, Y_bar)` pairs the unpermuted states
/// with the permuted observations, giving samples from the product of the
/// two marginals.
#[derive(Clone, Debug)]
pub struct CoupledSamples {
    z: Matrix,
    z_bar: Matrix,
    z_tilde: Matrix,
    state_dim: usize,
    obs_dim: usize,
}

impl CoupledSamples {
    pub fn new(z: Matrix, z_bar: Matrix, z_tilde: Matrix, state_dim: usize, obs_dim: usize) -> Result<Self> {
        let joint = state_dim + obs_dim;
        for (m, name) in [(&z, "z"), (&z_bar, "z_bar"), (&z_tilde, "z_tilde")] {
            if m.cols() != joint {
                return Err(Error::DimensionMismatch {
                    context: "CoupledSamples joint dimension",
                    expected: joint,
                    actual: m.cols(),
                });
            }
            if m.rows() != z.rows() {
                return Err(Error::DimensionMismatch {
                    context: "CoupledSamples sample count",
                    expected: z.rows(),
                    actual: m.rows(),
                });
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("coupled samples ({name})")));
            }
        }
        // Construction identity: z_tilde = (states of z, observations of z_bar).
        for i in 0..z.rows() {
            if z_tilde.row(i)[..state_dim] != z.row(i)[..state_dim] {
                return Err(Error::InvalidParameter(
                    "z_tilde state block must equal the z state block".into(),
                ));
            }
            if z_tilde.row(i)[state_dim..] != z_bar.row(i)[state_dim..] {
                return Err(Error::InvalidParameter(
                    "z_tilde observation block must equal the z_bar observation block".into(),
                ));
            }
        }
        Ok(CoupledSamples {
            z,
            z_bar,
            z_tilde,
            state_dim,
            obs_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn joint_dim(&self) -> usize {
        self.state_dim + self.obs_dim
    }

    /// Reference coupling samples (X, Y).
    pub fn z(&self) -> &Matrix {
        &self.z
    }

    /// Shuffled copy (X_bar, Y_bar).
    pub fn z_bar(&self) -> &Matrix {
        &self.z_bar
    }

    /// Independent coupling samples (X, Y_bar).
    pub fn z_tilde(&self) -> &Matrix {
        &self.z_tilde
    }
}

/// Simulate observations for every member, shuffle a copy, and assemble the
/// reference and independent couplings.
pub fn make_coupled_samples(
    prior: &Ensemble,
    obs: &super::model::ObservationModel,
    rng: &mut super::rng::RngStream,
) -> Result<CoupledSamples> {
    let n = prior.size();
    let mut noise_rng = rng.derive(&[super::rng::domain::OBS_NOISE]);
    let mut shuffle_rng = rng.derive(&[super::rng::domain::SHUFFLE]);
    let perm = shuffle_rng.permutation(n);
    make_coupled_samples_with_permutation(prior, obs, &mut noise_rng, &perm)
}

/// Same as [`make_coupled_samples`] but with an explicit permutation.
/// Used by tests (identity/swap permutations) and by callers that need to
/// freeze the shuffle.
pub fn make_coupled_samples_with_permutation(
    prior: &Ensemble,
    obs: &super::model::ObservationModel,
    noise_rng: &mut super::rng::RngStream,
    perm: &[usize],
) -> Result<CoupledSamples> {
    let n = prior.size();
    if perm.len() != n {
        return Err(Error::DimensionMismatch {
            context: "make_coupled_samples permutation",
            expected: n,
            actual: perm.len(),
        });
    }
    let state_dim = prior.dim();
    let obs_dim = obs.obs_dim();

    let mut sim_obs = Matrix::zeros(n, obs_dim);
    for i in 0..n {
        let y = obs.observe(prior.member(i), noise_rng)?;
        sim_obs.row_mut(i).copy_from_slice(&y);
    }

    let z = Matrix::hcat(prior.members(), &sim_obs)?;
    let z_bar = z.permuted(perm);
    let obs_bar = sim_obs.permuted(perm);
    let z_tilde = Matrix::hcat(prior.members(), &obs_bar)?;
    CoupledSamples::new(z, z_bar, z_tilde, state_dim, obs_dim)
}

/// Build the couplings from two independently simulated forecast ensembles
/// instead of shuffling one. The second ensemble supplies `(X_bar, Y_bar)`.
pub fn make_coupled_samples_independent(
    prior: &Ensemble,
    second: &Ensemble,
    obs: &super::model::ObservationModel,
    rng: &mut super::rng::RngStream,
) -> Result<CoupledSamples> {
    if second.size() != prior.size() || second.dim() != prior.dim() {
        return Err(Error::DimensionMismatch {
            context: "make_coupled_samples_independent",
            expected: prior.size(),
            actual: second.size(),
        });
    }
    let n = prior.size();
    let obs_dim = obs.obs_dim();
    let mut noise_rng = rng.derive(&[super::rng::domain::OBS_NOISE]);

    let mut y = Matrix::zeros(n, obs_dim);
    let mut y_bar = Matrix::zeros(n, obs_dim);
    for i in 0..n {
        y.row_mut(i).copy_from_slice(&obs.observe(prior.member(i), &mut noise_rng)?);
    }
    for i in 0..n {
        y_bar
            .row_mut(i)
            .copy_from_slice(&obs.observe(second.member(i), &mut noise_rng)?);
    }
    let z = Matrix::hcat(prior.members(), &y)?;
    let z_bar = Matrix::hcat(second.members(), &y_bar)?;
    let z_tilde = Matrix::hcat(prior.members(), &y_bar)?;
    CoupledSamples::new(z, z_bar, z_tilde, prior.dim(), obs_dim)
}
