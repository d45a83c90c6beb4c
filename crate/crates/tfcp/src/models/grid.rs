//! Grid-based reference posteriors computed directly from Bayes' rule.
//! These serve as independent oracles for the sampling-based filters.

use crate::core::ensemble::Matrix;
use crate::core::rng::RngStream;
use crate::error::{Error, Result};

/// How small the boundary density must be, relative to the peak, for a grid
/// to be considered wide enough.
const BOUNDARY_MASS_RATIO: f64 = 1e-10;

/// A normalized one-dimensional density tabulated on a strictly increasing
/// grid. The trapezoid integral of `density` over `grid` is 1.
#[derive(Clone, Debug)]
pub struct GridPdf {
    grid: Vec<f64>,
    density: Vec<f64>,
}

impl GridPdf {
    pub fn new(grid: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        if grid.len() != density.len() || grid.len() < 2 {
            return Err(Error::InvalidParameter(
                "grid and density must have equal length >= 2".into(),
            ));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("grid must be strictly increasing".into()));
        }
        if density.iter().any(|d| *d < 0.0 || !d.is_finite()) {
            return Err(Error::InvalidParameter("density must be nonnegative and finite".into()));
        }
        let mut pdf = GridPdf { grid, density };
        let z = pdf.trapezoid_integral();
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::InvalidParameter("density integrates to zero".into()));
        }
        pdf.density.iter_mut().for_each(|d| *d /= z);
        Ok(pdf)
    }

    pub fn uniform_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
        (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect()
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    fn trapezoid_integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, d)| 0.5 * (x[1] - x[0]) * (d[0] + d[1]))
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, d)| 0.5 * (x[1] - x[0]) * (x[0] * d[0] + x[1] * d[1]))
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, d)| {
                let a = (x[0] - m) * (x[0] - m) * d[0];
                let b = (x[1] - m) * (x[1] - m) * d[1];
                0.5 * (x[1] - x[0]) * (a + b)
            })
            .sum()
    }

    /// Trapezoid CDF evaluated at the grid points; starts at 0, ends at 1.
    pub fn cdf_at_grid(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grid.len());
        let mut acc = 0.0;
        out.push(0.0);
        for i in 1..self.grid.len() {
            acc += 0.5 * (self.grid[i] - self.grid[i - 1]) * (self.density[i] + self.density[i - 1]);
            out.push(acc.min(1.0));
        }
        out
    }

    /// Number of interior local maxima of the tabulated density.
    pub fn local_maxima_count(&self) -> usize {
        let d = &self.density;
        let eps = 1e-12 * d.iter().cloned().fold(0.0, f64::max);
        let mut count = 0;
        for i in 1..d.len() - 1 {
            if d[i] > d[i - 1] + eps && d[i] > d[i + 1] + eps {
                count += 1;
            }
        }
        count
    }

    /// Inverse-CDF draw.
    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        let cdf = self.cdf_at_grid();
        let u = rng.uniform();
        match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) => self.grid[i],
            Err(i) => {
                if i == 0 {
                    self.grid[0]
                } else if i >= self.grid.len() {
                    *self.grid.last().unwrap()
                } else {
                    let (c0, c1) = (cdf[i - 1], cdf[i]);
                    let w = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
                    self.grid[i - 1] + w * (self.grid[i] - self.grid[i - 1])
                }
            }
        }
    }
}

/// Pointwise Bayes' rule on a grid: posterior ~ exp(prior log-pdf +
/// log-likelihood), normalized by the trapezoid rule. The grid must be wide
/// enough that the boundary density is negligible.
pub fn numeric_bayes_1d<P, L>(prior_logpdf: P, log_likelihood: L, grid: &[f64]) -> Result<GridPdf>
where
    P: Fn(f64) -> f64,
    L: Fn(f64) -> f64,
{
    if grid.len() < 2 {
        return Err(Error::InvalidParameter("grid must have at least 2 points".into()));
    }
    let log_post: Vec<f64> = grid.iter().map(|&x| prior_logpdf(x) + log_likelihood(x)).collect();
    let max = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("log posterior on grid".into()));
    }
    let density: Vec<f64> = log_post.iter().map(|l| (l - max).exp()).collect();
    let boundary = density[0].max(*density.last().unwrap());
    if boundary >= BOUNDARY_MASS_RATIO {
        return Err(Error::GridTooSmall(boundary));
    }
    GridPdf::new(grid.to_vec(), density)
}

/// A normalized density on a 2-d tensor grid, row i = xs[i], column j =
/// ys[j].
#[derive(Clone, Debug)]
pub struct GridPdf2 {
    xs: Vec<f64>,
    ys: Vec<f64>,
    density: Matrix,
}

impl GridPdf2 {
    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn density(&self) -> &Matrix {
        &self.density
    }

    fn cell_area(&self) -> f64 {
        let dx = self.xs[1] - self.xs[0];
        let dy = self.ys[1] - self.ys[0];
        dx * dy
    }

    /// Density level whose superlevel set contains the requested mass.
    pub fn hpd_level(&self, mass: f64) -> f64 {
        let mut values: Vec<f64> = self.density.data().to_vec();
        values.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let area = self.cell_area();
        let mut acc = 0.0;
        for v in &values {
            acc += v * area;
            if acc >= mass {
                return *v;
            }
        }
        0.0
    }

    /// Nearest-cell density lookup; zero outside the grid.
    pub fn density_at(&self, x: f64, y: f64) -> f64 {
        let locate = |grid: &[f64], v: f64| -> Option<usize> {
            if v < grid[0] || v > *grid.last().unwrap() {
                return None;
            }
            let step = grid[1] - grid[0];
            let i = ((v - grid[0]) / step).round() as usize;
            Some(i.min(grid.len() - 1))
        };
        match (locate(&self.xs, x), locate(&self.ys, y)) {
            (Some(i), Some(j)) => self.density.row(i)[j],
            _ => 0.0,
        }
    }
}

/// Two-dimensional grid Bayes' rule on a regular tensor grid.
pub fn numeric_bayes_2d<P, L>(
    prior_logpdf: P,
    log_likelihood: L,
    xs: &[f64],
    ys: &[f64],
) -> Result<GridPdf2>
where
    P: Fn(f64, f64) -> f64,
    L: Fn(f64, f64) -> f64,
{
    if xs.len() < 2 || ys.len() < 2 {
        return Err(Error::InvalidParameter("2-d grid needs at least 2x2 points".into()));
    }
    let mut log_post = Matrix::zeros(xs.len(), ys.len());
    let mut max = f64::NEG_INFINITY;
    for (i, &x) in xs.iter().enumerate() {
        let row = log_post.row_mut(i);
        for (j, &y) in ys.iter().enumerate() {
            let l = prior_logpdf(x, y) + log_likelihood(x, y);
            row[j] = l;
            if l > max {
                max = l;
            }
        }
    }
    if !max.is_finite() {
        return Err(Error::NonFinite("log posterior on grid".into()));
    }
    let mut density = Matrix::zeros(xs.len(), ys.len());
    let mut boundary: f64 = 0.0;
    let mut total = 0.0;
    let (nx, ny) = (xs.len(), ys.len());
    for i in 0..nx {
        for j in 0..ny {
            let v = (log_post.row(i)[j] - max).exp();
            density.row_mut(i)[j] = v;
            total += v;
            if i == 0 || j == 0 || i == nx - 1 || j == ny - 1 {
                boundary = boundary.max(v);
            }
        }
    }
    if boundary >= BOUNDARY_MASS_RATIO {
        return Err(Error::GridTooSmall(boundary));
    }
    let area = (xs[1] - xs[0]) * (ys[1] - ys[0]);
    let z = total * area;
    density.data_mut().iter_mut().for_each(|v| *v /= z);
    Ok(GridPdf2 {
        xs: xs.to_vec(),
        ys: ys.to_vec(),
        density,
    })
}

/// Log-density of N(mean, var) at x.
pub fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * d * d / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
}
