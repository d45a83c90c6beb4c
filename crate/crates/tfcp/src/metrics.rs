//! Evaluation metrics: time-averaged RMSE, coverage probability, and the
//! 1-Wasserstein distance against grid reference densities.

use crate::core::ensemble::Matrix;
use crate::error::{Error, Result};
use crate::models::GridPdf;

/// Per-run record of filter output against the truth path.
#[derive(Clone, Debug)]
pub struct RunRecord {
    /// Ensemble means after each analysis, T x n.
    pub means: Matrix,
    /// Ensemble covariance diagonals after each analysis, T x n.
    pub variances: Matrix,
    /// Truth states at the analysis times, T x n.
    pub truth: Matrix,
    /// Wall-clock seconds per step (forecast + analysis).
    pub step_seconds: Vec<f64>,
}

impl RunRecord {
    pub fn new(means: Matrix, variances: Matrix, truth: Matrix, step_seconds: Vec<f64>) -> Result<Self> {
        let t = means.rows();
        let n = means.cols();
        if t == 0 {
            return Err(Error::InvalidParameter("run record needs at least one step".into()));
        }
        for (m, what) in [(&variances, "variances"), (&truth, "truth")] {
            if m.rows() != t || m.cols() != n {
                return Err(Error::DimensionMismatch {
                    context: match what {
                        "variances" => "RunRecord variances",
                        _ => "RunRecord truth",
                    },
                    expected: t * n,
                    actual: m.rows() * m.cols(),
                });
            }
        }
        if step_seconds.len() != t {
            return Err(Error::DimensionMismatch {
                context: "RunRecord timings",
                expected: t,
                actual: step_seconds.len(),
            });
        }
        Ok(RunRecord {
            means,
            variances,
            truth,
            step_seconds,
        })
    }

    pub fn steps(&self) -> usize {
        self.means.rows()
    }

    pub fn state_dim(&self) -> usize {
        self.means.cols()
    }

    /// Record with the first `fraction` of the steps discarded (spin-up).
    /// At least one step is always retained.
    pub fn after_spinup(&self, fraction: f64) -> RunRecord {
        let t = self.steps();
        let skip = ((t as f64) * fraction).floor() as usize;
        let skip = skip.min(t - 1);
        let keep: Vec<usize> = (skip..t).collect();
        let take_rows = |m: &Matrix| {
            let rows: Vec<Vec<f64>> = keep.iter().map(|&i| m.row(i).to_vec()).collect();
            Matrix::from_rows(&rows).unwrap()
        };
        RunRecord {
            means: take_rows(&self.means),
            variances: take_rows(&self.variances),
            truth: take_rows(&self.truth),
            step_seconds: keep.iter().map(|&i| self.step_seconds[i]).collect(),
        }
    }

    pub fn total_seconds(&self) -> f64 {
        self.step_seconds.iter().sum()
    }
}

/// Time-averaged normalized Euclidean error:
/// `(1/T) sum_k ||mean_k - truth_k||_2 / sqrt(n)`.
pub fn rmse(rec: &RunRecord) -> f64 {
    let n = rec.state_dim() as f64;
    let t = rec.steps() as f64;
    let mut acc = 0.0;
    for k in 0..rec.steps() {
        let mut sq = 0.0;
        for (m, x) in rec.means.row(k).iter().zip(rec.truth.row(k)) {
            let d = m - x;
            sq += d * d;
        }
        acc += (sq / n).sqrt();
    }
    acc / t
}

/// Fraction of per-coordinate normalized errors within the two-sided
/// standard-normal critical value at confidence `alpha`:
/// `s = |mean - truth| / sqrt(var)`, counted over all steps and
/// coordinates. A calibrated filter yields a value close to `alpha`.
pub fn coverage_probability(rec: &RunRecord, alpha: f64) -> f64 {
    let critical = two_sided_critical(alpha);
    let mut hits = 0usize;
    let mut total = 0usize;
    for k in 0..rec.steps() {
        let means = rec.means.row(k);
        let vars = rec.variances.row(k);
        let truth = rec.truth.row(k);
        for i in 0..rec.state_dim() {
            let sd = vars[i].max(1e-12).sqrt();
            let s = (means[i] - truth[i]).abs() / sd;
            if s <= critical {
                hits += 1;
            }
            total += 1;
        }
    }
    hits as f64 / total as f64
}

/// Two-sided standard-normal critical value: `Phi^-1((1 + alpha) / 2)`.
pub fn two_sided_critical(alpha: f64) -> f64 {
    standard_normal_quantile(0.5 + 0.5 * alpha)
}

/// Inverse standard-normal CDF (Acklam's rational approximation, refined
/// with one Halley step; absolute error well below 1e-9).
pub fn standard_normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0,1), got {p}");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    };

    // One Halley refinement against the exact CDF.
    let e = 0.5 * libm_erfc(-x / std::f64::consts::SQRT_2) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

/// Standard normal CDF.
pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * libm_erfc(-x / std::f64::consts::SQRT_2)
}

// erfc via the Chebyshev-fitted expansion (Numerical Recipes erfcc),
// |error| < 1.2e-7 raw; adequate after the Halley refinement above.
fn libm_erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t * (-z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398
                                + t * (1.48851587
                                    + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// 1-Wasserstein distance between an empirical sample and a grid density:
/// the integral of |F_empirical - F_reference| with the reference CDF taken
/// piecewise-linear through its trapezoid values at the grid knots.
pub fn wasserstein1_1d(samples: &[f64], reference: &GridPdf) -> f64 {
    assert!(!samples.is_empty(), "wasserstein1_1d needs samples");
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let grid = reference.grid();
    let cdf = reference.cdf_at_grid();

    let f_ref = |x: f64| -> f64 {
        if x <= grid[0] {
            return 0.0;
        }
        if x >= *grid.last().unwrap() {
            return 1.0;
        }
        let i = grid.partition_point(|g| *g <= x) - 1;
        let w = (x - grid[i]) / (grid[i + 1] - grid[i]);
        cdf[i] + w * (cdf[i + 1] - cdf[i])
    };

    let mut breaks: Vec<f64> = Vec::with_capacity(grid.len() + sorted.len());
    breaks.extend_from_slice(grid);
    breaks.extend_from_slice(&sorted);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let n = sorted.len() as f64;
    let mut total = 0.0;
    for w in breaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let width = hi - lo;
        if width <= 0.0 {
            continue;
        }
        // F_emp is constant on [lo, hi): the fraction of samples <= lo.
        let f_emp = sorted.partition_point(|s| *s <= lo) as f64 / n;
        let d0 = f_emp - f_ref(lo);
        let d1 = f_emp - f_ref(hi);
        total += if d0 * d1 >= 0.0 {
            width * 0.5 * (d0.abs() + d1.abs())
        } else {
            // Sign change: two triangles.
            width * 0.5 * (d0 * d0 + d1 * d1) / (d0.abs() + d1.abs())
        };
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::rng::RngStream;
    use crate::models::grid::log_normal_pdf;
    use crate::models::numeric_bayes_1d;

    fn record(means: &[&[f64]], vars: &[&[f64]], truth: &[&[f64]]) -> RunRecord {
        let m = Matrix::from_rows(&means.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let v = Matrix::from_rows(&vars.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let t = Matrix::from_rows(&truth.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let k = m.rows();
        RunRecord::new(m, v, t, vec![0.0; k]).unwrap()
    }

    #[test]
    fn rmse_direct_formula() {
        let rec = record(
            &[&[1.0], &[3.0]],
            &[&[1.0], &[1.0]],
            &[&[0.0], &[0.0]],
        );
        assert!((rmse(&rec) - 2.0).abs() < 1e-15);

        let rec = record(&[&[1.0, 1.0, 1.0, 1.0]], &[&[1.0; 4]], &[&[0.0; 4]]);
        assert!((rmse(&rec) - 1.0).abs() < 1e-15);

        let rec = record(&[&[0.5, -0.5]], &[&[1.0, 1.0]], &[&[0.5, -0.5]]);
        assert_eq!(rmse(&rec), 0.0);
    }

    #[test]
    fn rmse_rotation_invariance() {
        let mut rng = RngStream::from_seed(3);
        let theta: f64 = 0.7;
        let (c, s) = (theta.cos(), theta.sin());
        let rot = |v: &[f64]| vec![c * v[0] - s * v[1], s * v[0] + c * v[1]];
        let means: Vec<Vec<f64>> = (0..10).map(|_| rng.normal_vec(2)).collect();
        let truth: Vec<Vec<f64>> = (0..10).map(|_| rng.normal_vec(2)).collect();
        let vars = vec![vec![1.0, 1.0]; 10];
        let base = record(
            &means.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
            &vars.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
            &truth.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
        );
        let means_r: Vec<Vec<f64>> = means.iter().map(|v| rot(v)).collect();
        let truth_r: Vec<Vec<f64>> = truth.iter().map(|v| rot(v)).collect();
        let rotated = record(
            &means_r.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
            &vars.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
            &truth_r.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
        );
        assert!((rmse(&base) - rmse(&rotated)).abs() < 1e-12);
    }

    #[test]
    fn critical_value_at_95_percent() {
        let t = two_sided_critical(0.95);
        assert!((t - 1.959964).abs() < 1e-4, "critical {t}");
    }

    #[test]
    fn coverage_trivial_cases() {
        let rec = record(&[&[1.0], &[2.0]], &[&[0.5], &[2.0]], &[&[1.0], &[2.0]]);
        assert_eq!(coverage_probability(&rec, 0.95), 1.0);

        // Scores identically 3 exceed the 1.96 critical value.
        let rec = record(&[&[3.0]], &[&[1.0]], &[&[0.0]]);
        assert_eq!(coverage_probability(&rec, 0.95), 0.0);
    }

    #[test]
    fn coverage_monte_carlo_calibration() {
        let mut rng = RngStream::from_seed(5);
        let t = 1000;
        let n = 100;
        let mut means = Matrix::zeros(t, n);
        for k in 0..t {
            let row = means.row_mut(k);
            for v in row.iter_mut() {
                *v = rng.normal();
            }
        }
        let vars = Matrix::from_flat(vec![1.0; t * n], t, n).unwrap();
        let truth = Matrix::zeros(t, n);
        let rec = RunRecord::new(means, vars, truth, vec![0.0; t]).unwrap();
        let cp = coverage_probability(&rec, 0.95);
        assert!((cp - 0.95).abs() < 0.01, "cp {cp}");
    }

    #[test]
    fn coverage_affine_invariance() {
        let mut rng = RngStream::from_seed(6);
        let t = 50;
        let mut means = Vec::new();
        let mut vars = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..t {
            means.push(rng.normal_vec(3));
            vars.push(vec![0.5 + rng.uniform(), 1.0, 2.0]);
            truth.push(rng.normal_vec(3));
        }
        let base = record(
            &means.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
            &vars.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
            &truth.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
        );
        let scale = [2.0, 0.5, 10.0];
        let shift = [1.0, -3.0, 0.0];
        let map = |v: &[f64]| -> Vec<f64> {
            v.iter().zip(scale).zip(shift).map(|((x, c), b)| c * x + b).collect()
        };
        let means_a: Vec<Vec<f64>> = means.iter().map(|v| map(v)).collect();
        let truth_a: Vec<Vec<f64>> = truth.iter().map(|v| map(v)).collect();
        let vars_a: Vec<Vec<f64>> = vars
            .iter()
            .map(|v| v.iter().zip(scale).map(|(x, c)| c * c * x).collect())
            .collect();
        let mapped = record(
            &means_a.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
            &vars_a.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
            &truth_a.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
        );
        assert_eq!(
            coverage_probability(&base, 0.95),
            coverage_probability(&mapped, 0.95)
        );
    }

    #[test]
    fn spinup_discards_prefix() {
        let zeros = [0.0];
        let ones = [1.0];
        let first = [10.0];
        let mut means: Vec<&[f64]> = vec![&first];
        means.extend(std::iter::repeat_n::<&[f64]>(&zeros, 9));
        let rec = record(&means, &vec![&ones as &[f64]; 10], &vec![&zeros as &[f64]; 10]);
        let trimmed = rec.after_spinup(0.1);
        assert_eq!(trimmed.steps(), 9);
        assert_eq!(rmse(&trimmed), 0.0);
    }

    #[test]
    fn wasserstein_point_masses() {
        // Reference concentrated near 1, samples all at 0: distance 1.
        let grid = vec![1.0 - 1e-6, 1.0, 1.0 + 1e-6];
        let reference = GridPdf::new(grid, vec![0.0, 1.0, 0.0]).unwrap();
        let d = wasserstein1_1d(&[0.0, 0.0, 0.0], &reference);
        assert!((d - 1.0).abs() < 1e-3, "distance {d}");
    }

    #[test]
    fn wasserstein_quantile_construction_vanishes() {
        let grid = GridPdf::uniform_grid(-8.0, 8.0, 4001);
        let reference = numeric_bayes_1d(|x| log_normal_pdf(x, 0.0, 1.0), |_| 0.0, &grid).unwrap();
        let cdf = reference.cdf_at_grid();
        let n = 512;
        let mut samples = Vec::with_capacity(n);
        for k in 0..n {
            let target = (k as f64 + 0.5) / n as f64;
            let i = cdf.partition_point(|c| *c < target).min(cdf.len() - 1);
            samples.push(reference.grid()[i]);
        }
        let d = wasserstein1_1d(&samples, &reference);
        assert!(d <= 2.0 / n as f64 * 16.0, "distance {d}");
    }

    #[test]
    fn wasserstein_standard_normal_samples() {
        let grid = GridPdf::uniform_grid(-8.0, 8.0, 4001);
        let reference = numeric_bayes_1d(|x| log_normal_pdf(x, 0.0, 1.0), |_| 0.0, &grid).unwrap();
        let mut rng = RngStream::from_seed(11);
        let samples: Vec<f64> = (0..10_000).map(|_| rng.normal()).collect();
        let d = wasserstein1_1d(&samples, &reference);
        assert!(d <= 0.02, "distance {d}");
    }
}
