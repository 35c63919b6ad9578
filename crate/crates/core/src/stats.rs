//! Small dense linear algebra and sampling primitives shared by every sampler,
//! plus the empirical CRPS.
//!
//! Matrices here are tiny (the outcome dimension, usually 1 to 3), so the
//! routines favour clarity over blocking or SIMD.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;

/// Dense symmetric matrix used for covariances and precisions.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps `m` after checking that it is square and symmetric to within
    /// `1e-12` relative to its largest entry. The stored matrix is exactly
    /// symmetrised.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::Shape(format!(
                "symmetric matrix must be square and nonempty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1.0);
        for i in 0..m.nrows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::Shape(format!("matrix not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self::symmetrized(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("rows must form a square matrix".into()));
        }
        Self::new(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(DMatrix::identity(dim, dim))
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        SymMatrix(DMatrix::identity(dim, dim) * scale)
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix(DMatrix::zeros(dim, dim))
    }

    /// Averages `m` with its transpose, removing rounding asymmetry.
    pub(crate) fn symmetrized(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        SymMatrix((m + t) * 0.5)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Row-major entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        let p = self.dim();
        (0..p * p).map(|k| self.0[(k / p, k % p)]).collect()
    }

    pub fn from_row_major(dim: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::Shape(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                entries.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.0.clone())
            .ok_or_else(|| Error::Decomposition(format!("{}x{} matrix", self.dim(), self.dim())))
    }

    pub fn is_positive_definite(&self) -> bool {
        Cholesky::new(self.0.clone()).is_some()
    }

    pub fn inverse(&self) -> Result<SymMatrix> {
        Ok(Self::symmetrized(self.cholesky()?.inverse()))
    }

    pub fn log_det(&self) -> Result<f64> {
        let l = self.cholesky()?;
        Ok(2.0 * l.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    }

    /// `x' A x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let p = self.dim();
        let mut acc = 0.0;
        for i in 0..p {
            for j in 0..p {
                acc += x[i] * self.0[(i, j)] * x[j];
            }
        }
        acc
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let p = self.dim();
        (0..p)
            .map(|i| (0..p).map(|j| self.0[(i, j)] * x[j]).sum())
            .collect()
    }
}

/// Draws from `N(mean, cov)`.
///
/// A zero covariance returns `mean`. If the Cholesky factorisation fails the
/// diagonal is jittered by `1e-10 * trace / dim` and the factorisation is
/// retried once.
pub fn sample_mvn<R: Rng + ?Sized>(mean: &[f64], cov: &SymMatrix, rng: &mut R) -> Result<Vec<f64>> {
    let p = cov.dim();
    if mean.len() != p {
        return Err(Error::Shape(format!(
            "mean has length {} but covariance is {p}x{p}",
            mean.len()
        )));
    }
    if cov.matrix().iter().all(|v| *v == 0.0) {
        return Ok(mean.to_vec());
    }
    let chol = match Cholesky::new(cov.matrix().clone()) {
        Some(c) => c,
        None => {
            let jitter = 1e-10 * cov.trace() / p as f64;
            let jittered = cov.matrix() + DMatrix::identity(p, p) * jitter;
            Cholesky::new(jittered).ok_or_else(|| {
                Error::Decomposition(format!("MVN covariance {:?}", cov.to_row_major()))
            })?
        }
    };
    let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let lz = chol.l_dirty().lower_triangle() * z;
    Ok(mean.iter().zip(lz.iter()).map(|(m, v)| m + v).collect())
}

/// Draws from Gamma(shape, rate) with mean `shape / rate`.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "gamma requires positive shape and rate, got ({shape}, {rate})"
        )));
    }
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::InvalidParameter(format!("gamma({shape}, {rate}): {e}")))?;
    // Guard the support against underflow for tiny shapes.
    Ok(g.sample(rng).max(f64::MIN_POSITIVE))
}

/// Draws from the Inverse-Wishart with `df` degrees of freedom and scale
/// matrix `scale` (mean `scale / (df - dim - 1)`).
///
/// A Wishart(df, scale⁻¹) matrix is built with the Bartlett decomposition and
/// inverted.
pub fn sample_inv_wishart<R: Rng + ?Sized>(
    df: f64,
    scale: &SymMatrix,
    rng: &mut R,
) -> Result<SymMatrix> {
    let p = scale.dim();
    if !(df > (p as f64) - 1.0) {
        return Err(Error::DegreesOfFreedom { df, dim: p });
    }
    let precision = scale
        .inverse()
        .map_err(|_| Error::Decomposition("inverse-Wishart scale".into()))?;
    let l = precision
        .cholesky()
        .map_err(|_| Error::Decomposition("inverse-Wishart scale inverse".into()))?
        .l();
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        // chi-square with (df - i) degrees of freedom
        let chi2 = 2.0 * sample_gamma((df - i as f64) / 2.0, 1.0, rng)?;
        a[(i, i)] = chi2.sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = l * a;
    let wishart = SymMatrix::symmetrized(&la * la.transpose());
    wishart
        .inverse()
        .map_err(|_| Error::Decomposition("Wishart draw".into()))
}

/// Empirical CRPS of a sample against an observation:
/// `mean|X_i - y| - 0.5 * mean_{i,j}|X_i - X_j|`, the pair mean running over
/// all ordered pairs.
pub fn crps_empirical(draws: &[f64], observed: f64) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::EmptyInput("CRPS sample"));
    }
    let m = draws.len() as f64;
    let abs_err = draws.iter().map(|x| (x - observed).abs()).sum::<f64>() / m;
    let mut pair = 0.0;
    for (i, xi) in draws.iter().enumerate() {
        for xj in &draws[i + 1..] {
            pair += (xi - xj).abs();
        }
    }
    // each unordered pair appears twice among the m² ordered pairs
    let spread = 2.0 * pair / (m * m);
    Ok((abs_err - 0.5 * spread).max(0.0))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Draws from N(mean, 1) truncated to `(0, ∞)` when `positive`, otherwise to
/// `(-∞, 0]`.
pub fn sample_truncated_unit_normal<R: Rng + ?Sized>(mean: f64, positive: bool, rng: &mut R) -> f64 {
    // Reflect so the draw is always from N(m, 1) restricted to x > 0.
    let m = if positive { mean } else { -mean };
    let lower = -m; // standardised truncation point for x - m
    let z = if lower <= 0.0 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z > lower {
                break z;
            }
        }
    } else {
        // exponential proposal for the far tail
        let rate = (lower + (lower * lower + 4.0).sqrt()) / 2.0;
        loop {
            let u: f64 = rng.random::<f64>();
            let z = lower - (1.0 - u).ln() / rate;
            let accept = (-(z - rate).powi(2) / 2.0).exp();
            if rng.random::<f64>() <= accept {
                break z;
            }
        }
    };
    let x = m + z;
    if positive {
        x
    } else {
        -x
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (denominator `n - 1`).
pub fn sd(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Linear-interpolation quantile of an ascending-sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Equal-tailed interval at `level` (e.g. 0.95).
pub fn equal_tailed_interval(draws: &[f64], level: f64) -> (f64, f64) {
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let tail = (1.0 - level) / 2.0;
    (quantile_sorted(&sorted, tail), quantile_sorted(&sorted, 1.0 - tail))
}
