//! Conjugate updates for vector-valued leaves and the residual covariance.
//!
//! Every leaf update is a Gaussian prior `N(m0, S0)` combined with a Gaussian
//! likelihood whose information about the leaf parameter is a precision
//! contribution `Λ` and a linear term `b`:
//!
//! * prognostic leaves: `Λ = n_k Σ⁻¹`, `b = Σ⁻¹ Σ_i R_i`
//! * treatment leaves: `Λ = (Z_kᵀZ_k) ∘ Σ⁻¹`, `b = Σ_i Z_i ∘ (Σ⁻¹ R_i)`
//!
//! since a row with treatment mask `Z_i` sees the leaf through `diag(Z_i)`.
//! The posterior is `N(P⁻¹h, P⁻¹)` with `P = S0⁻¹ + Λ` and `h = S0⁻¹m0 + b`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::stats::{sample_inv_wishart, sample_mvn, SymMatrix};
use crate::trees::LeafStats;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Gaussian prior on leaf parameters.
#[derive(Debug, Clone)]
pub struct LeafPrior {
    mean: Vec<f64>,
    cov: SymMatrix,
    precision: SymMatrix,
    log_det_cov: f64,
}

impl LeafPrior {
    pub fn new(mean: Vec<f64>, cov: SymMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::Shape("leaf prior mean and covariance disagree".into()));
        }
        let precision = cov.inverse()?;
        let log_det_cov = cov.log_det()?;
        Ok(Self {
            mean,
            cov,
            precision,
            log_det_cov,
        })
    }

    /// `N(0, variance · I_p)`.
    pub fn isotropic(p: usize, variance: f64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "leaf prior variance must be positive, got {variance}"
            )));
        }
        Self::new(vec![0.0; p], SymMatrix::scaled_identity(p, variance))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &SymMatrix {
        &self.cov
    }
}

/// Residual covariance with its inverse and log-determinant cached.
#[derive(Debug, Clone)]
pub struct NoiseCov {
    cov: SymMatrix,
    precision: SymMatrix,
    log_det: f64,
}

impl NoiseCov {
    pub fn new(cov: SymMatrix) -> Result<Self> {
        let precision = cov.inverse()?;
        let log_det = cov.log_det()?;
        Ok(Self {
            cov,
            precision,
            log_det,
        })
    }

    pub fn cov(&self) -> &SymMatrix {
        &self.cov
    }

    pub fn precision(&self) -> &SymMatrix {
        &self.precision
    }

    pub fn dim(&self) -> usize {
        self.cov.dim()
    }
}

/// Which likelihood a leaf's statistics feed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafRole {
    Prognostic,
    Treatment,
}

/// Information contributed by the leaf's rows: `(Λ, b)`.
fn likelihood_terms(stats: &LeafStats, noise: &NoiseCov, role: LeafRole) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let p = noise.dim();
    if stats.dim() != p {
        return Err(Error::Shape(format!(
            "leaf statistics have dimension {} but Σ is {p}x{p}",
            stats.dim()
        )));
    }
    let prec = noise.precision();
    match role {
        LeafRole::Prognostic => {
            let lambda = prec.matrix() * stats.count as f64;
            Ok((lambda, prec.mul_vec(&stats.sum)))
        }
        LeafRole::Treatment => {
            let t = stats.treatment.as_ref().ok_or_else(|| {
                Error::Config("treatment leaf statistics lack Z cross-terms".into())
            })?;
            let lambda = DMatrix::from_fn(p, p, |a, b| t.ztz[a * p + b] * prec.get(a, b));
            let lin = (0..p)
                .map(|a| (0..p).map(|b| prec.get(a, b) * t.zr[a * p + b]).sum())
                .collect();
            Ok((lambda, lin))
        }
    }
}

struct Posterior {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    h: DVector<f64>,
}

fn posterior(stats: &LeafStats, noise: &NoiseCov, prior: &LeafPrior, role: LeafRole) -> Result<Posterior> {
    let (lambda, b) = likelihood_terms(stats, noise, role)?;
    let p0 = prior.precision.matrix();
    let p0m0 = prior.precision.mul_vec(&prior.mean);
    let precision = SymMatrix::symmetrized(p0 + lambda);
    let chol = precision
        .cholesky()
        .map_err(|_| Error::Decomposition(format!("posterior precision of a leaf with {} rows", stats.count)))?;
    let h = DVector::from_iterator(b.len(), b.iter().zip(&p0m0).map(|(x, y)| x + y));
    Ok(Posterior { chol, h })
}

fn log_marginal(stats: &LeafStats, noise: &NoiseCov, prior: &LeafPrior, role: LeafRole) -> Result<f64> {
    let p = noise.dim() as f64;
    let n = stats.count as f64;
    let post = posterior(stats, noise, prior, role)?;
    let log_det_post_prec = 2.0 * post.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let quad: f64 = {
        let pm = noise.precision();
        let d = noise.dim();
        (0..d * d).map(|k| pm.get(k / d, k % d) * stats.outer[k]).sum()
    };
    let solved = post.chol.solve(&post.h);
    let fit_term = post.h.dot(&solved);
    let prior_term = prior.precision.quad_form(&prior.mean);
    Ok(-0.5 * n * p * LN_2PI - 0.5 * n * noise.log_det - 0.5 * prior.log_det_cov - 0.5 * log_det_post_prec
        - 0.5 * quad
        - 0.5 * prior_term
        + 0.5 * fit_term)
}

/// Posterior mean and covariance of a leaf parameter.
pub fn leaf_posterior(
    stats: &LeafStats,
    noise: &NoiseCov,
    prior: &LeafPrior,
    role: LeafRole,
) -> Result<(Vec<f64>, SymMatrix)> {
    let post = posterior(stats, noise, prior, role)?;
    let mean = post.chol.solve(&post.h);
    let cov = SymMatrix::symmetrized(post.chol.inverse());
    Ok((mean.iter().copied().collect(), cov))
}

/// Log marginal likelihood of the residuals in a prognostic leaf, with the
/// leaf parameter integrated against its prior.
pub fn mu_log_marginal(stats: &LeafStats, noise: &NoiseCov, prior: &LeafPrior) -> Result<f64> {
    log_marginal(stats, noise, prior, LeafRole::Prognostic)
}

/// Log marginal likelihood of the residuals in a treatment leaf; only treated
/// components of each row carry information about the leaf.
pub fn tau_log_marginal(stats: &LeafStats, noise: &NoiseCov, prior: &LeafPrior) -> Result<f64> {
    log_marginal(stats, noise, prior, LeafRole::Treatment)
}

fn sample_leaf<R: Rng + ?Sized>(
    stats: &LeafStats,
    noise: &NoiseCov,
    prior: &LeafPrior,
    role: LeafRole,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let post = posterior(stats, noise, prior, role)?;
    let mean = post.chol.solve(&post.h);
    // x = mean + L⁻ᵀ z has covariance (L Lᵀ)⁻¹
    let p = mean.len();
    let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let lt = post.chol.l_dirty().lower_triangle().transpose();
    match lt.solve_upper_triangular(&z) {
        Some(offset) => Ok(mean.iter().zip(offset.iter()).map(|(m, o)| m + o).collect()),
        None => {
            let cov = SymMatrix::symmetrized(post.chol.inverse());
            sample_mvn(mean.as_slice(), &cov, rng)
        }
    }
}

/// Draws a prognostic leaf parameter from its conditional posterior.
pub fn sample_mu_leaf<R: Rng + ?Sized>(
    stats: &LeafStats,
    noise: &NoiseCov,
    prior: &LeafPrior,
    rng: &mut R,
) -> Result<Vec<f64>> {
    sample_leaf(stats, noise, prior, LeafRole::Prognostic, rng)
}

/// Draws a treatment leaf parameter from its conditional posterior.
pub fn sample_tau_leaf<R: Rng + ?Sized>(
    stats: &LeafStats,
    noise: &NoiseCov,
    prior: &LeafPrior,
    rng: &mut R,
) -> Result<Vec<f64>> {
    sample_leaf(stats, noise, prior, LeafRole::Treatment, rng)
}

/// Inverse-Wishart prior on the residual covariance.
#[derive(Debug, Clone)]
pub struct WishartPrior {
    pub df: f64,
    pub scale: SymMatrix,
}

/// `S = Σ_i (y_i − ŷ_i)(y_i − ŷ_i)ᵀ` from row-major `n×p` residuals.
pub fn residual_scatter(residuals: &[f64], p: usize) -> SymMatrix {
    let mut s = DMatrix::<f64>::zeros(p, p);
    for r in residuals.chunks_exact(p) {
        for a in 0..p {
            for b in 0..p {
                s[(a, b)] += r[a] * r[b];
            }
        }
    }
    SymMatrix::symmetrized(s)
}

/// Draws `Σ ~ IW(ν₀ + n, Σ₀ + S)`. `y` and `yhat` are row-major `n×p`.
pub fn update_sigma_matrix<R: Rng + ?Sized>(
    y: &[f64],
    yhat: &[f64],
    p: usize,
    prior: &WishartPrior,
    rng: &mut R,
) -> Result<SymMatrix> {
    if y.len() != yhat.len() || y.len() % p != 0 {
        return Err(Error::Shape("outcome and fitted matrices differ".into()));
    }
    let n = y.len() / p;
    if n == 0 {
        return Err(Error::EmptyInput("residual covariance update"));
    }
    let resid: Vec<f64> = y.iter().zip(yhat).map(|(a, b)| a - b).collect();
    let scatter = residual_scatter(&resid, p);
    let scale = SymMatrix::symmetrized(prior.scale.matrix() + scatter.matrix());
    let scale = if scale.is_positive_definite() {
        scale
    } else {
        let jitter = 1e-10 * scale.trace().abs().max(1e-300) / p as f64;
        let j = SymMatrix::symmetrized(scale.matrix() + DMatrix::identity(p, p) * jitter);
        if !j.is_positive_definite() {
            return Err(Error::Decomposition("inverse-Wishart posterior scale".into()));
        }
        j
    };
    sample_inv_wishart(prior.df + n as f64, &scale, rng)
}
