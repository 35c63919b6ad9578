//! Interchangeable implementations of the conjugate updates.
//!
//! [`MatrixKernel`] is the general `p`-dimensional path. [`ScalarKernel`]
//! restates the same posteriors with plain `f64` arithmetic for `p = 1`; it
//! exists so the univariate reduction of the matrix path can be checked
//! against an independent route.

use rand::Rng;
use rand_distr::StandardNormal;

use super::leaf::{self, LeafPrior, LeafRole, NoiseCov, WishartPrior};
use crate::error::{Error, Result};
use crate::forest::LeafModel;
use crate::stats::{sample_gamma, SymMatrix};
use crate::trees::LeafStats;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub trait ConjugateKernel: Send + Sync {
    fn log_marginal(&self, stats: &LeafStats, noise: &NoiseCov, prior: &LeafPrior, role: LeafRole) -> Result<f64>;

    fn sample_leaf<R: Rng + ?Sized>(
        &self,
        stats: &LeafStats,
        noise: &NoiseCov,
        prior: &LeafPrior,
        role: LeafRole,
        rng: &mut R,
    ) -> Result<Vec<f64>>;

    fn sample_sigma<R: Rng + ?Sized>(
        &self,
        y: &[f64],
        yhat: &[f64],
        p: usize,
        prior: &WishartPrior,
        rng: &mut R,
    ) -> Result<SymMatrix>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MatrixKernel;

impl ConjugateKernel for MatrixKernel {
    fn log_marginal(&self, stats: &LeafStats, noise: &NoiseCov, prior: &LeafPrior, role: LeafRole) -> Result<f64> {
        match role {
            LeafRole::Prognostic => leaf::mu_log_marginal(stats, noise, prior),
            LeafRole::Treatment => leaf::tau_log_marginal(stats, noise, prior),
        }
    }

    fn sample_leaf<R: Rng + ?Sized>(
        &self,
        stats: &LeafStats,
        noise: &NoiseCov,
        prior: &LeafPrior,
        role: LeafRole,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        match role {
            LeafRole::Prognostic => leaf::sample_mu_leaf(stats, noise, prior, rng),
            LeafRole::Treatment => leaf::sample_tau_leaf(stats, noise, prior, rng),
        }
    }

    fn sample_sigma<R: Rng + ?Sized>(
        &self,
        y: &[f64],
        yhat: &[f64],
        p: usize,
        prior: &WishartPrior,
        rng: &mut R,
    ) -> Result<SymMatrix> {
        leaf::update_sigma_matrix(y, yhat, p, prior, rng)
    }
}

/// Scalar conjugate-normal formulas, valid only for `p = 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScalarKernel;

struct ScalarTerms {
    n: f64,
    sigma2: f64,
    prior_mean: f64,
    prior_var: f64,
    /// posterior precision
    precision: f64,
    /// canonical mean `precision * posterior_mean`
    h: f64,
    sum_sq: f64,
}

fn scalar_terms(stats: &LeafStats, noise: &NoiseCov, prior: &LeafPrior, role: LeafRole) -> Result<ScalarTerms> {
    if noise.dim() != 1 || stats.dim() != 1 || prior.dim() != 1 {
        return Err(Error::Shape("scalar kernel requires a one-dimensional outcome".into()));
    }
    let sigma2 = noise.cov().get(0, 0);
    let prior_var = prior.cov().get(0, 0);
    let prior_mean = prior.mean()[0];
    let (info, lin) = match role {
        LeafRole::Prognostic => (stats.count as f64, stats.sum[0]),
        LeafRole::Treatment => {
            let t = stats
                .treatment
                .as_ref()
                .ok_or_else(|| Error::Config("treatment leaf statistics lack Z cross-terms".into()))?;
            (t.ztz[0], t.zr[0])
        }
    };
    let precision = 1.0 / prior_var + info / sigma2;
    let h = prior_mean / prior_var + lin / sigma2;
    Ok(ScalarTerms {
        n: stats.count as f64,
        sigma2,
        prior_mean,
        prior_var,
        precision,
        h,
        sum_sq: stats.outer[0],
    })
}

impl ConjugateKernel for ScalarKernel {
    fn log_marginal(&self, stats: &LeafStats, noise: &NoiseCov, prior: &LeafPrior, role: LeafRole) -> Result<f64> {
        let t = scalar_terms(stats, noise, prior, role)?;
        Ok(-0.5 * t.n * (LN_2PI + t.sigma2.ln()) - 0.5 * t.prior_var.ln() - 0.5 * t.precision.ln()
            - 0.5 * t.sum_sq / t.sigma2
            - 0.5 * t.prior_mean * t.prior_mean / t.prior_var
            + 0.5 * t.h * t.h / t.precision)
    }

    fn sample_leaf<R: Rng + ?Sized>(
        &self,
        stats: &LeafStats,
        noise: &NoiseCov,
        prior: &LeafPrior,
        role: LeafRole,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let t = scalar_terms(stats, noise, prior, role)?;
        let z: f64 = rng.sample(StandardNormal);
        Ok(vec![t.h / t.precision + z / t.precision.sqrt()])
    }

    /// `1/σ² ~ Gamma((ν₀ + n)/2, (s₀ + Σ r²)/2)`, the one-dimensional
    /// Inverse-Wishart.
    fn sample_sigma<R: Rng + ?Sized>(
        &self,
        y: &[f64],
        yhat: &[f64],
        p: usize,
        prior: &WishartPrior,
        rng: &mut R,
    ) -> Result<SymMatrix> {
        if p != 1 || prior.scale.dim() != 1 {
            return Err(Error::Shape("scalar kernel requires a one-dimensional outcome".into()));
        }
        if y.is_empty() || y.len() != yhat.len() {
            return Err(Error::Shape("outcome and fitted vectors differ".into()));
        }
        let ssr: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
        let shape = (prior.df + y.len() as f64) / 2.0;
        let rate = (prior.scale.get(0, 0) + ssr) / 2.0;
        let precision = sample_gamma(shape, rate, rng)?;
        SymMatrix::from_rows(&[vec![1.0 / precision]])
    }
}

/// Binds a kernel to the current residual covariance and a leaf prior.
pub(crate) struct LeafContext<'a, K> {
    pub kernel: &'a K,
    pub noise: &'a NoiseCov,
    pub prior: &'a LeafPrior,
    pub role: LeafRole,
}

impl<K: ConjugateKernel> LeafModel for LeafContext<'_, K> {
    fn log_marginal(&self, stats: &LeafStats) -> Result<f64> {
        self.kernel.log_marginal(stats, self.noise, self.prior, self.role)
    }

    fn sample<R: Rng + ?Sized>(&self, stats: &LeafStats, rng: &mut R) -> Result<Vec<f64>> {
        self.kernel.sample_leaf(stats, self.noise, self.prior, self.role, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn stats(rows: &[f64], z: Option<&[f64]>) -> LeafStats {
        let assign = vec![0; rows.len()];
        crate::trees::accumulate_stats(1, &assign, rows, z, 1).unwrap().remove(0)
    }

    proptest! {
        #[test]
        fn scalar_and_matrix_marginals_agree(
            rows in prop::collection::vec(-3.0_f64..3.0, 1..20),
            sigma2 in 0.05_f64..4.0,
            prior_var in 0.01_f64..2.0,
            prior_mean in -1.0_f64..1.0,
            treated_frac in 0.0_f64..1.0,
        ) {
            let z: Vec<f64> = (0..rows.len()).map(|i| if (i as f64 + 0.5) / rows.len() as f64 <= treated_frac { 1.0 } else { 0.0 }).collect();
            let noise = NoiseCov::new(SymMatrix::from_rows(&[vec![sigma2]]).unwrap()).unwrap();
            let prior = LeafPrior::new(vec![prior_mean], SymMatrix::from_rows(&[vec![prior_var]]).unwrap()).unwrap();
            for (role, s) in [(LeafRole::Prognostic, stats(&rows, None)), (LeafRole::Treatment, stats(&rows, Some(&z)))] {
                let a = MatrixKernel.log_marginal(&s, &noise, &prior, role).unwrap();
                let b = ScalarKernel.log_marginal(&s, &noise, &prior, role).unwrap();
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn scalar_kernel_rejects_vectors() {
        let noise = NoiseCov::new(SymMatrix::identity(2)).unwrap();
        let prior = LeafPrior::isotropic(2, 1.0).unwrap();
        let assign = vec![0];
        let s = crate::trees::accumulate_stats(1, &assign, &[1.0, 2.0], None, 2).unwrap().remove(0);
        assert!(ScalarKernel.log_marginal(&s, &noise, &prior, LeafRole::Prognostic).is_err());
    }

    #[test]
    fn scalar_sigma_matches_gamma_moments() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let prior = WishartPrior {
            df: 3.0,
            scale: SymMatrix::from_rows(&[vec![0.6]]).unwrap(),
        };
        let y = [1.0, -0.5, 0.25, 2.0];
        let yhat = [0.0; 4];
        let draws: Vec<f64> = (0..20_000)
            .map(|_| 1.0 / ScalarKernel.sample_sigma(&y, &yhat, 1, &prior, &mut rng).unwrap().get(0, 0))
            .collect();
        let shape = (3.0 + 4.0) / 2.0;
        let rate = (0.6 + 1.0 + 0.25 + 0.0625 + 4.0) / 2.0;
        assert_relative_eq!(crate::stats::mean(&draws), shape / rate, max_relative = 0.02);
    }
}
