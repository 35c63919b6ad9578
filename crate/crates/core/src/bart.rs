//! Univariate BART: the backfitting sampler, its probit variant for
//! propensity scores, and the S-learner treatment-effect baseline.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::causal::kernel::{LeafContext, ScalarKernel};
use crate::causal::leaf::{LeafPrior, LeafRole, NoiseCov};
use crate::error::{Error, Result};
use crate::forest::{predict_trees, Forest, MoveCounts, SweepSettings};
use crate::stats::{mean, normal_cdf, normal_quantile, sample_gamma, sample_truncated_unit_normal, sd, SymMatrix};
use crate::trees::{CutGrid, Tree, TreePriorConfig, MIN_LEAF_SIZE};

/// Conjugate prior `1/σ² ~ Gamma(ν/2, νλ/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePrior {
    pub nu: f64,
    pub lambda: f64,
}

impl NoisePrior {
    /// Chooses `λ` so that the prior puts probability `quantile` on
    /// `σ < sigma_hat`.
    pub fn calibrated(nu: f64, sigma_hat: f64, quantile: f64) -> Result<Self> {
        let chi = ChiSquared::new(nu).map_err(|e| Error::InvalidParameter(format!("nu={nu}: {e}")))?;
        let q = chi.inverse_cdf(1.0 - quantile);
        Ok(Self {
            nu,
            lambda: sigma_hat * sigma_hat * q / nu,
        })
    }
}

impl Default for NoisePrior {
    /// `ν = 3` with 90% prior mass on `σ < 1`, the sd of a standardized outcome.
    fn default() -> Self {
        Self::calibrated(3.0, 1.0, 0.9).expect("valid default noise prior")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BartConfig {
    pub num_trees: usize,
    /// total iterations, burn-in included
    pub iterations: usize,
    pub burn_in: usize,
    pub tree_prior: TreePriorConfig,
    /// prior sd of a leaf; `None` means `1/sqrt(num_trees)`
    pub leaf_sd: Option<f64>,
    pub noise_prior: NoisePrior,
    pub min_leaf: usize,
}

impl BartConfig {
    pub fn new(num_trees: usize) -> Self {
        Self {
            num_trees,
            iterations: 1000,
            burn_in: 500,
            tree_prior: TreePriorConfig::default(),
            leaf_sd: None,
            noise_prior: NoisePrior::default(),
            min_leaf: MIN_LEAF_SIZE,
        }
    }

    pub fn with_iterations(mut self, burn_in: usize, kept: usize) -> Self {
        self.burn_in = burn_in;
        self.iterations = burn_in + kept;
        self
    }

    pub fn leaf_variance(&self) -> f64 {
        match self.leaf_sd {
            Some(s) => s * s,
            None => 1.0 / self.num_trees as f64,
        }
    }

    pub fn kept(&self) -> usize {
        self.iterations - self.burn_in
    }

    pub fn validate(&self) -> Result<()> {
        self.tree_prior.validate()?;
        if self.num_trees == 0 || self.iterations == 0 {
            return Err(Error::Config("BART needs at least one tree and one iteration".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn-in {} must be smaller than the iteration count {}",
                self.burn_in, self.iterations
            )));
        }
        if !(self.leaf_variance() > 0.0) {
            return Err(Error::Config("leaf sd must be positive".into()));
        }
        if !(self.noise_prior.nu > 0.0 && self.noise_prior.lambda > 0.0) {
            return Err(Error::Config("noise prior needs positive nu and lambda".into()));
        }
        Ok(())
    }
}

impl Default for BartConfig {
    fn default() -> Self {
        Self::new(200)
    }
}

/// Posterior output of a univariate BART fit.
#[derive(Debug, Clone)]
pub struct BartDraws {
    /// σ at every iteration, burn-in included
    pub sigma_trace: Vec<f64>,
    /// σ at kept iterations
    pub sigma: Vec<f64>,
    /// fitted training values at kept iterations
    pub fitted: Vec<Vec<f64>>,
    /// ensembles at kept iterations
    pub forests: Vec<Vec<Tree>>,
    /// constant added to every tree sum (nonzero for the probit model)
    pub offset: f64,
    pub moves: MoveCounts,
}

impl BartDraws {
    pub fn num_draws(&self) -> usize {
        self.forests.len()
    }

    /// Sum-of-trees predictions for new rows, one vector per kept draw.
    pub fn predict(&self, x: &ArrayView2<f64>) -> Vec<Vec<f64>> {
        self.forests
            .iter()
            .map(|trees| predict_trees(trees, x, 1).into_iter().map(|v| v + self.offset).collect())
            .collect()
    }

    pub fn posterior_mean_fit(&self) -> Vec<f64> {
        let n = self.fitted.first().map_or(0, Vec::len);
        let m = self.fitted.len() as f64;
        (0..n).map(|i| self.fitted.iter().map(|f| f[i]).sum::<f64>() / m).collect()
    }
}

fn check_standardized(y: &[f64]) -> Result<()> {
    let m = mean(y);
    let s = sd(y);
    // an identically-zero outcome is already centred and carries no scale
    if y.iter().all(|v| *v == 0.0) {
        return Ok(());
    }
    if m.abs() > 0.1 || (s - 1.0).abs() > 0.2 {
        return Err(Error::NotStandardized { mean: m, sd: s });
    }
    Ok(())
}

fn check_design(n: usize, x: &ArrayView2<f64>, config: &BartConfig) -> Result<()> {
    config.validate()?;
    if x.nrows() != n {
        return Err(Error::Shape(format!("{n} outcomes for {} covariate rows", x.nrows())));
    }
    if n < 2 * config.min_leaf {
        return Err(Error::InvalidParameter(format!(
            "need at least {} rows, got {n}",
            2 * config.min_leaf
        )));
    }
    if x.ncols() == 0 {
        return Err(Error::Shape("covariate matrix has no columns".into()));
    }
    Ok(())
}

/// Draws `σ²` given residuals: `1/σ² ~ Gamma(ν/2 + n/2, νλ/2 + Σr²/2)`.
pub fn update_sigma_univariate<R: Rng + ?Sized>(residuals: &[f64], prior: &NoisePrior, rng: &mut R) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::EmptyInput("residuals"));
    }
    let ssr: f64 = residuals.iter().map(|r| r * r).sum();
    let shape = prior.nu / 2.0 + residuals.len() as f64 / 2.0;
    let rate = prior.nu * prior.lambda / 2.0 + ssr / 2.0;
    Ok(1.0 / sample_gamma(shape, rate, rng)?)
}

/// Fits BART to a standardized outcome.
pub fn fit_bart<R: Rng + ?Sized>(y: &[f64], x: &ArrayView2<f64>, config: &BartConfig, rng: &mut R) -> Result<BartDraws> {
    check_design(y.len(), x, config)?;
    check_standardized(y)?;
    run_sampler(y, x, config, Likelihood::Gaussian, rng)
}

#[derive(Clone, Copy, PartialEq)]
enum Likelihood {
    Gaussian,
    Probit,
}

fn run_sampler<R: Rng + ?Sized>(
    y: &[f64],
    x: &ArrayView2<f64>,
    config: &BartConfig,
    likelihood: Likelihood,
    rng: &mut R,
) -> Result<BartDraws> {
    let n = y.len();
    let grid = CutGrid::from_matrix(x);
    let settings = SweepSettings {
        x: x.view(),
        grid: &grid,
        prior: &config.tree_prior,
        min_leaf: config.min_leaf,
    };
    let prior = LeafPrior::isotropic(1, config.leaf_variance())?;
    let mut forest = Forest::new(config.num_trees, n, 1);
    let offset = match likelihood {
        Likelihood::Gaussian => 0.0,
        Likelihood::Probit => normal_quantile(mean(y).clamp(0.01, 0.99)),
    };
    let mut sigma2 = 1.0;
    let mut target = y.to_vec();
    let mut draws = BartDraws {
        sigma_trace: Vec::with_capacity(config.iterations),
        sigma: Vec::with_capacity(config.kept()),
        fitted: Vec::with_capacity(config.kept()),
        forests: Vec::with_capacity(config.kept()),
        offset,
        moves: MoveCounts::default(),
    };

    for iter in 0..config.iterations {
        if likelihood == Likelihood::Probit {
            // latent utilities given the current fit, centred by the offset
            for i in 0..n {
                let m = offset + forest.fit()[i];
                target[i] = sample_truncated_unit_normal(m, y[i] > 0.5, rng) - offset;
            }
        }
        let noise = NoiseCov::new(SymMatrix::from_rows(&[vec![sigma2]])?)?;
        let ctx = LeafContext {
            kernel: &ScalarKernel,
            noise: &noise,
            prior: &prior,
            role: LeafRole::Prognostic,
        };
        let counts = forest.sweep(&settings, &target, None, &ctx, rng)?;
        draws.moves.merge(&counts);
        if likelihood == Likelihood::Gaussian {
            let resid: Vec<f64> = target.iter().zip(forest.fit()).map(|(a, b)| a - b).collect();
            sigma2 = update_sigma_univariate(&resid, &config.noise_prior, rng)?;
        }
        draws.sigma_trace.push(sigma2.sqrt());
        if iter >= config.burn_in {
            draws.sigma.push(sigma2.sqrt());
            draws.fitted.push(forest.fit().iter().map(|v| v + offset).collect());
            draws.forests.push(forest.trees().to_vec());
        }
    }
    Ok(draws)
}

/// Probit BART propensity model.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    /// posterior-mean `P(Z = 1 | x)` for the training rows, clipped
    pub pi_hat: Vec<f64>,
    pub draws: BartDraws,
}

pub const PROPENSITY_CLIP: (f64, f64) = (0.025, 0.975);

fn clip_probability(p: f64) -> f64 {
    p.clamp(PROPENSITY_CLIP.0, PROPENSITY_CLIP.1)
}

impl PropensityFit {
    /// Posterior-mean propensity for new rows.
    pub fn predict(&self, x: &ArrayView2<f64>) -> Vec<f64> {
        let latent = self.draws.predict(x);
        let m = latent.len() as f64;
        (0..x.nrows())
            .map(|i| clip_probability(latent.iter().map(|d| normal_cdf(d[i])).sum::<f64>() / m))
            .collect()
    }
}

/// Fits a probit-link BART to a binary treatment column with latent-variable
/// augmentation and returns clipped posterior-mean propensities.
pub fn fit_propensity<R: Rng + ?Sized>(z: &[f64], x: &ArrayView2<f64>, config: &BartConfig, rng: &mut R) -> Result<PropensityFit> {
    check_design(z.len(), x, config)?;
    if let Some(i) = z.iter().position(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::InvalidParameter(format!("treatment value {} at row {i} is not binary", z[i])));
    }
    let treated = z.iter().filter(|v| **v == 1.0).count();
    if treated == 0 || treated == z.len() {
        return Err(Error::Overlap);
    }
    let draws = run_sampler(z, x, config, Likelihood::Probit, rng)?;
    let m = draws.fitted.len() as f64;
    let pi_hat = (0..z.len())
        .map(|i| clip_probability(draws.fitted.iter().map(|f| normal_cdf(f[i])).sum::<f64>() / m))
        .collect();
    Ok(PropensityFit { pi_hat, draws })
}

/// Location and scale used to standardize an outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub center: f64,
    pub scale: f64,
}

impl Scaling {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("outcome"));
        }
        let scale = sd(values);
        if !(scale > 0.0) {
            return Err(Error::DegenerateOutcome(0));
        }
        Ok(Self {
            center: mean(values),
            scale,
        })
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.center) / self.scale
    }

    pub fn backward(&self, v: f64) -> f64 {
        self.center + self.scale * v
    }
}

/// BART fitted on `[X | z]` for treatment-effect estimation by
/// counterfactual prediction.
#[derive(Debug, Clone)]
pub struct SLearner {
    pub draws: BartDraws,
    pub scaling: Scaling,
    num_covariates: usize,
}

/// Per-draw predictions on the original outcome scale; each inner vector has
/// one entry per unit.
#[derive(Debug, Clone)]
pub struct SLearnerPrediction {
    /// prediction with treatment forced to 0
    pub mu: Vec<Vec<f64>>,
    /// prediction under treatment minus prediction under control
    pub tau: Vec<Vec<f64>>,
    /// prediction at the supplied treatment values
    pub yhat: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
}

fn with_treatment(x: &ArrayView2<f64>, z: &[f64]) -> Array2<f64> {
    let zcol = Array2::from_shape_vec((z.len(), 1), z.to_vec()).expect("column shape");
    concatenate(Axis(1), &[x.view(), zcol.view()]).expect("row counts agree")
}

impl SLearner {
    pub fn fit<R: Rng + ?Sized>(y: &[f64], x: &ArrayView2<f64>, z: &[f64], config: &BartConfig, rng: &mut R) -> Result<Self> {
        if z.len() != y.len() {
            return Err(Error::Shape("treatment and outcome lengths differ".into()));
        }
        let scaling = Scaling::of(y)?;
        let ys: Vec<f64> = y.iter().map(|v| scaling.forward(*v)).collect();
        let design = with_treatment(x, z);
        let draws = fit_bart(&ys, &design.view(), config, rng)?;
        Ok(Self {
            draws,
            scaling,
            num_covariates: x.ncols(),
        })
    }

    pub fn predict(&self, x: &ArrayView2<f64>, z: &[f64]) -> Result<SLearnerPrediction> {
        if x.ncols() != self.num_covariates {
            return Err(Error::Shape(format!(
                "expected {} covariates, got {}",
                self.num_covariates,
                x.ncols()
            )));
        }
        let n = x.nrows();
        let back = |draws: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            draws
                .into_iter()
                .map(|d| d.into_iter().map(|v| self.scaling.backward(v)).collect())
                .collect()
        };
        let f0 = back(self.draws.predict(&with_treatment(x, &vec![0.0; n]).view()));
        let f1 = back(self.draws.predict(&with_treatment(x, &vec![1.0; n]).view()));
        let fz = back(self.draws.predict(&with_treatment(x, z).view()));
        let tau = f1
            .iter()
            .zip(&f0)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u - v).collect())
            .collect();
        Ok(SLearnerPrediction {
            mu: f0,
            tau,
            yhat: fz,
            sigma: self.draws.sigma.iter().map(|s| s * self.scaling.scale).collect(),
        })
    }
}

/// Per-draw, per-unit `ŷ(z=1) − ŷ(z=0)` on the training units.
pub fn s_learner_tau<R: Rng + ?Sized>(
    y: &[f64],
    x: &ArrayView2<f64>,
    z: &[f64],
    config: &BartConfig,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let learner = SLearner::fit(y, x, z, config, rng)?;
    Ok(learner.predict(x, z)?.tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::equal_tailed_interval;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.random::<f64>())
    }

    fn friedman_row(x: &ndarray::ArrayView1<f64>) -> f64 {
        10.0 * (std::f64::consts::PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3] + 5.0 * x[4]
    }

    #[test]
    fn noise_prior_calibration() {
        let p = NoisePrior::default();
        // P(σ² < 1) = P(χ²₃ > νλ) = 0.9
        let chi = ChiSquared::new(3.0).unwrap();
        assert_relative_eq!(1.0 - chi.cdf(p.nu * p.lambda), 0.9, epsilon = 1e-9);
    }

    #[test]
    fn sigma_update_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prior = NoisePrior { nu: 3.0, lambda: 0.5 };
        let r = [0.5, -1.0, 2.0, 0.1, -0.3];
        let draws: Vec<f64> = (0..10_000)
            .map(|_| 1.0 / update_sigma_univariate(&r, &prior, &mut rng).unwrap())
            .collect();
        let ssr: f64 = r.iter().map(|v| v * v).sum();
        let expected = (1.5 + 2.5) / (0.75 + ssr / 2.0);
        assert!((mean(&draws) - expected).abs() < 0.05 * expected);
        assert!(update_sigma_univariate(&[], &prior, &mut rng).is_err());
    }

    #[test]
    fn sigma_update_zero_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prior = NoisePrior { nu: 3.0, lambda: 0.01 };
        let r = vec![0.0; 1000];
        for _ in 0..200 {
            assert!(update_sigma_univariate(&r, &prior, &mut rng).unwrap() < 0.01);
        }
    }

    #[test]
    fn rejects_unstandardized_outcome() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = uniform(40, 2, &mut rng);
        let y: Vec<f64> = (0..40).map(|i| 500.0 + i as f64).collect();
        let cfg = BartConfig::new(5).with_iterations(5, 5);
        assert!(matches!(fit_bart(&y, &x.view(), &cfg, &mut rng), Err(Error::NotStandardized { .. })));
    }

    #[test]
    fn zero_outcome_fits_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = uniform(100, 3, &mut rng);
        let y = vec![0.0; 100];
        let mut cfg = BartConfig::new(20).with_iterations(100, 100);
        cfg.noise_prior = NoisePrior { nu: 3.0, lambda: 1e-6 };
        let draws = fit_bart(&y, &x.view(), &cfg, &mut rng).unwrap();
        let fit = draws.posterior_mean_fit();
        assert!(fit.iter().all(|v| v.abs() < 0.05));
        let s = mean(&draws.sigma);
        assert!(s < 0.05, "sigma {s}");
    }

    #[test]
    fn same_seed_same_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = uniform(60, 3, &mut rng);
        let y: Vec<f64> = (0..60).map(|i| x[[i, 0]] * 2.0 - 1.0).collect();
        let s = Scaling::of(&y).unwrap();
        let y: Vec<f64> = y.iter().map(|v| s.forward(*v)).collect();
        let cfg = BartConfig::new(10).with_iterations(20, 20);
        let a = fit_bart(&y, &x.view(), &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = fit_bart(&y, &x.view(), &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.sigma_trace, b.sigma_trace);
        assert_eq!(a.fitted, b.fitted);
    }

    #[test]
    fn fitted_values_are_sums_of_leaves() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = uniform(80, 3, &mut rng);
        let y: Vec<f64> = (0..80).map(|i| (x[[i, 1]] * 6.0).sin()).collect();
        let s = Scaling::of(&y).unwrap();
        let y: Vec<f64> = y.iter().map(|v| s.forward(*v)).collect();
        let draws = fit_bart(&y, &x.view(), &BartConfig::new(15).with_iterations(10, 10), &mut rng).unwrap();
        let replay = draws.predict(&x.view());
        for (a, b) in replay.iter().zip(&draws.fitted) {
            for (u, v) in a.iter().zip(b) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn friedman_fit_beats_constant_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = uniform(500, 10, &mut rng);
        let xt = uniform(500, 10, &mut rng);
        let f: Vec<f64> = x.rows().into_iter().map(|r| friedman_row(&r)).collect();
        let ft: Vec<f64> = xt.rows().into_iter().map(|r| friedman_row(&r)).collect();
        let y: Vec<f64> = f.iter().map(|v| v + rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let s = Scaling::of(&y).unwrap();
        let ys: Vec<f64> = y.iter().map(|v| s.forward(*v)).collect();
        let draws = fit_bart(&ys, &x.view(), &BartConfig::new(70).with_iterations(300, 300), &mut rng).unwrap();
        let preds = draws.predict(&xt.view());
        let m = preds.len() as f64;
        let rmse = ((0..500)
            .map(|i| {
                let p = s.backward(preds.iter().map(|d| d[i]).sum::<f64>() / m);
                (p - ft[i]).powi(2)
            })
            .sum::<f64>()
            / 500.0)
            .sqrt();
        let baseline = sd(&ft);
        assert!(rmse <= 0.5 * baseline, "rmse {rmse} vs sd {baseline}");
    }

    #[test]
    fn stump_reduces_to_conjugate_normal_mean() {
        // one tree over a constant covariate, which admits no split
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 50;
        let x = Array2::zeros((n, 1));
        let raw: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let s = Scaling::of(&raw).unwrap();
        let y: Vec<f64> = raw.iter().map(|v| s.forward(*v) + 0.05).collect();
        let mut cfg = BartConfig::new(1).with_iterations(200, 4000);
        cfg.leaf_sd = Some(0.5);
        let draws = fit_bart(&y, &x.view(), &cfg, &mut rng).unwrap();
        assert!(draws.forests.iter().all(|f| f[0].is_stump()));
        // E[μ | y] = E_σ[ Σy / (n + σ²/v) ] ≈ Σy / (n + E[σ²]/v) at this n
        let s2 = mean(&draws.sigma.iter().map(|s| s * s).collect::<Vec<_>>());
        let expected = y.iter().sum::<f64>() / (n as f64 + s2 / 0.25);
        let leaf_means: Vec<f64> = draws.fitted.iter().map(|f| f[0]).collect();
        let mc_se = sd(&leaf_means) / (leaf_means.len() as f64).sqrt();
        assert!((mean(&leaf_means) - expected).abs() < 4.0 * mc_se + 1e-3);
    }

    #[test]
    fn propensity_constant_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = uniform(1000, 5, &mut rng);
        let z: Vec<f64> = (0..1000).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
        let fit = fit_propensity(&z, &x.view(), &BartConfig::new(50).with_iterations(200, 200), &mut rng).unwrap();
        let inside = fit.pi_hat.iter().filter(|p| (0.35..=0.65).contains(*p)).count();
        assert!(inside as f64 >= 0.9 * 1000.0, "{inside} of 1000 inside");
        assert!(fit.pi_hat.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn propensity_threshold_assignment_separates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = uniform(400, 5, &mut rng);
        let z: Vec<f64> = (0..400).map(|i| if x[[i, 0]] > 0.5 { 1.0 } else { 0.0 }).collect();
        let fit = fit_propensity(&z, &x.view(), &BartConfig::new(50).with_iterations(200, 200), &mut rng).unwrap();
        // AUC via pair counting
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..400 {
            for j in 0..400 {
                if z[i] == 1.0 && z[j] == 0.0 {
                    pairs += 1.0;
                    wins += if fit.pi_hat[i] > fit.pi_hat[j] {
                        1.0
                    } else if fit.pi_hat[i] == fit.pi_hat[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert!(wins / pairs >= 0.9, "AUC {}", wins / pairs);
    }

    #[test]
    fn propensity_needs_both_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = uniform(40, 2, &mut rng);
        let cfg = BartConfig::new(5).with_iterations(5, 5);
        assert!(matches!(fit_propensity(&[1.0; 40], &x.view(), &cfg, &mut rng), Err(Error::Overlap)));
    }

    #[test]
    fn s_learner_null_effect_interval_contains_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 300;
        let x = uniform(n, 5, &mut rng);
        let z: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| friedman_row(&x.row(i)) + rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let tau = s_learner_tau(&y, &x.view(), &z, &BartConfig::new(50).with_iterations(200, 200), &mut rng).unwrap();
        let ate: Vec<f64> = tau.iter().map(|d| mean(d)).collect();
        let (lo, hi) = equal_tailed_interval(&ate, 0.95);
        assert!(lo <= 0.0 && 0.0 <= hi, "({lo}, {hi})");
    }

    #[test]
    fn s_learner_difference_flips_under_label_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let n = 60;
        let x = uniform(n, 2, &mut rng);
        let z: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| x[[i, 0]] + z[i]).collect();
        let learner = SLearner::fit(&y, &x.view(), &z, &BartConfig::new(10).with_iterations(20, 10), &mut rng).unwrap();
        let pred = learner.predict(&x.view(), &z).unwrap();
        let f1 = learner.draws.predict(&with_treatment(&x.view(), &vec![1.0; n]).view());
        let f0 = learner.draws.predict(&with_treatment(&x.view(), &vec![0.0; n]).view());
        for d in 0..pred.tau.len() {
            for i in 0..n {
                let forward = learner.scaling.scale * (f1[d][i] - f0[d][i]);
                let swapped = learner.scaling.scale * (f0[d][i] - f1[d][i]);
                assert_relative_eq!(pred.tau[d][i], forward, epsilon = 1e-9);
                assert_relative_eq!(swapped, -pred.tau[d][i], epsilon = 1e-9);
            }
        }
    }
}
