//! Bayesian causal forests for `p ≥ 1` outcomes.
//!
//! The outcome is split into a prognostic ensemble and a treatment ensemble,
//! `y_i = μ(x_i, π̂_i) + τ(x_i) ∘ Z_i + ε_i` with `ε_i ~ N(0, Σ)`. Both
//! ensembles carry vector leaves, so all outcome components share one tree
//! structure per tree. With `p = 1` this is univariate BCF.

pub mod kernel;
pub mod leaf;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bart::Scaling;
use crate::error::{Error, Result};
use crate::forest::{predict_trees, Forest, MoveCounts, SweepSettings};
use crate::stats::SymMatrix;
use crate::trees::{CutGrid, Tree, TreePriorConfig, MIN_LEAF_SIZE};
use kernel::{ConjugateKernel, LeafContext, MatrixKernel};
use leaf::{LeafPrior, LeafRole, NoiseCov, WishartPrior};

/// Sampler settings. Optional fields fall back to defaults that depend on the
/// tree counts or the outcome dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CausalConfig {
    pub num_mu_trees: usize,
    pub num_tau_trees: usize,
    /// total iterations, burn-in included
    pub iterations: usize,
    pub burn_in: usize,
    pub mu_tree_prior: TreePriorConfig,
    pub tau_tree_prior: TreePriorConfig,
    /// `σ_μ²`; default `1/num_mu_trees`
    pub mu_leaf_var: Option<f64>,
    /// `σ_τ²`; default `1/(4·num_tau_trees)`
    pub tau_leaf_var: Option<f64>,
    /// `μ₀`; default zero
    pub mu_prior_mean: Option<Vec<f64>>,
    /// `τ₀`; default zero
    pub tau_prior_mean: Option<Vec<f64>>,
    /// `ν₀`; default `p + 2`
    pub wishart_df: Option<f64>,
    /// `Σ₀ = wishart_scale · I` on the standardized scale; default 1, the
    /// residual variance of a constant-mean fit
    pub wishart_scale: Option<f64>,
    /// columns of X for the prognostic trees; default all
    pub mu_covariates: Option<Vec<usize>>,
    /// columns of X for the treatment trees; default all
    pub tau_covariates: Option<Vec<usize>>,
    pub min_leaf: usize,
}

impl Default for CausalConfig {
    fn default() -> Self {
        Self {
            num_mu_trees: 50,
            num_tau_trees: 20,
            iterations: 1000,
            burn_in: 500,
            mu_tree_prior: TreePriorConfig { alpha: 0.95, beta: 2.0 },
            tau_tree_prior: TreePriorConfig { alpha: 0.25, beta: 3.0 },
            mu_leaf_var: None,
            tau_leaf_var: None,
            mu_prior_mean: None,
            tau_prior_mean: None,
            wishart_df: None,
            wishart_scale: None,
            mu_covariates: None,
            tau_covariates: None,
            min_leaf: MIN_LEAF_SIZE,
        }
    }
}

impl CausalConfig {
    pub fn with_iterations(mut self, burn_in: usize, kept: usize) -> Self {
        self.burn_in = burn_in;
        self.iterations = burn_in + kept;
        self
    }

    pub fn kept(&self) -> usize {
        self.iterations.saturating_sub(self.burn_in)
    }

    pub fn mu_leaf_variance(&self) -> f64 {
        self.mu_leaf_var.unwrap_or(1.0 / self.num_mu_trees as f64)
    }

    pub fn tau_leaf_variance(&self) -> f64 {
        self.tau_leaf_var.unwrap_or(1.0 / (4.0 * self.num_tau_trees as f64))
    }

    pub fn wishart_prior(&self, p: usize) -> WishartPrior {
        WishartPrior {
            df: self.wishart_df.unwrap_or(p as f64 + 2.0),
            scale: SymMatrix::scaled_identity(p, self.wishart_scale.unwrap_or(1.0)),
        }
    }

    fn leaf_prior(mean: &Option<Vec<f64>>, p: usize, var: f64) -> Result<LeafPrior> {
        let m = mean.clone().unwrap_or_else(|| vec![0.0; p]);
        if m.len() != p {
            return Err(Error::Config(format!("leaf prior mean has {} entries, outcome has {p}", m.len())));
        }
        if !(var > 0.0) {
            return Err(Error::Config(format!("leaf prior variance must be positive, got {var}")));
        }
        LeafPrior::new(m, SymMatrix::scaled_identity(p, var))
    }

    pub fn validate(&self, p: usize, d: usize) -> Result<()> {
        self.mu_tree_prior.validate()?;
        self.tau_tree_prior.validate()?;
        if p == 0 {
            return Err(Error::Config("outcome dimension must be at least 1".into()));
        }
        if self.num_mu_trees == 0 || self.num_tau_trees == 0 {
            return Err(Error::Config("both ensembles need at least one tree".into()));
        }
        if self.iterations == 0 || self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn-in {} must be smaller than the iteration count {}",
                self.burn_in, self.iterations
            )));
        }
        let df = self.wishart_df.unwrap_or(p as f64 + 2.0);
        if df <= p as f64 - 1.0 {
            return Err(Error::DegreesOfFreedom { df, dim: p });
        }
        if let Some(s) = self.wishart_scale {
            if !(s > 0.0) {
                return Err(Error::Config(format!("wishart scale must be positive, got {s}")));
            }
        }
        for (name, cols) in [("mu", &self.mu_covariates), ("tau", &self.tau_covariates)] {
            if let Some(cols) = cols {
                if cols.is_empty() {
                    return Err(Error::Config(format!("{name} covariate subset is empty")));
                }
                if let Some(c) = cols.iter().find(|c| **c >= d) {
                    return Err(Error::Config(format!("{name} covariate {c} out of range for {d} columns")));
                }
            }
        }
        Ok(())
    }
}

/// Inputs of a causal fit. Y is on its original scale; the sampler
/// standardizes each component internally.
#[derive(Debug, Clone)]
pub struct CausalDataset {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub z: Array2<f64>,
    /// one column per distinct treatment indicator
    pub pi_hat: Option<Array2<f64>>,
    pub weights: Vec<f64>,
}

impl CausalDataset {
    pub fn new(x: Array2<f64>, y: Array2<f64>, z: Array2<f64>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::EmptyInput("dataset"));
        }
        if y.nrows() != n || z.nrows() != n {
            return Err(Error::Shape(format!(
                "X has {n} rows, Y {} and Z {}",
                y.nrows(),
                z.nrows()
            )));
        }
        if y.ncols() == 0 || z.ncols() != y.ncols() {
            return Err(Error::Shape(format!("Y has {} columns, Z {}", y.ncols(), z.ncols())));
        }
        if let Some(((i, k), v)) = z.indexed_iter().find(|(_, v)| **v != 0.0 && **v != 1.0) {
            return Err(Error::InvalidParameter(format!("treatment Z[{i},{k}] = {v} is not binary")));
        }
        if let Some(((i, k), _)) = x.indexed_iter().chain(y.indexed_iter()).find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite value at [{i},{k}]")));
        }
        Ok(Self {
            x,
            y,
            z,
            pi_hat: None,
            weights: vec![1.0; n],
        })
    }

    pub fn with_propensity(mut self, pi_hat: Array2<f64>) -> Result<Self> {
        if pi_hat.nrows() != self.n() || pi_hat.ncols() == 0 {
            return Err(Error::Shape("propensity matrix does not match the dataset".into()));
        }
        if let Some(v) = pi_hat.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::InvalidParameter(format!("propensity {v} outside (0, 1)")));
        }
        self.pi_hat = Some(pi_hat);
        Ok(self)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.n() {
            return Err(Error::Shape("weight vector does not match the dataset".into()));
        }
        if let Some((row, &value)) = weights.iter().enumerate().find(|(_, w)| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::Weight { row, value });
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    /// Single-outcome view on component `k`. When there is one propensity
    /// column per component only the matching one is kept.
    pub fn component(&self, k: usize) -> Result<CausalDataset> {
        if k >= self.p() {
            return Err(Error::Shape(format!("no outcome component {k}")));
        }
        let col = |m: &Array2<f64>| m.column(k).to_owned().insert_axis(Axis(1));
        let pi_hat = self.pi_hat.as_ref().map(|pi| if pi.ncols() == self.p() { col(pi) } else { pi.clone() });
        Ok(CausalDataset {
            x: self.x.clone(),
            y: col(&self.y),
            z: col(&self.z),
            pi_hat,
            weights: self.weights.clone(),
        })
    }
}

/// Column layout the ensembles were trained on, used to check new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub num_covariates: usize,
    pub num_propensity: usize,
    pub mu_covariates: Vec<usize>,
    pub tau_covariates: Vec<usize>,
}

impl Schema {
    fn mu_design(&self, x: &ArrayView2<f64>, pi: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.mu_covariates.len() + pi.ncols()));
        for (j, &c) in self.mu_covariates.iter().enumerate() {
            out.column_mut(j).assign(&x.column(c));
        }
        for k in 0..pi.ncols() {
            out.column_mut(self.mu_covariates.len() + k).assign(&pi.column(k));
        }
        out
    }

    fn tau_design(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.select(Axis(1), &self.tau_covariates)
    }
}

/// Kept posterior draws of a causal fit. `mu`, `tau` and `yhat` are
/// row-major `n×p` per draw on the original outcome scale.
#[derive(Debug, Clone)]
pub struct CausalDraws {
    pub n: usize,
    pub p: usize,
    pub mu: Vec<Vec<f64>>,
    pub tau: Vec<Vec<f64>>,
    pub yhat: Vec<Vec<f64>>,
    pub sigma: Vec<SymMatrix>,
    /// ensembles per kept draw; leaf values are on the standardized scale
    pub mu_forests: Vec<Vec<Tree>>,
    pub tau_forests: Vec<Vec<Tree>>,
    pub scaling: Vec<Scaling>,
    pub schema: Schema,
    pub mu_moves: MoveCounts,
    pub tau_moves: MoveCounts,
}

/// Posterior predictions for new units, laid out as in [`CausalDraws`].
#[derive(Debug, Clone)]
pub struct CausalPrediction {
    pub mu: Vec<Vec<f64>>,
    pub tau: Vec<Vec<f64>>,
    pub yhat: Vec<Vec<f64>>,
}

impl CausalDraws {
    pub fn num_draws(&self) -> usize {
        self.tau.len()
    }

    /// Unweighted sample ATE per draw, `draws × p`.
    pub fn ate(&self) -> Vec<Vec<f64>> {
        self.tau
            .iter()
            .map(|t| {
                (0..self.p)
                    .map(|k| (0..self.n).map(|i| t[i * self.p + k]).sum::<f64>() / self.n as f64)
                    .collect()
            })
            .collect()
    }

    /// Posterior draws of `τ_ik` for component `k`, one vector per unit.
    pub fn tau_component(&self, k: usize) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| self.tau.iter().map(|t| t[i * self.p + k]).collect())
            .collect()
    }

    /// Posterior mean of `τ` per unit, row-major `n×p`.
    pub fn tau_mean(&self) -> Vec<f64> {
        let m = self.num_draws() as f64;
        let mut out = vec![0.0; self.n * self.p];
        for t in &self.tau {
            for (o, v) in out.iter_mut().zip(t) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= m);
        out
    }
}

fn to_original(std_mu: &[f64], std_tau: &[f64], z: &[f64], scaling: &[Scaling]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = scaling.len();
    let mu: Vec<f64> = std_mu.iter().enumerate().map(|(k, v)| scaling[k % p].backward(*v)).collect();
    let tau: Vec<f64> = std_tau.iter().enumerate().map(|(k, v)| scaling[k % p].scale * v).collect();
    let yhat = mu.iter().zip(&tau).zip(z).map(|((m, t), zz)| m + t * zz).collect();
    (mu, tau, yhat)
}

fn flat(m: &ArrayView2<f64>) -> Vec<f64> {
    m.rows().into_iter().flat_map(|r| r.to_vec()).collect()
}

/// Fits the causal model with the general matrix conjugate updates.
pub fn fit_causal<R: Rng + ?Sized>(data: &CausalDataset, config: &CausalConfig, rng: &mut R) -> Result<CausalDraws> {
    fit_causal_with(&MatrixKernel, data, config, rng)
}

/// Fits the causal model using `kernel` for every conjugate update.
pub fn fit_causal_with<K: ConjugateKernel, R: Rng + ?Sized>(
    kernel: &K,
    data: &CausalDataset,
    config: &CausalConfig,
    rng: &mut R,
) -> Result<CausalDraws> {
    let (n, p, d) = (data.n(), data.p(), data.x.ncols());
    config.validate(p, d)?;
    let pi = data
        .pi_hat
        .as_ref()
        .ok_or_else(|| Error::Config("propensity estimates are required for the prognostic trees".into()))?;
    if n < 2 * config.min_leaf {
        return Err(Error::InsufficientSample {
            got: n,
            need: 2 * config.min_leaf,
        });
    }
    let scaling: Vec<Scaling> = (0..p)
        .map(|k| {
            Scaling::of(&data.y.column(k).to_vec()).map_err(|e| match e {
                Error::DegenerateOutcome(_) => Error::DegenerateOutcome(k),
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let y: Vec<f64> = (0..n * p).map(|k| scaling[k % p].forward(data.y[[k / p, k % p]])).collect();
    let z = flat(&data.z.view());

    let schema = Schema {
        num_covariates: d,
        num_propensity: pi.ncols(),
        mu_covariates: config.mu_covariates.clone().unwrap_or_else(|| (0..d).collect()),
        tau_covariates: config.tau_covariates.clone().unwrap_or_else(|| (0..d).collect()),
    };
    let x_mu = schema.mu_design(&data.x.view(), &pi.view());
    let x_tau = schema.tau_design(&data.x.view());
    let grid_mu = CutGrid::from_matrix(&x_mu.view());
    let grid_tau = CutGrid::from_matrix(&x_tau.view());
    let mu_settings = SweepSettings {
        x: x_mu.view(),
        grid: &grid_mu,
        prior: &config.mu_tree_prior,
        min_leaf: config.min_leaf,
    };
    let tau_settings = SweepSettings {
        x: x_tau.view(),
        grid: &grid_tau,
        prior: &config.tau_tree_prior,
        min_leaf: config.min_leaf,
    };
    let mu_prior = CausalConfig::leaf_prior(&config.mu_prior_mean, p, config.mu_leaf_variance())?;
    let tau_prior = CausalConfig::leaf_prior(&config.tau_prior_mean, p, config.tau_leaf_variance())?;
    let wishart = config.wishart_prior(p);

    let mut mu_forest = Forest::new(config.num_mu_trees, n, p);
    let mut tau_forest = Forest::new(config.num_tau_trees, n, p);
    let mut noise = NoiseCov::new(wishart.scale.clone())?;
    let kept = config.kept();
    let mut draws = CausalDraws {
        n,
        p,
        mu: Vec::with_capacity(kept),
        tau: Vec::with_capacity(kept),
        yhat: Vec::with_capacity(kept),
        sigma: Vec::with_capacity(kept),
        mu_forests: Vec::with_capacity(kept),
        tau_forests: Vec::with_capacity(kept),
        scaling: scaling.clone(),
        schema,
        mu_moves: MoveCounts::default(),
        tau_moves: MoveCounts::default(),
    };
    let mut target = vec![0.0; n * p];

    for iter in 0..config.iterations {
        let tau_fit = tau_forest.fit();
        for k in 0..n * p {
            target[k] = y[k] - tau_fit[k] * z[k];
        }
        let ctx = LeafContext {
            kernel,
            noise: &noise,
            prior: &mu_prior,
            role: LeafRole::Prognostic,
        };
        draws.mu_moves.merge(&mu_forest.sweep(&mu_settings, &target, None, &ctx, rng)?);

        let mu_fit = mu_forest.fit();
        for k in 0..n * p {
            target[k] = y[k] - mu_fit[k];
        }
        let ctx = LeafContext {
            kernel,
            noise: &noise,
            prior: &tau_prior,
            role: LeafRole::Treatment,
        };
        draws.tau_moves.merge(&tau_forest.sweep(&tau_settings, &target, Some(&z), &ctx, rng)?);

        let tau_fit = tau_forest.fit();
        let yhat: Vec<f64> = (0..n * p).map(|k| mu_fit[k] + tau_fit[k] * z[k]).collect();
        let sigma = kernel.sample_sigma(&y, &yhat, p, &wishart, rng)?;
        noise = NoiseCov::new(sigma)?;

        if iter >= config.burn_in {
            let (mu, tau, yhat) = to_original(mu_forest.fit(), tau_forest.fit(), &z, &scaling);
            draws.mu.push(mu);
            draws.tau.push(tau);
            draws.yhat.push(yhat);
            draws.sigma.push(rescale_sigma(noise.cov(), &scaling));
            draws.mu_forests.push(mu_forest.trees().to_vec());
            draws.tau_forests.push(tau_forest.trees().to_vec());
        }
    }
    Ok(draws)
}

/// `D Σ D` with `D = diag(scale)`.
fn rescale_sigma(sigma: &SymMatrix, scaling: &[Scaling]) -> SymMatrix {
    let p = scaling.len();
    let mut m = sigma.matrix().clone();
    for a in 0..p {
        for b in 0..p {
            m[(a, b)] *= scaling[a].scale * scaling[b].scale;
        }
    }
    SymMatrix::symmetrized(m)
}

/// Replays the stored ensembles on new units. `pi_new` holds one column per
/// propensity column used in training and `z_new` is `n×p`.
pub fn predict_causal(
    draws: &CausalDraws,
    x_new: &ArrayView2<f64>,
    pi_new: &ArrayView2<f64>,
    z_new: &ArrayView2<f64>,
) -> Result<CausalPrediction> {
    let schema = &draws.schema;
    if x_new.ncols() != schema.num_covariates {
        return Err(Error::Column(format!(
            "expected {} covariate columns, got {}",
            schema.num_covariates,
            x_new.ncols()
        )));
    }
    if pi_new.ncols() != schema.num_propensity {
        return Err(Error::Column(format!(
            "expected {} propensity columns, got {}",
            schema.num_propensity,
            pi_new.ncols()
        )));
    }
    let m = x_new.nrows();
    if pi_new.nrows() != m || z_new.nrows() != m || z_new.ncols() != draws.p {
        return Err(Error::Shape("new covariates, propensities and treatments disagree".into()));
    }
    let x_mu = schema.mu_design(x_new, pi_new);
    let x_tau = schema.tau_design(x_new);
    let z = flat(z_new);
    let mut out = CausalPrediction {
        mu: Vec::with_capacity(draws.num_draws()),
        tau: Vec::with_capacity(draws.num_draws()),
        yhat: Vec::with_capacity(draws.num_draws()),
    };
    for (mf, tf) in draws.mu_forests.iter().zip(&draws.tau_forests) {
        let mu_std = predict_trees(mf, &x_mu.view(), draws.p);
        let tau_std = predict_trees(tf, &x_tau.view(), draws.p);
        let (mu, tau, yhat) = to_original(&mu_std, &tau_std, &z, &draws.scaling);
        out.mu.push(mu);
        out.tau.push(tau);
        out.yhat.push(yhat);
    }
    Ok(out)
}

/// Treatment ensembles of one chain with what is needed to replay them.
#[derive(Debug, Clone, PartialEq)]
pub struct TauModel {
    pub schema: Schema,
    pub scaling: Vec<Scaling>,
    /// one ensemble per kept draw, standardized scale
    pub forests: Vec<Vec<Tree>>,
}

impl TauModel {
    pub fn p(&self) -> usize {
        self.scaling.len()
    }

    /// Posterior-draw `τ` for new units, row-major `n×p` per draw.
    pub fn predict(&self, x_new: &ArrayView2<f64>) -> Result<Vec<Vec<f64>>> {
        if x_new.ncols() != self.schema.num_covariates {
            return Err(Error::Column(format!(
                "expected {} covariate columns, got {}",
                self.schema.num_covariates,
                x_new.ncols()
            )));
        }
        let x_tau = self.schema.tau_design(x_new);
        let p = self.p();
        Ok(self
            .forests
            .iter()
            .map(|tf| {
                predict_trees(tf, &x_tau.view(), p)
                    .into_iter()
                    .enumerate()
                    .map(|(k, v)| self.scaling[k % p].scale * v)
                    .collect()
            })
            .collect())
    }
}

impl CausalDraws {
    pub fn tau_model(&self) -> TauModel {
        TauModel {
            schema: self.schema.clone(),
            scaling: self.scaling.clone(),
            forests: self.tau_forests.clone(),
        }
    }
}

/// Posterior-draw `τ` for new units from the treatment ensembles alone.
pub fn predict_tau(draws: &CausalDraws, x_new: &ArrayView2<f64>) -> Result<Vec<Vec<f64>>> {
    draws.tau_model().predict(x_new)
}

#[cfg(test)]
mod tests {
    use super::*;
    use kernel::ScalarKernel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn fixture(n: usize, p: usize, seed: u64) -> CausalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 3), |_| rng.random::<f64>());
        let z = Array2::from_shape_fn((n, p), |_| f64::from(rng.random::<bool>()));
        let y = Array2::from_shape_fn((n, p), |(i, k)| {
            let e: f64 = StandardNormal.sample(&mut rng);
            2.0 * x[[i, 0]] + k as f64 + (1.0 + x[[i, 1]]) * z[[i, k]] + 0.3 * e
        });
        let pi = Array2::from_elem((n, p), 0.5);
        CausalDataset::new(x, y, z).unwrap().with_propensity(pi).unwrap()
    }

    fn short() -> CausalConfig {
        CausalConfig {
            num_mu_trees: 10,
            num_tau_trees: 5,
            ..CausalConfig::default()
        }
        .with_iterations(20, 30)
    }

    #[test]
    fn fitted_values_are_mu_plus_tau_z_and_replay() {
        let data = fixture(80, 2, 1);
        let draws = fit_causal(&data, &short(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(draws.num_draws(), 30);
        let z = flat(&data.z.view());
        for d in 0..draws.num_draws() {
            for k in 0..80 * 2 {
                assert_eq!(draws.yhat[d][k], draws.mu[d][k] + draws.tau[d][k] * z[k]);
            }
        }
        let pred = predict_causal(&draws, &data.x.view(), &data.pi_hat.as_ref().unwrap().view(), &data.z.view()).unwrap();
        assert_eq!(pred.mu, draws.mu);
        assert_eq!(pred.tau, draws.tau);
        assert_eq!(pred.yhat, draws.yhat);
        assert_eq!(predict_tau(&draws, &data.x.view()).unwrap(), draws.tau);
    }

    #[test]
    fn treatment_flip_shifts_prediction_by_tau() {
        let data = fixture(60, 2, 3);
        let draws = fit_causal(&data, &short(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let pi = data.pi_hat.as_ref().unwrap();
        let zero = Array2::zeros((60, 2));
        let ones = Array2::ones((60, 2));
        let a = predict_causal(&draws, &data.x.view(), &pi.view(), &zero.view()).unwrap();
        let b = predict_causal(&draws, &data.x.view(), &pi.view(), &ones.view()).unwrap();
        assert_eq!(a.tau, b.tau);
        assert_eq!(a.mu, b.mu);
        for d in 0..a.yhat.len() {
            for k in 0..120 {
                assert_eq!(a.yhat[d][k], a.mu[d][k]);
                assert!((b.yhat[d][k] - a.yhat[d][k] - a.tau[d][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_outcome_change_rescales_draws() {
        let data = fixture(60, 1, 5);
        let mut shifted = data.clone();
        shifted.y.mapv_inplace(|v| 4.0 * v - 7.0);
        let a = fit_causal(&data, &short(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let b = fit_causal(&shifted, &short(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        for (ta, tb) in a.tau.iter().zip(&b.tau) {
            for (u, v) in ta.iter().zip(tb) {
                assert!((4.0 * u - v).abs() < 1e-9 * (1.0 + v.abs()));
            }
        }
        for (sa, sb) in a.sigma.iter().zip(&b.sigma) {
            assert!((16.0 * sa.get(0, 0) - sb.get(0, 0)).abs() < 1e-9 * sb.get(0, 0));
        }
    }

    #[test]
    fn scalar_kernel_matches_matrix_path_on_one_outcome() {
        let data = fixture(150, 1, 7);
        let cfg = CausalConfig {
            num_mu_trees: 20,
            num_tau_trees: 10,
            ..CausalConfig::default()
        }
        .with_iterations(200, 600);
        let ate = |draws: &CausalDraws| {
            let a: Vec<f64> = draws.ate().into_iter().map(|v| v[0]).collect();
            a.iter().sum::<f64>() / a.len() as f64
        };
        let m = fit_causal_with(&MatrixKernel, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let s = fit_causal_with(&ScalarKernel, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let sd_y = crate::stats::sd(&data.y.column(0).to_vec());
        assert!((ate(&m) - ate(&s)).abs() < 0.05 * sd_y, "{} vs {}", ate(&m), ate(&s));
    }

    #[test]
    fn rejects_bad_inputs() {
        let data = fixture(40, 2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut no_pi = data.clone();
        no_pi.pi_hat = None;
        assert!(matches!(fit_causal(&no_pi, &short(), &mut rng), Err(Error::Config(_))));
        let mut flat_y = data.clone();
        flat_y.y.column_mut(1).fill(3.0);
        assert!(matches!(fit_causal(&flat_y, &short(), &mut rng), Err(Error::DegenerateOutcome(1))));
        let tiny = fixture(8, 1, 12);
        assert!(matches!(
            fit_causal(&tiny, &short(), &mut rng),
            Err(Error::InsufficientSample { got: 8, need: 10 })
        ));
        let bad_z = Array2::from_elem((40, 2), 0.5);
        assert!(CausalDataset::new(data.x.clone(), data.y.clone(), bad_z).is_err());
        assert!(data.clone().with_weights(vec![1.0; 39]).is_err());
        assert!(matches!(
            data.clone().with_weights((0..40).map(|i| if i == 3 { -1.0 } else { 1.0 }).collect()),
            Err(Error::Weight { row: 3, .. })
        ));
        let draws = fit_causal(&data, &short(), &mut rng).unwrap();
        let x = Array2::zeros((5, 2));
        let pi = Array2::from_elem((5, 2), 0.5);
        assert!(matches!(predict_causal(&draws, &x.view(), &pi.view(), &pi.view()), Err(Error::Column(_))));
    }

    #[test]
    fn component_view_keeps_matching_propensity() {
        let mut data = fixture(30, 2, 13);
        data.pi_hat = Some(Array2::from_shape_fn((30, 2), |(_, k)| 0.3 + 0.2 * k as f64));
        let c = data.component(1).unwrap();
        assert_eq!(c.p(), 1);
        assert_eq!(c.pi_hat.unwrap().column(0).to_vec(), vec![0.5; 30]);
        assert_eq!(c.y.column(0), data.y.column(1));
        assert!(data.component(2).is_err());
    }
}
