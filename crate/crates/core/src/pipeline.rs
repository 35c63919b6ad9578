//! Applied-analysis layer: configuration, CSV ingestion, multi-chain fitting
//! over plausible values, persistence, weighted ATEs and moderation curves.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bart::{fit_propensity, BartConfig, Scaling};
use crate::causal::{fit_causal, CausalConfig, CausalDataset, CausalDraws, Schema, TauModel};
use crate::error::{Error, Result};
use crate::simbench::{BenchmarkSettings, Method, SimSpec};
use crate::stats::{equal_tailed_interval, SymMatrix};
use crate::trees::{Tree, TreePriorConfig, MIN_LEAF_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(default = "numeric")]
    pub kind: CovariateKind,
}

fn numeric() -> CovariateKind {
    CovariateKind::Numeric
}

/// Which causal model `fit` runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitModel {
    /// one model over all outcomes with shared trees
    #[default]
    Mvbcf,
    /// a separate univariate model per outcome
    Bcf,
}

/// Propensity model settings, or precomputed propensity columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropensitySettings {
    /// read propensities from these columns instead of fitting
    pub columns: Option<Vec<String>>,
    pub num_trees: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub tree_prior: TreePriorConfig,
}

impl Default for PropensitySettings {
    fn default() -> Self {
        Self {
            columns: None,
            num_trees: 50,
            iterations: 1000,
            burn_in: 500,
            tree_prior: TreePriorConfig::default(),
        }
    }
}

impl PropensitySettings {
    pub fn bart_config(&self) -> BartConfig {
        let mut cfg = BartConfig::new(self.num_trees);
        cfg.iterations = self.iterations;
        cfg.burn_in = self.burn_in;
        cfg.tree_prior = self.tree_prior;
        cfg.min_leaf = MIN_LEAF_SIZE;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// CSV path, relative paths resolve against the config file
    pub data: PathBuf,
    /// one group of `p` outcome columns per plausible value
    pub outcome_groups: Vec<Vec<String>>,
    /// one column shared by every outcome, or one per outcome
    pub treatment: Vec<String>,
    pub covariates: Vec<CovariateSpec>,
    #[serde(default)]
    pub weight: Option<String>,
    #[serde(default)]
    pub propensity: PropensitySettings,
    #[serde(default)]
    pub causal: CausalConfig,
    #[serde(default)]
    pub model: FitModel,
    #[serde(default = "one")]
    pub chains_per_group: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn one() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("mvbcf-out")
}

impl AnalysisConfig {
    pub fn p(&self) -> usize {
        self.outcome_groups.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        if p == 0 {
            return Err(Error::Config("at least one outcome group with one column is required".into()));
        }
        if let Some(g) = self.outcome_groups.iter().find(|g| g.len() != p) {
            return Err(Error::Config(format!(
                "outcome groups differ in dimension: {} vs {p} ({})",
                g.len(),
                g.join(", ")
            )));
        }
        if self.treatment.len() != 1 && self.treatment.len() != p {
            return Err(Error::Config(format!(
                "{} treatment columns for {p} outcomes; give one or {p}",
                self.treatment.len()
            )));
        }
        if self.covariates.is_empty() {
            return Err(Error::Config("no covariates configured".into()));
        }
        if self.chains_per_group == 0 {
            return Err(Error::Config("chains_per_group must be positive".into()));
        }
        if let Some(cols) = &self.propensity.columns {
            if cols.len() != self.treatment.len() {
                return Err(Error::Config("one propensity column per treatment column is required".into()));
            }
        }
        Ok(())
    }
}

/// Everything a config file may hold; each command reads its own section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub analysis: Option<AnalysisConfig>,
    pub simulation: SimSpec,
    pub benchmark: BenchmarkSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    pub methods: Vec<Method>,
    pub settings: BenchmarkSettings,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            settings: BenchmarkSettings::default(),
        }
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))
    }

    /// Reads a config file; a relative data path is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(a) = cfg.analysis.as_mut() {
            if a.data.is_relative() {
                if let Some(dir) = path.parent() {
                    a.data = dir.join(&a.data);
                }
            }
        }
        Ok(cfg)
    }

    pub fn analysis(&self) -> Result<&AnalysisConfig> {
        self.analysis
            .as_ref()
            .ok_or_else(|| Error::Config("config has no [analysis] section".into()))
    }
}

/// Covariate matrix after encoding, with the names of its columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub names: Vec<String>,
    pub x: Array2<f64>,
}

impl Design {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Column(name.to_string()))
    }
}

/// Datasets for every plausible-value group, sharing X, Z and weights.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub design: Design,
    pub outcomes: Vec<Array2<f64>>,
    pub outcome_names: Vec<Vec<String>>,
    /// `n×q`, one column per configured treatment column
    pub treatment: Array2<f64>,
    pub treatment_names: Vec<String>,
    pub weights: Vec<f64>,
    /// `n×q` when propensity columns were supplied
    pub propensity: Option<Array2<f64>>,
    /// rows removed for a missing treatment or outcome
    pub dropped: usize,
}

impl LoadedData {
    pub fn n(&self) -> usize {
        self.design.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.outcomes.first().map_or(0, |y| y.ncols())
    }

    /// Treatment indicators expanded to `n×p`.
    pub fn z(&self) -> Array2<f64> {
        let p = self.p();
        let q = self.treatment.ncols();
        Array2::from_shape_fn((self.n(), p), |(i, k)| self.treatment[[i, if q == 1 { 0 } else { k }]])
    }

    pub fn dataset(&self, group: usize, pi_hat: &Array2<f64>) -> Result<CausalDataset> {
        let y = self
            .outcomes
            .get(group)
            .ok_or_else(|| Error::Config(format!("no outcome group {group}")))?;
        CausalDataset::new(self.design.x.clone(), y.clone(), self.z())?
            .with_propensity(pi_hat.clone())?
            .with_weights(self.weights.clone())
    }
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na")
}

fn parse_value(s: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        reason: format!("'{}' is not a number", s.trim()),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            reason: format!("'{}' is not finite", s.trim()),
        });
    }
    Ok(v)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Reads the configured columns from a comma-separated file with a header.
///
/// Rows missing a treatment or any outcome are dropped. Numeric covariates
/// get median imputation plus a `<name>_missing` indicator when any value is
/// missing; categorical covariates become one `<name>=<level>` indicator per
/// level, with missing values as the level `missing`, appended after the
/// numeric columns. Row numbers in errors are 1-based data rows.
pub fn load_csv(path: &Path, config: &AnalysisConfig) -> Result<LoadedData> {
    config.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => Error::Csv(e),
        })?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Column(name.to_string()))
    };
    let outcome_idx: Vec<Vec<usize>> = config
        .outcome_groups
        .iter()
        .map(|g| g.iter().map(|c| col(c)).collect())
        .collect::<Result<_>>()?;
    let treat_idx: Vec<usize> = config.treatment.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let cov_idx: Vec<usize> = config.covariates.iter().map(|c| col(&c.name)).collect::<Result<_>>()?;
    let weight_idx = config.weight.as_deref().map(col).transpose()?;
    let pi_idx: Option<Vec<usize>> = config
        .propensity
        .columns
        .as_ref()
        .map(|cols| cols.iter().map(|c| col(c)).collect())
        .transpose()?;

    let mut outcomes: Vec<Vec<f64>> = vec![Vec::new(); outcome_idx.len()];
    let mut treatment = Vec::new();
    let mut weights = Vec::new();
    let mut propensity = Vec::new();
    let mut raw_cov: Vec<Vec<Option<String>>> = vec![Vec::new(); cov_idx.len()];
    let mut dropped = 0;
    let mut kept_rows = Vec::new();

    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let field = |i: usize| record.get(i).unwrap_or("");
        let required = outcome_idx.iter().flatten().chain(&treat_idx);
        if required.clone().any(|&i| is_missing(field(i))) {
            dropped += 1;
            continue;
        }
        for (g, idx) in outcome_idx.iter().enumerate() {
            for (&i, name) in idx.iter().zip(&config.outcome_groups[g]) {
                outcomes[g].push(parse_value(field(i), row, name)?);
            }
        }
        for (&i, name) in treat_idx.iter().zip(&config.treatment) {
            let v = parse_value(field(i), row, name)?;
            if v != 0.0 && v != 1.0 {
                return Err(Error::Parse {
                    row,
                    column: name.clone(),
                    reason: format!("treatment value {v} is not 0 or 1"),
                });
            }
            treatment.push(v);
        }
        if let (Some(i), Some(name)) = (weight_idx, &config.weight) {
            let v = parse_value(field(i), row, name)?;
            if v <= 0.0 {
                return Err(Error::Weight {
                    row,
                    value: v,
                });
            }
            weights.push(v);
        } else {
            weights.push(1.0);
        }
        if let (Some(idx), Some(names)) = (&pi_idx, &config.propensity.columns) {
            for (&i, name) in idx.iter().zip(names) {
                let v = parse_value(field(i), row, name)?;
                if !(v > 0.0 && v < 1.0) {
                    return Err(Error::Parse {
                        row,
                        column: name.clone(),
                        reason: format!("propensity {v} outside (0, 1)"),
                    });
                }
                propensity.push(v);
            }
        }
        for (c, &i) in cov_idx.iter().enumerate() {
            let s = field(i);
            raw_cov[c].push((!is_missing(s)).then(|| s.trim().to_string()));
        }
        kept_rows.push(row);
    }
    let n = kept_rows.len();
    if n == 0 {
        return Err(Error::EmptyInput("no complete rows in data file"));
    }

    let mut names = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut categorical = Vec::new();
    for (c, spec) in config.covariates.iter().enumerate() {
        match spec.kind {
            CovariateKind::Numeric => {
                let mut values = Vec::with_capacity(n);
                let mut observed = Vec::with_capacity(n);
                for (k, v) in raw_cov[c].iter().enumerate() {
                    match v {
                        Some(s) => {
                            let x = parse_value(s, kept_rows[k], &spec.name)?;
                            observed.push(x);
                            values.push(Some(x));
                        }
                        None => values.push(None),
                    }
                }
                if observed.is_empty() {
                    return Err(Error::Config(format!("covariate '{}' has no observed values", spec.name)));
                }
                let any_missing = observed.len() < n;
                let fill = median(&mut observed);
                names.push(spec.name.clone());
                columns.push(values.iter().map(|v| v.unwrap_or(fill)).collect());
                if any_missing {
                    names.push(format!("{}_missing", spec.name));
                    columns.push(values.iter().map(|v| if v.is_none() { 1.0 } else { 0.0 }).collect());
                }
            }
            CovariateKind::Categorical => categorical.push(c),
        }
    }
    for c in categorical {
        let name = &config.covariates[c].name;
        let level = |v: &Option<String>| v.clone().unwrap_or_else(|| "missing".to_string());
        let levels: BTreeSet<String> = raw_cov[c].iter().map(level).collect();
        for l in levels {
            names.push(format!("{name}={l}"));
            columns.push(raw_cov[c].iter().map(|v| if level(v) == l { 1.0 } else { 0.0 }).collect());
        }
    }
    let x = Array2::from_shape_fn((n, columns.len()), |(i, j)| columns[j][i]);
    let p = config.p();
    let to_matrix = |v: Vec<f64>, k: usize| Array2::from_shape_vec((n, k), v).expect("row-major fill");
    let q = config.treatment.len();
    Ok(LoadedData {
        design: Design { names, x },
        outcomes: outcomes.into_iter().map(|v| to_matrix(v, p)).collect(),
        outcome_names: config.outcome_groups.clone(),
        treatment: to_matrix(treatment, q),
        treatment_names: config.treatment.clone(),
        weights,
        propensity: pi_idx.map(|_| to_matrix(propensity, q)),
        dropped,
    })
}

/// Stored ensembles of one fitted model inside a chain. A joint fit has one
/// block covering every outcome; per-outcome fits have one block each.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainBlock {
    pub model: TauModel,
    /// prognostic ensembles, kept only for persistence
    pub mu_forests: Vec<Vec<Tree>>,
}

/// Per-draw treatment effects of one chain with the replay models.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    pub chain: usize,
    /// plausible-value group this chain was fitted on
    pub group: usize,
    /// iteration index of each kept draw
    pub iterations: Vec<usize>,
    pub n: usize,
    pub p: usize,
    /// row-major `n×p` per draw, original scale
    pub tau: Vec<Vec<f64>>,
    pub sigma: Vec<SymMatrix>,
    pub blocks: Vec<ChainBlock>,
}

impl ChainDraws {
    /// Joins the fits of consecutive outcome blocks drawn in lockstep. With
    /// several blocks `Σ` is block diagonal.
    pub fn from_fits(chain: usize, group: usize, burn_in: usize, fits: &[CausalDraws]) -> Result<Self> {
        let first = fits.first().ok_or_else(|| Error::Pooling("chain without fits".into()))?;
        let (n, m) = (first.n, first.num_draws());
        if fits.iter().any(|f| f.n != n || f.num_draws() != m) {
            return Err(Error::Pooling(format!("chain {chain}: blocks differ in units or draws")));
        }
        let p: usize = fits.iter().map(|f| f.p).sum();
        let mut tau = vec![vec![0.0; n * p]; m];
        let mut sigma = Vec::with_capacity(m);
        for d in 0..m {
            let mut s = nalgebra::DMatrix::zeros(p, p);
            let mut off = 0;
            for f in fits {
                for i in 0..n {
                    tau[d][i * p + off..i * p + off + f.p].copy_from_slice(&f.tau[d][i * f.p..(i + 1) * f.p]);
                }
                for a in 0..f.p {
                    for b in 0..f.p {
                        s[(off + a, off + b)] = f.sigma[d].get(a, b);
                    }
                }
                off += f.p;
            }
            sigma.push(SymMatrix::new(s)?);
        }
        Ok(Self {
            chain,
            group,
            iterations: (0..m).map(|k| burn_in + k).collect(),
            n,
            p,
            tau,
            sigma,
            blocks: fits
                .iter()
                .map(|f| ChainBlock {
                    model: f.tau_model(),
                    mu_forests: f.mu_forests.clone(),
                })
                .collect(),
        })
    }

    pub fn models(&self) -> Vec<TauModel> {
        self.blocks.iter().map(|b| b.model.clone()).collect()
    }
}

/// Posterior-draw `τ` of stacked blocks for new units, row-major `n×p`.
pub fn predict_blocks(models: &[TauModel], x_new: &ndarray::ArrayView2<f64>) -> Result<Vec<Vec<f64>>> {
    let n = x_new.nrows();
    let p: usize = models.iter().map(TauModel::p).sum();
    let mut out: Vec<Vec<f64>> = Vec::new();
    let mut off = 0;
    for model in models {
        let q = model.p();
        let draws = model.predict(x_new)?;
        if out.is_empty() {
            out = vec![vec![0.0; n * p]; draws.len()];
        }
        if draws.len() != out.len() {
            return Err(Error::Pooling("blocks hold different numbers of draws".into()));
        }
        for (o, d) in out.iter_mut().zip(&draws) {
            for i in 0..n {
                o[i * p + off..i * p + off + q].copy_from_slice(&d[i * q..(i + 1) * q]);
            }
        }
        off += q;
    }
    Ok(out)
}

/// Kept draws of several chains, concatenated in chain order.
#[derive(Debug, Clone)]
pub struct PooledDraws {
    pub n: usize,
    pub p: usize,
    pub tau: Vec<Vec<f64>>,
    pub sigma: Vec<SymMatrix>,
    /// chain id of every pooled draw
    pub chain: Vec<usize>,
    /// replay models per chain
    pub models: Vec<Vec<TauModel>>,
}

impl PooledDraws {
    pub fn num_draws(&self) -> usize {
        self.tau.len()
    }
}

fn block_schemas(c: &ChainDraws) -> Vec<(&Schema, usize)> {
    c.blocks.iter().map(|b| (&b.model.schema, b.model.p())).collect()
}

pub fn pool_chains(chains: &[ChainDraws]) -> Result<PooledDraws> {
    let first = chains.first().ok_or_else(|| Error::Pooling("no chains".into()))?;
    for c in chains {
        if c.n != first.n || c.p != first.p {
            return Err(Error::Pooling(format!(
                "chain {} has n={}, p={}; chain {} has n={}, p={}",
                c.chain, c.n, c.p, first.chain, first.n, first.p
            )));
        }
        if block_schemas(c) != block_schemas(first) {
            return Err(Error::Pooling(format!("chain {} was fitted on a different design", c.chain)));
        }
        if c.tau.len() != c.sigma.len() || c.tau.iter().any(|t| t.len() != c.n * c.p) {
            return Err(Error::Pooling(format!("chain {} has inconsistent draw records", c.chain)));
        }
    }
    let mut pooled = PooledDraws {
        n: first.n,
        p: first.p,
        tau: Vec::new(),
        sigma: Vec::new(),
        chain: Vec::new(),
        models: Vec::new(),
    };
    for c in chains {
        pooled.tau.extend(c.tau.iter().cloned());
        pooled.sigma.extend(c.sigma.iter().cloned());
        pooled.chain.extend(std::iter::repeat_n(c.chain, c.tau.len()));
        pooled.models.push(c.models());
    }
    Ok(pooled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteComponent {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub draws: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub components: Vec<AteComponent>,
    /// all components of each draw, for joint density plots
    pub joint: Vec<Vec<f64>>,
    pub chain: Vec<usize>,
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::Shape(format!("{} weights for {n} units", weights.len())));
    }
    if let Some((row, &value)) = weights.iter().enumerate().find(|(_, w)| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::Weight { row, value });
    }
    Ok(())
}

/// `Σ w_i τ_i / Σ w_i` for one row-major draw. Weights are normalized first,
/// so rescaling by any factor that keeps the weights and their sum exact
/// leaves the result unchanged bit for bit.
fn weighted_draw(tau: &[f64], normalized: &[f64], p: usize) -> Vec<f64> {
    (0..p)
        .map(|k| normalized.iter().enumerate().map(|(i, w)| w * tau[i * p + k]).sum())
        .collect()
}

fn normalize(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// Survey-weighted sample ATE per pooled draw, with summaries.
pub fn weighted_ate(draws: &PooledDraws, weights: &[f64]) -> Result<AteReport> {
    check_weights(weights, draws.n)?;
    if draws.num_draws() == 0 {
        return Err(Error::EmptyInput("posterior draws"));
    }
    let w = normalize(weights);
    let joint: Vec<Vec<f64>> = draws.tau.iter().map(|t| weighted_draw(t, &w, draws.p)).collect();
    let components = (0..draws.p)
        .map(|k| {
            let d: Vec<f64> = joint.iter().map(|v| v[k]).collect();
            let (lower, upper) = equal_tailed_interval(&d, 0.95);
            AteComponent {
                mean: d.iter().sum::<f64>() / d.len() as f64,
                lower,
                upper,
                draws: d,
            }
        })
        .collect();
    Ok(AteReport {
        components,
        joint,
        chain: draws.chain.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModerationCurve {
    pub covariate: String,
    pub grid: Vec<f64>,
    /// rows of the design the curves were computed for
    pub units: Vec<usize>,
    /// `ice[u][g]` is the posterior-mean `τ` (length p) of unit `u` at grid point `g`
    pub ice: Vec<Vec<Vec<f64>>>,
    /// `pdp[g]`, length p
    pub pdp: Vec<Vec<f64>>,
}

pub const GRID_POINTS: usize = 20;
pub const ICE_UNITS: usize = 100;

/// ICE and PDP curves of posterior-mean `τ` against one covariate.
///
/// The covariate is set to each of `grid_size` evenly spaced values across
/// its observed range for every selected unit; with `subsample`, at most that
/// many units are drawn without replacement using `seed`.
pub fn moderation_curves(
    draws: &PooledDraws,
    design: &Design,
    covariate: &str,
    grid_size: usize,
    subsample: Option<usize>,
    seed: u64,
) -> Result<ModerationCurve> {
    let c = design.column(covariate)?;
    if grid_size < 2 {
        return Err(Error::InvalidParameter("moderation grid needs at least two points".into()));
    }
    if draws.models.iter().flatten().all(|m| m.forests.is_empty()) {
        return Err(Error::EmptyInput("treatment ensembles"));
    }
    let n = design.x.nrows();
    let units: Vec<usize> = match subsample {
        Some(k) if k < n => {
            let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };
    let col = design.x.column(c);
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let grid: Vec<f64> = (0..grid_size)
        .map(|g| lo + (hi - lo) * g as f64 / (grid_size - 1) as f64)
        .collect();
    let base = design.x.select(ndarray::Axis(0), &units);
    let p = draws.p;
    let m = units.len();
    let total_draws: usize = draws
        .models
        .iter()
        .filter_map(|blocks| blocks.first())
        .map(|md| md.forests.len())
        .sum();

    let per_grid: Vec<Vec<f64>> = grid
        .par_iter()
        .map(|&g| -> Result<Vec<f64>> {
            let mut x = base.clone();
            x.column_mut(c).fill(g);
            let mut acc = vec![0.0; m * p];
            for blocks in &draws.models {
                for d in predict_blocks(blocks, &x.view())? {
                    for (a, v) in acc.iter_mut().zip(&d) {
                        *a += v;
                    }
                }
            }
            Ok(acc.into_iter().map(|v| v / total_draws as f64).collect())
        })
        .collect::<Result<_>>()?;

    let ice: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|u| per_grid.iter().map(|row| row[u * p..(u + 1) * p].to_vec()).collect())
        .collect();
    let pdp = (0..grid_size)
        .map(|g| (0..p).map(|k| ice.iter().map(|curve| curve[g][k]).sum::<f64>() / m as f64).collect())
        .collect();
    Ok(ModerationCurve {
        covariate: covariate.to_string(),
        grid,
        units,
        ice,
        pdp,
    })
}

/// Least-squares slope of `y` on `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// A fitted analysis: chains plus the data they were fitted on.
#[derive(Debug, Clone)]
pub struct FittedRun {
    pub meta: RunMeta,
    pub design: Design,
    pub pi_hat: Array2<f64>,
    pub treatment: Array2<f64>,
    pub weights: Vec<f64>,
    pub chains: Vec<ChainDraws>,
}

/// Run metadata persisted as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub n: usize,
    pub p: usize,
    pub dropped_rows: usize,
    pub outcome_names: Vec<Vec<String>>,
    pub treatment_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub chains: Vec<ChainMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub chain: usize,
    pub group: usize,
    pub blocks: Vec<BlockMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMeta {
    pub scaling: Vec<Scaling>,
    pub schema: Schema,
}

/// Stream 0 drives the propensity model; chain `c` uses stream `c + 1`.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Estimates (or reads) the propensities, then fits every chain in parallel.
pub fn fit_analysis(config: &AnalysisConfig, data: &LoadedData, seed: u64) -> Result<FittedRun> {
    let pi_hat = match &data.propensity {
        Some(pi) => pi.clone(),
        None => {
            let cfg = config.propensity.bart_config();
            let mut rng = stream_rng(seed, 0);
            let mut pi = Array2::zeros(data.treatment.raw_dim());
            for k in 0..data.treatment.ncols() {
                let fit = fit_propensity(&data.treatment.column(k).to_vec(), &data.design.x.view(), &cfg, &mut rng)?;
                pi.column_mut(k).assign(&ndarray::Array1::from(fit.pi_hat));
            }
            pi
        }
    };
    let jobs: Vec<(usize, usize)> = (0..data.outcomes.len())
        .flat_map(|g| (0..config.chains_per_group).map(move |c| (g, c)))
        .enumerate()
        .map(|(chain, (g, _))| (chain, g))
        .collect();
    let fitted: Vec<(ChainDraws, ChainMeta)> = jobs
        .par_iter()
        .map(|&(chain, group)| -> Result<(ChainDraws, ChainMeta)> {
            let ds = data.dataset(group, &pi_hat)?;
            let mut rng = stream_rng(seed, chain as u64 + 1);
            let fits = match config.model {
                FitModel::Mvbcf => vec![fit_causal(&ds, &config.causal, &mut rng)?],
                FitModel::Bcf => (0..ds.p())
                    .map(|k| fit_causal(&ds.component(k)?, &config.causal, &mut rng))
                    .collect::<Result<_>>()?,
            };
            let meta = ChainMeta {
                chain,
                group,
                blocks: fits
                    .iter()
                    .map(|f| BlockMeta {
                        scaling: f.scaling.clone(),
                        schema: f.schema.clone(),
                    })
                    .collect(),
            };
            Ok((ChainDraws::from_fits(chain, group, config.causal.burn_in, &fits)?, meta))
        })
        .collect::<Result<_>>()?;
    let (chains, chain_meta): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
    Ok(FittedRun {
        meta: RunMeta {
            seed,
            n: data.n(),
            p: data.p(),
            dropped_rows: data.dropped,
            outcome_names: data.outcome_names.clone(),
            treatment_names: data.treatment_names.clone(),
            covariate_names: data.design.names.clone(),
            chains: chain_meta,
        },
        design: data.design.clone(),
        pi_hat,
        treatment: data.treatment.clone(),
        weights: data.weights.clone(),
        chains,
    })
}

pub const META_FILE: &str = "run.json";
pub const DESIGN_FILE: &str = "design.csv";

pub fn draws_file(chain: usize) -> String {
    format!("draws_chain{chain}.csv")
}

pub fn tau_file(chain: usize) -> String {
    format!("tau_chain{chain}.csv")
}

pub fn trees_file(chain: usize) -> String {
    format!("trees_chain{chain}.txt")
}

/// Named in-memory artifacts, written together.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Artifacts {
    pub files: Vec<(String, String)>,
}

impl Artifacts {
    pub fn add(&mut self, name: impl Into<String>, contents: String) {
        self.files.push((name.into(), contents));
    }

    /// Writes every file into `dir`. On failure the files written so far are
    /// removed again.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let created = !dir.exists();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (name, contents) in &self.files {
            let path = dir.join(name);
            if let Err(e) = fs::write(&path, contents) {
                for w in &written {
                    let _ = fs::remove_file(w);
                }
                if created {
                    let _ = fs::remove_dir(dir);
                }
                return Err(Error::io(&path, e));
            }
            written.push(path);
        }
        Ok(written)
    }
}

fn header_line(fields: impl IntoIterator<Item = String>) -> String {
    let mut s = fields.into_iter().collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

/// Serializes a fitted run. Per chain: `draws_chain{c}.csv` with columns
/// `iteration, chain, sigma_a_b (row-major), ate_k`; `tau_chain{c}.csv` with
/// `iteration, chain, unit, tau_k`; `trees_chain{c}.txt` with one
/// `iteration ensemble index tree` record per line.
pub fn persist_run(run: &FittedRun) -> Result<Artifacts> {
    let mut out = Artifacts::default();
    out.add(
        META_FILE,
        serde_json::to_string_pretty(&run.meta).map_err(|e| Error::Config(e.to_string()))? + "\n",
    );

    let q = run.treatment.ncols();
    let mut design = header_line(
        run.design
            .names
            .iter()
            .cloned()
            .chain((0..q).map(|k| format!("pi_{}", k + 1)))
            .chain((0..q).map(|k| format!("z_{}", k + 1)))
            .chain(std::iter::once("weight".to_string())),
    );
    for i in 0..run.design.x.nrows() {
        let row: Vec<String> = run
            .design
            .x
            .row(i)
            .iter()
            .chain(run.pi_hat.row(i).iter())
            .chain(run.treatment.row(i).iter())
            .chain(std::iter::once(&run.weights[i]))
            .map(|v| v.to_string())
            .collect();
        design.push_str(&row.join(","));
        design.push('\n');
    }
    out.add(DESIGN_FILE, design);

    let w = normalize(&run.weights);
    for c in &run.chains {
        let p = c.p;
        let mut draws = header_line(
            ["iteration".to_string(), "chain".to_string()]
                .into_iter()
                .chain((0..p * p).map(|k| format!("sigma_{}_{}", k / p + 1, k % p + 1)))
                .chain((0..p).map(|k| format!("ate_{}", k + 1))),
        );
        let mut tau = header_line(
            ["iteration", "chain", "unit"]
                .iter()
                .map(|s| s.to_string())
                .chain((0..p).map(|k| format!("tau_{}", k + 1))),
        );
        let mut trees = String::new();
        for (d, t) in c.tau.iter().enumerate() {
            let it = c.iterations[d];
            let ate = weighted_draw(t, &w, p);
            let fields: Vec<String> = c.sigma[d]
                .to_row_major()
                .iter()
                .chain(ate.iter())
                .map(|v| v.to_string())
                .collect();
            let _ = writeln!(draws, "{it},{},{}", c.chain, fields.join(","));
            for i in 0..c.n {
                let vals: Vec<String> = t[i * p..(i + 1) * p].iter().map(|v| v.to_string()).collect();
                let _ = writeln!(tau, "{it},{},{i},{}", c.chain, vals.join(","));
            }
            for (b, block) in c.blocks.iter().enumerate() {
                for (ensemble, forests) in [("mu", &block.mu_forests), ("tau", &block.model.forests)] {
                    if let Some(f) = forests.get(d) {
                        for (j, tree) in f.iter().enumerate() {
                            let _ = writeln!(trees, "{it} {b} {ensemble} {j} {tree}");
                        }
                    }
                }
            }
        }
        out.add(draws_file(c.chain), draws);
        out.add(tau_file(c.chain), tau);
        out.add(trees_file(c.chain), trees);
    }
    Ok(out)
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_csv_numbers(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .zip(&headers)
            .map(|(v, h)| parse_value(v, r + 1, h))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((headers, rows))
}

/// Reads a run written by [`persist_run`].
pub fn load_run(dir: &Path) -> Result<FittedRun> {
    let meta: RunMeta = serde_json::from_str(&read_to_string(&dir.join(META_FILE))?)
        .map_err(|e| Error::Config(format!("{}: {e}", dir.join(META_FILE).display())))?;
    let (n, p) = (meta.n, meta.p);
    let q = meta.treatment_names.len();
    let d = meta.covariate_names.len();
    let (_, rows) = parse_csv_numbers(&dir.join(DESIGN_FILE))?;
    if rows.len() != n || rows.iter().any(|r| r.len() != d + 2 * q + 1) {
        return Err(Error::Shape(format!("{DESIGN_FILE} does not match {META_FILE}")));
    }
    let x = Array2::from_shape_fn((n, d), |(i, j)| rows[i][j]);
    let pi_hat = Array2::from_shape_fn((n, q), |(i, k)| rows[i][d + k]);
    let treatment = Array2::from_shape_fn((n, q), |(i, k)| rows[i][d + q + k]);
    let weights: Vec<f64> = rows.iter().map(|r| r[d + 2 * q]).collect();

    let mut chains = Vec::with_capacity(meta.chains.len());
    for cm in &meta.chains {
        let (_, draw_rows) = parse_csv_numbers(&dir.join(draws_file(cm.chain)))?;
        let iterations: Vec<usize> = draw_rows.iter().map(|r| r[0] as usize).collect();
        let sigma = draw_rows
            .iter()
            .map(|r| SymMatrix::from_row_major(p, &r[2..2 + p * p]))
            .collect::<Result<Vec<_>>>()?;
        let (_, tau_rows) = parse_csv_numbers(&dir.join(tau_file(cm.chain)))?;
        if tau_rows.len() != iterations.len() * n {
            return Err(Error::Shape(format!("{} has {} rows, expected {}", tau_file(cm.chain), tau_rows.len(), iterations.len() * n)));
        }
        let tau: Vec<Vec<f64>> = tau_rows
            .chunks(n)
            .map(|block| block.iter().flat_map(|r| r[3..3 + p].to_vec()).collect())
            .collect();
        let empty = vec![Vec::new(); iterations.len()];
        let mut mu_forests: Vec<Vec<Vec<Tree>>> = vec![empty.clone(); cm.blocks.len()];
        let mut tau_forests: Vec<Vec<Vec<Tree>>> = vec![empty; cm.blocks.len()];
        let trees_path = dir.join(trees_file(cm.chain));
        let mut draw_of_iter = std::collections::HashMap::new();
        for (k, it) in iterations.iter().enumerate() {
            draw_of_iter.insert(*it, k);
        }
        for (line_no, line) in read_to_string(&trees_path)?.lines().enumerate() {
            let mut parts = line.splitn(5, ' ');
            let bad = || Error::TreeFormat(format!("{} line {}", trees_path.display(), line_no + 1));
            let it: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let b: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .filter(|b| *b < cm.blocks.len())
                .ok_or_else(bad)?;
            let ensemble = parts.next().ok_or_else(bad)?;
            let _index = parts.next().ok_or_else(bad)?;
            let tree: Tree = parts.next().ok_or_else(bad)?.parse()?;
            let k = *draw_of_iter.get(&it).ok_or_else(bad)?;
            match ensemble {
                "mu" => mu_forests[b][k].push(tree),
                "tau" => tau_forests[b][k].push(tree),
                _ => return Err(bad()),
            }
        }
        chains.push(ChainDraws {
            chain: cm.chain,
            group: cm.group,
            iterations,
            n,
            p,
            tau,
            sigma,
            blocks: cm
                .blocks
                .iter()
                .zip(mu_forests.into_iter().zip(tau_forests))
                .map(|(bm, (mu, tau))| ChainBlock {
                    model: TauModel {
                        schema: bm.schema.clone(),
                        scaling: bm.scaling.clone(),
                        forests: tau,
                    },
                    mu_forests: mu,
                })
                .collect(),
        });
    }
    Ok(FittedRun {
        design: Design {
            names: meta.covariate_names.clone(),
            x,
        },
        meta,
        pi_hat,
        treatment,
        weights,
        chains,
    })
}

/// ATE summaries and per-draw values as delimited tables.
pub fn ate_artifacts(report: &AteReport, names: &[String]) -> Artifacts {
    let mut summary = String::from("component,mean,lower_95,upper_95,draws\n");
    for (k, c) in report.components.iter().enumerate() {
        let _ = writeln!(summary, "{},{},{},{},{}", names[k], c.mean, c.lower, c.upper, c.draws.len());
    }
    let mut draws = header_line(
        ["draw".to_string(), "chain".to_string()]
            .into_iter()
            .chain(names.iter().cloned()),
    );
    for (d, v) in report.joint.iter().enumerate() {
        let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(draws, "{d},{},{}", report.chain[d], vals.join(","));
    }
    let mut out = Artifacts::default();
    out.add("ate_summary.csv", summary);
    out.add("ate_draws.csv", draws);
    out
}

/// Long-format moderation table: `curve, unit, value, tau_k`.
pub fn moderation_artifact(curve: &ModerationCurve, names: &[String]) -> String {
    let mut out = header_line(
        ["curve", "unit", &curve.covariate]
            .iter()
            .map(|s| s.to_string())
            .chain(names.iter().map(|n| format!("tau_{n}"))),
    );
    for (u, unit) in curve.units.iter().enumerate() {
        for (g, v) in curve.grid.iter().enumerate() {
            let vals: Vec<String> = curve.ice[u][g].iter().map(|x| x.to_string()).collect();
            let _ = writeln!(out, "ice,{unit},{v},{}", vals.join(","));
        }
    }
    for (g, v) in curve.grid.iter().enumerate() {
        let vals: Vec<String> = curve.pdp[g].iter().map(|x| x.to_string()).collect();
        let _ = writeln!(out, "pdp,,{v},{}", vals.join(","));
    }
    out
}

/// `count (pct%)` with the percentage rounded to a whole number.
pub fn group_size(count: usize, total: usize) -> String {
    let pct = if total == 0 { 0.0 } else { 100.0 * count as f64 / total as f64 };
    format!("{count} ({pct:.0}%)")
}

/// Component labels: the first group's column names, or the shared stem when
/// groups are plausible values of the same outcomes.
pub fn component_names(meta: &RunMeta) -> Vec<String> {
    meta.outcome_names.first().cloned().unwrap_or_default()
}

/// Plain-text summary with group sizes and ATE intervals.
pub fn render_report(run: &FittedRun, report: &AteReport) -> String {
    let names = component_names(&run.meta);
    let n = run.meta.n;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "units: {n} ({} dropped), chains: {}, draws: {}",
        run.meta.dropped_rows,
        run.chains.len(),
        report.joint.len()
    );
    for (k, t) in run.meta.treatment_names.iter().enumerate() {
        let treated = run.treatment.column(k).iter().filter(|v| **v == 1.0).count();
        let _ = writeln!(out, "treatment {t}");
        let _ = writeln!(out, "  {:<22}{:>14}", "Treatment Group Size", group_size(treated, n));
        let _ = writeln!(out, "  {:<22}{:>14}", "Control Group Size", group_size(n - treated, n));
    }
    let _ = writeln!(out, "{:<24}{:>10}  {}", "outcome", "ATE", "95% CI");
    for (k, c) in report.components.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:<24}{:>10.2}  [{:.2}, {:.2}]",
            names.get(k).cloned().unwrap_or_else(|| format!("y{}", k + 1)),
            c.mean,
            c.lower,
            c.upper
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_csv(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("data.csv");
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        path
    }

    fn config(extra_cov: Vec<CovariateSpec>) -> AnalysisConfig {
        let mut covariates = vec![CovariateSpec {
            name: "age".into(),
            kind: CovariateKind::Numeric,
        }];
        covariates.extend(extra_cov);
        AnalysisConfig {
            data: PathBuf::from("data.csv"),
            outcome_groups: vec![vec!["m".into(), "s".into()]],
            treatment: vec!["z".into()],
            covariates,
            weight: None,
            propensity: PropensitySettings::default(),
            causal: CausalConfig::default(),
            model: FitModel::Mvbcf,
            chains_per_group: 1,
            output_dir: PathBuf::from("out"),
        }
    }

    #[test]
    fn encodes_columns_and_drops_incomplete_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(
            dir.path(),
            "m,s,z,age,region\n1,2,1,10,north\n2,3,0,,south\n3,,1,12,east\n4,5,NA,13,north\n5,6,0,14,\n",
        );
        let cfg = config(vec![CovariateSpec {
            name: "region".into(),
            kind: CovariateKind::Categorical,
        }]);
        let data = load_csv(&path, &cfg).unwrap();
        assert_eq!(data.dropped, 2);
        assert_eq!(data.n(), 3);
        assert_eq!(
            data.design.names,
            ["age", "age_missing", "region=missing", "region=north", "region=south"]
        );
        assert_eq!(data.design.x.column(0).to_vec(), [10.0, 12.0, 14.0]);
        assert_eq!(data.design.x.column(1).to_vec(), [0.0, 1.0, 0.0]);
        assert_eq!(data.weights, [1.0; 3]);
        assert_eq!(data.z().column(1).to_vec(), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn three_levels_give_three_indicators() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), "m,s,z,age,c\n1,2,1,10,a\n2,3,0,11,b\n3,4,1,12,c\n");
        let cfg = config(vec![CovariateSpec {
            name: "c".into(),
            kind: CovariateKind::Categorical,
        }]);
        let data = load_csv(&path, &cfg).unwrap();
        assert_eq!(data.design.names, ["age", "c=a", "c=b", "c=c"]);
        for i in 0..3 {
            assert_eq!(data.design.x.row(i).iter().skip(1).sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn reports_missing_columns_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), "m,s,z,age\n1,2,1,10\n2,3,0,abc\n");
        let err = load_csv(&path, &config(vec![])).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "age");
            }
            other => panic!("unexpected {other}"),
        }
        let mut cfg = config(vec![]);
        cfg.weight = Some("w".into());
        assert!(matches!(load_csv(&path, &cfg), Err(Error::Column(c)) if c == "w"));
    }

    #[test]
    fn rejects_mismatched_groups() {
        let mut cfg = config(vec![]);
        cfg.outcome_groups.push(vec!["a".into()]);
        assert!(cfg.validate().is_err());
    }

    fn toy_pool(tau: Vec<Vec<f64>>, n: usize, p: usize) -> PooledDraws {
        PooledDraws {
            n,
            p,
            sigma: vec![SymMatrix::identity(p); tau.len()],
            chain: vec![0; tau.len()],
            tau,
            models: Vec::new(),
        }
    }

    #[test]
    fn weighted_ate_hand_values() {
        let pool = toy_pool(vec![vec![0.0, 4.0]], 2, 1);
        let r = weighted_ate(&pool, &[1.0, 3.0]).unwrap();
        assert_eq!(r.components[0].draws, [3.0]);
        let equal = weighted_ate(&pool, &[2.0, 2.0]).unwrap();
        assert_eq!(equal.components[0].draws, [2.0]);
        assert!(matches!(weighted_ate(&pool, &[1.0, 0.0]), Err(Error::Weight { row: 1, .. })));
    }

    #[test]
    fn group_size_format() {
        assert_eq!(group_size(3672, 4118), "3672 (89%)");
        assert_eq!(group_size(0, 10), "0 (0%)");
    }

    #[test]
    fn parses_config_sections() {
        let text = r#"
            [analysis]
            data = "d.csv"
            outcome_groups = [["m1", "s1"], ["m2", "s2"]]
            treatment = ["desk"]
            covariates = [{ name = "age" }, { name = "sex", kind = "categorical" }]
            chains_per_group = 2
            [analysis.causal]
            num_tau_trees = 10
            [simulation]
            effect_kind = "heterogeneous"
            n_train = 100
            [benchmark]
            methods = ["mvbcf", "bcf_per_outcome"]
        "#;
        let cfg = ConfigFile::parse(text).unwrap();
        let a = cfg.analysis().unwrap();
        assert_eq!(a.causal.num_tau_trees, 10);
        assert_eq!(a.causal.num_mu_trees, 50);
        assert_eq!(a.covariates[1].kind, CovariateKind::Categorical);
        assert_eq!(cfg.simulation.n_train, 100);
        assert_eq!(cfg.benchmark.methods.len(), 2);
        assert!(ConfigFile::parse("[analysis]\nbogus = 1").is_err());
    }

    fn stump_model(value: f64, draws: usize) -> TauModel {
        TauModel {
            schema: Schema {
                num_covariates: 2,
                num_propensity: 1,
                mu_covariates: vec![0, 1],
                tau_covariates: vec![0, 1],
            },
            scaling: vec![Scaling {
                center: 3.0,
                scale: 2.0,
            }],
            forests: vec![vec![Tree::stump_with(vec![value])]; draws],
        }
    }

    fn grid_design(n: usize) -> Design {
        Design {
            names: vec!["a".into(), "b".into()],
            x: Array2::from_shape_fn((n, 2), |(i, j)| (i * (j + 1)) as f64 / n as f64),
        }
    }

    #[test]
    fn constant_effect_gives_flat_curves() {
        let mut pool = toy_pool(vec![vec![1.0; 12]; 4], 12, 1);
        pool.models = vec![vec![stump_model(0.5, 4)]];
        let curve = moderation_curves(&pool, &grid_design(12), "b", 7, None, 0).unwrap();
        assert_eq!(curve.grid.len(), 7);
        assert_eq!(curve.grid[0], 0.0);
        for unit in &curve.ice {
            for point in unit {
                assert_eq!(point, &vec![1.0]);
            }
        }
        assert!(matches!(
            moderation_curves(&pool, &grid_design(12), "zz", 7, None, 0),
            Err(Error::Column(c)) if c == "zz"
        ));
    }

    #[test]
    fn pdp_is_mean_of_ice_and_subsample_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 150;
        let x = Array2::from_shape_fn((n, 2), |_| rand::Rng::random::<f64>(&mut rng));
        let y = Array2::from_shape_fn((n, 1), |(i, _)| x[[i, 0]] + rand::Rng::random::<f64>(&mut rng));
        let z = Array2::from_shape_fn((n, 1), |(i, _)| (i % 2) as f64);
        let ds = CausalDataset::new(x.clone(), y, z)
            .unwrap()
            .with_propensity(Array2::from_elem((n, 1), 0.5))
            .unwrap();
        let cfg = CausalConfig {
            num_mu_trees: 5,
            num_tau_trees: 3,
            ..CausalConfig::default()
        }
        .with_iterations(5, 10);
        let fit = fit_causal(&ds, &cfg, &mut rng).unwrap();
        let chain = ChainDraws::from_fits(0, 0, 5, &[fit]).unwrap();
        let pool = pool_chains(&[chain]).unwrap();
        let design = Design {
            names: vec!["a".into(), "b".into()],
            x,
        };
        let a = moderation_curves(&pool, &design, "a", GRID_POINTS, Some(ICE_UNITS), 9).unwrap();
        let b = moderation_curves(&pool, &design, "a", GRID_POINTS, Some(ICE_UNITS), 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.units.len(), ICE_UNITS);
        for g in 0..GRID_POINTS {
            let m = a.ice.iter().map(|c| c[g][0]).sum::<f64>() / ICE_UNITS as f64;
            assert_eq!(a.pdp[g][0], m);
        }
    }

    #[test]
    fn pooling_rejects_mismatched_chains() {
        let model = stump_model(0.1, 2);
        let chain = |c: usize, n: usize| ChainDraws {
            chain: c,
            group: 0,
            iterations: vec![0, 1],
            n,
            p: 1,
            tau: vec![vec![0.0; n]; 2],
            sigma: vec![SymMatrix::identity(1); 2],
            blocks: vec![ChainBlock {
                model: model.clone(),
                mu_forests: Vec::new(),
            }],
        };
        assert!(pool_chains(&[]).is_err());
        assert!(matches!(pool_chains(&[chain(0, 3), chain(1, 4)]), Err(Error::Pooling(_))));
        assert_eq!(pool_chains(&[chain(0, 3), chain(1, 3)]).unwrap().chain, [0, 0, 1, 1]);
    }

    proptest! {
        #[test]
        fn ate_invariant_under_exact_rescaling(
            w in proptest::collection::vec(1u32..1000, 2..30),
            int_scale in 1u32..50,
            pow in -8i32..8,
            seed in 0u64..1000,
        ) {
            let n = w.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tau: Vec<Vec<f64>> = (0..3).map(|_| (0..2 * n).map(|_| rand::Rng::random::<f64>(&mut rng)).collect()).collect();
            let pool = toy_pool(tau, n, 2);
            let base: Vec<f64> = w.iter().map(|v| f64::from(*v)).collect();
            let r = weighted_ate(&pool, &base).unwrap();
            let by_int: Vec<f64> = base.iter().map(|v| v * f64::from(int_scale)).collect();
            let by_pow: Vec<f64> = base.iter().map(|v| v * 2f64.powi(pow)).collect();
            prop_assert_eq!(&weighted_ate(&pool, &by_int).unwrap(), &r);
            prop_assert_eq!(&weighted_ate(&pool, &by_pow).unwrap(), &r);
            for c in &r.components {
                prop_assert!(c.lower <= c.mean && c.mean <= c.upper);
            }
        }

        #[test]
        fn pooling_preserves_draws(lengths in proptest::collection::vec(1usize..6, 1..5)) {
            let chains: Vec<ChainDraws> = lengths
                .iter()
                .enumerate()
                .map(|(c, &m)| ChainDraws {
                    chain: c,
                    group: 0,
                    iterations: (0..m).collect(),
                    n: 2,
                    p: 1,
                    tau: (0..m).map(|d| vec![c as f64, d as f64]).collect(),
                    sigma: vec![SymMatrix::identity(1); m],
                    blocks: vec![ChainBlock { model: stump_model(0.0, m), mu_forests: Vec::new() }],
                })
                .collect();
            let pool = pool_chains(&chains).unwrap();
            prop_assert_eq!(pool.num_draws(), lengths.iter().sum::<usize>());
            let expected: Vec<Vec<f64>> = chains.iter().flat_map(|c| c.tau.clone()).collect();
            prop_assert_eq!(&pool.tau, &expected);
            for (d, t) in pool.tau.iter().enumerate() {
                prop_assert_eq!(pool.chain[d] as f64, t[0]);
            }
        }
    }
}
