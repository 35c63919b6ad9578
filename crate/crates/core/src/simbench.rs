//! Friedman-based causal simulation and the benchmark harness comparing the
//! multivariate model with per-outcome BCF and a BART S-learner.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bart::{fit_propensity, BartConfig, PropensityFit, SLearner};
use crate::causal::{fit_causal, predict_causal, CausalConfig, CausalDataset};
use crate::error::{Error, Result};
use crate::stats::{crps_empirical, equal_tailed_interval, mean, sd};

/// `10 sin(π x₁ x₂) + 20 (x₃ − 0.5)² + 10 x₄ + 5 x₅`; further entries are ignored.
pub fn friedman(x: &ArrayView1<f64>) -> f64 {
    10.0 * (std::f64::consts::PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3] + 5.0 * x[4]
}

pub const NUM_COVARIATES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectKind {
    Homogeneous,
    Heterogeneous,
}

impl std::fmt::Display for EffectKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EffectKind::Homogeneous => "homogeneous",
            EffectKind::Heterogeneous => "heterogeneous",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub effect_kind: EffectKind,
    pub n_train: usize,
    pub n_test: usize,
    pub replications: usize,
    /// bounds on `sd(f) / σ`
    pub snr_band: [f64; 2],
    /// `|τ_k| ≤ cap · sd(y)`
    pub tau_magnitude_cap: f64,
    pub seed: u64,
    /// omit the noise term entirely
    pub noise_free: bool,
    /// use these effects instead of drawing them
    pub fixed_tau: Option<[f64; 2]>,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            effect_kind: EffectKind::Homogeneous,
            n_train: 500,
            n_test: 500,
            replications: 1,
            snr_band: [1.0, 2.0],
            tau_magnitude_cap: 0.3,
            seed: 0,
            noise_free: false,
            fixed_tau: None,
        }
    }
}

/// Smallest effect magnitude drawn, as a fraction of `sd(y)`.
pub const TAU_MAGNITUDE_FLOOR: f64 = 0.05;

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.snr_band;
        if !(lo >= 1.0 && hi <= 2.0 && lo <= hi) {
            return Err(Error::Config(format!("signal-to-noise band [{lo}, {hi}] must lie within [1, 2]")));
        }
        if !(self.tau_magnitude_cap > TAU_MAGNITUDE_FLOOR && self.tau_magnitude_cap <= 0.3) {
            return Err(Error::Config(format!(
                "effect cap {} must lie in ({TAU_MAGNITUDE_FLOOR}, 0.3]",
                self.tau_magnitude_cap
            )));
        }
        if self.n_train == 0 || self.replications == 0 {
            return Err(Error::Config("need at least one training row and one replication".into()));
        }
        Ok(())
    }
}

/// One simulated sample. Matrices with two columns hold one column per outcome.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub x: Array2<f64>,
    pub mu: Vec<f64>,
    pub tau: Array2<f64>,
    pub propensity: Array2<f64>,
    pub z: Array2<f64>,
    pub y: Array2<f64>,
}

impl SyntheticTruth {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dataset(&self) -> Result<CausalDataset> {
        CausalDataset::new(self.x.clone(), self.y.clone(), self.z.clone())
    }

    fn rows(&self, idx: std::ops::Range<usize>) -> SyntheticTruth {
        let s = ndarray::s![idx.clone(), ..];
        SyntheticTruth {
            x: self.x.slice(s).to_owned(),
            mu: self.mu[idx.clone()].to_vec(),
            tau: self.tau.slice(s).to_owned(),
            propensity: self.propensity.slice(s).to_owned(),
            z: self.z.slice(s).to_owned(),
            y: self.y.slice(s).to_owned(),
        }
    }
}

/// Train/test samples from one draw of the generating process.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: SyntheticTruth,
    pub test: SyntheticTruth,
    /// generating effects before moderation
    pub tau: [f64; 2],
    pub sigma2: f64,
    pub snr: f64,
}

/// Heterogeneous moderation factors for the two outcomes.
pub fn moderation(x: &ArrayView1<f64>) -> [f64; 2] {
    [(1.0 + x[5] + x[6]) / 2.0, (2.0 + x[6]) / 3.0]
}

/// Generates one train/test draw of the two-outcome Friedman process.
pub fn gen_synthetic<R: Rng + ?Sized>(spec: &SimSpec, rng: &mut R) -> Result<SyntheticData> {
    spec.validate()?;
    let n = spec.n_train + spec.n_test;
    let x = Array2::from_shape_fn((n, NUM_COVARIATES), |_| rng.random::<f64>());
    let mu: Vec<f64> = x.rows().into_iter().map(|r| friedman(&r)).collect();
    let (lo, hi) = mu.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let range = hi - lo;
    let mut propensity = Array2::zeros((n, 2));
    for i in 0..n {
        let u = if range > 0.0 { (mu[i] - lo) / range } else { 0.5 };
        propensity[[i, 0]] = 0.1 + 0.8 * u;
        propensity[[i, 1]] = 0.1 + 0.8 * (1.0 - u);
    }
    let z = propensity.mapv(|p| if rng.random::<f64>() < p { 1.0 } else { 0.0 });

    let [snr_lo, snr_hi] = spec.snr_band;
    let snr = if snr_hi > snr_lo { rng.random_range(snr_lo..=snr_hi) } else { snr_lo };
    let sd_mu = sd(&mu);
    let sigma = sd_mu / snr;
    let sd_y = sd_mu * (1.0 + 1.0 / (snr * snr)).sqrt();
    let tau = match spec.fixed_tau {
        Some(t) => t,
        None => {
            let mut draw = || {
                let mag = rng.random_range(TAU_MAGNITUDE_FLOOR..=spec.tau_magnitude_cap) * sd_y;
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            };
            [draw(), draw()]
        }
    };
    let mut unit_tau = Array2::zeros((n, 2));
    for (i, row) in x.rows().into_iter().enumerate() {
        let m = match spec.effect_kind {
            EffectKind::Homogeneous => [1.0, 1.0],
            EffectKind::Heterogeneous => moderation(&row),
        };
        unit_tau[[i, 0]] = m[0] * tau[0];
        unit_tau[[i, 1]] = m[1] * tau[1];
    }
    let mut y = Array2::zeros((n, 2));
    for i in 0..n {
        for k in 0..2 {
            let eps = if spec.noise_free {
                0.0
            } else {
                sigma * rng.sample::<f64, _>(StandardNormal)
            };
            y[[i, k]] = mu[i] + unit_tau[[i, k]] * z[[i, k]] + eps;
        }
    }
    let all = SyntheticTruth {
        x,
        mu,
        tau: unit_tau,
        propensity,
        z,
        y,
    };
    Ok(SyntheticData {
        train: all.rows(0..spec.n_train),
        test: all.rows(spec.n_train..n),
        tau,
        sigma2: if spec.noise_free { 0.0 } else { sigma * sigma },
        snr,
    })
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("lengths differ: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::EmptyInput("metric input"));
    }
    Ok(())
}

pub fn rmse(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    check_lengths(truth.len(), estimate.len())?;
    Ok((truth.iter().zip(estimate).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64).sqrt())
}

/// Root mean squared error of per-unit effect estimates.
pub fn pehe(tau_true: &[f64], tau_hat: &[f64]) -> Result<f64> {
    rmse(tau_true, tau_hat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalMetrics {
    pub coverage: f64,
    pub width: f64,
}

pub const MIN_INTERVAL_DRAWS: usize = 20;

/// Coverage and mean width of per-unit equal-tailed intervals.
pub fn interval_metrics(draws: &[Vec<f64>], truth: &[f64], level: f64) -> Result<IntervalMetrics> {
    check_lengths(draws.len(), truth.len())?;
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("interval level {level} outside (0, 1)")));
    }
    let mut covered = 0usize;
    let mut width = 0.0;
    for (d, t) in draws.iter().zip(truth) {
        if d.len() < MIN_INTERVAL_DRAWS {
            return Err(Error::InsufficientSample {
                got: d.len(),
                need: MIN_INTERVAL_DRAWS,
            });
        }
        let (lo, hi) = equal_tailed_interval(d, level);
        if lo <= *t && *t <= hi {
            covered += 1;
        }
        width += hi - lo;
    }
    let n = truth.len() as f64;
    Ok(IntervalMetrics {
        coverage: covered as f64 / n,
        width: width / n,
    })
}

/// Per-unit CRPS averaged over units.
pub fn mean_crps(draws: &[Vec<f64>], truth: &[f64]) -> Result<f64> {
    check_lengths(draws.len(), truth.len())?;
    let mut total = 0.0;
    for (d, t) in draws.iter().zip(truth) {
        total += crps_empirical(d, *t)?;
    }
    Ok(total / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mvbcf,
    BcfPerOutcome,
    BartSlearner,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Mvbcf, Method::BcfPerOutcome, Method::BartSlearner];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Mvbcf => "mvbcf",
            Method::BcfPerOutcome => "bcf",
            Method::BartSlearner => "bart",
        }
    }

    fn stream(&self) -> u64 {
        match self {
            Method::Mvbcf => 1,
            Method::BcfPerOutcome => 2,
            Method::BartSlearner => 3,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvbcf" => Ok(Method::Mvbcf),
            "bcf" | "bcf_per_outcome" => Ok(Method::BcfPerOutcome),
            "bart" | "bart_slearner" => Ok(Method::BartSlearner),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// Model settings shared by every replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSettings {
    pub causal: CausalConfig,
    pub bart: BartConfig,
    pub propensity: BartConfig,
    pub level: f64,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        Self {
            causal: CausalConfig::default(),
            bart: BartConfig::new(70),
            propensity: BartConfig::new(50),
            level: 0.95,
        }
    }
}

/// Test-set scores for one method and outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub method: Method,
    pub outcome: usize,
    pub rmse_mu: f64,
    pub pehe_tau: f64,
    pub rmse_y: f64,
    pub crps_mu: f64,
    pub crps_tau: f64,
    pub crps_y: f64,
    pub coverage_mu: f64,
    pub width_mu: f64,
    pub coverage_tau: f64,
    pub width_tau: f64,
    pub coverage_y: f64,
    pub width_y: f64,
}

pub const METRICS: [&str; 12] = [
    "rmse_mu",
    "pehe_tau",
    "rmse_y",
    "crps_mu",
    "crps_tau",
    "crps_y",
    "coverage_mu",
    "width_mu",
    "coverage_tau",
    "width_tau",
    "coverage_y",
    "width_y",
];

impl BenchmarkRow {
    pub fn values(&self) -> [f64; 12] {
        [
            self.rmse_mu,
            self.pehe_tau,
            self.rmse_y,
            self.crps_mu,
            self.crps_tau,
            self.crps_y,
            self.coverage_mu,
            self.width_mu,
            self.coverage_tau,
            self.width_tau,
            self.coverage_y,
            self.width_y,
        ]
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        METRICS.iter().position(|m| *m == name).map(|k| self.values()[k])
    }
}

/// Draws per unit, for a single outcome on the test set.
struct OutcomeDraws {
    mu: Vec<Vec<f64>>,
    tau: Vec<Vec<f64>>,
    /// posterior predictive, noise included
    y: Vec<Vec<f64>>,
    /// posterior mean of the regression function
    yhat_mean: Vec<f64>,
}

/// Transposes draw-major row-major `n×p` predictions into per-unit draws of
/// component `k`.
fn per_unit(draws: &[Vec<f64>], n: usize, p: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| draws.iter().map(|d| d[i * p + k]).collect()).collect()
}

fn unit_means(per_unit: &[Vec<f64>]) -> Vec<f64> {
    per_unit.iter().map(|d| mean(d)).collect()
}

fn score(method: Method, outcome: usize, d: &OutcomeDraws, truth: &SyntheticTruth, level: f64) -> Result<BenchmarkRow> {
    let k = outcome;
    let tau_true = truth.tau.column(k).to_vec();
    let y_true = truth.y.column(k).to_vec();
    let mu_i = interval_metrics(&d.mu, &truth.mu, level)?;
    let tau_i = interval_metrics(&d.tau, &tau_true, level)?;
    let y_i = interval_metrics(&d.y, &y_true, level)?;
    Ok(BenchmarkRow {
        method,
        outcome: k,
        rmse_mu: rmse(&truth.mu, &unit_means(&d.mu))?,
        pehe_tau: pehe(&tau_true, &unit_means(&d.tau))?,
        rmse_y: rmse(&y_true, &d.yhat_mean)?,
        crps_mu: mean_crps(&d.mu, &truth.mu)?,
        crps_tau: mean_crps(&d.tau, &tau_true)?,
        crps_y: mean_crps(&d.y, &y_true)?,
        coverage_mu: mu_i.coverage,
        width_mu: mu_i.width,
        coverage_tau: tau_i.coverage,
        width_tau: tau_i.width,
        coverage_y: y_i.coverage,
        width_y: y_i.width,
    })
}

fn add_noise<R: Rng + ?Sized>(yhat: &[Vec<f64>], sd_per_draw: &[f64], rng: &mut R) -> Vec<Vec<f64>> {
    yhat.iter()
        .map(|d| {
            d.iter()
                .zip(sd_per_draw)
                .map(|(v, s)| v + s * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn causal_outcome_draws<R: Rng + ?Sized>(
    data: &CausalDataset,
    pi_test: &Array2<f64>,
    test: &SyntheticTruth,
    components: &[usize],
    config: &CausalConfig,
    rng: &mut R,
) -> Result<Vec<OutcomeDraws>> {
    let draws = fit_causal(data, config, rng)?;
    let z_test = test.z.select(Axis(1), components);
    let pred = predict_causal(&draws, &test.x.view(), &pi_test.view(), &z_test.view())?;
    let (n, p) = (test.n(), components.len());
    Ok((0..p)
        .map(|k| {
            let yhat = per_unit(&pred.yhat, n, p, k);
            let sds: Vec<f64> = draws.sigma.iter().map(|s| s.get(k, k).sqrt()).collect();
            OutcomeDraws {
                mu: per_unit(&pred.mu, n, p, k),
                tau: per_unit(&pred.tau, n, p, k),
                y: add_noise(&yhat, &sds, rng),
                yhat_mean: unit_means(&yhat),
            }
        })
        .collect())
}

fn slearner_draws<R: Rng + ?Sized>(
    train: &SyntheticTruth,
    test: &SyntheticTruth,
    k: usize,
    config: &BartConfig,
    rng: &mut R,
) -> Result<OutcomeDraws> {
    let learner = SLearner::fit(&train.y.column(k).to_vec(), &train.x.view(), &train.z.column(k).to_vec(), config, rng)?;
    let pred = learner.predict(&test.x.view(), &test.z.column(k).to_vec())?;
    let n = test.n();
    let yhat = per_unit(&pred.yhat, n, 1, 0);
    Ok(OutcomeDraws {
        mu: per_unit(&pred.mu, n, 1, 0),
        tau: per_unit(&pred.tau, n, 1, 0),
        y: add_noise(&yhat, &pred.sigma, rng),
        yhat_mean: unit_means(&yhat),
    })
}

/// Fits a propensity model per treatment column on the training rows and
/// returns `(train, test)` propensity matrices.
pub fn propensity_matrices<R: Rng + ?Sized>(
    train: &SyntheticTruth,
    test: &SyntheticTruth,
    config: &BartConfig,
    rng: &mut R,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let q = train.z.ncols();
    let mut pi_train = Array2::zeros((train.n(), q));
    let mut pi_test = Array2::zeros((test.n(), q));
    for k in 0..q {
        let fit: PropensityFit = fit_propensity(&train.z.column(k).to_vec(), &train.x.view(), config, rng)?;
        pi_train.column_mut(k).assign(&ndarray::Array1::from(fit.pi_hat.clone()));
        pi_test.column_mut(k).assign(&ndarray::Array1::from(fit.predict(&test.x.view())));
    }
    Ok((pi_train, pi_test))
}

fn method_rows(
    method: Method,
    data: &SyntheticData,
    pi: &(Array2<f64>, Array2<f64>),
    settings: &BenchmarkSettings,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BenchmarkRow>> {
    let (train, test) = (&data.train, &data.test);
    let p = train.y.ncols();
    let draws: Vec<OutcomeDraws> = match method {
        Method::Mvbcf => {
            let ds = train.dataset()?.with_propensity(pi.0.clone())?;
            let comps: Vec<usize> = (0..p).collect();
            causal_outcome_draws(&ds, &pi.1, test, &comps, &settings.causal, rng)?
        }
        Method::BcfPerOutcome => {
            let full = train.dataset()?.with_propensity(pi.0.clone())?;
            let mut out = Vec::with_capacity(p);
            for k in 0..p {
                let ds = full.component(k)?;
                let pi_test = pi.1.column(k).to_owned().insert_axis(Axis(1));
                out.extend(causal_outcome_draws(&ds, &pi_test, test, &[k], &settings.causal, rng)?);
            }
            out
        }
        Method::BartSlearner => (0..p)
            .map(|k| slearner_draws(train, test, k, &settings.bart, rng))
            .collect::<Result<_>>()?,
    };
    draws
        .iter()
        .enumerate()
        .map(|(k, d)| score(method, k, d, test, settings.level))
        .collect()
}

/// Random source for one replication and purpose; streams never overlap.
pub fn replication_rng(seed: u64, replication: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((replication as u64) << 8 | purpose);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub replication: usize,
    pub method: Option<Method>,
    pub message: String,
}

/// Mean of a metric over completed replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub method: Method,
    pub outcome: usize,
    pub metric: &'static str,
    pub value: f64,
    pub replications: usize,
}

#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub spec: SimSpec,
    pub methods: Vec<Method>,
    /// every scored row with its replication index
    pub rows: Vec<(usize, BenchmarkRow)>,
    pub failures: Vec<Failure>,
}

impl BenchmarkResult {
    pub fn rows_for(&self, method: Method, outcome: usize) -> Vec<&BenchmarkRow> {
        self.rows
            .iter()
            .map(|(_, r)| r)
            .filter(|r| r.method == method && r.outcome == outcome)
            .collect()
    }

    pub fn mean_metric(&self, method: Method, outcome: usize, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows_for(method, outcome)
            .iter()
            .filter_map(|r| r.metric(metric))
            .collect();
        (!vals.is_empty()).then(|| mean(&vals))
    }

    fn outcomes(&self) -> usize {
        self.rows.iter().map(|(_, r)| r.outcome + 1).max().unwrap_or(0)
    }

    pub fn summary(&self) -> Vec<SummaryCell> {
        let mut cells = Vec::new();
        for &method in &self.methods {
            for outcome in 0..self.outcomes() {
                let count = self.rows_for(method, outcome).len();
                for metric in METRICS {
                    if let Some(value) = self.mean_metric(method, outcome, metric) {
                        cells.push(SummaryCell {
                            method,
                            outcome,
                            metric,
                            value,
                            replications: count,
                        });
                    }
                }
            }
        }
        cells
    }

    /// Delimited table: method, outcome, metric, value, replication count.
    pub fn to_table(&self) -> String {
        let mut out = String::from("effect,method,outcome,metric,value,replications\n");
        for c in self.summary() {
            let _ = writeln!(
                out,
                "{},{},y{},{},{:.6},{}",
                self.spec.effect_kind,
                c.method.label(),
                c.outcome + 1,
                c.metric,
                c.value,
                c.replications
            );
        }
        out
    }

    /// Metrics as rows, method/outcome pairs as columns.
    pub fn to_report(&self) -> String {
        let mut out = String::new();
        let outcomes = self.outcomes();
        let _ = writeln!(
            out,
            "{} treatment effect, {} replications (n_train={}, n_test={}), {} failures",
            self.spec.effect_kind,
            self.spec.replications,
            self.spec.n_train,
            self.spec.n_test,
            self.failures.len()
        );
        let _ = write!(out, "{:<14}", "metric");
        for m in &self.methods {
            for k in 0..outcomes {
                let _ = write!(out, "{:>10}", format!("{}:y{}", m.label(), k + 1));
            }
        }
        out.push('\n');
        for metric in METRICS {
            let _ = write!(out, "{metric:<14}");
            for &m in &self.methods {
                for k in 0..outcomes {
                    match self.mean_metric(m, k, metric) {
                        Some(v) => {
                            let _ = write!(out, "{v:>10.3}");
                        }
                        None => {
                            let _ = write!(out, "{:>10}", "-");
                        }
                    }
                }
            }
            out.push('\n');
        }
        for f in &self.failures {
            let who = f.method.map_or("data", |m| m.label());
            let _ = writeln!(out, "failure: replication {} ({who}): {}", f.replication, f.message);
        }
        out
    }
}

const DATA_STREAM: u64 = 0;
const PROPENSITY_STREAM: u64 = 4;

fn run_replication(
    spec: &SimSpec,
    methods: &[Method],
    settings: &BenchmarkSettings,
    rep: usize,
) -> (Vec<(usize, BenchmarkRow)>, Vec<Failure>) {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let fail = |method, e: Error| Failure {
        replication: rep,
        method,
        message: e.to_string(),
    };
    let data = match gen_synthetic(spec, &mut replication_rng(spec.seed, rep, DATA_STREAM)) {
        Ok(d) => d,
        Err(e) => return (rows, vec![fail(None, e)]),
    };
    let needs_pi = methods.iter().any(|m| *m != Method::BartSlearner);
    let pi = if needs_pi {
        match propensity_matrices(
            &data.train,
            &data.test,
            &settings.propensity,
            &mut replication_rng(spec.seed, rep, PROPENSITY_STREAM),
        ) {
            Ok(pi) => Some(pi),
            Err(e) => {
                failures.push(fail(None, e));
                None
            }
        }
    } else {
        None
    };
    for &method in methods {
        let pi = match (&pi, method) {
            (Some(pi), _) => pi.clone(),
            (None, Method::BartSlearner) => (Array2::zeros((0, 0)), Array2::zeros((0, 0))),
            (None, _) => continue,
        };
        let mut rng = replication_rng(spec.seed, rep, method.stream());
        match method_rows(method, &data, &pi, settings, &mut rng) {
            Ok(r) => rows.extend(r.into_iter().map(|row| (rep, row))),
            Err(e) => failures.push(fail(Some(method), e)),
        }
    }
    (rows, failures)
}

/// Runs every replication, in parallel, and collects the scored rows.
/// Failed fits are recorded and excluded; the run continues.
pub fn run_benchmark(spec: &SimSpec, methods: &[Method], settings: &BenchmarkSettings) -> Result<BenchmarkResult> {
    spec.validate()?;
    if spec.n_test == 0 {
        return Err(Error::Config("benchmark needs test rows".into()));
    }
    if methods.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    let per_rep: Vec<_> = (0..spec.replications)
        .into_par_iter()
        .map(|rep| run_replication(spec, methods, settings, rep))
        .collect();
    let mut result = BenchmarkResult {
        spec: spec.clone(),
        methods: methods.to_vec(),
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for (rows, failures) in per_rep {
        result.rows.extend(rows);
        result.failures.extend(failures);
    }
    Ok(result)
}
