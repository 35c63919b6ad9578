use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mvbcf::pipeline::{
    ate_artifacts, component_names, fit_analysis, load_csv, load_run, moderation_artifact, moderation_curves,
    persist_run, pool_chains, render_report, weighted_ate, AnalysisConfig, Artifacts, ConfigFile, CovariateKind,
    CovariateSpec, PropensitySettings, GRID_POINTS, ICE_UNITS,
};
use mvbcf::simbench::{gen_synthetic, run_benchmark, SyntheticData, SyntheticTruth, NUM_COVARIATES};
use mvbcf::{Error, Result};

#[derive(Parser)]
#[command(name = "mvbcf", version, about = "Multivariate Bayesian causal forests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic train/test split from the [simulation] section
    Simulate {
        #[command(flatten)]
        run: SeededRun,
    },
    /// Run the simulation benchmark and write its tables
    Benchmark {
        #[command(flatten)]
        run: SeededRun,
    },
    /// Fit the [analysis] model and persist posterior draws
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// overrides analysis.output_dir
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Weighted ATE summaries from a persisted fit
    Ate {
        /// directory written by `fit`
        #[arg(long)]
        run: PathBuf,
    },
    /// ICE and PDP curves of the treatment effect against one covariate
    Moderation {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        covariate: String,
        #[arg(long, default_value_t = GRID_POINTS)]
        grid: usize,
        /// number of units with ICE curves; 0 keeps every unit
        #[arg(long, default_value_t = ICE_UNITS)]
        units: usize,
    },
    /// Plain-text summary of a persisted fit
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args)]
struct SeededRun {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { run } => simulate(&run),
        Command::Benchmark { run } => benchmark(&run),
        Command::Fit { config, seed, out } => fit(&config, seed, out),
        Command::Ate { run } => {
            let fitted = load_run(&run)?;
            let report = weighted_ate(&pool_chains(&fitted.chains)?, &fitted.weights)?;
            ate_artifacts(&report, &component_names(&fitted.meta)).write_to(&run)?;
            Ok(())
        }
        Command::Moderation {
            run,
            covariate,
            grid,
            units,
        } => {
            let fitted = load_run(&run)?;
            let pooled = pool_chains(&fitted.chains)?;
            let subsample = (units > 0).then_some(units);
            let curve = moderation_curves(&pooled, &fitted.design, &covariate, grid, subsample, fitted.meta.seed)?;
            let mut out = Artifacts::default();
            let file = format!("moderation_{}.csv", covariate.replace(|c: char| !c.is_ascii_alphanumeric(), "_"));
            out.add(file, moderation_artifact(&curve, &component_names(&fitted.meta)));
            out.write_to(&run)?;
            Ok(())
        }
        Command::Report { run } => {
            let fitted = load_run(&run)?;
            let report = weighted_ate(&pool_chains(&fitted.chains)?, &fitted.weights)?;
            let text = render_report(&fitted, &report);
            let mut out = Artifacts::default();
            out.add("report.txt", text.clone());
            out.write_to(&run)?;
            print!("{text}");
            Ok(())
        }
    }
}

fn simulate(run: &SeededRun) -> Result<()> {
    let cfg = ConfigFile::load(&run.config)?;
    let mut spec = cfg.simulation.clone();
    spec.seed = run.seed;
    let data = gen_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(run.seed))?;
    let mut out = Artifacts::default();
    out.add("train.csv", synthetic_csv(&data.train));
    out.add("test.csv", synthetic_csv(&data.test));
    out.add("truth.json", truth_json(&data)?);
    let analysis = AnalysisConfig {
        data: PathBuf::from("train.csv"),
        outcome_groups: vec![vec!["y1".into(), "y2".into()]],
        treatment: vec!["z1".into(), "z2".into()],
        covariates: (1..=NUM_COVARIATES)
            .map(|j| CovariateSpec {
                name: format!("x{j}"),
                kind: CovariateKind::Numeric,
            })
            .collect(),
        weight: None,
        propensity: PropensitySettings::default(),
        causal: Default::default(),
        model: Default::default(),
        chains_per_group: 1,
        output_dir: PathBuf::from("fit"),
    };
    let file = ConfigFile {
        analysis: Some(analysis),
        simulation: spec,
        ..ConfigFile::default()
    };
    out.add("analysis.toml", toml::to_string(&file).map_err(|e| Error::Config(e.to_string()))?);
    out.write_to(&run.out)?;
    Ok(())
}

fn synthetic_csv(t: &SyntheticTruth) -> String {
    let mut s = String::new();
    let xs: Vec<String> = (1..=t.x.ncols()).map(|j| format!("x{j}")).collect();
    let _ = writeln!(s, "{},z1,z2,y1,y2,mu,tau1,tau2,pi1,pi2", xs.join(","));
    for i in 0..t.n() {
        let mut row: Vec<String> = t.x.row(i).iter().map(f64::to_string).collect();
        for v in [
            t.z[[i, 0]],
            t.z[[i, 1]],
            t.y[[i, 0]],
            t.y[[i, 1]],
            t.mu[i],
            t.tau[[i, 0]],
            t.tau[[i, 1]],
            t.propensity[[i, 0]],
            t.propensity[[i, 1]],
        ] {
            row.push(v.to_string());
        }
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

fn truth_json(data: &SyntheticData) -> Result<String> {
    let mean = |t: &SyntheticTruth, k: usize| t.tau.column(k).sum() / t.n() as f64;
    let v = serde_json::json!({
        "tau": data.tau,
        "sigma2": data.sigma2,
        "snr": data.snr,
        "train_ate": [mean(&data.train, 0), mean(&data.train, 1)],
        "test_ate": [mean(&data.test, 0), mean(&data.test, 1)],
    });
    serde_json::to_string_pretty(&v)
        .map(|s| s + "\n")
        .map_err(|e| Error::Config(e.to_string()))
}

fn benchmark(run: &SeededRun) -> Result<()> {
    let cfg = ConfigFile::load(&run.config)?;
    let mut spec = cfg.simulation.clone();
    spec.seed = run.seed;
    let result = run_benchmark(&spec, &cfg.benchmark.methods, &cfg.benchmark.settings)?;
    let mut out = Artifacts::default();
    out.add("benchmark.csv", result.to_table());
    out.add("benchmark.txt", result.to_report());
    out.write_to(&run.out)?;
    Ok(())
}

fn fit(config: &Path, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let cfg = ConfigFile::load(config)?;
    let analysis = cfg.analysis()?;
    let data = load_csv(&analysis.data, analysis)?;
    let fitted = fit_analysis(analysis, &data, seed)?;
    let dir = out.unwrap_or_else(|| match config.parent() {
        Some(parent) if analysis.output_dir.is_relative() => parent.join(&analysis.output_dir),
        _ => analysis.output_dir.clone(),
    });
    persist_run(&fitted)?.write_to(&dir)?;
    Ok(())
}
