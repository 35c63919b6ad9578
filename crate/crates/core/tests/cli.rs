use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mvbcf::causal::CausalConfig;
use mvbcf::pipeline::ConfigFile;

fn mvbcf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvbcf")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mvbcf(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> String {
    p.display().to_string()
}

fn simulate(root: &Path, extra: &str) -> std::path::PathBuf {
    let cfg = root.join("sim.toml");
    fs::write(&cfg, format!("[simulation]\nn_train = 300\nn_test = 10\n{extra}")).unwrap();
    let sim = root.join("sim");
    ok(&["simulate", "--config", &path(&cfg), "--seed", "4", "--out", &path(&sim)]);
    sim
}

fn shorten(analysis: &Path, iterations: (usize, usize)) {
    let mut file = ConfigFile::parse(&fs::read_to_string(analysis).unwrap()).unwrap();
    let a = file.analysis.as_mut().unwrap();
    a.causal = CausalConfig::default().with_iterations(iterations.0, iterations.1);
    a.propensity.iterations = 400;
    a.propensity.burn_in = 200;
    fs::write(analysis, toml::to_string(&file).unwrap()).unwrap();
}

#[test]
fn zero_noise_fit_recovers_known_ate() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "noise_free = true\n");
    let analysis = sim.join("analysis.toml");
    shorten(&analysis, (300, 300));
    let fit = dir.path().join("fit");
    ok(&["fit", "--config", &path(&analysis), "--seed", "5", "--out", &path(&fit)]);
    ok(&["ate", "--run", &path(&fit)]);

    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(sim.join("truth.json")).unwrap()).unwrap();
    let train: Vec<f64> = csv::Reader::from_path(sim.join("train.csv"))
        .unwrap()
        .deserialize::<std::collections::HashMap<String, f64>>()
        .map(|r| r.unwrap()["y1"])
        .collect();
    let sd_y = mvbcf::stats::sd(&train);
    let mut reader = csv::Reader::from_path(fit.join("ate_summary.csv")).unwrap();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.unwrap();
        let mean: f64 = rec[1].parse().unwrap();
        let (lo, hi): (f64, f64) = (rec[2].parse().unwrap(), rec[3].parse().unwrap());
        let t = truth["train_ate"][k].as_f64().unwrap();
        assert!((mean - t).abs() < 0.1 * sd_y, "component {k}: {mean} vs {t}");
        assert!(lo <= mean && mean <= hi);
    }

    let report = ok(&["report", "--run", &path(&fit)]);
    assert!(report.contains("Treatment Group Size"), "{report}");
    assert!(report.contains("Control Group Size"));
    assert!(report.contains("%)"));
}

#[test]
fn seed_is_required() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "").unwrap();
    for cmd in ["simulate", "benchmark"] {
        let out = mvbcf(&[cmd, "--config", &path(&cfg), "--out", &path(dir.path())]);
        assert!(!out.status.success());
    }
    assert!(!mvbcf(&["fit", "--config", &path(&cfg)]).status.success());
}

#[test]
fn errors_are_single_line_and_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "");
    let analysis = sim.join("analysis.toml");
    let text = fs::read_to_string(&analysis).unwrap().replace("\"x7\"", "\"x77\"");
    fs::write(&analysis, text).unwrap();
    let fit = dir.path().join("fit");
    let out = mvbcf(&["fit", "--config", &path(&analysis), "--seed", "1", "--out", &path(&fit)]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("x77"), "{err}");
    assert!(!fit.exists());

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[simulation]\nsnr_band = [0.5, 3.0]\n").unwrap();
    let out = mvbcf(&["simulate", "--config", &path(&bad), "--seed", "1", "--out", &path(&dir.path().join("s2"))]);
    assert!(!out.status.success());
    assert_eq!(String::from_utf8(out.stderr).unwrap().trim_end().lines().count(), 1);
    assert!(!dir.path().join("s2").exists());

    let out = mvbcf(&["ate", "--run", &path(&dir.path().join("missing"))]);
    assert!(!out.status.success());
}

#[test]
fn moderation_rejects_unknown_covariate() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "");
    let analysis = sim.join("analysis.toml");
    shorten(&analysis, (20, 20));
    let fit = dir.path().join("fit");
    ok(&["fit", "--config", &path(&analysis), "--seed", "2", "--out", &path(&fit)]);
    let out = mvbcf(&["moderation", "--run", &path(&fit), "--covariate", "nope"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
    ok(&["moderation", "--run", &path(&fit), "--covariate", "x7", "--grid", "5", "--units", "10"]);
    let table = fs::read_to_string(fit.join("moderation_x7.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("ice,")).count(), 50);
    assert_eq!(table.lines().filter(|l| l.starts_with("pdp,")).count(), 5);
}

#[test]
fn per_outcome_model_runs_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "");
    let analysis = sim.join("analysis.toml");
    shorten(&analysis, (20, 20));
    let text = fs::read_to_string(&analysis).unwrap().replace("model = \"mvbcf\"", "model = \"bcf\"");
    fs::write(&analysis, text).unwrap();
    let fit = dir.path().join("fit");
    ok(&["fit", "--config", &path(&analysis), "--seed", "2", "--out", &path(&fit)]);
    ok(&["ate", "--run", &path(&fit)]);
    let draws = fs::read_to_string(fit.join("draws_chain0.csv")).unwrap();
    let header = draws.lines().next().unwrap();
    assert_eq!(header, "iteration,chain,sigma_1_1,sigma_1_2,sigma_2_1,sigma_2_2,ate_1,ate_2");
    // separate fits: zero residual covariance
    let row: Vec<&str> = draws.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[3], "0");
    assert_eq!(row[4], "0");
}
