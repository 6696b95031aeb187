use std::path::Path;
use std::process::Command;

use ngvi::linalg::Matrix;
use ngvi::models::exact_posterior;
use ngvi::ModelSpec;
use ngvi_harness::config::ModelChoice;
use ngvi_harness::experiment::read_metrics;
use ngvi_harness::{load_csv, run_experiment, synth, CsvOptions, ExperimentConfig};

fn csv_opts(model: ModelChoice, standardize: bool) -> CsvOptions {
    CsvOptions {
        target: "y".into(),
        categorical: vec![],
        standardize,
        model,
    }
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn numeric_csv_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "d.csv", "x1,y,x2\n0.5,1.25,-3\n2,-0.75,4e-3\n-1.5,10,7\n");
    let got = load_csv(&p, &csv_opts(ModelChoice::Linreg, false)).unwrap();
    assert_eq!(got.feature_names, ["x1", "x2"]);
    let x = Matrix::from_row_slice(3, 2, &[0.5, -3.0, 2.0, 4e-3, -1.5, 7.0]);
    assert_eq!(got.dataset.x(), &x);
    assert_eq!(got.dataset.y().as_slice(), &[1.25, -0.75, 10.0]);
}

#[test]
fn standardization_centres_and_scales() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("a,b,c,y\n");
    for i in 0..50 {
        let v = i as f64;
        text += &format!("{},{},7,{}\n", v * 0.3 + 100.0, (v * 1.7).sin() * 1e3, v);
    }
    let p = write(dir.path(), "s.csv", &text);
    let got = load_csv(&p, &csv_opts(ModelChoice::Linreg, true)).unwrap();
    let x = got.dataset.x();
    for j in 0..2 {
        let col = x.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 1e-12, "{mean}");
        assert!((var - 1.0).abs() < 1e-10, "{var}");
    }
    assert!(x.column(2).iter().all(|v| *v == 7.0));
}

#[test]
fn binary_targets_are_remapped() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "b.csv", "x,y\n0.1,0\n0.2,1\n-0.3,0\n");
    let got = load_csv(&p, &csv_opts(ModelChoice::Logistic, false)).unwrap();
    assert_eq!(got.dataset.y().as_slice(), &[-1.0, 1.0, -1.0]);
    assert_eq!(got.out_of_range, 0);
}

#[test]
fn synthetic_data_is_deterministic_and_bounded() {
    for kind in [ModelChoice::Linreg, ModelChoice::Logistic, ModelChoice::Poisson] {
        let a = synth(kind, 100, 3, 5, 0.5, 1.0).unwrap();
        let b = synth(kind, 100, 3, 5, 0.5, 1.0).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.truth, b.truth);
        assert_ne!(synth(kind, 100, 3, 6, 0.5, 1.0).unwrap().dataset, a.dataset);
    }
    let logit = synth(ModelChoice::Logistic, 500, 4, 1, 1.0, 1.0).unwrap();
    assert!(logit.dataset.x().amax() <= 1.0);
    assert_eq!(logit.truth.len(), 5);
}

#[test]
fn linreg_posterior_mean_recovers_truth() {
    let s = synth(ModelChoice::Linreg, 10_000, 5, 3, 1e-6, 1.0).unwrap();
    let spec = ModelSpec::linear_regression(1e-6, ngvi::PriorSpec::standard(5)).unwrap();
    let post = exact_posterior(&spec, &s.dataset).unwrap();
    let rel = (post.mu() - &s.truth).norm() / s.truth.norm();
    assert!(rel < 0.05, "{rel}");
}

fn toy_config(out: &Path, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"
iterations = 50
seeds = [3, 1, 4, 5]
batch_size = 5
output = "{}"
{extra}

[model]
kind = "linreg"
noise_var = 0.5

[data]
source = "synthetic"
n = 60
d = 2
seed = 9
"#,
        out.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

#[test]
fn exact_gradient_converges_in_one_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(dir.path(), "estimator = \"exact\"\ncadence = \"every\"");
    cfg.iterations = 0;
    let out = run_experiment(&cfg).unwrap();
    for o in &out.outcomes {
        let at_one = o.records.iter().find(|r| r.iteration == 1).unwrap();
        assert!(at_one.kl.unwrap() < 1e-12, "{at_one:?}");
    }
}

#[test]
fn output_is_byte_identical_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut ca = toy_config(a.path(), "");
    ca.jobs = Some(1);
    let mut cb = toy_config(b.path(), "");
    cb.jobs = Some(4);
    run_experiment(&ca).unwrap();
    run_experiment(&cb).unwrap();
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "metrics.csv"), read(b.path(), "metrics.csv"));

    // Summaries differ only in the output location.
    let sa: serde_json::Value = serde_json::from_slice(&read(a.path(), "summary.json")).unwrap();
    let sb: serde_json::Value = serde_json::from_slice(&read(b.path(), "summary.json")).unwrap();
    assert_eq!(sa["per_iteration"], sb["per_iteration"]);
    assert_eq!(sa["config_hash"], sb["config_hash"]);

    let records = read_metrics(&a.path().join("metrics.csv")).unwrap();
    let seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    let mut order = seeds.clone();
    order.dedup();
    assert_eq!(order, [3, 1, 4, 5]);
    for w in records.windows(2).filter(|w| w[0].seed == w[1].seed) {
        assert!(w[0].iteration < w[1].iteration);
    }
    assert!(records.iter().all(|r| r.wall_time.is_none()));
}

#[test]
fn domain_exit_stops_only_that_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(dir.path(), "estimator = \"reparam\"\nmc_samples = 1\nschedule = \"constant:1\"");
    cfg.data = ngvi_harness::config::DataSource::Synthetic {
        n: 400,
        d: 2,
        seed: 9,
        noise_var: None,
    };
    cfg.model.noise_var = 0.01;
    cfg.seeds = (0..8).collect();
    let out = run_experiment(&cfg).unwrap();
    let failed: Vec<_> = out.summary.seeds.iter().filter(|s| s.failure.is_some()).collect();
    assert!(!failed.is_empty());
    assert_eq!(out.summary.seeds.len(), 8);
    assert_eq!(out.summary.findings.iter().filter(|f| f.kind == "domain-exit").count(), failed.len());
    for s in &failed {
        assert!(s.completed < cfg.iterations + 1);
        assert_eq!(s.last.as_ref().unwrap().iteration, s.completed);
    }
    assert!(out.summary.findings.iter().all(|f| f.config_hash == out.summary.config_hash));
    read_metrics(&out.metrics_path).unwrap();
}

#[test]
fn sgd_and_poisson_runs_produce_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(dir.path(), "optimizer = \"sgd\"\nschedule = \"inverse:5000\"\nmetric_samples = 100");
    cfg.model.kind = ModelChoice::Poisson;
    cfg.iterations = 20;
    let out = run_experiment(&cfg).unwrap();
    assert!(out.summary.bound.is_none());
    assert!(out.outcomes.iter().all(|o| o.failure.is_none()), "{:?}", out.summary.findings);
    let last = out.outcomes[0].records.last().unwrap();
    assert!(last.kl.is_none() && last.nlpd.unwrap().is_finite() && last.neg_elbo.unwrap().is_finite());
}

fn ngvi(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ngvi")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let (code, stdout) = ngvi(&["verify", "--out", d, "--iterations", "100", "--seed", "1,2"]);
    assert_eq!(code, 0, "{stdout}");
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
    assert!(dir.path().join("verify.json").is_file());

    let cfg = toy_config(dir.path(), "estimator = \"reparam\"\nmc_samples = 1\nschedule = \"constant:1\"");
    let mut text = cfg.to_toml().unwrap();
    text = text.replace("noise_var = 0.5", "noise_var = 0.01").replace("n = 60", "n = 400");
    let path = write(dir.path(), "bad.toml", &text);
    let (code, stdout) = ngvi(&["verify", "--config", path.to_str().unwrap(), "--seed", "0,1,2,3,4,5,6,7"]);
    assert_eq!(code, 2, "{stdout}");
    assert!(stdout.contains("domain-exit"));

    assert_eq!(ngvi(&["fit", "--config", "/nonexistent.toml"]).0, 1);
    assert_eq!(ngvi(&["fit", "--estimator", "bogus"]).0, 1);

    let (code, stdout) = ngvi(&["counterexample", "--trials", "2000", "--out", d]);
    assert_eq!(code, 0);
    assert!(stdout.contains("95% CI"));
}
