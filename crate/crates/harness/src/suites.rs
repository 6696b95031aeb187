//! The `verify`, `landscape` and `counterexample` subcommands.

use anyhow::Result;
use ngvi::diagnostics::{contraction_check, fisher_identity_check, grad_variance_estimate, v2_bound};
use ngvi::estimators::{exact_conjugate_grad, is_negative_definite, price_loglik_grad, reparam_chol_grad};
use ngvi::landscape::{
    find_logistic_witness, poisson_sign_flip_search, random_start, stationarity_map_check, SignFlipReport,
    WitnessGenerator, WitnessGrid, WitnessReport,
};
use ngvi::linalg::{exactly_negative_definite, min_eigenvalue, Matrix, Vector};
use ngvi::models::{exact_posterior, Rows};
use ngvi::optim::{mirror_descent_step, ngd_step, run_ngd, step_size, NgdConfig, MetricOptions, Cadence};
use ngvi::{bregman_kl, Dataset, McSpec, MeanCov, ModelKind, ModelSpec, PriorSpec, TargetKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EstimatorChoice, ExperimentConfig, Method, ModelChoice};
use crate::experiment::{prepare, run_experiment, Finding, Problem, Summary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config_hash: String,
    pub checks: Vec<CheckResult>,
    pub findings: Vec<Finding>,
    pub experiment: Summary,
    pub passed: bool,
}

/// KL between Gaussians from LU solves, independent of the exponential-family code.
pub fn gaussian_kl(mq: &Vector, sq: &Matrix, mp: &Vector, sp: &Matrix) -> f64 {
    let d = mq.len() as f64;
    let lu = sp.clone().lu();
    let trace = lu.solve(sq).expect("invertible covariance").trace();
    let diff = mp - mq;
    let quad = diff.dot(&lu.solve(&diff).expect("invertible covariance"));
    let logdet = |m: &Matrix| m.clone().lu().determinant().ln();
    0.5 * (trace + quad - d + logdet(sp) - logdet(sq))
}

fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Result<MeanCov> {
    Ok(random_start(rng, d)?.to_mean_cov()?)
}

fn check_round_trips(rng: &mut ChaCha8Rng, d: usize) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let q = random_gaussian(rng, d)?;
        let back = q.to_natural()?.to_expectation()?.to_mean_cov()?;
        let scale = q.sigma().amax().max(1.0);
        worst = worst.max((back.mu() - q.mu()).amax() / scale).max((back.sigma() - q.sigma()).amax() / scale);
    }
    Ok(CheckResult::new("round-trip", worst <= 1e-9, format!("worst relative error {worst:e}")))
}

fn check_bregman(rng: &mut ChaCha8Rng, d: usize) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let q = random_gaussian(rng, d)?;
        let p = random_gaussian(rng, d)?;
        let b = bregman_kl(&q.to_expectation(), &p.to_expectation())?;
        let kl = gaussian_kl(q.mu(), q.sigma(), p.mu(), p.sigma());
        worst = worst.max((b - kl).abs() / kl.max(1.0));
    }
    Ok(CheckResult::new("bregman-kl", worst <= 1e-8, format!("worst relative error {worst:e}")))
}

fn check_fisher(problem: &Problem, rng: &mut ChaCha8Rng, d: usize) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut passed = true;
    for _ in 0..5 {
        let eta = random_start(rng, d)?;
        let rep = fisher_identity_check(&problem.spec, &problem.data, &eta)?;
        passed &= rep.passed;
        worst = worst.max(rep.max_rel_error);
    }
    Ok(CheckResult::new("fisher-identity", passed, format!("worst relative error {worst:e}")))
}

fn check_stationarity(problem: &Problem, rng: &mut ChaCha8Rng, d: usize) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for k in 0..5 {
        let q = random_gaussian(rng, d)?.to_expectation();
        let rep = stationarity_map_check(&problem.spec, &problem.data, &q, McSpec::new(20, k))?;
        worst = worst.max(rep.max_residual() / rep.omega_grad_max.max(1.0));
    }
    Ok(CheckResult::new("chain-rule", worst <= 1e-6, format!("worst scaled residual {worst:e}")))
}

fn check_one_step(problem: &Problem, rng: &mut ChaCha8Rng, d: usize) -> Result<CheckResult> {
    let post = exact_posterior(&problem.spec, &problem.data)?.to_expectation();
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let eta = random_start(rng, d)?;
        let g = exact_conjugate_grad(&problem.spec, &eta.to_expectation()?, &problem.data)?;
        let next = ngd_step(&eta, &g, 1.0)?.to_expectation()?;
        worst = worst.max(bregman_kl(&next, &post)?);
    }
    Ok(CheckResult::new("one-step", worst < 1e-10, format!("worst KL {worst:e}")))
}

fn check_mirror_descent(cfg: &ExperimentConfig, problem: &Problem, rng: &mut ChaCha8Rng, d: usize) -> Result<CheckResult> {
    let est = cfg.ngd_estimator();
    let mut worst = 0.0f64;
    for t in 0..20 {
        let eta = random_start(rng, d)?;
        let omega = eta.to_expectation()?;
        let g = est.estimate(&problem.spec, &omega, &eta, &problem.data, rng)?.total;
        let gamma = step_size(&cfg.schedule.0, t);
        let (Ok(a), Ok(b)) = (ngd_step(&eta, &g, gamma), mirror_descent_step(&omega, &g, gamma)) else {
            continue;
        };
        let a = a.to_expectation()?;
        let err = (a.xi() - b.xi()).amax().max((a.xi_mat() - b.xi_mat()).amax());
        worst = worst.max(err / b.xi_mat().amax().max(1.0));
    }
    Ok(CheckResult::new("ngd-mirror-descent", worst < 1e-10, format!("worst relative discrepancy {worst:e}")))
}

fn check_contraction(cfg: &ExperimentConfig, problem: &Problem) -> Result<CheckResult> {
    let mut ngd = NgdConfig::new(cfg.ngd_estimator(), cfg.schedule.0, cfg.iterations, cfg.seeds[0]);
    ngd.metrics = MetricOptions::kl_only(Cadence::Endpoints);
    let trace = run_ngd(&problem.spec, &problem.data, &ngd)?;
    let linreg = match (problem.spec.kind, cfg.estimator) {
        (ModelKind::LinearRegression { noise_var }, EstimatorChoice::Subsample) => Some((&problem.data, noise_var)),
        _ => None,
    };
    let rep = contraction_check(&trace.records, &problem.spec.prior, linreg)?;
    let detail = format!(
        "worst precision margin {:e} at t = {}, {} violations",
        rep.worst_precision_margin.1,
        rep.worst_precision_margin.0,
        rep.violations.len()
    );
    Ok(CheckResult::new("contraction", rep.passed(), detail))
}

fn check_variance(cfg: &ExperimentConfig, problem: &Problem) -> Result<CheckResult> {
    let m = cfg.batch_size.unwrap_or(1);
    let v2 = v2_bound(&problem.data, &problem.spec.prior, cfg.model.noise_var, m)?.v2;
    let mut ngd = NgdConfig::new(cfg.ngd_estimator(), cfg.schedule.0, cfg.iterations, cfg.seeds[0]);
    ngd.metrics = MetricOptions::kl_only(Cadence::Endpoints);
    let trace = run_ngd(&problem.spec, &problem.data, &ngd)?;
    let stride = (trace.records.len() / 5).max(1);
    let mut worst = f64::NEG_INFINITY;
    for (k, rec) in trace.records.iter().step_by(stride).take(5).enumerate() {
        let gamma = step_size(&cfg.schedule.0, rec.t);
        let est = grad_variance_estimate(
            &problem.spec,
            &problem.data,
            &rec.eta.to_expectation()?,
            &cfg.ngd_estimator(),
            gamma,
            McSpec::new(2000, cfg.seeds[0] + k as u64),
        )?;
        worst = worst.max(est.upper(5.0));
    }
    Ok(CheckResult::new(
        "variance-bound",
        worst <= v2,
        format!("largest estimate + 5 SE {worst:e} against V2 = {v2:e}"),
    ))
}

/// Runs the configured experiment plus the identity checks that apply to its model.
pub fn verify(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    cfg.validate()?;
    let problem = prepare(cfg)?;
    let d = problem.spec.latent_dim(problem.data.d());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds[0]);
    let closed = cfg.model.kind != ModelChoice::Logistic;
    let linreg = cfg.model.kind == ModelChoice::Linreg;

    let mut checks = vec![check_round_trips(&mut rng, d)?, check_bregman(&mut rng, d)?];
    if closed {
        checks.push(check_fisher(&problem, &mut rng, d)?);
    }
    checks.push(check_stationarity(&problem, &mut rng, d)?);
    if linreg {
        checks.push(check_one_step(&problem, &mut rng, d)?);
    }
    if cfg.optimizer == Method::Ngd {
        checks.push(check_mirror_descent(cfg, &problem, &mut rng, d)?);
        if cfg.ngd_estimator().respects_domain() {
            checks.push(check_contraction(cfg, &problem)?);
        }
        if linreg && cfg.estimator == EstimatorChoice::Subsample {
            checks.push(check_variance(cfg, &problem)?);
        }
    }

    let out = run_experiment(cfg)?;
    let hash = out.summary.config_hash.clone();
    let mut findings = out.summary.findings.clone();
    for c in checks.iter().filter(|c| !c.passed) {
        findings.push(Finding {
            kind: format!("{}-residual", c.name),
            detail: c.detail.clone(),
            config_hash: hash.clone(),
        });
    }
    let report = VerifyReport {
        config_hash: hash,
        passed: findings.is_empty(),
        checks,
        findings,
        experiment: out.summary,
    };
    crate::experiment::write_summary(&cfg.output.join("verify.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeReport {
    pub logistic: WitnessReport,
    pub poisson: SignFlipReport,
}

/// Poisson rows in the positive quadrant so that `0 < xᵢᵀξ < 2` holds at `ξ = (1, 1)`.
pub fn sign_flip_instance(seed: u64, n: usize) -> Result<(Dataset, Vector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(n, 2, |_, _| rng.random_range(0.05..0.9));
    let y = Vector::from_fn(n, |_, _| f64::from(rng.random_range(0u8..4)));
    Ok((Dataset::new(x, y, TargetKind::Count)?, Vector::from_element(2, 1.0)))
}

pub fn landscape(seed: u64) -> Result<LandscapeReport> {
    let logistic = find_logistic_witness(&WitnessGenerator { seed }, &WitnessGrid::default())?;
    let (data, xi) = sign_flip_instance(seed, 20)?;
    let poisson = poisson_sign_flip_search(&data, &xi, 1024.0)?;
    Ok(LandscapeReport { logistic, poisson })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

/// Wilson score interval for a binomial proportion at `z` standard deviations.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> Interval {
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    Interval {
        lower: centre - half,
        upper: centre + half,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub trials: usize,
    /// Trials whose reparameterization `Ξ`-gradient is not negative definite, decided exactly
    /// for the stored entries.
    pub not_negative_definite: usize,
    /// The same count under a rounded Cholesky test, which also rejects every matrix whose
    /// Schur complement rounds to zero.
    pub cholesky_rejections: usize,
    pub frequency: f64,
    pub wilson_95: Interval,
    /// Largest `|λ_min(-Ξ̂)|` over trials; the exact gradient is rank one, so this is
    /// the scale of the rounding that decides each test.
    pub max_abs_min_eigenvalue: f64,
    /// Every Price `Ξ`-component equalled `-½I` exactly.
    pub price_exact: bool,
    pub price_max_deviation: f64,
}

/// `q = N(0, I₂)`, likelihood `N(y; z, I)` with `y = 0`, one sample per trial.
pub fn counterexample(trials: usize, seed: u64) -> Result<CounterexampleReport> {
    let d = 2;
    let omega = MeanCov::standard(d).to_expectation();
    let y = Vector::zeros(d);
    let mut bad = 0;
    let mut chol_bad = 0;
    let mut max_abs_min = 0.0f64;
    for k in 0..trials {
        let g = reparam_chol_grad(&omega, &y, seed.wrapping_add(k as u64))?;
        if exactly_negative_definite(&g.g_ximat) != Some(true) {
            bad += 1;
        }
        if !is_negative_definite(&g.g_ximat) {
            chol_bad += 1;
        }
        max_abs_min = max_abs_min.max(min_eigenvalue(&(-&g.g_ximat)).abs());
    }

    // The same model as linear regression with X = I and unit noise.
    let spec = ModelSpec::linear_regression(1.0, PriorSpec::standard(d))?;
    let data = Dataset::new(Matrix::identity(d, d), y, TargetKind::Real)?;
    let target = Matrix::identity(d, d) * -0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dev = 0.0f64;
    for _ in 0..trials {
        let g = price_loglik_grad(&spec, &omega, &data, Rows::All, 1, &mut rng)?;
        dev = dev.max((&g.g_ximat - &target).amax());
    }
    Ok(CounterexampleReport {
        trials,
        not_negative_definite: bad,
        cholesky_rejections: chol_bad,
        frequency: bad as f64 / trials as f64,
        wilson_95: wilson_interval(bad, trials, 1.959_963_984_540_054),
        max_abs_min_eigenvalue: max_abs_min,
        price_exact: dev == 0.0,
        price_max_deviation: dev,
    })
}
