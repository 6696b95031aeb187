//! Stochastic natural gradient descent (equivalently mirror descent with `A*`), the
//! mean/Cholesky SGD baseline, step-size schedules, and iterate averaging.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Constraint, Error, Result};
use crate::estimators::{
    exact_grad, price_loglik_grad, reparam_loglik_grad, sample_batch, GradientEstimate,
};
use crate::expfam::{bregman_kl, ExpectationParam, GradientPair, MeanCov, NaturalParam};
use crate::linalg::{
    cholesky, is_lower_triangular, lower_triangular_inverse, min_eigenvalue, standard_normal_vector,
    symmetrize, tril, Matrix, Vector,
};
use crate::models::{
    elbo, exact_posterior, expected_loglik_grad, predictive_nlpd, Dataset, McSpec, ModelKind,
    ModelSpec, Rows,
};

/// Step-size schedule `γ_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Schedule {
    /// `γ_t = 2 / (2 + t)`.
    TwoOverTwoPlusT,
    Constant(f64),
    /// `γ_t = 1 / (c + t)`.
    InverseDecay(f64),
}

impl Schedule {
    pub fn validate_for_ngd(&self) -> Result<()> {
        match *self {
            Schedule::Constant(g) if !(g > 0.0 && g <= 1.0) => Err(Error::Invalid(format!(
                "constant NGD step size must lie in (0, 1], got {g}"
            ))),
            Schedule::InverseDecay(c) if !(c >= 1.0) => Err(Error::Invalid(format!(
                "inverse-decay offset must be >= 1 for NGD, got {c}"
            ))),
            _ => Ok(()),
        }
    }
}

pub fn step_size(schedule: &Schedule, t: usize) -> f64 {
    let t = t as f64;
    match *schedule {
        Schedule::TwoOverTwoPlusT => 2.0 / (2.0 + t),
        Schedule::Constant(g) => g,
        Schedule::InverseDecay(c) => 1.0 / (c + t),
    }
}

fn step_checked(eta: &NaturalParam, grad: &GradientPair, gamma: f64, iteration: usize) -> Result<NaturalParam> {
    if grad.dim() != eta.dim() {
        return Err(Error::Dimension {
            what: "gradient",
            expected: eta.dim(),
            found: grad.dim(),
        });
    }
    let next = eta.step_unchecked(grad, gamma);
    if next.lambda_vec().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("natural parameter"));
    }
    match next.neg_two_lambda_chol() {
        Ok(_) => Ok(next),
        Err(_) => Err(Error::DomainExit {
            iteration,
            step_size: gamma,
            min_eigenvalue: min_eigenvalue(&(next.lambda_mat() * -1.0)),
        }),
    }
}

/// One NGD step in the inversion-free form `η_{t+1} = η_t - γ ∇ℓ(ω_t)`.
///
/// A standalone step reports `iteration = 0` when it leaves the natural domain.
pub fn ngd_step(eta: &NaturalParam, grad: &GradientPair, gamma: f64) -> Result<NaturalParam> {
    step_checked(eta, grad, gamma, 0)
}

/// Mirror-descent step `argmin_ω ⟨g, ω⟩ + γ⁻¹ D_{A*}(ω, ω_t)` solved in closed form:
/// `∇A*(ω_{t+1}) = ∇A*(ω_t) - γ g`.
///
/// Uses the explicit gradient maps of `A` and `A*` with general (LU) inverses, independent
/// of the Cholesky-based conversions used by [`ngd_step`].
pub fn mirror_descent_step(omega: &ExpectationParam, grad: &GradientPair, gamma: f64) -> Result<ExpectationParam> {
    let xi = omega.xi();
    let s = omega.xi_mat() - xi * xi.transpose();
    let s_inv = s
        .try_inverse()
        .ok_or(Error::IllConditioned { rcond: 0.0 })?;
    // ∇_ξ A* = (Ξ - ξξᵀ)⁻¹ ξ, ∇_Ξ A* = -½ (Ξ - ξξᵀ)⁻¹
    let lam = &s_inv * xi - &grad.g_xi * gamma;
    let lam_mat = &s_inv * -0.5 - &grad.g_ximat * gamma;
    let lam_mat_inv = lam_mat
        .clone()
        .try_inverse()
        .ok_or(Error::IllConditioned { rcond: 0.0 })?;
    // ∇_λ A = -½ Λ⁻¹λ, ∇_Λ A = ¼ Λ⁻¹λλᵀΛ⁻¹ - ½ Λ⁻¹
    let new_xi = &lam_mat_inv * &lam * -0.5;
    let li_l = &lam_mat_inv * &lam;
    let new_xi_mat = &li_l * li_l.transpose() * 0.25 - &lam_mat_inv * 0.5;
    ExpectationParam::new(new_xi, symmetrize(&new_xi_mat))
}

/// Gradient estimator used inside [`run_ngd`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Estimator {
    /// Closed-form full-data gradient (linear and Poisson regression).
    Exact,
    /// Closed-form per-row gradients on a uniform mini-batch with replacement.
    Subsample { batch_size: usize },
    /// Bonnet/Price Monte Carlo gradient, optionally on a mini-batch.
    Price {
        samples: usize,
        batch_size: Option<usize>,
    },
    /// Reparameterization gradient through the Cholesky factor.
    Reparam {
        samples: usize,
        batch_size: Option<usize>,
    },
}

impl Estimator {
    pub fn estimate<R: Rng + ?Sized>(
        &self,
        spec: &ModelSpec,
        omega: &ExpectationParam,
        eta: &NaturalParam,
        data: &Dataset,
        rng: &mut R,
    ) -> Result<GradientEstimate> {
        let batch = |rng: &mut R, size: Option<usize>| -> Result<Option<Vec<usize>>> {
            match size {
                Some(0) => Err(Error::Invalid("batch size must be >= 1".into())),
                Some(m) => Ok(Some(sample_batch(rng, data.n(), m))),
                None => Ok(None),
            }
        };
        let loglik = match *self {
            Estimator::Exact => return exact_grad(spec, omega, data),
            Estimator::Subsample { batch_size } => {
                let idx = batch(rng, Some(batch_size))?.unwrap_or_default();
                expected_loglik_grad(spec, omega, data, Rows::Batch(&idx))?
            }
            Estimator::Price { samples, batch_size } => {
                let idx = batch(rng, batch_size)?;
                let rows = idx.as_deref().map_or(Rows::All, Rows::Batch);
                price_loglik_grad(spec, omega, data, rows, samples, rng)?
            }
            Estimator::Reparam { samples, batch_size } => {
                let idx = batch(rng, batch_size)?;
                let rows = idx.as_deref().map_or(Rows::All, Rows::Batch);
                reparam_loglik_grad(spec, omega, data, rows, samples, rng)?
            }
        };
        GradientEstimate::assemble(loglik, eta, &spec.prior)
    }

    /// Whether the estimator is guaranteed to keep NGD inside the domain for `γ ∈ [0, 1]`.
    pub fn respects_domain(&self) -> bool {
        !matches!(self, Estimator::Reparam { .. })
    }
}

/// When metrics are evaluated along a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Cadence {
    Every,
    /// Every iteration up to 100, then 20 points per decade.
    Default,
    LogSpaced(u32),
    /// Only the first and last iterate.
    Endpoints,
}

impl Cadence {
    pub fn includes(&self, t: usize, last: usize) -> bool {
        if t == 0 || t == last {
            return true;
        }
        let per_decade = match *self {
            Cadence::Every => return true,
            Cadence::Endpoints => return false,
            Cadence::Default => {
                if t <= 100 {
                    return true;
                }
                20
            }
            Cadence::LogSpaced(k) => k.max(1),
        };
        let bucket = |v: usize| ((v as f64).log10() * per_decade as f64).floor() as i64;
        bucket(t) != bucket(t - 1)
    }
}

/// Which metrics to compute at cadence points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub cadence: Cadence,
    pub neg_elbo: bool,
    pub nlpd: bool,
    /// Monte Carlo settings for metrics of non-conjugate models.
    pub mc: McSpec,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            cadence: Cadence::Default,
            neg_elbo: true,
            nlpd: true,
            mc: McSpec::new(McSpec::METRIC_SAMPLES, 0),
        }
    }
}

impl MetricOptions {
    /// KL metrics only (cheap for conjugate models).
    pub fn kl_only(cadence: Cadence) -> Self {
        Self {
            cadence,
            neg_elbo: false,
            nlpd: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub t: usize,
    pub neg_elbo: Option<f64>,
    /// KL from the current iterate to the exact posterior (conjugate models).
    pub kl: Option<f64>,
    /// KL from the averaged iterate to the exact posterior.
    pub kl_avg: Option<f64>,
    pub nlpd: Option<f64>,
    /// Seconds since the run started, taken before the metrics were evaluated.
    pub elapsed: f64,
}

struct MetricContext {
    posterior: Option<ExpectationParam>,
    start: std::time::Instant,
}

impl MetricContext {
    fn new(spec: &ModelSpec, data: &Dataset) -> Result<Self> {
        let posterior = match spec.kind {
            ModelKind::LinearRegression { .. } => Some(exact_posterior(spec, data)?.to_expectation()),
            _ => None,
        };
        Ok(Self {
            posterior,
            start: std::time::Instant::now(),
        })
    }

    fn evaluate(
        &self,
        opts: &MetricOptions,
        spec: &ModelSpec,
        data: &Dataset,
        t: usize,
        current: &ExpectationParam,
        average: Option<&ExpectationParam>,
    ) -> Result<MetricPoint> {
        let kl = |q: &ExpectationParam| -> Result<Option<f64>> {
            self.posterior.as_ref().map(|p| bregman_kl(q, p)).transpose()
        };
        let elapsed = self.start.elapsed().as_secs_f64();
        Ok(MetricPoint {
            t,
            elapsed,
            neg_elbo: if opts.neg_elbo {
                Some(elbo(spec, current, data, Some(opts.mc))?)
            } else {
                None
            },
            kl: kl(current)?,
            kl_avg: match average {
                Some(a) => kl(a)?,
                None => None,
            },
            nlpd: if opts.nlpd {
                Some(predictive_nlpd(spec, &current.to_mean_cov()?, data, Some(opts.mc))?)
            } else {
                None
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgdConfig {
    pub estimator: Estimator,
    pub schedule: Schedule,
    /// `T`: the run performs `T + 1` updates producing `ω_1 … ω_{T+1}`.
    pub iterations: usize,
    pub seed: u64,
    /// Starting point; `N(0, I)` when absent.
    pub init: Option<NaturalParam>,
    /// Keep every iterate in the trace (otherwise only cadence points).
    pub keep_iterates: bool,
    pub metrics: MetricOptions,
}

impl NgdConfig {
    pub fn new(estimator: Estimator, schedule: Schedule, iterations: usize, seed: u64) -> Self {
        Self {
            estimator,
            schedule,
            iterations,
            seed,
            init: None,
            keep_iterates: true,
            metrics: MetricOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    /// Step size that produced this iterate (`None` for the initial point).
    pub gamma: Option<f64>,
    pub eta: NaturalParam,
    /// Running weighted average `ω̄_t` (equal to `ω_0` at `t = 0`).
    pub omega_bar: ExpectationParam,
}

/// NGD run record.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub metrics: Vec<MetricPoint>,
    pub final_eta: NaturalParam,
    /// `ω̄_{T+1} = 2/((T+1)(T+2)) Σ_{t=0}^{T} (t+1) ω_{t+1}`.
    pub average: ExpectationParam,
    /// Number of updates completed before stopping.
    pub completed: usize,
    pub failure: Option<Error>,
}

impl Trace {
    pub fn final_expectation(&self) -> Result<ExpectationParam> {
        self.final_eta.to_expectation()
    }
}

/// Online update of the weighted iterate average: `ω̄_{t+1} = (1 - 2/(t+2)) ω̄_t + 2/(t+2) ω_{t+1}`.
pub fn update_average(avg: &ExpectationParam, next: &ExpectationParam, t: usize) -> ExpectationParam {
    avg.lerp(next, 2.0 / (t as f64 + 2.0))
}

/// Stochastic NGD for `T + 1` iterations.
pub fn run_ngd(spec: &ModelSpec, data: &Dataset, cfg: &NgdConfig) -> Result<Trace> {
    spec.check(data)?;
    cfg.schedule.validate_for_ngd()?;
    let d = spec.latent_dim(data.d());
    let mut eta = match &cfg.init {
        Some(e) => {
            if e.dim() != d {
                return Err(Error::Dimension {
                    what: "initial natural parameter",
                    expected: d,
                    found: e.dim(),
                });
            }
            e.clone()
        }
        None => MeanCov::standard(d).to_natural()?,
    };
    let ctx = MetricContext::new(spec, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut omega = eta.to_expectation()?;
    let mut avg = omega.clone();
    let last = cfg.iterations + 1;

    let mut records = Vec::new();
    let mut metrics = Vec::new();
    let record = |t: usize, gamma: Option<f64>, eta: &NaturalParam, avg: &ExpectationParam| TraceRecord {
        t,
        gamma,
        eta: eta.clone(),
        omega_bar: avg.clone(),
    };
    records.push(record(0, None, &eta, &avg));
    metrics.push(ctx.evaluate(&cfg.metrics, spec, data, 0, &omega, None)?);

    let mut failure = None;
    let mut completed = 0;
    for t in 0..=cfg.iterations {
        let gamma = step_size(&cfg.schedule, t);
        let grad = cfg.estimator.estimate(spec, &omega, &eta, data, &mut rng)?;
        match step_checked(&eta, &grad.total, gamma, t) {
            Ok(next) => eta = next,
            Err(e @ Error::DomainExit { .. }) => {
                failure = Some(e);
                break;
            }
            Err(e) => return Err(e),
        }
        omega = eta.to_expectation()?;
        avg = update_average(&avg, &omega, t);
        completed = t + 1;
        let k = t + 1;
        let at_cadence = cfg.metrics.cadence.includes(k, last);
        if cfg.keep_iterates || at_cadence {
            records.push(record(k, Some(gamma), &eta, &avg));
        }
        if at_cadence {
            metrics.push(ctx.evaluate(&cfg.metrics, spec, data, k, &omega, Some(&avg))?);
        }
    }
    if failure.is_some() && metrics.last().map(|m| m.t) != Some(completed) {
        metrics.push(ctx.evaluate(&cfg.metrics, spec, data, completed, &omega, Some(&avg))?);
    }
    Ok(Trace {
        records,
        metrics,
        final_eta: eta,
        average: avg,
        completed,
        failure,
    })
}

/// Mean/Cholesky parameterization `q = N(m, CCᵀ)` with `C` lower triangular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanChol {
    m: Vector,
    c: Matrix,
}

/// Lower bound for the diagonal of `C` after each SGD step.
pub const DIAG_CLAMP: f64 = 1e-10;

impl MeanChol {
    pub fn new(m: Vector, c: Matrix) -> Result<Self> {
        crate::linalg::expect_square("Cholesky factor", &c, m.len())?;
        if !is_lower_triangular(&c) {
            return Err(Error::Invalid("Cholesky factor must be lower triangular".into()));
        }
        if let Some(v) = c.diagonal().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain {
                constraint: Constraint::CholeskyDiagonal,
                min_eigenvalue: *v,
            });
        }
        Ok(Self { m, c })
    }

    pub fn standard(d: usize) -> Self {
        Self {
            m: Vector::zeros(d),
            c: Matrix::identity(d, d),
        }
    }

    pub fn from_mean_cov(mc: &MeanCov) -> Result<Self> {
        Ok(Self {
            m: mc.mu().clone(),
            c: mc.chol_factor()?,
        })
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn m(&self) -> &Vector {
        &self.m
    }

    pub fn c(&self) -> &Matrix {
        &self.c
    }

    pub fn to_mean_cov(&self) -> Result<MeanCov> {
        MeanCov::new(self.m.clone(), symmetrize(&(&self.c * self.c.transpose())))
    }

    pub fn to_expectation(&self) -> Result<ExpectationParam> {
        Ok(self.to_mean_cov()?.to_expectation())
    }
}

/// How SGD estimates the expected log-likelihood gradient in `(m, C)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LikGradMode {
    /// Closed-form integrand (linear and Poisson regression).
    Closed,
    /// `∇_C = E[∇_z log p · uᵀ]` with `z = m + Cu`.
    Reparam { samples: usize },
    /// `∇_C = E[∇²_z log p] · C`.
    Price { samples: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgdGradient {
    pub mode: LikGradMode,
    pub batch_size: Option<usize>,
}

/// Gradient of `ℓ(m, C)` with `C` treated as a general matrix (`Σ = CCᵀ`).
///
/// SGD projects the `C` component onto its lower triangle; the full matrix satisfies
/// `∂_C ℓ = 2 ∂_Ξ ℓ · C` and `∂_m ℓ = ∂_ξ ℓ + 2 ∂_Ξ ℓ · m`.
pub fn mean_chol_grad<R: Rng + ?Sized>(
    theta: &MeanChol,
    spec: &ModelSpec,
    data: &Dataset,
    mode: LikGradMode,
    rows: Rows<'_>,
    rng: &mut R,
) -> Result<(Vector, Matrix)> {
    spec.check(data)?;
    let d = theta.dim();
    let (m, c) = (&theta.m, &theta.c);
    let mut gm = Vector::zeros(d);
    let mut gc = Matrix::zeros(d, d);
    let scale = rows.scale(data.n());
    match mode {
        LikGradMode::Closed => match spec.kind {
            ModelKind::LinearRegression { noise_var } => rows.for_each(data.n(), |i| {
                let x = spec.design_row(data, i);
                let r = data.y()[i] - x.dot(m);
                gm.axpy(-r / noise_var, &x, 1.0);
                let xc = c.transpose() * &x;
                gc.ger(1.0 / noise_var, &x, &xc, 1.0);
            }),
            ModelKind::Poisson => rows.for_each(data.n(), |i| {
                let x = spec.design_row(data, i);
                let xc = c.transpose() * &x;
                let e = (x.dot(m) + 0.5 * xc.norm_squared()).exp();
                gm.axpy(e - data.y()[i], &x, 1.0);
                gc.ger(e, &x, &xc, 1.0);
            }),
            ModelKind::Logistic => {
                return Err(Error::Invalid(
                    "logistic regression has no closed-form integrand".into(),
                ))
            }
        },
        LikGradMode::Reparam { samples } | LikGradMode::Price { samples } => {
            if samples == 0 {
                return Err(Error::Invalid("Monte Carlo sample count must be >= 1".into()));
            }
            let mut hess = Matrix::zeros(d, d);
            for _ in 0..samples {
                let u = standard_normal_vector(rng, d);
                let z = m + c * &u;
                let (_, g, h) = spec.loglik_sum(&z, data, rows);
                gm -= &g;
                match mode {
                    LikGradMode::Reparam { .. } => gc.ger(-1.0, &g, &u, 1.0),
                    _ => hess -= h,
                }
            }
            if matches!(mode, LikGradMode::Price { .. }) {
                gc = hess * c;
            }
            // loglik_sum already applies the batch rescaling.
            let s = 1.0 / samples as f64;
            gm *= s;
            gc *= s;
        }
    }
    if mode == LikGradMode::Closed {
        gm *= scale;
        gc *= scale;
    }

    // KL(N(m, CCᵀ) ‖ N(μ_p, P)): ∂_m = P⁻¹(m - μ_p), ∂_C = P⁻¹C - C⁻ᵀ.
    let prior = spec.prior.mean_cov();
    let p_inv = spec.prior.natural().lambda_mat() * -2.0;
    gm += &p_inv * (m - prior.mu());
    let c_inv = lower_triangular_inverse(c).ok_or(Error::Domain {
        constraint: Constraint::CholeskyDiagonal,
        min_eigenvalue: c.diagonal().min(),
    })?;
    gc += &p_inv * c - c_inv.transpose();
    if gm.iter().chain(gc.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SGD gradient"));
    }
    Ok((gm, gc))
}

/// One projected SGD step on `(m, C)`; the diagonal of `C` is clamped to `≥ 1e-10`.
pub fn sgd_step<R: Rng + ?Sized>(
    theta: &MeanChol,
    spec: &ModelSpec,
    data: &Dataset,
    grad: &SgdGradient,
    gamma: f64,
    rng: &mut R,
) -> Result<MeanChol> {
    if !(gamma > 0.0) {
        return Err(Error::Invalid(format!("SGD step size must be > 0, got {gamma}")));
    }
    let idx = match grad.batch_size {
        Some(0) => return Err(Error::Invalid("batch size must be >= 1".into())),
        Some(b) => Some(sample_batch(rng, data.n(), b)),
        None => None,
    };
    let rows = idx.as_deref().map_or(Rows::All, Rows::Batch);
    let (gm, gc) = mean_chol_grad(theta, spec, data, grad.mode, rows, rng)?;
    Ok(apply_sgd_update(theta, &gm, &gc, gamma))
}

/// `θ - γ g` with the `C` gradient projected to the lower triangle, then clamped.
pub fn apply_sgd_update(theta: &MeanChol, gm: &Vector, gc: &Matrix, gamma: f64) -> MeanChol {
    let m = &theta.m - gm * gamma;
    let mut c = &theta.c - tril(gc) * gamma;
    for i in 0..c.nrows() {
        if !(c[(i, i)] >= DIAG_CLAMP) {
            c[(i, i)] = DIAG_CLAMP;
        }
    }
    MeanChol { m, c }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub gradient: SgdGradient,
    pub schedule: Schedule,
    pub iterations: usize,
    pub seed: u64,
    pub init: Option<MeanChol>,
    pub metrics: MetricOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdTrace {
    pub metrics: Vec<MetricPoint>,
    pub final_theta: MeanChol,
    pub completed: usize,
    pub failure: Option<Error>,
}

/// SGD baseline in the mean/Cholesky parameterization for `T + 1` iterations.
pub fn run_sgd(spec: &ModelSpec, data: &Dataset, cfg: &SgdConfig) -> Result<SgdTrace> {
    spec.check(data)?;
    let d = spec.latent_dim(data.d());
    let mut theta = cfg.init.clone().unwrap_or_else(|| MeanChol::standard(d));
    let ctx = MetricContext::new(spec, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let last = cfg.iterations + 1;
    let mut metrics = vec![ctx.evaluate(&cfg.metrics, spec, data, 0, &theta.to_expectation()?, None)?];
    let mut failure = None;
    let mut completed = 0;
    for t in 0..=cfg.iterations {
        let gamma = step_size(&cfg.schedule, t);
        // A non-finite or numerically singular factor ends the run like an NGD domain exit.
        let stop = |e: Error| match e {
            Error::NonFinite(_) | Error::Domain { .. } => Ok(e),
            e => Err(e),
        };
        match sgd_step(&theta, spec, data, &cfg.gradient, gamma, &mut rng) {
            Ok(next) => theta = next,
            Err(e) => {
                failure = Some(stop(e)?);
                break;
            }
        }
        if cfg.metrics.cadence.includes(t + 1, last) {
            let point = theta
                .to_expectation()
                .and_then(|omega| ctx.evaluate(&cfg.metrics, spec, data, t + 1, &omega, None));
            match point {
                Ok(p) => metrics.push(p),
                Err(e) => {
                    failure = Some(stop(e)?);
                    break;
                }
            }
        }
        completed = t + 1;
    }
    Ok(SgdTrace {
        metrics,
        final_theta: theta,
        completed,
        failure,
    })
}

/// Returns true if `theta` converts to a valid Gaussian.
pub fn mean_chol_is_valid(theta: &MeanChol) -> bool {
    cholesky(&symmetrize(&(&theta.c * theta.c.transpose()))).is_some()
}
