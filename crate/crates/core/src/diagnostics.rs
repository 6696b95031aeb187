//! Verification tools: the inner-product gradient variance, its analytic bound for data
//! subsampling, the posterior-contraction check, the Fisher identity, and KL metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::exact_grad;
use crate::expfam::{bregman_kl, ExpectationParam, GradientPair, NaturalParam, PriorSpec};
use crate::landscape::McEstimate;
use crate::linalg::{max_eigenvalue, spectral_norm_sym, symmetrize, Matrix, Vector};
use crate::models::{elbo, exact_posterior, Dataset, McSpec, ModelKind, ModelSpec};
use crate::optim::{Estimator, TraceRecord};

/// Inner-product gradient variance estimate with domain-exit bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub mean: f64,
    pub std_error: f64,
    /// Draws used in the average.
    pub draws: usize,
    /// Draws whose stochastic step left the natural domain (excluded).
    pub domain_exits: usize,
}

impl VarianceEstimate {
    pub fn upper(&self, k: f64) -> f64 {
        self.mean + k * self.std_error
    }
}

/// `(1/γ) E⟨∇̂ℓ(ω_t) - ∇ℓ(ω_t), ω_{t+1,*} - ω_{t+1}⟩`, where `ω_{t+1}` is the stochastic
/// NGD step and `ω_{t+1,*}` the exact one.
pub fn grad_variance_estimate(
    spec: &ModelSpec,
    data: &Dataset,
    omega: &ExpectationParam,
    estimator: &Estimator,
    gamma: f64,
    draws: McSpec,
) -> Result<VarianceEstimate> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Invalid(format!("step size must lie in (0, 1], got {gamma}")));
    }
    if draws.samples == 0 {
        return Err(Error::Invalid("need at least one draw".into()));
    }
    let eta = omega.to_natural()?;
    let exact = exact_grad(spec, omega, data)?.total;
    let exact_next = eta.step_unchecked(&exact, gamma).to_expectation()?;
    let mut rng = ChaCha8Rng::seed_from_u64(draws.seed);
    let mut values = Vec::with_capacity(draws.samples);
    let mut domain_exits = 0;
    for _ in 0..draws.samples {
        let g = estimator.estimate(spec, omega, &eta, data, &mut rng)?.total;
        let next = match eta.step_unchecked(&g, gamma).to_expectation() {
            Ok(next) => next,
            Err(Error::Domain { .. }) => {
                domain_exits += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        values.push(g.sub(&exact).inner(&exact_next.difference(&next)) / gamma);
    }
    let est = McEstimate::from_values(values.iter().copied());
    Ok(VarianceEstimate {
        mean: est.value,
        std_error: est.std_error,
        draws: est.samples,
        domain_exits,
    })
}

/// Constants of the data-subsampling variance bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceConstants {
    /// `max{1, ‖P‖₂}`.
    pub nu: f64,
    /// `maxᵢ ‖yᵢxᵢ‖`.
    pub b: f64,
    /// Empirical variance of `yⱼxⱼ`.
    pub s1: f64,
    /// Empirical variance of `xⱼxⱼᵀ` in Frobenius norm.
    pub s2: f64,
    pub n: usize,
    pub batch_size: usize,
    pub noise_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub constants: VarianceConstants,
    pub v2: f64,
    /// `(t, estimate)` pairs recorded along a trajectory.
    pub estimates: Vec<(usize, VarianceEstimate)>,
    /// Running maximum of the recorded means.
    pub running_max: Vec<f64>,
}

impl VarianceReport {
    pub fn record(&mut self, t: usize, est: VarianceEstimate) {
        let prev = self.running_max.last().copied().unwrap_or(f64::NEG_INFINITY);
        self.running_max.push(prev.max(est.mean));
        self.estimates.push((t, est));
    }

    /// Max over recorded iterates, used as the trajectory-level variance.
    pub fn observed_max(&self) -> Option<f64> {
        self.running_max.last().copied()
    }
}

/// `V₂ = (νs₁ + ½ν²s₂ + 2ν²b√(s₁s₂)n + ν³b²s₂n²)·n²/(σ⁴m)` for Bayesian linear regression with
/// a zero-mean prior and subsampling batches of size `m`.
pub fn v2_bound(data: &Dataset, prior: &PriorSpec, noise_var: f64, batch_size: usize) -> Result<VarianceReport> {
    if !(noise_var > 0.0) || batch_size == 0 {
        return Err(Error::Invalid("v2 bound needs noise_var > 0 and batch_size >= 1".into()));
    }
    if prior.dim() != data.d() {
        return Err(Error::Dimension {
            what: "prior",
            expected: data.d(),
            found: prior.dim(),
        });
    }
    if prior.mean_cov().mu().amax() != 0.0 {
        return Err(Error::Invalid("v2 bound assumes a zero-mean prior".into()));
    }
    let n = data.n();
    let d = data.d();
    let rows: Vec<Vector> = (0..n).map(|i| data.x().row(i).transpose()).collect();
    let yx: Vec<Vector> = rows.iter().zip(data.y().iter()).map(|(x, y)| x * *y).collect();
    let xx: Vec<Matrix> = rows.iter().map(|x| x * x.transpose()).collect();
    let mean_yx = yx.iter().fold(Vector::zeros(d), |acc, v| acc + v) / n as f64;
    let mean_xx = xx.iter().fold(Matrix::zeros(d, d), |acc, m| acc + m) / n as f64;
    let s1 = yx.iter().map(|v| (v - &mean_yx).norm_squared()).sum::<f64>() / n as f64;
    let s2 = xx.iter().map(|m| (m - &mean_xx).norm_squared()).sum::<f64>() / n as f64;
    let b = yx.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let nu = spectral_norm_sym(prior.mean_cov().sigma()).max(1.0);
    let nf = n as f64;
    let v2 = (nu * s1 + 0.5 * nu * nu * s2 + 2.0 * nu * nu * b * (s1 * s2).sqrt() * nf + nu.powi(3) * b * b * s2 * nf * nf)
        * nf
        * nf
        / (noise_var * noise_var * batch_size as f64);
    Ok(VarianceReport {
        constants: VarianceConstants {
            nu,
            b,
            s1,
            s2,
            n,
            batch_size,
            noise_var,
        },
        v2,
        estimates: Vec::new(),
        running_max: Vec::new(),
    })
}

/// Tolerance on the contraction margins.
pub const CONTRACTION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContractionKind {
    /// `λ_max(Λ_t) + 1/(2ν) > tol`.
    Precision,
    /// `‖λ_t‖ > bn/σ²`.
    LinearTerm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionViolation {
    pub t: usize,
    pub kind: ContractionKind,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub nu: f64,
    /// Largest `λ_max(Λ_t) + 1/(2ν)` and where it occurred.
    pub worst_precision_margin: (usize, f64),
    /// Largest `‖λ_t‖ - bn/σ²` when the linear-term bound applies.
    pub worst_linear_margin: Option<(usize, f64)>,
    pub violations: Vec<ContractionViolation>,
}

impl ContractionReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `Λ_t ⪯ -1/(2ν) I` at every recorded iterate, with `ν = max{1, ‖P‖₂}`, and, for
/// linear regression, `‖λ_t‖ ≤ bn/σ²` with `b = maxᵢ ‖yᵢxᵢ‖`.
pub fn contraction_check(
    records: &[TraceRecord],
    prior: &PriorSpec,
    linreg: Option<(&Dataset, f64)>,
) -> Result<ContractionReport> {
    let nu = spectral_norm_sym(prior.mean_cov().sigma()).max(1.0);
    let lambda_bound = match linreg {
        Some((data, noise_var)) => {
            let b = (0..data.n())
                .map(|i| data.x().row(i).norm() * data.y()[i].abs())
                .fold(0.0, f64::max);
            Some(b * data.n() as f64 / noise_var)
        }
        None => None,
    };
    let mut worst_precision_margin = (0, f64::NEG_INFINITY);
    let mut worst_linear_margin: Option<(usize, f64)> = None;
    let mut violations = Vec::new();
    for r in records {
        let margin = max_eigenvalue(r.eta.lambda_mat()) + 0.5 / nu;
        if !(margin <= worst_precision_margin.1) {
            worst_precision_margin = (r.t, margin);
        }
        if !(margin <= CONTRACTION_TOL) {
            violations.push(ContractionViolation {
                t: r.t,
                kind: ContractionKind::Precision,
                margin,
            });
        }
        if let Some(bound) = lambda_bound {
            let margin = r.eta.lambda_vec().norm() - bound;
            if worst_linear_margin.is_none_or(|(_, w)| margin > w) {
                worst_linear_margin = Some((r.t, margin));
            }
            if !(margin <= CONTRACTION_TOL * bound.max(1.0)) {
                violations.push(ContractionViolation {
                    t: r.t,
                    kind: ContractionKind::LinearTerm,
                    margin,
                });
            }
        }
    }
    Ok(ContractionReport {
        nu,
        worst_precision_margin,
        worst_linear_margin,
        violations,
    })
}

/// Half-vectorization coordinates `θ = (λ, vech Λ)` of a natural parameter.
pub fn natural_to_coords(eta: &NaturalParam) -> Vector {
    let d = eta.dim();
    let mut out = Vec::with_capacity(d + d * (d + 1) / 2);
    out.extend(eta.lambda_vec().iter());
    out.extend(vech(eta.lambda_mat()).iter());
    Vector::from_vec(out)
}

pub fn coords_to_natural(theta: &Vector, d: usize) -> Result<NaturalParam> {
    let lambda = Vector::from_iterator(d, theta.iter().take(d).copied());
    let mat = unvech(&theta.rows(d, theta.len() - d).into_owned(), d);
    NaturalParam::new(lambda, mat)
}

/// Lower-triangular entries in column-major order.
pub fn vech(m: &Matrix) -> Vector {
    let d = m.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for j in 0..d {
        for i in j..d {
            out.push(m[(i, j)]);
        }
    }
    Vector::from_vec(out)
}

pub fn unvech(v: &Vector, d: usize) -> Matrix {
    let mut m = Matrix::zeros(d, d);
    let mut k = 0;
    for j in 0..d {
        for i in j..d {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    m
}

/// `∇_θ A = (ξ, W vech Ξ)` where `W` doubles off-diagonal entries.
fn log_partition_coord_grad(eta: &NaturalParam) -> Result<Vector> {
    let omega = eta.to_expectation()?;
    let d = eta.dim();
    let mut out: Vec<f64> = omega.xi().iter().copied().collect();
    for j in 0..d {
        for i in j..d {
            let w = if i == j { 1.0 } else { 2.0 };
            out.push(w * omega.xi_mat()[(i, j)]);
        }
    }
    Ok(Vector::from_vec(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherReport {
    /// `F(η)⁻¹ ∇_θ ℓ` from finite differences.
    pub natural_gradient: Vector,
    /// `(∇_ξ ℓ, vech ∇_Ξ ℓ)` from the analytic gradient.
    pub expectation_gradient: Vector,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub rcond: f64,
    /// Every coordinate has relative error `< 1e-4` or absolute error `< 1e-8`.
    pub passed: bool,
}

/// Relative central-difference step used by [`fisher_identity_check`] (refined once by
/// Richardson extrapolation).
pub const FISHER_FD_STEP: f64 = 1e-4;

/// Checks `F(η)⁻¹ ∇_η ℓ = ∇_ω ℓ` with `F = ∇²A` and `∇_η ℓ` built by finite differences.
pub fn fisher_identity_check(spec: &ModelSpec, data: &Dataset, eta: &NaturalParam) -> Result<FisherReport> {
    if !spec.has_closed_form() {
        return Err(Error::Invalid("Fisher identity check needs a closed-form expected log-likelihood".into()));
    }
    let d = eta.dim();
    let theta = natural_to_coords(eta);
    let k = theta.len();
    let mut fisher = Matrix::zeros(k, k);
    let mut grad_theta = Vector::zeros(k);
    let loss = |th: &Vector| -> Result<f64> {
        let omega = coords_to_natural(th, d)?.to_expectation()?;
        elbo(spec, &omega, data, None)
    };
    // Central differences at h and h/2 combined by Richardson extrapolation.
    let central = |j: usize, h: f64| -> Result<(Vector, f64)> {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[j] += h;
        minus[j] -= h;
        let (ep, em) = (coords_to_natural(&plus, d)?, coords_to_natural(&minus, d)?);
        let col = (log_partition_coord_grad(&ep)? - log_partition_coord_grad(&em)?) / (2.0 * h);
        Ok((col, (loss(&plus)? - loss(&minus)?) / (2.0 * h)))
    };
    for j in 0..k {
        let h = FISHER_FD_STEP * theta[j].abs().max(1.0);
        let (col_h, g_h) = central(j, h)?;
        let (col_half, g_half) = central(j, 0.5 * h)?;
        fisher.set_column(j, &((col_half * 4.0 - col_h) / 3.0));
        grad_theta[j] = (4.0 * g_half - g_h) / 3.0;
    }
    let fisher = symmetrize(&fisher);
    let eig = nalgebra::SymmetricEigen::new(fisher.clone()).eigenvalues;
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
    let rcond = lo / hi;
    if !(rcond > 1e-12) {
        return Err(Error::IllConditioned { rcond });
    }
    let natural_gradient = fisher
        .lu()
        .solve(&grad_theta)
        .ok_or(Error::IllConditioned { rcond })?;
    let omega = eta.to_expectation()?;
    let g: GradientPair = exact_grad(spec, &omega, data)?.total;
    let mut flat: Vec<f64> = g.g_xi.iter().copied().collect();
    flat.extend(vech(&g.g_ximat).iter());
    let expectation_gradient = Vector::from_vec(flat);
    let mut max_rel_error = 0.0f64;
    let mut max_abs_error = 0.0f64;
    let mut passed = true;
    for (a, b) in natural_gradient.iter().zip(expectation_gradient.iter()) {
        let abs = (a - b).abs();
        let rel = abs / b.abs().max(f64::MIN_POSITIVE);
        max_abs_error = max_abs_error.max(abs);
        if abs >= 1e-8 {
            max_rel_error = max_rel_error.max(rel);
            passed &= rel < 1e-4;
        }
    }
    Ok(FisherReport {
        natural_gradient,
        expectation_gradient,
        max_rel_error,
        max_abs_error,
        rcond,
        passed,
    })
}

/// `KL(q ‖ q*)` against the exact linear-regression posterior.
pub fn kl_to_posterior(q: &ExpectationParam, spec: &ModelSpec, data: &Dataset) -> Result<f64> {
    if !matches!(spec.kind, ModelKind::LinearRegression { .. }) {
        return Err(Error::Invalid("KL to posterior needs a conjugate model".into()));
    }
    let post = exact_posterior(spec, data)?.to_expectation();
    bregman_kl(q, &post)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::MeanCov;
    use crate::models::TargetKind;
    use crate::optim::{run_ngd, Cadence, MetricOptions, NgdConfig, Schedule};

    fn toy() -> (ModelSpec, Dataset) {
        let data = Dataset::new(
            Matrix::from_row_slice(2, 1, &[1.0, 1.0]),
            Vector::from_vec(vec![1.0, 3.0]),
            TargetKind::Real,
        )
        .unwrap();
        (ModelSpec::linear_regression(1.0, PriorSpec::standard(1)).unwrap(), data)
    }

    #[test]
    fn toy_v2_constants() {
        let (spec, data) = toy();
        let r = v2_bound(&data, &spec.prior, 1.0, 1).unwrap();
        assert_eq!(r.constants.b, 3.0);
        assert_eq!(r.constants.s1, 1.0);
        assert_eq!(r.constants.s2, 0.0);
        assert_eq!(r.constants.nu, 1.0);
        assert_eq!(r.v2, 4.0);
        assert_eq!(v2_bound(&data, &spec.prior, 1.0, 2).unwrap().v2, 2.0);
    }

    #[test]
    fn identical_rows_have_zero_bound() {
        let data = Dataset::new(Matrix::from_element(3, 2, 0.5), Vector::from_element(3, 2.0), TargetKind::Real).unwrap();
        assert_eq!(v2_bound(&data, &PriorSpec::standard(2), 0.3, 1).unwrap().v2, 0.0);
    }

    #[test]
    fn exact_estimator_has_zero_variance() {
        let (spec, data) = toy();
        let omega = MeanCov::standard(1).to_expectation();
        let v = grad_variance_estimate(&spec, &data, &omega, &Estimator::Exact, 0.5, McSpec::new(10, 0)).unwrap();
        assert_eq!(v.mean, 0.0);
        let one = Dataset::new(Matrix::from_element(1, 1, 2.0), Vector::from_element(1, 1.0), TargetKind::Real).unwrap();
        let v = grad_variance_estimate(&spec, &one, &omega, &Estimator::Subsample { batch_size: 1 }, 1.0, McSpec::new(10, 0))
            .unwrap();
        assert_eq!(v.mean, 0.0);
    }

    #[test]
    fn contraction_base_case_and_corruption() {
        let (spec, data) = toy();
        let mut cfg = NgdConfig::new(Estimator::Subsample { batch_size: 1 }, Schedule::TwoOverTwoPlusT, 0, 0);
        cfg.metrics = MetricOptions::kl_only(Cadence::Every);
        let mut trace = run_ngd(&spec, &data, &cfg).unwrap();
        let r = contraction_check(&trace.records[..1], &spec.prior, Some((&data, 1.0))).unwrap();
        assert!(r.passed());
        assert_eq!(r.worst_precision_margin, (0, 0.0));
        let eta = &trace.records[0].eta;
        trace.records[0].eta = NaturalParam::new(eta.lambda_vec().clone(), eta.lambda_mat() * 0.1).unwrap();
        let r = contraction_check(&trace.records, &spec.prior, None).unwrap();
        assert_eq!(r.violations[0].t, 0);
        assert_eq!(r.violations[0].kind, ContractionKind::Precision);
    }

    #[test]
    fn vech_round_trip() {
        let m = Matrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        assert_eq!(vech(&m).as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(unvech(&vech(&m), 3), m);
    }

    #[test]
    fn fisher_identity_on_toy() {
        let (spec, data) = toy();
        let eta = MeanCov::standard(1).to_natural().unwrap();
        let r = fisher_identity_check(&spec, &data, &eta).unwrap();
        assert!(r.passed, "{r:?}");
        let post = exact_posterior(&spec, &data).unwrap().to_natural().unwrap();
        let r = fisher_identity_check(&spec, &data, &post).unwrap();
        assert!(r.passed && r.max_abs_error < 1e-8, "{r:?}");
    }

    #[test]
    fn kl_to_posterior_at_optimum() {
        let (spec, data) = toy();
        let post = exact_posterior(&spec, &data).unwrap().to_expectation();
        assert!(kl_to_posterior(&post, &spec, &data).unwrap().abs() < 1e-14);
    }
}
