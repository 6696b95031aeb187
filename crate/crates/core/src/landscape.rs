//! Probes of the negative-ELBO landscape in the expectation parameter: non-convexity
//! witnesses for logistic and Poisson regression, the chain-rule identities that map
//! stationary points between parameterizations, and a multi-start convergence check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{exact_grad, price_loglik_grad, GradientEstimate};
use crate::expfam::{bregman_kl, ExpectationParam, MeanCov, NaturalParam};
use crate::linalg::{min_eigenvalue, symmetrize, Matrix, Vector};
use crate::models::{sigmoid, softplus, Dataset, McSpec, ModelKind, ModelSpec, Rows, TargetKind};
use crate::optim::{mean_chol_grad, run_ngd, LikGradMode, MeanChol, NgdConfig};

/// A point on one of the restricted subsets of the expectation domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RestrictedPoint {
    /// Latent `(w, b)` with `ξ = 0` and `Ξ = diag(s₁, s₂)`.
    LogisticDiagonal { s1: f64, s2: f64 },
    /// `Ξ = ξξᵀ + 2I`, so the covariance is fixed at `2I`.
    PoissonSlice { xi: Vector },
}

impl RestrictedPoint {
    pub fn expectation(&self) -> Result<ExpectationParam> {
        match self {
            RestrictedPoint::LogisticDiagonal { s1, s2 } => {
                if !(*s1 > 0.0 && *s2 > 0.0) {
                    return Err(Error::Invalid(format!(
                        "restricted logistic point needs s1, s2 > 0, got ({s1}, {s2})"
                    )));
                }
                ExpectationParam::new(Vector::zeros(2), Matrix::from_diagonal(&Vector::from_vec(vec![*s1, *s2])))
            }
            RestrictedPoint::PoissonSlice { xi } => {
                let d = xi.len();
                ExpectationParam::new(xi.clone(), xi * xi.transpose() + Matrix::identity(d, d) * 2.0)
            }
        }
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl McEstimate {
    pub(crate) fn from_values(values: impl Iterator<Item = f64>) -> Self {
        let mut count = 0usize;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for v in values {
            count += 1;
            let delta = v - mean;
            mean += delta / count as f64;
            m2 += delta * (v - mean);
        }
        let var = if count > 1 { m2 / (count - 1) as f64 } else { 0.0 };
        Self {
            value: mean,
            std_error: (var / count.max(1) as f64).sqrt(),
            samples: count,
        }
    }

    /// `value + k·SE`.
    pub fn upper(&self, k: f64) -> f64 {
        self.value + k * self.std_error
    }
}

/// Fourth derivative of `t ↦ log(1 + e^{-t})`: `ψ(1-ψ)(6ψ² - 6ψ + 1)` with `ψ = σ(t)`.
pub fn softplus_fourth_derivative(t: f64) -> f64 {
    let p = sigmoid(t);
    p * (1.0 - p) * (6.0 * p * p - 6.0 * p + 1.0)
}

fn check_restricted_logistic(data: &Dataset, s1: f64, s2: f64) -> Result<()> {
    if data.kind() != TargetKind::Binary || data.d() != 1 {
        return Err(Error::Invalid(
            "restricted logistic probes need binary targets and a single feature".into(),
        ));
    }
    if !(s1 > 0.0 && s2 > 0.0) {
        return Err(Error::Invalid(format!("s1 and s2 must be > 0, got ({s1}, {s2})")));
    }
    if data.x().iter().any(|x| x.abs() > 1.0) {
        log::warn!("logistic features outside [-1, 1]; the witness construction assumes bounded features");
    }
    Ok(())
}

/// `E[ψ(1-ψ)(6ψ² - 6ψ + 1)]` for a scalar `t ~ N(0, v)`.
pub fn logistic_point_expectation(v: f64, mc: McSpec) -> McEstimate {
    let sd = v.sqrt();
    let mut rng = mc.rng();
    McEstimate::from_values((0..mc.samples).map(|_| {
        let e: f64 = rng.sample(StandardNormal);
        softplus_fourth_derivative(sd * e)
    }))
}

/// Curvature `∂²ℓ/∂s₂²` of the restricted negative ELBO (standard normal prior on `(w, b)`)
/// at `ξ = 0`, `Ξ = diag(s₁, s₂)`:
/// `¼ Σᵢ E[ψᵢ(1-ψᵢ)(6ψᵢ² - 6ψᵢ + 1)] + 1/(2s₂²)`, with `wxᵢ + b ~ N(0, xᵢ²s₁ + s₂)`.
///
/// Each Monte Carlo draw shares one standard normal across the data points.
pub fn logistic_s2_curvature(data: &Dataset, s1: f64, s2: f64, mc: McSpec) -> Result<McEstimate> {
    check_restricted_logistic(data, s1, s2)?;
    if mc.samples < 2 {
        return Err(Error::Invalid("curvature needs at least 2 Monte Carlo samples".into()));
    }
    let sds: Vec<f64> = data.x().column(0).iter().map(|x| (x * x * s1 + s2).sqrt()).collect();
    let prior_term = 0.5 / (s2 * s2);
    let mut rng = mc.rng();
    Ok(McEstimate::from_values((0..mc.samples).map(|_| {
        let e: f64 = rng.sample(StandardNormal);
        0.25 * sds.iter().map(|sd| softplus_fourth_derivative(sd * e)).sum::<f64>() + prior_term
    })))
}

/// Monte Carlo restricted negative ELBO, sampling `w ~ N(0, s₁)` and `b ~ N(0, s₂)`.
pub fn logistic_restricted_neg_elbo(data: &Dataset, s1: f64, s2: f64, mc: McSpec) -> Result<McEstimate> {
    check_restricted_logistic(data, s1, s2)?;
    let kl = 0.5 * (s1 - 1.0 - s1.ln()) + 0.5 * (s2 - 1.0 - s2.ln());
    let (sw, sb) = (s1.sqrt(), s2.sqrt());
    let mut rng = mc.rng();
    let x = data.x().column(0);
    Ok(McEstimate::from_values((0..mc.samples).map(|_| {
        let w = sw * rng.sample::<f64, _>(StandardNormal);
        let b = sb * rng.sample::<f64, _>(StandardNormal);
        x.iter()
            .zip(data.y().iter())
            .map(|(xi, yi)| softplus(-yi * (w * xi + b)))
            .sum::<f64>()
            + kl
    })))
}

/// Synthetic single-feature logistic data with features uniform on `[-1, 1]`.
///
/// Prefixes are stable: the first `n` rows do not depend on how many rows are requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WitnessGenerator {
    pub seed: u64,
}

impl WitnessGenerator {
    pub fn generate(&self, n: usize) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut x = Matrix::zeros(n, 1);
        let mut y = Vector::zeros(n);
        for i in 0..n {
            x[(i, 0)] = rng.random_range(-1.0..=1.0);
            y[i] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        }
        Dataset::new(x, y, TargetKind::Binary)
    }
}

/// Search grid: `s₁ = s₂ = δ` over decreasing `δ`, and `n` doubling within each `δ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessGrid {
    pub deltas: Vec<f64>,
    pub n_start: usize,
    pub n_max: usize,
    pub mc: McSpec,
}

impl Default for WitnessGrid {
    fn default() -> Self {
        Self {
            deltas: vec![1.0, 0.5, 0.25, 0.125, 0.0625],
            n_start: 8,
            n_max: 1 << 16,
            mc: McSpec::new(4000, 11),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessProbe {
    pub delta: f64,
    pub n: usize,
    pub curvature: McEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub point: RestrictedPoint,
    pub n: usize,
    pub curvature: McEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessReport {
    pub grid: WitnessGrid,
    pub probes: Vec<WitnessProbe>,
    /// First probe with `curvature + 5·SE < 0`; `None` when the grid is exhausted.
    pub witness: Option<Witness>,
}

/// Standard errors required below zero before a curvature counts as negative.
pub const WITNESS_SIGMAS: f64 = 5.0;

/// Searches for a restricted point where `ℓ` is certifiably concave in `s₂`.
pub fn find_logistic_witness(generator: &WitnessGenerator, grid: &WitnessGrid) -> Result<WitnessReport> {
    if grid.n_start == 0 || grid.n_max < grid.n_start {
        return Err(Error::Invalid("witness grid needs 1 <= n_start <= n_max".into()));
    }
    let full = generator.generate(grid.n_max)?;
    let mut probes = Vec::new();
    for &delta in &grid.deltas {
        let mut n = grid.n_start;
        while n <= grid.n_max {
            let rows: Vec<usize> = (0..n).collect();
            let data = full.subset(&rows)?;
            let curvature = logistic_s2_curvature(&data, delta, delta, grid.mc)?;
            probes.push(WitnessProbe { delta, n, curvature });
            if curvature.upper(WITNESS_SIGMAS) < 0.0 {
                return Ok(WitnessReport {
                    grid: grid.clone(),
                    probes,
                    witness: Some(Witness {
                        point: RestrictedPoint::LogisticDiagonal { s1: delta, s2: delta },
                        n,
                        curvature,
                    }),
                });
            }
            // The data term grows linearly in n; stop doubling once it is not clearly negative.
            let data_term = curvature.value - 0.5 / (delta * delta);
            if data_term + 3.0 * curvature.std_error >= 0.0 {
                break;
            }
            n *= 2;
        }
    }
    Ok(WitnessReport {
        grid: grid.clone(),
        probes,
        witness: None,
    })
}

fn slice_xi(point: &RestrictedPoint) -> Result<&Vector> {
    match point {
        RestrictedPoint::PoissonSlice { xi } => Ok(xi),
        _ => Err(Error::Invalid("expected a Poisson slice point".into())),
    }
}

/// `∇_ξ A*(ξ, Ξ) = (Ξ - ξξᵀ)⁻¹ ξ` at fixed `Ξ`.
pub fn conjugate_potential_xi_grad(xi: &Vector, xi_mat: &Matrix) -> Result<Vector> {
    let omega = ExpectationParam::new(xi.clone(), xi_mat.clone())?;
    let chol = omega.covariance_chol()?;
    Ok(chol.solve(xi))
}

/// `∇²_ξ A*` at fixed `Ξ`, by central differences of the analytic `∇_ξ A*`.
pub fn conjugate_potential_xi_hessian_fd(xi: &Vector, xi_mat: &Matrix) -> Result<Matrix> {
    let d = xi.len();
    let mut h = Matrix::zeros(d, d);
    for j in 0..d {
        let step = 1e-5 * xi[j].abs().max(1.0);
        let mut plus = xi.clone();
        let mut minus = xi.clone();
        plus[j] += step;
        minus[j] -= step;
        let g = (conjugate_potential_xi_grad(&plus, xi_mat)? - conjugate_potential_xi_grad(&minus, xi_mat)?)
            / (2.0 * step);
        h.set_column(j, &g);
    }
    Ok(symmetrize(&h))
}

/// Hessian of the Poisson negative ELBO in `ξ` with `Ξ` held at its slice value
/// `ξξᵀ + 2I`:
/// `Σᵢ exp(xᵢᵀξ + xᵢᵀxᵢ)(xᵢᵀξ)(xᵢᵀξ - 2) xᵢxᵢᵀ + ∇²_ξ A*(ω)`.
pub fn poisson_xi_hessian(data: &Dataset, point: &RestrictedPoint) -> Result<Matrix> {
    let xi = slice_xi(point)?;
    if data.kind() != TargetKind::Count {
        return Err(Error::Invalid("Poisson Hessian needs count targets".into()));
    }
    if xi.len() != data.d() {
        return Err(Error::Dimension {
            what: "slice point",
            expected: data.d(),
            found: xi.len(),
        });
    }
    let omega = point.expectation()?;
    let mut h = conjugate_potential_xi_hessian_fd(xi, omega.xi_mat())?;
    for i in 0..data.n() {
        let x = data.x().row(i).transpose();
        let u = x.dot(xi);
        let w = (u + x.norm_squared()).exp() * u * (u - 2.0);
        h.ger(w, &x, &x, 1.0);
    }
    Ok(symmetrize(&h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignFlipReport {
    pub xi: Vector,
    /// `(c, minimum eigenvalue)` for every scale tried.
    pub history: Vec<(f64, f64)>,
    /// First scale with a negative minimum eigenvalue.
    pub found: Option<(f64, f64)>,
}

/// Doubles `c` from 1 until the Hessian for the data `c·xᵢ` at `ξ/c` has a negative
/// eigenvalue. Requires `0 < xᵢᵀξ < 2` for every row.
pub fn poisson_sign_flip_search(data: &Dataset, xi: &Vector, c_max: f64) -> Result<SignFlipReport> {
    for i in 0..data.n() {
        let u = data.x().row(i).transpose().dot(xi);
        if !(u > 0.0 && u < 2.0) {
            return Err(Error::Invalid(format!(
                "row {i}: xᵢᵀξ = {u} lies outside (0, 2)"
            )));
        }
    }
    let mut history = Vec::new();
    let mut c = 1.0;
    while c <= c_max {
        let point = RestrictedPoint::PoissonSlice { xi: xi / c };
        let h = poisson_xi_hessian(&data.scaled_features(c), &point)?;
        let eig = min_eigenvalue(&h);
        history.push((c, eig));
        if eig < 0.0 {
            return Ok(SignFlipReport {
                xi: xi.clone(),
                history,
                found: Some((c, eig)),
            });
        }
        c *= 2.0;
    }
    Ok(SignFlipReport {
        xi: xi.clone(),
        history,
        found: None,
    })
}

/// Residuals of `∂_m ℓ = ∂_ξ ℓ + 2∂_Ξ ℓ·m` and `∂_C ℓ = 2∂_Ξ ℓ·C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub mean_residual: f64,
    pub chol_residual: f64,
    /// Max-abs of the expectation-parameter gradient.
    pub omega_grad_max: f64,
    /// Max-abs of the `(m, C)` gradient.
    pub mean_chol_grad_max: f64,
}

impl StationarityReport {
    pub fn max_residual(&self) -> f64 {
        self.mean_residual.max(self.chol_residual)
    }
}

/// Evaluates both sides of the chain-rule identities between `ω` and `(m, C)` gradients.
///
/// Linear and Poisson regression use closed-form gradients; logistic regression uses the
/// Price estimator on both sides with the same seed, so both see the same samples.
pub fn stationarity_map_check(
    spec: &ModelSpec,
    data: &Dataset,
    omega: &ExpectationParam,
    mc: McSpec,
) -> Result<StationarityReport> {
    let mc_form = MeanCov::new(omega.xi().clone(), omega.covariance())?;
    let theta = MeanChol::from_mean_cov(&mc_form)?;
    let (grad, mode) = match spec.kind {
        ModelKind::LinearRegression { .. } | ModelKind::Poisson => {
            (exact_grad(spec, omega, data)?.total, LikGradMode::Closed)
        }
        ModelKind::Logistic => {
            let ll = price_loglik_grad(spec, omega, data, Rows::All, mc.samples, &mut mc.rng())?;
            let total = GradientEstimate::assemble(ll, &omega.to_natural()?, &spec.prior)?.total;
            (total, LikGradMode::Price { samples: mc.samples })
        }
    };
    let (gm, gc) = mean_chol_grad(&theta, spec, data, mode, Rows::All, &mut mc.rng())?;
    let m = theta.m();
    let c = theta.c();
    let mean_rhs = &grad.g_xi + &grad.g_ximat * m * 2.0;
    let chol_rhs = &grad.g_ximat * c * 2.0;
    Ok(StationarityReport {
        mean_residual: (&gm - mean_rhs).amax(),
        chol_residual: (&gc - chol_rhs).amax(),
        omega_grad_max: grad.max_abs(),
        mean_chol_grad_max: gm.amax().max(gc.amax()),
    })
}

/// Random valid starting point: `μ ~ N(0, I)`, `Σ = AAᵀ/d + ½I` with Gaussian `A`.
pub fn random_start<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Result<NaturalParam> {
    let mu = crate::linalg::standard_normal_vector(rng, d);
    let a = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let sigma = symmetrize(&(&a * a.transpose() / d as f64 + Matrix::identity(d, d) * 0.5));
    MeanCov::new(mu, sigma)?.to_natural()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasinReport {
    pub finals: Vec<ExpectationParam>,
    /// Largest `KL(qᵢ ‖ qⱼ)` over ordered pairs.
    pub max_pairwise_kl: f64,
    pub failures: usize,
}

/// Runs NGD from each start and measures how far apart the averaged iterates end up.
pub fn convergence_basin(
    spec: &ModelSpec,
    data: &Dataset,
    starts: &[NaturalParam],
    cfg: &NgdConfig,
) -> Result<BasinReport> {
    let mut finals = Vec::with_capacity(starts.len());
    let mut failures = 0;
    for start in starts {
        let mut run = cfg.clone();
        run.init = Some(start.clone());
        run.keep_iterates = false;
        let trace = run_ngd(spec, data, &run)?;
        if trace.failure.is_some() {
            failures += 1;
            continue;
        }
        finals.push(trace.average);
    }
    let mut max_pairwise_kl = 0.0f64;
    for (i, a) in finals.iter().enumerate() {
        for (j, b) in finals.iter().enumerate() {
            if i != j {
                max_pairwise_kl = max_pairwise_kl.max(bregman_kl(a, b)?);
            }
        }
    }
    Ok(BasinReport {
        finals,
        max_pairwise_kl,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::PriorSpec;

    #[test]
    fn quartic_at_zero() {
        assert!((softplus_fourth_derivative(0.0) + 0.125).abs() < 1e-15);
        let tiny = logistic_point_expectation(1e-8, McSpec::new(1000, 1));
        assert!((tiny.value + 0.125).abs() < 1e-6);
    }

    #[test]
    fn huge_s2_leaves_data_term() {
        let data = Dataset::new(Matrix::from_element(1, 1, 0.5), Vector::from_element(1, 1.0), TargetKind::Binary).unwrap();
        let c = logistic_s2_curvature(&data, 1.0, 1e6, McSpec::new(20_000, 3)).unwrap();
        let e = logistic_point_expectation(0.25 + 1e6, McSpec::new(20_000, 3));
        assert!((c.value - 0.25 * e.value - 0.5e-12).abs() < 1e-12);
        assert!(c.value.abs() < 0.05);
    }

    #[test]
    fn small_n_is_convex_in_s2() {
        let data = WitnessGenerator { seed: 2 }.generate(4).unwrap();
        let c = logistic_s2_curvature(&data, 0.25, 0.25, McSpec::new(2000, 0)).unwrap();
        // 1/(2δ²) = 8 while the data term is at most n/32 in magnitude.
        assert!(c.value - 5.0 * c.std_error > 0.0);
    }

    #[test]
    fn poisson_zero_point_is_convex() {
        let data = Dataset::new(
            Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, -0.7]),
            Vector::from_vec(vec![0.0, 2.0]),
            TargetKind::Count,
        )
        .unwrap();
        let h = poisson_xi_hessian(&data, &RestrictedPoint::PoissonSlice { xi: Vector::zeros(2) }).unwrap();
        assert!((h - Matrix::identity(2, 2) * 0.5).amax() < 1e-8);
    }

    #[test]
    fn analytic_conjugate_hessian_on_slice() {
        let xi = Vector::from_vec(vec![0.4, -1.1]);
        let xi_mat = &xi * xi.transpose() + Matrix::identity(2, 2) * 2.0;
        let fd = conjugate_potential_xi_hessian_fd(&xi, &xi_mat).unwrap();
        let exact = Matrix::identity(2, 2) * (0.5 + 0.25 * xi.norm_squared()) + &xi * xi.transpose() * 0.25;
        assert!((fd - exact).amax() < 1e-8);
    }

    #[test]
    fn sign_flip_found() {
        let data = Dataset::new(Matrix::from_row_slice(1, 2, &[1.0, 0.0]), Vector::from_element(1, 1.0), TargetKind::Count).unwrap();
        let report = poisson_sign_flip_search(&data, &Vector::from_vec(vec![1.0, 0.0]), 1024.0).unwrap();
        let (c, eig) = report.found.unwrap();
        assert!(eig < 0.0 && c >= 1.0);
        assert!(poisson_sign_flip_search(&data, &Vector::from_vec(vec![3.0, 0.0]), 8.0).is_err());
    }

    #[test]
    fn stationarity_at_linreg_optimum() {
        let data = Dataset::new(
            Matrix::from_row_slice(3, 2, &[1.0, 0.2, -0.5, 1.0, 0.3, 0.3]),
            Vector::from_vec(vec![1.0, -2.0, 0.5]),
            TargetKind::Real,
        )
        .unwrap();
        let spec = ModelSpec::linear_regression(0.5, PriorSpec::standard(2)).unwrap();
        let post = crate::models::exact_posterior(&spec, &data).unwrap().to_expectation();
        let r = stationarity_map_check(&spec, &data, &post, McSpec::new(1, 0)).unwrap();
        assert!(r.omega_grad_max < 1e-8 && r.mean_chol_grad_max < 1e-8);
        assert!(r.max_residual() < 1e-8);
    }
}
