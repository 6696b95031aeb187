//! Gradients of the negative ELBO with respect to the expectation parameter.
//!
//! Every estimator splits its output into the log-likelihood part
//! `∇̂_ω E_q log p(y | z)` and the assembled total
//! `∇̂ℓ(ω) = -∇̂_ω E_q log p(y | z) + η - η_p`.  NGD stays inside the natural domain for
//! step sizes in `[0, 1]` whenever the matrix component of the log-likelihood part is
//! negative definite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{kl_gradient_natural, ExpectationParam, GradientPair, NaturalParam, PriorSpec};
use crate::linalg::{standard_normal_vector, symmetrize, tril, Matrix, Vector};
use crate::models::{expected_loglik_grad, Dataset, ModelKind, ModelSpec, Rows};

/// Mini-batch size and seed for data subsampling (uniform, with replacement).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub seed: u64,
}

/// Log-likelihood part and total negative-ELBO gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub loglik: GradientPair,
    pub total: GradientPair,
}

impl GradientEstimate {
    /// `total = -loglik + η - η_p`.
    pub fn assemble(loglik: GradientPair, eta: &NaturalParam, prior: &PriorSpec) -> Result<Self> {
        let kl = kl_gradient_natural(eta, prior)?;
        let total = kl.sub(&loglik);
        Ok(Self { loglik, total })
    }

    /// Domain-safety condition: the matrix component of the log-likelihood part is `≺ 0`.
    pub fn loglik_negative_definite(&self) -> bool {
        is_negative_definite(&self.loglik.g_ximat)
    }
}

/// Strict negative definiteness via a Cholesky factorization of `-m`.
pub fn is_negative_definite(m: &Matrix) -> bool {
    crate::linalg::is_positive_definite(&(-m))
}

pub fn sample_batch<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize) -> Vec<usize> {
    (0..m).map(|_| rng.random_range(0..n)).collect()
}

/// Exact `∇ℓ(ω)` for models whose expected log-likelihood is closed form.
pub fn exact_grad(spec: &ModelSpec, omega: &ExpectationParam, data: &Dataset) -> Result<GradientEstimate> {
    let loglik = expected_loglik_grad(spec, omega, data, Rows::All)?;
    GradientEstimate::assemble(loglik, &omega.to_natural()?, &spec.prior)
}

/// Exact gradient for Bayesian linear regression:
/// `∇_ξ ℓ = -σ⁻² Σ yᵢxᵢ + λ - λ_p`, `∇_Ξ ℓ = σ⁻² Σ ½xᵢxᵢᵀ + Λ - Λ_p`.
pub fn exact_conjugate_grad(
    spec: &ModelSpec,
    omega: &ExpectationParam,
    data: &Dataset,
) -> Result<GradientPair> {
    if !matches!(spec.kind, ModelKind::LinearRegression { .. }) {
        return Err(Error::Invalid("exact conjugate gradient requires linear regression".into()));
    }
    Ok(exact_grad(spec, omega, data)?.total)
}

/// Data-subsampling gradient with an explicit RNG.
pub fn subsample_grad_with<R: Rng + ?Sized>(
    spec: &ModelSpec,
    omega: &ExpectationParam,
    data: &Dataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<GradientEstimate> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be >= 1".into()));
    }
    let idx = sample_batch(rng, data.n(), batch_size);
    let loglik = expected_loglik_grad(spec, omega, data, Rows::Batch(&idx))?;
    GradientEstimate::assemble(loglik, &omega.to_natural()?, &spec.prior)
}

/// Data-subsampling stochastic gradient: `n/m` times the closed-form per-row gradients of
/// `m` rows drawn uniformly with replacement, plus `η - η_p`.
pub fn subsample_grad(
    spec: &ModelSpec,
    omega: &ExpectationParam,
    data: &Dataset,
    batch: &BatchSpec,
) -> Result<GradientEstimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(batch.seed);
    subsample_grad_with(spec, omega, data, batch.batch_size, &mut rng)
}

/// Bonnet/Price estimator of the log-likelihood gradient:
/// `∇̂_ξ = mean[∇_z log p - ∇²_z log p · μ]`, `∇̂_Ξ = ½ mean[∇²_z log p]`.
pub fn price_loglik_grad<R: Rng + ?Sized>(
    spec: &ModelSpec,
    omega: &ExpectationParam,
    data: &Dataset,
    rows: Rows<'_>,
    samples: usize,
    rng: &mut R,
) -> Result<GradientPair> {
    if samples == 0 {
        return Err(Error::Invalid("Monte Carlo sample count must be >= 1".into()));
    }
    let d = omega.dim();
    let l = omega.covariance_chol()?.l();
    let mu = omega.xi();
    let mut g_mean = Vector::zeros(d);
    let mut h_mean = Matrix::zeros(d, d);
    for _ in 0..samples {
        let z = mu + &l * standard_normal_vector(rng, d);
        let (_, g, h) = spec.loglik_sum(&z, data, rows);
        g_mean += g;
        h_mean += h;
    }
    let s = 1.0 / samples as f64;
    g_mean *= s;
    h_mean = symmetrize(&(h_mean * s));
    Ok(GradientPair {
        g_xi: &g_mean - &h_mean * mu,
        g_ximat: h_mean * 0.5,
    })
}

/// Bonnet/Price gradient with an explicit RNG over all rows.
pub fn price_grad_with<R: Rng + ?Sized>(
    spec: &ModelSpec,
    omega: &ExpectationParam,
    data: &Dataset,
    samples: usize,
    rng: &mut R,
) -> Result<GradientEstimate> {
    spec.check(data)?;
    let loglik = price_loglik_grad(spec, omega, data, Rows::All, samples, rng)?;
    GradientEstimate::assemble(loglik, &omega.to_natural()?, &spec.prior)
}

pub fn price_grad(
    spec: &ModelSpec,
    omega: &ExpectationParam,
    data: &Dataset,
    mc: crate::models::McSpec,
) -> Result<GradientEstimate> {
    price_grad_with(spec, omega, data, mc.samples, &mut mc.rng())
}

/// Pullback of a lower-triangular cotangent `L̄` through `Σ ↦ chol(Σ) = L`.
///
/// Returns the symmetric `Σ̄ = L⁻ᵀ sym(Φ(LᵀL̄)) L⁻¹`, where `Φ` keeps the lower triangle and
/// halves the diagonal; `tr(Σ̄ dΣ) = tr(L̄ᵀ dL)` for symmetric `dΣ`.
pub fn cholesky_pullback(l: &Matrix, l_bar: &Matrix) -> Matrix {
    let mut phi = tril(&(l.transpose() * tril(l_bar)));
    for i in 0..phi.nrows() {
        phi[(i, i)] *= 0.5;
    }
    let s = (&phi + phi.transpose()) * 0.5;
    let x = l.tr_solve_lower_triangular(&s).expect("Cholesky factor has a non-zero diagonal");
    let y = l
        .tr_solve_lower_triangular(&x.transpose())
        .expect("Cholesky factor has a non-zero diagonal");
    symmetrize(&y.transpose())
}

/// Reparameterization estimator driven by a gradient oracle `∇_z log p`.
fn reparam_from<R: Rng + ?Sized>(
    omega: &ExpectationParam,
    samples: usize,
    rng: &mut R,
    mut grad_z: impl FnMut(&Vector) -> Vector,
) -> Result<GradientPair> {
    if samples == 0 {
        return Err(Error::Invalid("Monte Carlo sample count must be >= 1".into()));
    }
    let d = omega.dim();
    let l = omega.covariance_chol()?.l();
    let mu = omega.xi();
    let mut g_mean = Vector::zeros(d);
    let mut l_bar = Matrix::zeros(d, d);
    for _ in 0..samples {
        let u = standard_normal_vector(rng, d);
        let z = mu + &l * &u;
        let g = grad_z(&z);
        l_bar.ger(1.0, &g, &u, 1.0);
        g_mean += g;
    }
    let s = 1.0 / samples as f64;
    g_mean *= s;
    let sigma_bar = cholesky_pullback(&l, &(l_bar * s));
    // μ = ξ and Σ = Ξ - ξξᵀ: ∂/∂ξ = μ̄ - 2Σ̄ξ, ∂/∂Ξ = Σ̄.
    Ok(GradientPair {
        g_xi: &g_mean - &sigma_bar * mu * 2.0,
        g_ximat: sigma_bar,
    })
}

/// Reparameterization estimator of the log-likelihood gradient over `rows`.
pub fn reparam_loglik_grad<R: Rng + ?Sized>(
    spec: &ModelSpec,
    omega: &ExpectationParam,
    data: &Dataset,
    rows: Rows<'_>,
    samples: usize,
    rng: &mut R,
) -> Result<GradientPair> {
    reparam_from(omega, samples, rng, |z| spec.loglik_sum(z, data, rows).1)
}

/// Reparameterization (automatic-differentiation style) estimator for any model.
pub fn reparam_grad_with<R: Rng + ?Sized>(
    spec: &ModelSpec,
    omega: &ExpectationParam,
    data: &Dataset,
    samples: usize,
    rng: &mut R,
) -> Result<GradientEstimate> {
    spec.check(data)?;
    let loglik = reparam_loglik_grad(spec, omega, data, Rows::All, samples, rng)?;
    GradientEstimate::assemble(loglik, &omega.to_natural()?, &spec.prior)
}

/// Single-sample reparameterization gradient of `E_q log N(y; z, I)` in `ω`.
///
/// Unbiased and symmetric, but its matrix component is not guaranteed to be negative
/// definite.
pub fn reparam_chol_grad(omega: &ExpectationParam, y: &Vector, seed: u64) -> Result<GradientPair> {
    if y.len() != omega.dim() {
        return Err(Error::Dimension {
            what: "observation",
            expected: omega.dim(),
            found: y.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    reparam_from(omega, 1, &mut rng, |z| y - z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::MeanCov;
    use crate::models::{exact_posterior, TargetKind};
    use approx::assert_relative_eq;

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
    fn exact_gradient_at_prior_and_optimum() {
        let (spec, data) = toy();
        let g = exact_conjugate_grad(&spec, &spec.prior.expectation(), &data).unwrap();
        assert_relative_eq!(g.g_xi[0], -4.0, epsilon = 1e-14);
        assert_relative_eq!(g.g_ximat[(0, 0)], 1.0, epsilon = 1e-14);
        let post = exact_posterior(&spec, &data).unwrap().to_expectation();
        let g = exact_conjugate_grad(&spec, &post, &data).unwrap();
        assert!(g.max_abs() < 1e-10);
    }

    #[test]
    fn single_point_subsampling_is_exact() {
        let data = Dataset::new(
            Matrix::from_row_slice(1, 2, &[0.3, -1.2]),
            Vector::from_element(1, 0.8),
            TargetKind::Real,
        )
        .unwrap();
        let spec = ModelSpec::linear_regression(0.5, PriorSpec::standard(2)).unwrap();
        let omega = MeanCov::new(Vector::from_vec(vec![0.1, 0.2]), Matrix::identity(2, 2) * 0.3)
            .unwrap()
            .to_expectation();
        let exact = exact_conjugate_grad(&spec, &omega, &data).unwrap();
        for seed in 0..5 {
            let g = subsample_grad(&spec, &omega, &data, &BatchSpec { batch_size: 3, seed }).unwrap();
            assert!(g.total.sub(&exact).max_abs() < 1e-12);
        }
    }

    #[test]
    fn subsample_loglik_part_is_negative_semidefinite() {
        let (spec, data) = toy();
        let g = subsample_grad(&spec, &spec.prior.expectation(), &data, &BatchSpec { batch_size: 1, seed: 3 })
            .unwrap();
        assert!(g.loglik.g_ximat[(0, 0)] < 0.0);
        assert!(g.loglik_negative_definite());
    }

    #[test]
    fn price_is_exact_for_gaussian_likelihood() {
        // N(y; z, I) as linear regression with identity design.
        let d = 3;
        let data = Dataset::new(Matrix::identity(d, d), Vector::from_vec(vec![0.5, -1.0, 2.0]), TargetKind::Real)
            .unwrap();
        let spec = ModelSpec::linear_regression(1.0, PriorSpec::standard(d)).unwrap();
        let omega = MeanCov::new(Vector::from_vec(vec![0.2, 0.1, -0.3]), Matrix::identity(d, d) * 0.7)
            .unwrap()
            .to_expectation();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = price_grad_with(&spec, &omega, &data, 1, &mut rng).unwrap();
            assert!((&g.loglik.g_ximat + Matrix::identity(d, d) * 0.5).amax() < 1e-15);
        }
    }

    #[test]
    fn one_dimensional_reparam_is_minus_half_u_squared() {
        let omega = ExpectationParam::new(Vector::zeros(1), Matrix::from_element(1, 1, 1.0)).unwrap();
        for seed in 0..20 {
            let g = reparam_chol_grad(&omega, &Vector::zeros(1), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = standard_normal_vector(&mut rng, 1)[0];
            assert_relative_eq!(g.g_ximat[(0, 0)], -0.5 * u * u, epsilon = 1e-14);
            assert!(g.g_ximat[(0, 0)] <= 0.0);
        }
    }

    #[test]
    fn cholesky_pullback_matches_finite_differences() {
        let sigma = Matrix::from_row_slice(3, 3, &[2.0, 0.3, -0.4, 0.3, 1.5, 0.2, -0.4, 0.2, 1.0]);
        let w = Matrix::from_row_slice(3, 3, &[0.7, 0.0, 0.0, -1.1, 0.4, 0.0, 0.25, 0.9, -0.6]);
        // f(Σ) = tr(Wᵀ chol(Σ)), so L̄ = W.
        let f = |s: &Matrix| crate::linalg::frob_inner(&w, &s.clone().cholesky().unwrap().l());
        let l = sigma.clone().cholesky().unwrap().l();
        let grad = cholesky_pullback(&l, &w);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..=i {
                let mut e = Matrix::zeros(3, 3);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                let fd = (f(&(&sigma + &e * h)) - f(&(&sigma - &e * h))) / (2.0 * h);
                let analytic = if i == j { grad[(i, i)] } else { 2.0 * grad[(i, j)] };
                assert_relative_eq!(fd, analytic, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn symmetric_outputs() {
        let data = Dataset::new(
            Matrix::from_row_slice(3, 2, &[0.4, -0.3, 0.9, 0.1, -0.5, 0.7]),
            Vector::from_vec(vec![1.0, -1.0, 1.0]),
            TargetKind::Binary,
        )
        .unwrap();
        let spec = ModelSpec::logistic(PriorSpec::standard(3));
        let omega = MeanCov::new(
            Vector::from_vec(vec![0.1, -0.2, 0.3]),
            Matrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 0.8, 0.1, 0.0, 0.1, 0.6]),
        )
        .unwrap()
        .to_expectation();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = price_grad_with(&spec, &omega, &data, 5, &mut rng).unwrap();
        let r = reparam_grad_with(&spec, &omega, &data, 5, &mut rng).unwrap();
        for g in [&p.total, &p.loglik, &r.total, &r.loglik] {
            assert!(crate::linalg::asymmetry(&g.g_ximat) <= 1e-12);
        }
        assert!(p.loglik_negative_definite());
    }
}
