//! Gaussian exponential-family parameter algebra.
//!
//! A `d`-dimensional Gaussian has three coordinate systems used throughout the crate:
//!
//! * mean/covariance `(μ, Σ)`;
//! * natural parameters `η = (λ, Λ)` with `λ = Σ⁻¹μ`, `Λ = -½Σ⁻¹` (domain: `Λ ≺ 0`);
//! * expectation parameters `ω = (ξ, Ξ)` with `ξ = μ`, `Ξ = Σ + μμᵀ` (domain: `Ξ - ξξᵀ ≻ 0`).
//!
//! The log-partition function `A(η)` and its convex conjugate `A*(ω)` are mirror maps of
//! each other: `∇A(η) = ω` and `∇A*(ω) = η`.  The Bregman divergence of `A*` is the KL
//! divergence between members of the family.
//!
//! Matrix-valued components are paired with the trace inner product `tr(AᵀB)`, so the
//! gradient with respect to a symmetric component is the symmetric matrix `G` with
//! `df = tr(G dΞ)`.

use nalgebra::{Cholesky, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Constraint, Error, Result};
use crate::linalg::{
    check_symmetric, cholesky_or, expect_len, expect_square, frob_inner, log_det_chol, symmetrize,
    Matrix, Vector,
};

/// Mean/covariance form of a Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanCov {
    mu: Vector,
    sigma: Matrix,
}

/// Natural parameter `η = (λ, Λ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalParam {
    lambda_vec: Vector,
    lambda_mat: Matrix,
}

/// Expectation parameter `ω = (ξ, Ξ) = (E[z], E[zzᵀ])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationParam {
    xi: Vector,
    xi_mat: Matrix,
}

/// A gradient with respect to an expectation parameter (or an element of the natural
/// space: both share the same vector/matrix shape).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientPair {
    pub g_xi: Vector,
    pub g_ximat: Matrix,
}

/// Tag naming a parameterization, used by [`convert`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameterization {
    MeanCov,
    Natural,
    Expectation,
}

/// Any of the three parameterizations.
#[derive(Debug, Clone, PartialEq)]
pub enum Param {
    MeanCov(MeanCov),
    Natural(NaturalParam),
    Expectation(ExpectationParam),
}

fn check_pair(what: &'static str, v: &Vector, m: &Matrix) -> Result<()> {
    expect_square(what, m, v.len())?;
    check_symmetric(m)
}

impl MeanCov {
    pub fn new(mu: Vector, sigma: Matrix) -> Result<Self> {
        check_pair("covariance", &mu, &sigma)?;
        cholesky_or(&sigma, Constraint::CovariancePositiveDefinite)?;
        Ok(Self { mu, sigma })
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mu: Vector::zeros(d),
            sigma: Matrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &Vector {
        &self.mu
    }

    pub fn sigma(&self) -> &Matrix {
        &self.sigma
    }

    /// Lower Cholesky factor of `Σ`.
    pub fn chol_factor(&self) -> Result<Matrix> {
        Ok(cholesky_or(&self.sigma, Constraint::CovariancePositiveDefinite)?.l())
    }

    pub fn to_natural(&self) -> Result<NaturalParam> {
        let chol = cholesky_or(&self.sigma, Constraint::CovariancePositiveDefinite)?;
        let precision = symmetrize(&chol.inverse());
        let lambda_vec = chol.solve(&self.mu);
        Ok(NaturalParam {
            lambda_vec,
            lambda_mat: precision * -0.5,
        })
    }

    pub fn to_expectation(&self) -> ExpectationParam {
        let outer = &self.mu * self.mu.transpose();
        ExpectationParam {
            xi: self.mu.clone(),
            xi_mat: symmetrize(&(&self.sigma + outer)),
        }
    }
}

impl NaturalParam {
    pub fn new(lambda_vec: Vector, lambda_mat: Matrix) -> Result<Self> {
        check_pair("natural matrix parameter", &lambda_vec, &lambda_mat)?;
        let out = Self {
            lambda_vec,
            lambda_mat,
        };
        out.neg_two_lambda_chol()?;
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.lambda_vec.len()
    }

    pub fn lambda_vec(&self) -> &Vector {
        &self.lambda_vec
    }

    pub fn lambda_mat(&self) -> &Matrix {
        &self.lambda_mat
    }

    /// Cholesky factor of `-2Λ = Σ⁻¹`, or the domain error for `Λ ⊀ 0`.
    pub fn neg_two_lambda_chol(&self) -> Result<Cholesky<f64, Dyn>> {
        cholesky_or(&(&self.lambda_mat * -2.0), Constraint::NaturalNegativeDefinite)
    }

    pub fn to_mean_cov(&self) -> Result<MeanCov> {
        let chol = self.neg_two_lambda_chol()?;
        let sigma = symmetrize(&chol.inverse());
        let mu = chol.solve(&self.lambda_vec);
        Ok(MeanCov { mu, sigma })
    }

    /// `∇A(η)`.
    pub fn to_expectation(&self) -> Result<ExpectationParam> {
        Ok(self.to_mean_cov()?.to_expectation())
    }

    /// Returns `self - gamma * g` re-symmetrized, without checking the domain.
    pub fn step_unchecked(&self, g: &GradientPair, gamma: f64) -> Self {
        Self {
            lambda_vec: &self.lambda_vec - &g.g_xi * gamma,
            lambda_mat: symmetrize(&(&self.lambda_mat - &g.g_ximat * gamma)),
        }
    }

    /// `η - η'` as a gradient pair.
    pub fn difference(&self, other: &NaturalParam) -> GradientPair {
        GradientPair {
            g_xi: &self.lambda_vec - &other.lambda_vec,
            g_ximat: symmetrize(&(&self.lambda_mat - &other.lambda_mat)),
        }
    }

    pub fn as_pair(&self) -> GradientPair {
        GradientPair {
            g_xi: self.lambda_vec.clone(),
            g_ximat: self.lambda_mat.clone(),
        }
    }
}

impl ExpectationParam {
    pub fn new(xi: Vector, xi_mat: Matrix) -> Result<Self> {
        check_pair("expectation matrix parameter", &xi, &xi_mat)?;
        let out = Self { xi, xi_mat };
        out.covariance_chol()?;
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.xi.len()
    }

    pub fn xi(&self) -> &Vector {
        &self.xi
    }

    pub fn xi_mat(&self) -> &Matrix {
        &self.xi_mat
    }

    /// `Ξ - ξξᵀ`, i.e. the covariance; not checked for definiteness.
    pub fn covariance(&self) -> Matrix {
        symmetrize(&(&self.xi_mat - &self.xi * self.xi.transpose()))
    }

    pub fn covariance_chol(&self) -> Result<Cholesky<f64, Dyn>> {
        cholesky_or(&self.covariance(), Constraint::ExpectationPositiveDefinite)
    }

    pub fn to_mean_cov(&self) -> Result<MeanCov> {
        let sigma = self.covariance();
        cholesky_or(&sigma, Constraint::ExpectationPositiveDefinite)?;
        Ok(MeanCov {
            mu: self.xi.clone(),
            sigma,
        })
    }

    /// `∇A*(ω)`.
    pub fn to_natural(&self) -> Result<NaturalParam> {
        self.to_mean_cov()?.to_natural()
    }

    /// Convex combination `(1 - w) self + w other`; stays in the domain when both do.
    pub fn lerp(&self, other: &ExpectationParam, w: f64) -> Self {
        Self {
            xi: &self.xi * (1.0 - w) + &other.xi * w,
            xi_mat: symmetrize(&(&self.xi_mat * (1.0 - w) + &other.xi_mat * w)),
        }
    }

    pub fn difference(&self, other: &ExpectationParam) -> GradientPair {
        GradientPair {
            g_xi: &self.xi - &other.xi,
            g_ximat: &self.xi_mat - &other.xi_mat,
        }
    }

    pub fn as_pair(&self) -> GradientPair {
        GradientPair {
            g_xi: self.xi.clone(),
            g_ximat: self.xi_mat.clone(),
        }
    }
}

impl GradientPair {
    pub fn new(g_xi: Vector, g_ximat: Matrix) -> Result<Self> {
        check_pair("gradient matrix component", &g_xi, &g_ximat)?;
        Ok(Self { g_xi, g_ximat })
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            g_xi: Vector::zeros(d),
            g_ximat: Matrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.g_xi.len()
    }

    /// `⟨a, b⟩ = aᵥᵀbᵥ + tr(Aᵀ B)`.
    pub fn inner(&self, other: &GradientPair) -> f64 {
        self.g_xi.dot(&other.g_xi) + frob_inner(&self.g_ximat, &other.g_ximat)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            g_xi: &self.g_xi * s,
            g_ximat: &self.g_ximat * s,
        }
    }

    pub fn add(&self, other: &GradientPair) -> Self {
        Self {
            g_xi: &self.g_xi + &other.g_xi,
            g_ximat: symmetrize(&(&self.g_ximat + &other.g_ximat)),
        }
    }

    pub fn sub(&self, other: &GradientPair) -> Self {
        Self {
            g_xi: &self.g_xi - &other.g_xi,
            g_ximat: symmetrize(&(&self.g_ximat - &other.g_ximat)),
        }
    }

    /// Largest absolute entry over both components.
    pub fn max_abs(&self) -> f64 {
        self.g_xi.amax().max(self.g_ximat.amax())
    }

    /// Euclidean norm of the vector part plus Frobenius of the matrix part, combined.
    pub fn norm(&self) -> f64 {
        (self.g_xi.norm_squared() + self.g_ximat.norm_squared()).sqrt()
    }
}

impl Param {
    pub fn tag(&self) -> Parameterization {
        match self {
            Param::MeanCov(_) => Parameterization::MeanCov,
            Param::Natural(_) => Parameterization::Natural,
            Param::Expectation(_) => Parameterization::Expectation,
        }
    }

    fn mean_cov(&self) -> Result<MeanCov> {
        match self {
            Param::MeanCov(mc) => Ok(mc.clone()),
            Param::Natural(eta) => eta.to_mean_cov(),
            Param::Expectation(omega) => omega.to_mean_cov(),
        }
    }
}

/// Converts a Gaussian between parameterizations.
pub fn convert(param: &Param, target: Parameterization) -> Result<Param> {
    if param.tag() == target {
        return Ok(param.clone());
    }
    let mc = param.mean_cov()?;
    Ok(match target {
        Parameterization::MeanCov => Param::MeanCov(mc),
        Parameterization::Natural => Param::Natural(mc.to_natural()?),
        Parameterization::Expectation => Param::Expectation(mc.to_expectation()),
    })
}

/// `A(λ, Λ) = -¼ λᵀΛ⁻¹λ - ½ log det(-2Λ)`.
pub fn log_partition(eta: &NaturalParam) -> Result<f64> {
    let chol = eta.neg_two_lambda_chol()?;
    // Λ⁻¹ = -2 (-2Λ)⁻¹, so -¼ λᵀΛ⁻¹λ = ½ λᵀ(-2Λ)⁻¹λ.
    let quad = eta.lambda_vec.dot(&chol.solve(&eta.lambda_vec));
    Ok(0.5 * quad - 0.5 * log_det_chol(&chol))
}

/// `A*(ξ, Ξ) = -½ log det(Ξ - ξξᵀ)`.
pub fn conjugate_potential(omega: &ExpectationParam) -> Result<f64> {
    let chol = omega.covariance_chol()?;
    Ok(-0.5 * log_det_chol(&chol))
}

/// `D_{A*}(q, p) = A*(q) - A*(p) - ⟨∇A*(p), q - p⟩ = KL(q ‖ p)`.
pub fn bregman_kl(q: &ExpectationParam, p: &ExpectationParam) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Dimension {
            what: "bregman_kl operands",
            expected: q.dim(),
            found: p.dim(),
        });
    }
    let eta_p = p.to_natural()?;
    let value = conjugate_potential(q)? - conjugate_potential(p)?
        - eta_p.as_pair().inner(&q.difference(p));
    Ok(value)
}

/// Gaussian prior, stored in natural form with its mean/covariance alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    natural: NaturalParam,
    mean_cov: MeanCov,
}

impl PriorSpec {
    pub fn new(mean_cov: MeanCov) -> Result<Self> {
        let natural = mean_cov.to_natural()?;
        Ok(Self { natural, mean_cov })
    }

    pub fn from_natural(natural: NaturalParam) -> Result<Self> {
        let mean_cov = natural.to_mean_cov()?;
        Ok(Self { natural, mean_cov })
    }

    /// `N(0, I_d)`.
    pub fn standard(d: usize) -> Self {
        Self::new(MeanCov::standard(d)).expect("identity covariance is valid")
    }

    /// `N(0, P)`; fails when `P` is singular or indefinite.
    pub fn zero_mean(cov: Matrix) -> Result<Self> {
        let d = cov.nrows();
        Self::new(MeanCov::new(Vector::zeros(d), cov)?)
    }

    pub fn dim(&self) -> usize {
        self.natural.dim()
    }

    pub fn natural(&self) -> &NaturalParam {
        &self.natural
    }

    pub fn mean_cov(&self) -> &MeanCov {
        &self.mean_cov
    }

    pub fn expectation(&self) -> ExpectationParam {
        self.mean_cov.to_expectation()
    }
}

/// `∇_ω KL(q ‖ p) = η - η_p`.
pub fn kl_gradient(q: &ExpectationParam, prior: &PriorSpec) -> Result<GradientPair> {
    expect_len("kl_gradient prior", prior.natural.lambda_vec(), q.dim())?;
    Ok(q.to_natural()?.difference(&prior.natural))
}

/// Same as [`kl_gradient`] when the natural parameter of `q` is already known.
pub fn kl_gradient_natural(eta: &NaturalParam, prior: &PriorSpec) -> Result<GradientPair> {
    expect_len("kl_gradient prior", prior.natural.lambda_vec(), eta.dim())?;
    Ok(eta.difference(&prior.natural))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_mc(mu: f64, sigma: f64) -> MeanCov {
        MeanCov::new(Vector::from_element(1, mu), Matrix::from_element(1, 1, sigma)).unwrap()
    }

    fn scalar_omega(xi: f64, xi_mat: f64) -> ExpectationParam {
        ExpectationParam::new(Vector::from_element(1, xi), Matrix::from_element(1, 1, xi_mat))
            .unwrap()
    }

    #[test]
    fn standard_normal_identities() {
        let mc = scalar_mc(0.0, 1.0);
        let eta = mc.to_natural().unwrap();
        assert_eq!(eta.lambda_vec()[0], 0.0);
        assert_eq!(eta.lambda_mat()[(0, 0)], -0.5);
        let omega = mc.to_expectation();
        assert_eq!(omega.xi()[0], 0.0);
        assert_eq!(omega.xi_mat()[(0, 0)], 1.0);
    }

    #[test]
    fn hand_evaluated_conversions() {
        let mc = scalar_mc(1.0, 2.0);
        let eta = mc.to_natural().unwrap();
        assert_relative_eq!(eta.lambda_vec()[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(eta.lambda_mat()[(0, 0)], -0.25, epsilon = 1e-15);
        let omega = mc.to_expectation();
        assert_relative_eq!(omega.xi_mat()[(0, 0)], 3.0, epsilon = 1e-15);

        let eta = NaturalParam::new(Vector::from_element(1, 4.0), Matrix::from_element(1, 1, -1.5))
            .unwrap();
        let back = eta.to_mean_cov().unwrap();
        assert_relative_eq!(back.mu()[0], 4.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(back.sigma()[(0, 0)], 1.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn convert_dispatches_and_round_trips() {
        let mc = scalar_mc(1.0, 2.0);
        let nat = convert(&Param::MeanCov(mc.clone()), Parameterization::Natural).unwrap();
        let exp = convert(&nat, Parameterization::Expectation).unwrap();
        match convert(&exp, Parameterization::MeanCov).unwrap() {
            Param::MeanCov(back) => {
                assert_relative_eq!(back.mu()[0], 1.0, epsilon = 1e-12);
                assert_relative_eq!(back.sigma()[(0, 0)], 2.0, epsilon = 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn domain_errors_name_the_constraint() {
        let bad = NaturalParam::new(Vector::zeros(1), Matrix::from_element(1, 1, 0.5));
        match bad {
            Err(Error::Domain {
                constraint,
                min_eigenvalue,
            }) => {
                assert_eq!(constraint, Constraint::NaturalNegativeDefinite);
                assert_relative_eq!(min_eigenvalue, -1.0, epsilon = 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad = ExpectationParam::new(Vector::from_element(1, 2.0), Matrix::from_element(1, 1, 3.0));
        assert!(matches!(
            bad,
            Err(Error::Domain {
                constraint: Constraint::ExpectationPositiveDefinite,
                ..
            })
        ));
        let asym = MeanCov::new(
            Vector::zeros(2),
            Matrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
        );
        assert!(matches!(asym, Err(Error::Asymmetric { .. })));
    }

    #[test]
    fn log_partition_values() {
        let eta = NaturalParam::new(Vector::zeros(1), Matrix::from_element(1, 1, -0.5)).unwrap();
        assert_eq!(log_partition(&eta).unwrap(), 0.0);
        let eta = NaturalParam::new(Vector::from_element(1, 0.5), Matrix::from_element(1, 1, -0.25))
            .unwrap();
        assert_relative_eq!(
            log_partition(&eta).unwrap(),
            0.25 + 0.5 * 2f64.ln(),
            epsilon = 1e-14
        );
        let eta = NaturalParam::new(Vector::zeros(2), Matrix::identity(2, 2) * -0.5).unwrap();
        assert_eq!(log_partition(&eta).unwrap(), 0.0);
    }

    #[test]
    fn conjugate_potential_values() {
        assert_eq!(conjugate_potential(&scalar_omega(0.0, 1.0)).unwrap(), 0.0);
        assert_relative_eq!(
            conjugate_potential(&scalar_omega(1.0, 3.0)).unwrap(),
            -0.5 * 2f64.ln(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn bregman_scalar_cases() {
        let q = scalar_omega(0.0, 1.0);
        assert_eq!(bregman_kl(&q, &q).unwrap(), 0.0);
        let p = scalar_omega(0.0, std::f64::consts::E);
        // ½(1/e + 0 - 1 + 1 - 0) = 1/(2e)
        assert_relative_eq!(
            bregman_kl(&q, &p).unwrap(),
            0.5 / std::f64::consts::E,
            epsilon = 1e-14
        );
        let q = scalar_omega(1.0, 2.0);
        let p = scalar_omega(0.0, 1.0);
        assert_relative_eq!(bregman_kl(&q, &p).unwrap(), 0.5, epsilon = 1e-14);
        let p3 = ExpectationParam::new(Vector::zeros(2), Matrix::identity(2, 2)).unwrap();
        assert!(matches!(bregman_kl(&q, &p3), Err(Error::Dimension { .. })));
    }

    #[test]
    fn kl_gradient_against_prior() {
        let prior = PriorSpec::new(scalar_mc(0.0, 2.0)).unwrap();
        let q = scalar_omega(0.0, 1.0);
        let g = kl_gradient(&q, &prior).unwrap();
        assert_eq!(g.g_xi[0], 0.0);
        assert_relative_eq!(g.g_ximat[(0, 0)], -0.25, epsilon = 1e-15);
        let same = kl_gradient(&prior.expectation(), &prior).unwrap();
        assert_eq!(same.max_abs(), 0.0);
    }

    #[test]
    fn non_strong_convexity_of_conjugate() {
        // ξ = 0: A*(Ξ) = -½ log Ξ, so d²A*/dΞ² = 1/(2Ξ²).
        let second = |x: f64| {
            let h = 1e-3 * x;
            let f = |v: f64| conjugate_potential(&scalar_omega(0.0, v)).unwrap();
            (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
        };
        let mut prev = f64::INFINITY;
        for &x in &[0.1, 1.0, 10.0, 100.0, 1000.0] {
            let c = second(x);
            assert_relative_eq!(c, 0.5 / (x * x), max_relative = 1e-4);
            assert!(c < prev);
            prev = c;
        }
        assert!(second(1e3) < 1e-6);
    }
}
