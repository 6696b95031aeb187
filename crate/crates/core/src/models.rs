//! Bayesian linear, logistic, and Poisson regression with Gaussian priors.
//!
//! Every likelihood here depends on the latent vector only through a scalar projection
//! `a = xᵀz` (logistic regression appends a bias coordinate with feature value 1), so
//! per-row derivatives are `f'(a)·x` and `f''(a)·xxᵀ`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{bregman_kl, ExpectationParam, GradientPair, MeanCov, PriorSpec};
use crate::linalg::{standard_normal_vector, symmetrize, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Real,
    /// Labels in `{-1, +1}`.
    Binary,
    /// Non-negative integer counts.
    Count,
}

/// Design matrix and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Matrix,
    y: Vector,
    kind: TargetKind,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vector, kind: TargetKind) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::Invalid(format!(
                "dataset needs n >= 1 and d >= 1, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        if y.len() != x.nrows() {
            return Err(Error::Dimension {
                what: "targets",
                expected: x.nrows(),
                found: y.len(),
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset"));
        }
        for (i, &t) in y.iter().enumerate() {
            let ok = match kind {
                TargetKind::Real => true,
                TargetKind::Binary => t == 1.0 || t == -1.0,
                TargetKind::Count => t >= 0.0 && t.fract() == 0.0,
            };
            if !ok {
                return Err(Error::Invalid(format!(
                    "target {t} at row {i} is not a valid {kind:?} target"
                )));
            }
        }
        Ok(Self { x, y, kind })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &Vector {
        &self.y
    }

    pub fn kind(&self) -> TargetKind {
        self.kind
    }

    /// Same targets with every feature multiplied by `c`.
    pub fn scaled_features(&self, c: f64) -> Self {
        Self {
            x: &self.x * c,
            y: self.y.clone(),
            kind: self.kind,
        }
    }

    /// Rows selected by index (with repetition allowed).
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let d = self.d();
        let mut x = Matrix::zeros(rows.len(), d);
        let mut y = Vector::zeros(rows.len());
        for (k, &i) in rows.iter().enumerate() {
            x.row_mut(k).copy_from(&self.x.row(i));
            y[k] = self.y[i];
        }
        Self::new(x, y, self.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    LinearRegression { noise_var: f64 },
    Logistic,
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub prior: PriorSpec,
}

/// Monte Carlo sample count and seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McSpec {
    pub samples: usize,
    pub seed: u64,
}

impl McSpec {
    pub const TRAINING_SAMPLES: usize = 10;
    pub const METRIC_SAMPLES: usize = 1000;

    pub fn new(samples: usize, seed: u64) -> Self {
        Self { samples, seed }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Which rows enter a likelihood sum, and the factor applied to it.
#[derive(Debug, Clone, Copy)]
pub enum Rows<'a> {
    All,
    /// Sampled indices; the sum is rescaled by `n / len`.
    Batch(&'a [usize]),
}

impl Rows<'_> {
    pub(crate) fn scale(&self, n: usize) -> f64 {
        match self {
            Rows::All => 1.0,
            Rows::Batch(idx) => n as f64 / idx.len() as f64,
        }
    }

    pub(crate) fn for_each(&self, n: usize, mut f: impl FnMut(usize)) {
        match self {
            Rows::All => (0..n).for_each(&mut f),
            Rows::Batch(idx) => idx.iter().copied().for_each(&mut f),
        }
    }
}

/// `log(1 + exp(t))` without overflow.
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln k!` for a non-negative integer-valued `k`.
pub fn ln_factorial(k: f64) -> f64 {
    if k < 2.0 {
        return 0.0;
    }
    if k <= 30.0 {
        return (2..=k as u64).map(|j| (j as f64).ln()).sum();
    }
    // Stirling series for ln Γ(k + 1).
    let n = k;
    n * n.ln() - n + 0.5 * (2.0 * std::f64::consts::PI * n).ln() + 1.0 / (12.0 * n)
        - 1.0 / (360.0 * n.powi(3))
        + 1.0 / (1260.0 * n.powi(5))
}

impl ModelSpec {
    pub fn linear_regression(noise_var: f64, prior: PriorSpec) -> Result<Self> {
        if !(noise_var > 0.0) || !noise_var.is_finite() {
            return Err(Error::Invalid(format!("noise variance must be > 0, got {noise_var}")));
        }
        Ok(Self {
            kind: ModelKind::LinearRegression { noise_var },
            prior,
        })
    }

    pub fn logistic(prior: PriorSpec) -> Self {
        Self {
            kind: ModelKind::Logistic,
            prior,
        }
    }

    pub fn poisson(prior: PriorSpec) -> Self {
        Self {
            kind: ModelKind::Poisson,
            prior,
        }
    }

    pub fn noise_var(&self) -> Option<f64> {
        match self.kind {
            ModelKind::LinearRegression { noise_var } => Some(noise_var),
            _ => None,
        }
    }

    /// Latent dimension for a dataset with `d` features.
    pub fn latent_dim(&self, d: usize) -> usize {
        match self.kind {
            ModelKind::Logistic => d + 1,
            _ => d,
        }
    }

    /// Whether the expected log-likelihood is available in closed form.
    pub fn has_closed_form(&self) -> bool {
        !matches!(self.kind, ModelKind::Logistic)
    }

    /// Checks target kind and latent dimensions against `data`.
    pub fn check(&self, data: &Dataset) -> Result<()> {
        let expected = match self.kind {
            ModelKind::LinearRegression { .. } => TargetKind::Real,
            ModelKind::Logistic => TargetKind::Binary,
            ModelKind::Poisson => TargetKind::Count,
        };
        // Binary and count targets are also valid reals; the reverse is not.
        let compatible = expected == data.kind() || expected == TargetKind::Real;
        if !compatible {
            return Err(Error::Invalid(format!(
                "model {:?} cannot use {:?} targets",
                self.kind,
                data.kind()
            )));
        }
        let lat = self.latent_dim(data.d());
        if self.prior.dim() != lat {
            return Err(Error::Dimension {
                what: "prior dimension",
                expected: lat,
                found: self.prior.dim(),
            });
        }
        Ok(())
    }

    /// Latent-space feature row (bias coordinate appended for logistic regression).
    pub fn design_row(&self, data: &Dataset, i: usize) -> Vector {
        let row = data.x().row(i).transpose();
        match self.kind {
            ModelKind::Logistic => {
                let d = data.d();
                Vector::from_fn(d + 1, |k, _| if k < d { row[k] } else { 1.0 })
            }
            _ => row,
        }
    }

    /// `a = xᵢᵀz` in the latent space.
    pub fn project(&self, data: &Dataset, i: usize, z: &Vector) -> f64 {
        let d = data.d();
        let mut a = 0.0;
        for k in 0..d {
            a += data.x()[(i, k)] * z[k];
        }
        if matches!(self.kind, ModelKind::Logistic) {
            a += z[d];
        }
        a
    }

    /// `xᵢᵀ v` and `xᵢᵀ M xᵢ` for the latent-space row.
    fn project_moments(&self, data: &Dataset, i: usize, v: &Vector, m: &Matrix) -> (f64, f64) {
        let row = self.design_row(data, i);
        (row.dot(v), (m * &row).dot(&row))
    }

    /// `log p(y | a)` and its first two derivatives in the scalar projection `a`.
    pub fn scalar_loglik(&self, y: f64, a: f64) -> (f64, f64, f64) {
        match self.kind {
            ModelKind::LinearRegression { noise_var } => {
                let r = y - a;
                (
                    -0.5 * (2.0 * std::f64::consts::PI * noise_var).ln() - 0.5 * r * r / noise_var,
                    r / noise_var,
                    -1.0 / noise_var,
                )
            }
            ModelKind::Logistic => {
                let s = sigmoid(y * a);
                let p = sigmoid(a);
                (-softplus(-y * a), y * (1.0 - s), -p * (1.0 - p))
            }
            ModelKind::Poisson => {
                let e = a.exp();
                (y * a - e - ln_factorial(y), y - e, -e)
            }
        }
    }

    /// Sum of `log p(yᵢ | xᵢ, z)` with its gradient and Hessian in `z` over `rows`.
    pub fn loglik_sum(&self, z: &Vector, data: &Dataset, rows: Rows<'_>) -> (f64, Vector, Matrix) {
        let lat = z.len();
        let mut value = 0.0;
        let mut grad = Vector::zeros(lat);
        let mut hess = Matrix::zeros(lat, lat);
        let scale = rows.scale(data.n());
        let d = data.d();
        let mut row = Vector::zeros(lat);
        if lat > d {
            row[d] = 1.0;
        }
        rows.for_each(data.n(), |i| {
            for k in 0..d {
                row[k] = data.x()[(i, k)];
            }
            let (f, f1, f2) = self.scalar_loglik(data.y()[i], row.dot(z));
            value += f;
            grad.axpy(f1, &row, 1.0);
            hess.ger(f2, &row, &row, 1.0);
        });
        (value * scale, grad * scale, symmetrize(&(hess * scale)))
    }
}

/// `log p(y | x, z)` with gradient and Hessian in `z` for one data row.
pub fn loglik_derivs(
    spec: &ModelSpec,
    z: &Vector,
    x: &Vector,
    y: f64,
) -> Result<(f64, Vector, Matrix)> {
    let lat = spec.latent_dim(x.len());
    if z.len() != lat {
        return Err(Error::Dimension {
            what: "latent vector",
            expected: lat,
            found: z.len(),
        });
    }
    let row = match spec.kind {
        ModelKind::Logistic => Vector::from_fn(lat, |k, _| if k < x.len() { x[k] } else { 1.0 }),
        _ => x.clone(),
    };
    let (f, f1, f2) = spec.scalar_loglik(y, row.dot(z));
    let hess = &row * row.transpose() * f2;
    Ok((f, &row * f1, hess))
}

fn check_omega(spec: &ModelSpec, omega: &ExpectationParam, data: &Dataset) -> Result<()> {
    spec.check(data)?;
    let lat = spec.latent_dim(data.d());
    if omega.dim() != lat {
        return Err(Error::Dimension {
            what: "variational dimension",
            expected: lat,
            found: omega.dim(),
        });
    }
    Ok(())
}

/// Expected log-likelihood `E_q Σ log p(yᵢ | xᵢ, z)`, exactly for linear and Poisson
/// regression and by Monte Carlo for logistic regression.
pub fn expected_loglik(
    spec: &ModelSpec,
    omega: &ExpectationParam,
    data: &Dataset,
    mc: Option<McSpec>,
) -> Result<f64> {
    check_omega(spec, omega, data)?;
    let sigma = omega.covariance();
    match spec.kind {
        ModelKind::LinearRegression { noise_var } => {
            let mut total = 0.0;
            for i in 0..data.n() {
                let y = data.y()[i];
                let (m, q) = spec.project_moments(data, i, omega.xi(), omega.xi_mat());
                total += -0.5 * (2.0 * std::f64::consts::PI * noise_var).ln()
                    - 0.5 * (y * y - 2.0 * y * m + q) / noise_var;
            }
            Ok(total)
        }
        ModelKind::Poisson => {
            let mut total = 0.0;
            for i in 0..data.n() {
                let y = data.y()[i];
                let (m, v) = spec.project_moments(data, i, omega.xi(), &sigma);
                total += y * m - (m + 0.5 * v).exp() - ln_factorial(y);
            }
            Ok(total)
        }
        ModelKind::Logistic => {
            let mc = mc.unwrap_or(McSpec::new(McSpec::METRIC_SAMPLES, 0));
            if mc.samples == 0 {
                return Err(Error::Invalid("Monte Carlo sample count must be >= 1".into()));
            }
            let l = omega.covariance_chol()?.l();
            let mut rng = mc.rng();
            let mut total = 0.0;
            for _ in 0..mc.samples {
                let u = standard_normal_vector(&mut rng, omega.dim());
                let z = omega.xi() + &l * u;
                for i in 0..data.n() {
                    total -= softplus(-data.y()[i] * spec.project(data, i, &z));
                }
            }
            Ok(total / mc.samples as f64)
        }
    }
}

/// Negative ELBO `ℓ(ω) = -E_q log p(y | z) + KL(q ‖ p)`.
pub fn elbo(
    spec: &ModelSpec,
    omega: &ExpectationParam,
    data: &Dataset,
    mc: Option<McSpec>,
) -> Result<f64> {
    let ell = expected_loglik(spec, omega, data, mc)?;
    let kl = bregman_kl(omega, &spec.prior.expectation())?;
    Ok(-ell + kl)
}

/// Conjugate posterior of Bayesian linear regression.
pub fn exact_posterior(spec: &ModelSpec, data: &Dataset) -> Result<MeanCov> {
    let noise_var = spec
        .noise_var()
        .ok_or_else(|| Error::Invalid("exact posterior requires linear regression".into()))?;
    spec.check(data)?;
    let x = data.x();
    let prior = spec.prior.natural();
    let lambda = prior.lambda_vec() + x.transpose() * data.y() / noise_var;
    let lambda_mat = symmetrize(&(prior.lambda_mat() - x.transpose() * x * (0.5 / noise_var)));
    crate::expfam::NaturalParam::new(lambda, lambda_mat)?.to_mean_cov()
}

/// Gradient of the expected log-likelihood in `ω` for the closed-form models, summed
/// over `rows` (rescaled to the full dataset for batches).
pub fn expected_loglik_grad(
    spec: &ModelSpec,
    omega: &ExpectationParam,
    data: &Dataset,
    rows: Rows<'_>,
) -> Result<GradientPair> {
    check_omega(spec, omega, data)?;
    let lat = omega.dim();
    let mut g_xi = Vector::zeros(lat);
    let mut g_mat = Matrix::zeros(lat, lat);
    match spec.kind {
        ModelKind::LinearRegression { noise_var } => {
            rows.for_each(data.n(), |i| {
                let row = spec.design_row(data, i);
                g_xi.axpy(data.y()[i] / noise_var, &row, 1.0);
                g_mat.ger(-0.5 / noise_var, &row, &row, 1.0);
            });
        }
        ModelKind::Poisson => {
            let sigma = omega.covariance();
            rows.for_each(data.n(), |i| {
                let row = spec.design_row(data, i);
                let m = row.dot(omega.xi());
                let v = (&sigma * &row).dot(&row);
                let e = (m + 0.5 * v).exp();
                g_xi.axpy(data.y()[i] - e * (1.0 - m), &row, 1.0);
                g_mat.ger(-0.5 * e, &row, &row, 1.0);
            });
        }
        ModelKind::Logistic => {
            return Err(Error::Invalid(
                "logistic regression has no closed-form expected log-likelihood".into(),
            ))
        }
    }
    let s = rows.scale(data.n());
    Ok(GradientPair {
        g_xi: g_xi * s,
        g_ximat: symmetrize(&(g_mat * s)),
    })
}

/// Mean negative log predictive density over the rows of `data`.
pub fn predictive_nlpd(
    spec: &ModelSpec,
    q: &MeanCov,
    data: &Dataset,
    mc: Option<McSpec>,
) -> Result<f64> {
    spec.check(data)?;
    let n = data.n() as f64;
    match spec.kind {
        ModelKind::LinearRegression { noise_var } => {
            let mut total = 0.0;
            for i in 0..data.n() {
                let (m, v) = spec.project_moments(data, i, q.mu(), q.sigma());
                let var = v + noise_var;
                let r = data.y()[i] - m;
                total += 0.5 * (2.0 * std::f64::consts::PI * var).ln() + 0.5 * r * r / var;
            }
            Ok(total / n)
        }
        ModelKind::Logistic | ModelKind::Poisson => {
            let mc = mc.unwrap_or(McSpec::new(McSpec::METRIC_SAMPLES, 0));
            if mc.samples == 0 {
                return Err(Error::Invalid("Monte Carlo sample count must be >= 1".into()));
            }
            let l = q.chol_factor()?;
            let mut rng = mc.rng();
            let samples: Vec<Vector> = (0..mc.samples)
                .map(|_| q.mu() + &l * standard_normal_vector(&mut rng, q.dim()))
                .collect();
            let log_s = (mc.samples as f64).ln();
            let mut total = 0.0;
            let mut logs = vec![0.0; mc.samples];
            for i in 0..data.n() {
                for (s, z) in samples.iter().enumerate() {
                    let a = spec.project(data, i, z);
                    logs[s] = spec.scalar_loglik(data.y()[i], a).0;
                }
                let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + logs.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                total -= lse - log_s;
            }
            Ok(total / n)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
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
    fn dataset_validation() {
        let x = Matrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(Dataset::new(x.clone(), Vector::from_vec(vec![1.0, 0.0]), TargetKind::Binary).is_err());
        assert!(Dataset::new(x.clone(), Vector::from_vec(vec![1.5, 0.0]), TargetKind::Count).is_err());
        assert!(Dataset::new(x.clone(), Vector::from_vec(vec![1.0]), TargetKind::Real).is_err());
        assert!(Dataset::new(Matrix::zeros(0, 1), Vector::zeros(0), TargetKind::Real).is_err());
        assert!(Dataset::new(x, Vector::from_vec(vec![-1.0, 1.0]), TargetKind::Binary).is_ok());
    }

    #[test]
    fn toy_posterior() {
        let (spec, data) = toy();
        let post = exact_posterior(&spec, &data).unwrap();
        assert_relative_eq!(post.sigma()[(0, 0)], 1.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(post.mu()[0], 4.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_design_leaves_prior() {
        let prior = PriorSpec::zero_mean(Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let spec = ModelSpec::linear_regression(0.7, prior.clone()).unwrap();
        let data = Dataset::new(Matrix::zeros(3, 2), Vector::from_vec(vec![1.0, -2.0, 0.5]), TargetKind::Real).unwrap();
        let post = exact_posterior(&spec, &data).unwrap();
        assert!((post.sigma() - prior.mean_cov().sigma()).amax() < 1e-14);
        assert!(post.mu().amax() < 1e-14);
    }

    #[test]
    fn poisson_single_point_at_prior() {
        let data = Dataset::new(Matrix::zeros(1, 1), Vector::from_element(1, 1.0), TargetKind::Count).unwrap();
        let spec = ModelSpec::poisson(PriorSpec::standard(1));
        let value = elbo(&spec, &spec.prior.expectation(), &data, None).unwrap();
        assert_relative_eq!(value, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn kl_vanishes_at_prior() {
        let (spec, data) = toy();
        let prior = spec.prior.expectation();
        let ell = expected_loglik(&spec, &prior, &data, None).unwrap();
        assert_eq!(elbo(&spec, &prior, &data, None).unwrap(), -ell);
    }

    #[test]
    fn scalar_derivative_special_values() {
        let (spec, _) = toy();
        let (_, g, _) = loglik_derivs(&spec, &Vector::from_element(1, 2.0), &Vector::from_element(1, 1.5), 3.0).unwrap();
        assert_eq!(g[0], 0.0);
        let logit = ModelSpec::logistic(PriorSpec::standard(2));
        let x = Vector::from_element(1, 0.7);
        let (_, g, _) = loglik_derivs(&logit, &Vector::zeros(2), &x, 1.0).unwrap();
        assert_relative_eq!(g[0], 0.5 * 0.7, epsilon = 1e-15);
        assert_relative_eq!(g[1], 0.5, epsilon = 1e-15);
        assert!(loglik_derivs(&logit, &Vector::zeros(1), &x, 1.0).is_err());
    }

    #[test]
    fn ln_factorial_matches_sum() {
        for k in [0u64, 1, 5, 30, 31, 50, 200] {
            let exact: f64 = (1..=k).map(|j| (j as f64).ln()).sum();
            assert_relative_eq!(ln_factorial(k as f64), exact, max_relative = 1e-13);
        }
    }

    #[test]
    fn nlpd_point_mass_perfect_fit() {
        let mu = Vector::from_vec(vec![0.5, -1.0]);
        let x = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = &x * &mu;
        let data = Dataset::new(x, y, TargetKind::Real).unwrap();
        let spec = ModelSpec::linear_regression(1.0, PriorSpec::standard(2)).unwrap();
        let q = MeanCov::new(mu, Matrix::identity(2, 2) * 1e-14).unwrap();
        let nlpd = predictive_nlpd(&spec, &q, &data, None).unwrap();
        assert_relative_eq!(nlpd, 0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn nlpd_monotone_in_noise_past_residual_scale() {
        let x = Matrix::from_row_slice(3, 1, &[1.0, 2.0, -1.0]);
        let data = Dataset::new(x, Vector::from_vec(vec![1.2, 1.7, -0.8]), TargetKind::Real).unwrap();
        let q = MeanCov::new(Vector::from_element(1, 1.0), Matrix::from_element(1, 1, 1e-6)).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for s2 in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let spec = ModelSpec::linear_regression(s2, PriorSpec::standard(1)).unwrap();
            let v = predictive_nlpd(&spec, &q, &data, None).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let (_, data) = toy();
        let spec = ModelSpec::logistic(PriorSpec::standard(2));
        assert!(elbo(&spec, &spec.prior.expectation(), &data, None).is_err());
    }
}
