//! Natural-gradient variational inference for Gaussian families.
//!
//! The crate works in three coordinate systems for a multivariate Gaussian: mean and
//! covariance, natural parameters `η = (λ, Λ)` and expectation parameters `ω = (ξ, Ξ)`.
//! Natural-gradient descent on the ELBO is a plain gradient step in `η` driven by the
//! gradient with respect to `ω`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod expfam;
pub mod landscape;
pub mod linalg;
pub mod models;
pub mod optim;

pub use error::{Constraint, Error, Result};
pub use expfam::{
    bregman_kl, conjugate_potential, convert, kl_gradient, log_partition, ExpectationParam,
    GradientPair, MeanCov, NaturalParam, Param, Parameterization, PriorSpec,
};
pub use models::{Dataset, McSpec, ModelKind, ModelSpec, TargetKind};
pub use optim::{run_ngd, run_sgd, Estimator, NgdConfig, Schedule, SgdConfig, Trace};
