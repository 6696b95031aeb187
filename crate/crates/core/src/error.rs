use thiserror::Error;

/// Which domain constraint a parameter failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    /// Covariance must be positive definite.
    CovariancePositiveDefinite,
    /// The natural matrix component must be negative definite.
    NaturalNegativeDefinite,
    /// `Ξ - ξξᵀ` must be positive definite.
    ExpectationPositiveDefinite,
    /// A square matrix is required to be symmetric.
    Symmetric,
    /// Cholesky factor needs a positive diagonal.
    CholeskyDiagonal,
}

impl std::fmt::Display for Constraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Constraint::CovariancePositiveDefinite => "covariance must be positive definite",
            Constraint::NaturalNegativeDefinite => "natural matrix parameter must be negative definite",
            Constraint::ExpectationPositiveDefinite => "Xi - xi xi^T must be positive definite",
            Constraint::Symmetric => "matrix must be symmetric",
            Constraint::CholeskyDiagonal => "Cholesky factor must have a positive diagonal",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain violation: {constraint} (minimum eigenvalue estimate {min_eigenvalue:e})")]
    Domain {
        constraint: Constraint,
        min_eigenvalue: f64,
    },

    #[error("matrix is not symmetric: max asymmetry {asymmetry:e}")]
    Asymmetric { asymmetry: f64 },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("update left the natural domain at iteration {iteration} (step size {step_size}, minimum eigenvalue of -Lambda {min_eigenvalue:e})")]
    DomainExit {
        iteration: usize,
        step_size: f64,
        min_eigenvalue: f64,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("numerically singular system (reciprocal condition {rcond:e})")]
    IllConditioned { rcond: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
