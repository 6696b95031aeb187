//! Small dense linear-algebra helpers shared by the other modules.

use std::cmp::Ordering;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Constraint, Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Tolerance on `max |M - Mᵀ|` accepted for symmetric inputs.
pub const SYMMETRY_TOL: f64 = 1e-12;

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn asymmetry(m: &Matrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub(crate) fn check_symmetric(m: &Matrix) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension {
            what: "square matrix",
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    let asym = asymmetry(m);
    if asym > SYMMETRY_TOL {
        return Err(Error::Asymmetric { asymmetry: asym });
    }
    Ok(())
}

/// Lower Cholesky factorization; `None` when the matrix is not positive definite.
pub fn cholesky(m: &Matrix) -> Option<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Cholesky::new(m.clone())
}

/// Cholesky factor or a domain error carrying the smallest eigenvalue.
pub(crate) fn cholesky_or(m: &Matrix, constraint: Constraint) -> Result<Cholesky<f64, Dyn>> {
    cholesky(m).ok_or_else(|| Error::Domain {
        constraint,
        min_eigenvalue: min_eigenvalue(m),
    })
}

pub fn is_positive_definite(m: &Matrix) -> bool {
    cholesky(m).is_some()
}

pub fn log_det_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

pub fn min_eigenvalue(m: &Matrix) -> f64 {
    if m.iter().any(|v| !v.is_finite()) {
        return f64::NAN;
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

pub fn max_eigenvalue(m: &Matrix) -> f64 {
    if m.iter().any(|v| !v.is_finite()) {
        return f64::NAN;
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues.max()
}

/// Spectral norm of a symmetric matrix.
pub fn spectral_norm_sym(m: &Matrix) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// `tr(Aᵀ B)`, the Frobenius pairing.
pub fn frob_inner(a: &Matrix, b: &Matrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Lower-triangular part including the diagonal.
pub fn tril(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            out[(i, j)] = 0.0;
        }
    }
    out
}

pub fn is_lower_triangular(m: &Matrix) -> bool {
    (0..m.nrows()).all(|i| ((i + 1)..m.ncols()).all(|j| m[(i, j)] == 0.0))
}

pub fn standard_normal_vector<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vector {
    Vector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Inverse of a lower-triangular matrix with non-zero diagonal.
pub fn lower_triangular_inverse(l: &Matrix) -> Option<Matrix> {
    let d = l.nrows();
    let mut inv = Matrix::identity(d, d);
    if l.solve_lower_triangular_mut(&mut inv) {
        Some(inv)
    } else {
        None
    }
}

pub(crate) fn expect_len(what: &'static str, v: &Vector, expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::Dimension {
            what,
            expected,
            found: v.len(),
        });
    }
    Ok(())
}

pub(crate) fn expect_square(what: &'static str, m: &Matrix, expected: usize) -> Result<()> {
    if m.nrows() != expected || m.ncols() != expected {
        return Err(Error::Dimension {
            what,
            expected,
            found: if m.nrows() != expected { m.nrows() } else { m.ncols() },
        });
    }
    Ok(())
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Exact sign of `ad - bc`, barring overflow or underflow in the products.
///
/// Both products are split into error-free pairs and summed as a floating-point expansion,
/// whose largest non-zero component carries the sign.
pub fn det2_sign(a: f64, b: f64, c: f64, d: f64) -> Ordering {
    let (p, pe) = two_prod(a, d);
    let (q, qe) = two_prod(b, c);
    let mut expansion: Vec<f64> = Vec::with_capacity(4);
    for x in [pe, -qe, p, -q] {
        let mut acc = x;
        let mut next = Vec::with_capacity(expansion.len() + 1);
        for &e in &expansion {
            let (s, err) = two_sum(acc, e);
            if err != 0.0 {
                next.push(err);
            }
            acc = s;
        }
        next.push(acc);
        expansion = next;
    }
    expansion
        .iter()
        .rev()
        .find(|v| **v != 0.0)
        .map_or(Ordering::Equal, |v| if *v > 0.0 { Ordering::Greater } else { Ordering::Less })
}

/// Negative definiteness of the stored entries decided in exact arithmetic, for `d ≤ 2`.
///
/// Rank-deficient matrices sit exactly on the boundary, where a rounded factorization's
/// verdict depends on its own rounding; this answers for the matrix as represented.
pub fn exactly_negative_definite(m: &Matrix) -> Option<bool> {
    match m.nrows() {
        1 => Some(m[(0, 0)] < 0.0),
        2 => Some(m[(0, 0)] < 0.0 && det2_sign(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]) == Ordering::Greater),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_determinant_sign() {
        let eps = f64::EPSILON;
        // (1 + ε)(1 - ε) rounds to 1 but is exactly 1 - ε².
        assert_eq!((1.0 + eps) * (1.0 - eps) - 1.0, 0.0);
        assert_eq!(det2_sign(1.0 + eps, 1.0, 1.0, 1.0 - eps), Ordering::Less);
        assert_eq!(det2_sign(1.0 + eps, 1.0, 1.0, 1.0 + eps), Ordering::Greater);
        assert_eq!(det2_sign(3.0, 2.0, 6.0, 4.0), Ordering::Equal);
        assert_eq!(det2_sign(0.1, 0.3, 0.2, 0.6), (0.1f64 * 0.6).partial_cmp(&(0.3 * 0.2)).unwrap());
        let m = Matrix::from_row_slice(2, 2, &[-2.0, 1.0, 1.0, -1.0]);
        assert_eq!(exactly_negative_definite(&m), Some(true));
        let rank_one = Matrix::from_row_slice(2, 2, &[-1.0, -2.0, -2.0, -4.0]);
        assert_eq!(exactly_negative_definite(&rank_one), Some(false));
        assert_eq!(exactly_negative_definite(&Matrix::identity(3, 3)), None);
    }

    #[test]
    fn tril_and_inverse() {
        let l = Matrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 1.0, 3.0, 0.0, -1.0, 0.5, 4.0]);
        assert!(is_lower_triangular(&l));
        let inv = lower_triangular_inverse(&l).unwrap();
        assert!((&l * &inv - Matrix::identity(3, 3)).amax() < 1e-14);
        let full = Matrix::from_element(3, 3, 1.0);
        assert!(is_lower_triangular(&tril(&full)));
        assert_eq!(tril(&full).sum(), 6.0);
    }

    #[test]
    fn pd_check_uses_factorization() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(!is_positive_definite(&m));
        assert!((min_eigenvalue(&m) + 1.0).abs() < 1e-12);
        assert!(is_positive_definite(&Matrix::identity(2, 2)));
    }
}
