#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ngvi::{Dataset, MeanCov, TargetKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut impl Rng, d: usize) -> Vector {
    Vector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

pub fn spd(rng: &mut impl Rng, d: usize, floor: f64) -> Matrix {
    let a = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let m = &a * a.transpose() / d as f64 + Matrix::identity(d, d) * floor;
    (&m + m.transpose()) * 0.5
}

pub fn random_gaussian(rng: &mut impl Rng, d: usize) -> MeanCov {
    MeanCov::new(normal_vec(rng, d), spd(rng, d, 0.3)).unwrap()
}

pub fn sym_direction(rng: &mut impl Rng, d: usize) -> Matrix {
    let a = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&a + a.transpose()) * 0.5
}

/// KL(N(m0, S0) ‖ N(m1, S1)) via LU inverses and determinants.
pub fn gaussian_kl(m0: &Vector, s0: &Matrix, m1: &Vector, s1: &Matrix) -> f64 {
    let d = m0.len() as f64;
    let s1_inv = s1.clone().try_inverse().unwrap();
    let diff = m1 - m0;
    0.5 * ((&s1_inv * s0).trace() + (diff.transpose() * &s1_inv * &diff)[0] - d
        + (s1.determinant() / s0.determinant()).ln())
}

pub fn toy() -> Dataset {
    Dataset::new(
        Matrix::from_row_slice(2, 1, &[1.0, 1.0]),
        Vector::from_vec(vec![1.0, 3.0]),
        TargetKind::Real,
    )
    .unwrap()
}

pub fn linreg_data(seed: u64, n: usize, d: usize, noise_sd: f64) -> Dataset {
    let mut r = rng(seed);
    let w = normal_vec(&mut r, d);
    let x = Matrix::from_fn(n, d, |_, _| r.sample::<f64, _>(StandardNormal));
    let y = Vector::from_fn(n, |i, _| x.row(i).transpose().dot(&w) + noise_sd * r.sample::<f64, _>(StandardNormal));
    Dataset::new(x, y, TargetKind::Real).unwrap()
}

pub fn poisson_data(seed: u64, n: usize, d: usize) -> Dataset {
    let mut r = rng(seed);
    let x = Matrix::from_fn(n, d, |_, _| 0.4 * r.sample::<f64, _>(StandardNormal));
    let y = Vector::from_fn(n, |_, _| r.random_range(0..4) as f64);
    Dataset::new(x, y, TargetKind::Count).unwrap()
}

pub fn logistic_data(seed: u64, n: usize, d: usize) -> Dataset {
    let mut r = rng(seed);
    let w = normal_vec(&mut r, d);
    let x = Matrix::from_fn(n, d, |_, _| r.random_range(-1.0..=1.0));
    let y = Vector::from_fn(n, |i, _| {
        let p = 1.0 / (1.0 + (-x.row(i).transpose().dot(&w)).exp());
        if r.random_bool(p) { 1.0 } else { -1.0 }
    });
    Dataset::new(x, y, TargetKind::Binary).unwrap()
}
