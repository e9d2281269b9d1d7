//! Helpers shared by the integration tests.
#![allow(dead_code)]

use brainage::models::{SubjectCovariance, SubjectFactors};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random `p × k` matrix with orthonormal columns.
pub fn random_orthonormal(rng: &mut ChaCha8Rng, p: usize, k: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, k, |_, _| rng.random_range(-1.0..1.0));
    a.qr().q()
}

/// Random non-negative orthonormal loading: every row joins one column.
pub fn random_nonneg_orthonormal(rng: &mut ChaCha8Rng, p: usize, k: usize) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(p, k);
    for l in 0..p {
        let j = if l < k { l } else { rng.random_range(0..k) };
        w[(l, j)] = rng.random_range(0.1..1.0);
    }
    for j in 0..k {
        let n = w.column(j).norm();
        w.column_mut(j).unscale_mut(n);
    }
    w
}

/// `W diag(g) Wᵀ + diag(noise)`.
pub fn model_covariance(w: &DMatrix<f64>, g: &[f64], noise: &DVector<f64>) -> DMatrix<f64> {
    w * DMatrix::from_diagonal(&DVector::from_column_slice(g)) * w.transpose()
        + DMatrix::from_diagonal(noise)
}

/// Sample covariance of `n` rows drawn with uniform entries (well conditioned).
pub fn random_covariance(rng: &mut ChaCha8Rng, p: usize, n: usize) -> DMatrix<f64> {
    let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
    x.tr_mul(&x) / n as f64
}

pub fn random_covs(rng: &mut ChaCha8Rng, p: usize, n_subj: usize) -> Vec<SubjectCovariance> {
    (0..n_subj)
        .map(|i| SubjectCovariance::new(format!("s{i}"), random_covariance(rng, p, 4 * p), 4 * p))
        .collect()
}

pub fn random_factors(rng: &mut ChaCha8Rng, p: usize, k: usize, diagonal: bool) -> SubjectFactors {
    let activities = (0..k).map(|_| rng.random_range(0.5..3.0)).collect();
    let noise = if diagonal {
        brainage::models::Noise::Diagonal((0..p).map(|_| rng.random_range(0.3..1.5)).collect())
    } else {
        brainage::models::Noise::Isotropic(rng.random_range(0.3..1.5))
    };
    SubjectFactors { activities, noise }
}

/// Relative error `‖a − b‖ / max(‖b‖, 1e-12)`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}
