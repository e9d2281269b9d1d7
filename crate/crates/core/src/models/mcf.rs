//! Modular connectivity factorization objective.
//!
//! MCF has no generative model; it scores a loading by the squared
//! per-network quadratic forms of each subject covariance,
//! `Σᵢ Σⱼ (W_jᵀ Kᵢ W_j)²`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::SubjectCovariance;
use crate::error::{Error, Result};

fn check(w: &DMatrix<f64>, covariances: &[SubjectCovariance]) -> Result<()> {
    let p = w.nrows();
    for c in covariances {
        if c.covariance.shape() != (p, p) {
            return Err(Error::Shape(format!(
                "subject {}: covariance is {}x{}, loading has {p} rows",
                c.subject_id,
                c.covariance.nrows(),
                c.covariance.ncols()
            )));
        }
    }
    Ok(())
}

pub fn mcf_objective(w: &DMatrix<f64>, covariances: &[SubjectCovariance]) -> Result<f64> {
    check(w, covariances)?;
    let parts: Vec<f64> = covariances
        .par_iter()
        .map(|c| {
            let kw = &c.covariance * w;
            (0..w.ncols())
                .map(|j| w.column(j).dot(&kw.column(j)).powi(2))
                .sum()
        })
        .collect();
    Ok(parts.into_iter().sum())
}

/// Column `j` of the gradient is `4 Σᵢ (W_jᵀKᵢW_j) Kᵢ W_j`.
pub fn mcf_gradient(w: &DMatrix<f64>, covariances: &[SubjectCovariance]) -> Result<DMatrix<f64>> {
    check(w, covariances)?;
    let parts: Vec<DMatrix<f64>> = covariances
        .par_iter()
        .map(|c| {
            let mut kw = &c.covariance * w;
            for j in 0..w.ncols() {
                let q = w.column(j).dot(&kw.column(j));
                kw.column_mut(j).scale_mut(4.0 * q);
            }
            kw
        })
        .collect();
    Ok(parts
        .into_iter()
        .fold(DMatrix::zeros(w.nrows(), w.ncols()), |acc, g| acc + g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_covariances_score_n_times_k() {
        let w = DMatrix::identity(6, 3);
        let covs: Vec<_> = (0..4)
            .map(|i| SubjectCovariance::new(format!("s{i}"), DMatrix::identity(6, 6), 10))
            .collect();
        assert!((mcf_objective(&w, &covs).unwrap() - 12.0).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = 8;
        let w = DMatrix::from_fn(p, 2, |_, _| rng.random_range(0.0..1.0));
        let covs: Vec<_> = (0..3)
            .map(|i| {
                let x = DMatrix::from_fn(20, p, |_, _| rng.random_range(-1.0..1.0));
                SubjectCovariance::new(format!("s{i}"), x.tr_mul(&x) / 20.0, 20)
            })
            .collect();
        let g = mcf_gradient(&w, &covs).unwrap();
        let h = 1e-6;
        for i in 0..p {
            for j in 0..2 {
                let mut up = w.clone();
                up[(i, j)] += h;
                let mut dn = w.clone();
                dn[(i, j)] -= h;
                let num = (mcf_objective(&up, &covs).unwrap() - mcf_objective(&dn, &covs).unwrap())
                    / (2.0 * h);
                assert!(
                    (num - g[(i, j)]).abs() <= 1e-5 * num.abs().max(1e-3),
                    "{num} vs {}",
                    g[(i, j)]
                );
            }
        }
    }
}
