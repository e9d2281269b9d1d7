//! Gaussian log-likelihood of the low-rank covariance model and its analytic
//! gradients.
//!
//! `Σ = W G Wᵀ + D` is never inverted densely. With `B = W G^{1/2}` and
//! `E = D⁻¹ B`, the Woodbury identity gives
//!
//! ```text
//! Σ⁻¹ = D⁻¹ − E C⁻¹ Eᵀ,   C = I_k + Bᵀ D⁻¹ B
//! log det Σ = log det D + log det C
//! ```
//!
//! so every operation costs O(p k²) plus one O(p² k) product with `K`.
//! Writing the capacitance matrix with `G^{1/2}` instead of `G⁻¹` keeps it
//! well defined when an activity sits at zero.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use super::{SubjectCovariance, SubjectFactors};
use crate::error::{Error, Result};

/// Factored inverse of one subject's model covariance.
pub struct WoodburyInverse {
    dinv: DVector<f64>,
    e: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
}

impl WoodburyInverse {
    pub fn new(w: &DMatrix<f64>, factors: &SubjectFactors, subject: &str) -> Result<Self> {
        let p = w.nrows();
        let k = w.ncols();
        if factors.activities.len() != k {
            return Err(Error::Shape(format!(
                "subject {subject}: {} activities for a loading with {k} columns",
                factors.activities.len()
            )));
        }
        let noise = factors.noise.diagonal(p);
        if noise.len() != p {
            return Err(Error::Shape(format!(
                "subject {subject}: {} noise entries for {p} regions",
                noise.len()
            )));
        }
        if let Some(v) = noise.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!(
                "subject {subject}: noise variance must be positive, got {v}"
            )));
        }
        if let Some(g) = factors.activities.iter().find(|g| !(**g >= 0.0)) {
            return Err(Error::Domain(format!(
                "subject {subject}: activity must be non-negative, got {g}"
            )));
        }
        let dinv = noise.map(|v| 1.0 / v);
        let mut b = w.clone();
        for (j, g) in factors.activities.iter().enumerate() {
            b.column_mut(j).scale_mut(g.sqrt());
        }
        let mut e = b.clone();
        for (i, d) in dinv.iter().enumerate() {
            e.row_mut(i).scale_mut(*d);
        }
        let mut cap = b.tr_mul(&e);
        for i in 0..k {
            cap[(i, i)] += 1.0;
        }
        let chol = Cholesky::new(cap).ok_or_else(|| Error::Numeric {
            subject: subject.to_string(),
            message: "capacitance matrix is not positive definite".into(),
        })?;
        let logdet_c: f64 = chol.l_dirty().diagonal().iter().map(|l| 2.0 * l.ln()).sum();
        let logdet_d: f64 = noise.iter().map(|v| v.ln()).sum();
        Ok(Self {
            dinv,
            e,
            chol,
            logdet: logdet_d + logdet_c,
        })
    }

    pub fn log_det(&self) -> f64 {
        self.logdet
    }

    /// `Σ⁻¹ X`.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (i, d) in self.dinv.iter().enumerate() {
            out.row_mut(i).scale_mut(*d);
        }
        let inner = self.chol.solve(&self.e.tr_mul(x));
        out -= &self.e * inner;
        out
    }

    /// `tr(Σ⁻¹ K)`.
    pub fn trace_product(&self, k: &DMatrix<f64>) -> f64 {
        let diag: f64 = self
            .dinv
            .iter()
            .enumerate()
            .map(|(i, d)| d * k[(i, i)])
            .sum();
        let ke = k * &self.e;
        let m = self.e.tr_mul(&ke);
        diag - self.chol.solve(&m).trace()
    }

    /// Diagonal of `Σ⁻¹`.
    pub fn inverse_diagonal(&self) -> DVector<f64> {
        let solved = self.chol.solve(&self.e.transpose());
        DVector::from_fn(self.dinv.len(), |i, _| {
            self.dinv[i] - self.e.row(i).dot(&solved.column(i).transpose())
        })
    }
}

fn check_shapes(w: &DMatrix<f64>, cov: &SubjectCovariance) -> Result<()> {
    let p = w.nrows();
    if cov.covariance.nrows() != p || cov.covariance.ncols() != p {
        return Err(Error::Shape(format!(
            "subject {}: covariance is {}x{}, loading has {p} rows",
            cov.subject_id,
            cov.covariance.nrows(),
            cov.covariance.ncols()
        )));
    }
    Ok(())
}

/// `−(n/2)·[p log 2π + log det Σ + tr(Σ⁻¹K)]` for one subject.
pub fn subject_log_likelihood(
    w: &DMatrix<f64>,
    cov: &SubjectCovariance,
    factors: &SubjectFactors,
) -> Result<f64> {
    check_shapes(w, cov)?;
    let inv = WoodburyInverse::new(w, factors, &cov.subject_id)?;
    let p = w.nrows() as f64;
    let value = -0.5
        * cov.n_obs as f64
        * (p * (2.0 * PI).ln() + inv.log_det() + inv.trace_product(&cov.covariance));
    if !value.is_finite() {
        return Err(Error::Numeric {
            subject: cov.subject_id.clone(),
            message: format!("log-likelihood is {value}"),
        });
    }
    Ok(value)
}

fn factors_for<'a>(
    factors: &'a BTreeMap<String, SubjectFactors>,
    id: &str,
) -> Result<&'a SubjectFactors> {
    factors
        .get(id)
        .ok_or_else(|| Error::Validation(format!("no factors supplied for subject {id}")))
}

/// Total log-likelihood over all subjects (higher is better).
pub fn log_likelihood(
    w: &DMatrix<f64>,
    covariances: &[SubjectCovariance],
    factors: &BTreeMap<String, SubjectFactors>,
) -> Result<f64> {
    let parts = covariances
        .par_iter()
        .map(|c| subject_log_likelihood(w, c, factors_for(factors, &c.subject_id)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().sum())
}

/// `(Σ⁻¹KΣ⁻¹ − Σ⁻¹) W` for one subject.
fn residual_times_loading(
    w: &DMatrix<f64>,
    cov: &SubjectCovariance,
    factors: &SubjectFactors,
) -> Result<DMatrix<f64>> {
    check_shapes(w, cov)?;
    let inv = WoodburyInverse::new(w, factors, &cov.subject_id)?;
    let y = inv.apply(w);
    let z = inv.apply(&(&cov.covariance * &y));
    Ok(z - y)
}

pub(crate) fn subject_grad_loading(
    w: &DMatrix<f64>,
    cov: &SubjectCovariance,
    factors: &SubjectFactors,
) -> Result<DMatrix<f64>> {
    let mut a = residual_times_loading(w, cov, factors)?;
    let n = cov.n_obs as f64;
    for (j, g) in factors.activities.iter().enumerate() {
        a.column_mut(j).scale_mut(n * g);
    }
    Ok(a)
}

/// Gradient of the total log-likelihood with respect to `W`:
/// `Σᵢ nᵢ (Σᵢ⁻¹KᵢΣᵢ⁻¹ − Σᵢ⁻¹) W Gᵢ`.
pub fn grad_loading(
    w: &DMatrix<f64>,
    covariances: &[SubjectCovariance],
    factors: &BTreeMap<String, SubjectFactors>,
) -> Result<DMatrix<f64>> {
    let parts = covariances
        .par_iter()
        .map(|c| subject_grad_loading(w, c, factors_for(factors, &c.subject_id)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts
        .into_iter()
        .fold(DMatrix::zeros(w.nrows(), w.ncols()), |acc, g| acc + g))
}

/// Gradient of one subject's log-likelihood with respect to its activities:
/// `(n/2)·diag(Wᵀ(Σ⁻¹KΣ⁻¹ − Σ⁻¹)W)`.
pub fn grad_activities(
    w: &DMatrix<f64>,
    cov: &SubjectCovariance,
    factors: &SubjectFactors,
) -> Result<DVector<f64>> {
    let a = residual_times_loading(w, cov, factors)?;
    let half_n = 0.5 * cov.n_obs as f64;
    Ok(DVector::from_fn(w.ncols(), |j, _| {
        half_n * w.column(j).dot(&a.column(j))
    }))
}

/// Gradient with respect to the per-region noise variances:
/// `(n/2)·diag(Σ⁻¹KΣ⁻¹ − Σ⁻¹)`. For isotropic noise sum the entries.
pub(crate) fn grad_noise_diagonal(
    w: &DMatrix<f64>,
    cov: &SubjectCovariance,
    factors: &SubjectFactors,
) -> Result<DVector<f64>> {
    check_shapes(w, cov)?;
    let inv = WoodburyInverse::new(w, factors, &cov.subject_id)?;
    let s_inv_k = inv.apply(&cov.covariance);
    // diag(Σ⁻¹ K Σ⁻¹) = rowwise dot of Σ⁻¹K with Σ⁻¹ (both symmetric products)
    let s_inv_k_s_inv = inv.apply(&s_inv_k.transpose());
    let diag_inv = inv.inverse_diagonal();
    let half_n = 0.5 * cov.n_obs as f64;
    Ok(DVector::from_fn(w.nrows(), |i, _| {
        half_n * (s_inv_k_s_inv[(i, i)] - diag_inv[i])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Noise;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_sigma(w: &DMatrix<f64>, f: &SubjectFactors) -> DMatrix<f64> {
        let p = w.nrows();
        let g = DMatrix::from_diagonal(&DVector::from_column_slice(&f.activities));
        w * g * w.transpose() + DMatrix::from_diagonal(&f.noise.diagonal(p))
    }

    fn dense_loglik(w: &DMatrix<f64>, c: &SubjectCovariance, f: &SubjectFactors) -> f64 {
        let sigma = dense_sigma(w, f);
        let p = w.nrows() as f64;
        let chol = sigma.clone().cholesky().unwrap();
        let logdet: f64 = chol.l().diagonal().iter().map(|l| 2.0 * l.ln()).sum();
        let inv = sigma.try_inverse().unwrap();
        -0.5 * c.n_obs as f64 * (p * (2.0 * PI).ln() + logdet + (inv * &c.covariance).trace())
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        p: usize,
        k: usize,
        diag_noise: bool,
    ) -> (DMatrix<f64>, SubjectCovariance, SubjectFactors) {
        let w = DMatrix::from_fn(p, k, |_, _| rng.random_range(-1.0..1.0));
        let x = DMatrix::from_fn(3 * p, p, |_, _| rng.random_range(-1.0..1.0));
        let k_mat = x.tr_mul(&x) / (3 * p) as f64;
        let noise = if diag_noise {
            Noise::Diagonal((0..p).map(|_| rng.random_range(0.2..1.5)).collect())
        } else {
            Noise::Isotropic(rng.random_range(0.2..1.5))
        };
        let f = SubjectFactors {
            activities: (0..k).map(|_| rng.random_range(0.1..3.0)).collect(),
            noise,
        };
        (w, SubjectCovariance::new("s", k_mat, 7), f)
    }

    #[test]
    fn woodbury_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for diag in [false, true] {
            let (w, c, f) = random_instance(&mut rng, 10, 3, diag);
            let fast = subject_log_likelihood(&w, &c, &f).unwrap();
            let slow = dense_loglik(&w, &c, &f);
            assert!(((fast - slow) / slow).abs() < 1e-8, "{fast} vs {slow}");

            let inv = WoodburyInverse::new(&w, &f, "s").unwrap();
            let dense = dense_sigma(&w, &f).try_inverse().unwrap();
            let x = DMatrix::from_fn(10, 2, |i, j| (i + 2 * j) as f64);
            assert!((inv.apply(&x) - &dense * &x).amax() < 1e-10);
            assert!((inv.inverse_diagonal() - dense.diagonal()).amax() < 1e-10);
        }
    }

    #[test]
    fn two_by_two_exact_covariance() {
        let w = dmatrix![1.0; 0.0];
        let f = SubjectFactors::isotropic(vec![1.0], 1.0);
        let sigma = dense_sigma(&w, &f);
        let c = SubjectCovariance::new("s", sigma.clone(), 1);
        let expected = -0.5 * (2.0 * (2.0 * PI).ln() + sigma.determinant().ln() + 2.0);
        let got = subject_log_likelihood(&w, &c, &f).unwrap();
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn gradients_vanish_when_model_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (w, _, f) = random_instance(&mut rng, 8, 2, false);
        let c = SubjectCovariance::new("s", dense_sigma(&w, &f), 5);
        let mut factors = BTreeMap::new();
        factors.insert("s".to_string(), f.clone());
        let gw = grad_loading(&w, std::slice::from_ref(&c), &factors).unwrap();
        assert!(gw.amax() < 1e-10, "{}", gw.amax());
        let gg = grad_activities(&w, &c, &f).unwrap();
        assert!(gg.amax() < 1e-10);
    }

    #[test]
    fn noise_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, c, f) = random_instance(&mut rng, 6, 2, true);
        let g = grad_noise_diagonal(&w, &c, &f).unwrap();
        let Noise::Diagonal(d) = &f.noise else { unreachable!() };
        for i in 0..6 {
            let h = 1e-6;
            let mut up = d.clone();
            up[i] += h;
            let mut dn = d.clone();
            dn[i] -= h;
            let fu = SubjectFactors { activities: f.activities.clone(), noise: Noise::Diagonal(up) };
            let fd = SubjectFactors { activities: f.activities.clone(), noise: Noise::Diagonal(dn) };
            let num = (subject_log_likelihood(&w, &c, &fu).unwrap()
                - subject_log_likelihood(&w, &c, &fd).unwrap())
                / (2.0 * h);
            assert!((num - g[i]).abs() <= 1e-5 * num.abs().max(1.0), "{num} vs {}", g[i]);
        }
    }

    #[test]
    fn non_positive_noise_is_a_domain_error() {
        let w = dmatrix![1.0; 0.0];
        let c = SubjectCovariance::new("s", DMatrix::identity(2, 2), 3);
        let f = SubjectFactors::isotropic(vec![1.0], 0.0);
        assert!(matches!(
            subject_log_likelihood(&w, &c, &f),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn zero_activity_is_well_posed() {
        let w = dmatrix![1.0; 0.0; 0.0];
        let c = SubjectCovariance::new("s", DMatrix::identity(3, 3), 3);
        let f = SubjectFactors::isotropic(vec![0.0], 1.0);
        let v = subject_log_likelihood(&w, &c, &f).unwrap();
        assert!((v - (-1.5 * (3.0 * (2.0 * PI).ln() + 3.0))).abs() < 1e-12);
    }
}
