//! Network activity and noise estimates for subjects that were not used to
//! fit the loading.
//!
//! For an orthonormal loading, `Σ = Σⱼ gⱼ WⱼWⱼᵀ + vI` gives
//! `WⱼᵀΣWⱼ = gⱼ + v` and `tr Σ − tr(WᵀΣW) = (p − k)v`, so both are recovered
//! exactly from a covariance by projection.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::orthonormality_violation;
use crate::models::{
    fit_subject_factors, LoadingMatrix, Noise, SubjectCovariance, SubjectFactors, VARIANCE_FLOOR,
};

/// Largest `‖WᵀW − I‖_F` accepted by the projection estimators.
pub const ORTHONORMALITY_TOLERANCE: f64 = 1e-3;

/// Iterations used when refitting factors for loadings without orthonormality.
const SUBJECT_FIT_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityEstimate {
    pub subject_id: String,
    /// Raw estimates, possibly negative.
    pub activities: Vec<f64>,
    /// `max(activities, 0)`, used as regression features.
    pub clamped_activities: Vec<f64>,
    pub noise: f64,
}

fn check_inputs(loading: &LoadingMatrix, sigma_hat: &DMatrix<f64>) -> Result<()> {
    let (p, k) = (loading.p(), loading.k());
    if sigma_hat.shape() != (p, p) {
        return Err(Error::Shape(format!(
            "covariance is {}x{}, loading has {p} rows",
            sigma_hat.nrows(),
            sigma_hat.ncols()
        )));
    }
    if p <= k {
        return Err(Error::Config(format!(
            "noise estimate needs p > k (p = {p}, k = {k})"
        )));
    }
    let violation = orthonormality_violation(&loading.values);
    if violation >= ORTHONORMALITY_TOLERANCE {
        return Err(Error::Validation(format!(
            "loading is not orthonormal enough for projection estimates (‖WᵀW − I‖ = {violation:e})"
        )));
    }
    Ok(())
}

/// `(tr Σ̂ − tr(WᵀΣ̂W)) / (p − k)`, floored at zero.
pub fn estimate_noise(loading: &LoadingMatrix, sigma_hat: &DMatrix<f64>) -> Result<f64> {
    check_inputs(loading, sigma_hat)?;
    let w = &loading.values;
    let explained = w.tr_mul(&(sigma_hat * w)).trace();
    Ok(((sigma_hat.trace() - explained) / (loading.p() - loading.k()) as f64).max(0.0))
}

/// `gⱼ = WⱼᵀΣ̂Wⱼ − noise` for every network.
pub fn estimate_activities(
    loading: &LoadingMatrix,
    sigma_hat: &DMatrix<f64>,
    noise: f64,
) -> Result<ActivityEstimate> {
    check_inputs(loading, sigma_hat)?;
    let w = &loading.values;
    let sw = sigma_hat * w;
    let activities: Vec<f64> = (0..loading.k())
        .map(|j| w.column(j).dot(&sw.column(j)) - noise)
        .collect();
    Ok(ActivityEstimate {
        subject_id: String::new(),
        clamped_activities: activities.iter().map(|g| g.max(0.0)).collect(),
        activities,
        noise: noise.max(0.0),
    })
}

/// Noise then activities for one covariance.
pub fn estimate_subject(
    subject_id: &str,
    loading: &LoadingMatrix,
    sigma_hat: &DMatrix<f64>,
) -> Result<ActivityEstimate> {
    let v = estimate_noise(loading, sigma_hat)?;
    let mut est = estimate_activities(loading, sigma_hat, v)?;
    est.subject_id = subject_id.to_string();
    Ok(est)
}

/// Activity estimate plus factors usable in the likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct UnseenSubject {
    pub estimate: ActivityEstimate,
    pub factors: SubjectFactors,
}

/// Factors for an unseen subject under a fitted loading.
///
/// Orthonormal regimes use the projection estimators directly. FA and
/// non-negative PCA loadings are not orthonormal, so their factors are refit
/// by maximum likelihood with the loading held fixed.
pub fn estimate_unseen(loading: &LoadingMatrix, cov: &SubjectCovariance) -> Result<UnseenSubject> {
    if loading.regime.orthonormal() {
        let est = estimate_subject(&cov.subject_id, loading, &cov.covariance)?;
        let factors = SubjectFactors {
            activities: est.clamped_activities.clone(),
            noise: Noise::Isotropic(est.noise.max(VARIANCE_FLOOR)),
        };
        Ok(UnseenSubject {
            estimate: est,
            factors,
        })
    } else {
        let factors = fit_subject_factors(loading, cov, SUBJECT_FIT_STEPS)?;
        let estimate = ActivityEstimate {
            subject_id: cov.subject_id.clone(),
            activities: factors.activities.clone(),
            clamped_activities: factors.activities.iter().map(|g| g.max(0.0)).collect(),
            noise: factors.noise.mean(),
        };
        Ok(UnseenSubject { estimate, factors })
    }
}

/// `subject_id, g_1..g_k, noise, g_1_raw..g_k_raw`.
pub fn write_activity_csv(path: &Path, estimates: &[ActivityEstimate]) -> Result<()> {
    let k = estimates.first().map_or(0, |e| e.activities.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["subject_id".to_string()];
    header.extend((1..=k).map(|j| format!("g_{j}")));
    header.push("noise".into());
    header.extend((1..=k).map(|j| format!("g_{j}_raw")));
    w.write_record(&header)?;
    for e in estimates {
        let mut row = vec![e.subject_id.clone()];
        row.extend(e.clamped_activities.iter().map(|g| format!("{g:?}")));
        row.push(format!("{:?}", e.noise));
        row.extend(e.activities.iter().map(|g| format!("{g:?}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
