//! Choice of the number of networks by held-out log-likelihood.

use std::collections::BTreeMap;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit, log_likelihood, HyperParams, Regime, SubjectCovariance};
use crate::activity::estimate_unseen;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub k: usize,
    /// Total validation log-likelihood, `None` when the candidate failed.
    pub validation_log_likelihood: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub best_k: usize,
    pub table: Vec<CandidateResult>,
}

fn score(
    regime: Regime,
    k: usize,
    train: &[SubjectCovariance],
    validation: &[SubjectCovariance],
    hyper: &HyperParams,
) -> Result<f64> {
    let model = fit(regime, k, train, hyper)?;
    let mut factors = BTreeMap::new();
    for c in validation {
        let est = estimate_unseen(&model.loading, c)?;
        factors.insert(c.subject_id.clone(), est.factors);
    }
    log_likelihood(&model.loading.values, validation, &factors)
}

/// Fit one model per candidate `k` and keep the one with the highest
/// validation log-likelihood. Ties go to the smaller `k`.
pub fn select_k(
    regime: Regime,
    candidates: &[usize],
    train: &[SubjectCovariance],
    validation: &[SubjectCovariance],
    hyper: &HyperParams,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate k supplied".into()));
    }
    if validation.is_empty() {
        return Err(Error::Validation("no validation subjects for k selection".into()));
    }
    let p = train
        .first()
        .map(|c| c.covariance.nrows())
        .ok_or_else(|| Error::Validation("no training covariances supplied".into()))?;
    if let Some(bad) = candidates.iter().find(|&&k| k == 0 || k >= p) {
        return Err(Error::Config(format!(
            "candidate k = {bad} must lie in 1..{p}"
        )));
    }
    let mut ks = candidates.to_vec();
    ks.sort_unstable();
    ks.dedup();

    let table: Vec<CandidateResult> = ks
        .par_iter()
        .map(|&k| match score(regime, k, train, validation, hyper) {
            Ok(ll) => CandidateResult {
                k,
                validation_log_likelihood: Some(ll),
                error: None,
            },
            Err(e) => {
                warn!("{regime} k={k} failed: {e}");
                CandidateResult {
                    k,
                    validation_log_likelihood: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();

    let best = table
        .iter()
        .filter_map(|r| r.validation_log_likelihood.map(|ll| (r.k, ll)))
        .fold(None::<(usize, f64)>, |acc, (k, ll)| match acc {
            Some((_, best)) if best >= ll => acc,
            _ => Some((k, ll)),
        });
    match best {
        Some((best_k, ll)) => {
            info!("{regime}: selected k = {best_k} (validation log-likelihood {ll:.4})");
            Ok(Selection { best_k, table })
        }
        None => Err(Error::AllCandidatesFailed(
            table
                .iter()
                .map(|r| format!("k={}: {}", r.k, r.error.as_deref().unwrap_or("?")))
                .collect::<Vec<_>>()
                .join("; "),
        )),
    }
}
