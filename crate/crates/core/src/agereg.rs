//! Linear brain-age regression on network activities and bootstrap
//! evaluation over random sub-cohorts.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activity::estimate_unseen;
use crate::data::{compute_covariance, CohortDataset};
use crate::error::{Error, Result};
use crate::models::{FittedModel, SubjectCovariance};
use crate::rng::{stream, Stage};

pub const AGE_MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeModel {
    /// β, one per network.
    pub coefficients: Vec<f64>,
    /// β₀ when the model was fit with an intercept.
    pub intercept: Option<f64>,
    pub k: usize,
    /// Numerical rank of the design matrix.
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct AgeModelDocument {
    schema_version: u32,
    #[serde(flatten)]
    model: AgeModel,
}

impl AgeModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&AgeModelDocument {
            schema_version: AGE_MODEL_SCHEMA_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Peek {
            schema_version: u32,
        }
        let peek: Peek = serde_json::from_str(s)?;
        if peek.schema_version != AGE_MODEL_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: AGE_MODEL_SCHEMA_VERSION,
                found: peek.schema_version,
            });
        }
        let doc: AgeModelDocument = serde_json::from_str(s)?;
        if doc.model.coefficients.len() != doc.model.k {
            return Err(Error::Shape("age model coefficient count differs from k".into()));
        }
        Ok(doc.model)
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.rank < self.k + usize::from(self.intercept.is_some())
    }
}

/// Ordinary least squares through an SVD of the design; rank-deficient
/// designs get the minimum-norm solution and a warning.
pub fn fit_age_model(features: &DMatrix<f64>, ages: &[f64], use_intercept: bool) -> Result<AgeModel> {
    let (n, k) = features.shape();
    if ages.len() != n {
        return Err(Error::Shape(format!(
            "{n} feature rows but {} ages",
            ages.len()
        )));
    }
    if k == 0 || n == 0 {
        return Err(Error::Shape("empty design".into()));
    }
    if features.iter().chain(ages).any(|v| !v.is_finite()) {
        return Err(Error::Validation("features and ages must be finite".into()));
    }
    let offset = usize::from(use_intercept);
    let m = k + offset;
    let design = DMatrix::from_fn(n, m, |r, c| {
        if use_intercept && c == 0 {
            1.0
        } else {
            features[(r, c - offset)]
        }
    });
    let y = DVector::from_column_slice(ages);
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = n.max(m) as f64 * f64::EPSILON * smax;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    let beta = svd
        .solve(&y, tol)
        .map_err(|e| Error::Numeric {
            subject: "<design>".into(),
            message: e.to_string(),
        })?;
    let mut warnings = Vec::new();
    if rank < m {
        warnings.push(format!(
            "rank-deficient design (rank {rank} < {m} columns); minimum-norm solution returned"
        ));
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Numeric {
            subject: "<design>".into(),
            message: "non-finite regression coefficients".into(),
        });
    }
    Ok(AgeModel {
        coefficients: beta.iter().skip(offset).copied().collect(),
        intercept: use_intercept.then(|| beta[0]),
        k,
        rank,
        warnings,
    })
}

/// `β₀ + βᵀg`, unclamped.
pub fn predict_age(model: &AgeModel, activities: &[f64]) -> Result<f64> {
    if activities.len() != model.coefficients.len() {
        return Err(Error::Shape(format!(
            "{} activities for an age model with {} coefficients",
            activities.len(),
            model.coefficients.len()
        )));
    }
    let dot: f64 = model
        .coefficients
        .iter()
        .zip(activities)
        .map(|(b, g)| b * g)
        .sum();
    Ok(model.intercept.unwrap_or(0.0) + dot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae_mean: f64,
    pub mae_std: f64,
    pub n_bootstrap: usize,
    pub subset_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSettings {
    pub subset_size: usize,
    pub n_bootstrap: usize,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        Self {
            subset_size: 30,
            n_bootstrap: 1000,
        }
    }
}

pub fn mean_absolute_error(predictions: &[f64], true_ages: &[f64]) -> f64 {
    predictions
        .iter()
        .zip(true_ages)
        .map(|(p, a)| (p - a).abs())
        .sum::<f64>()
        / predictions.len() as f64
}

/// Mean and standard deviation of the MAE over random sub-cohorts drawn
/// without replacement. Replicate `r` draws from its own `(seed, r)` stream.
pub fn bootstrap_mae(
    predictions: &[f64],
    true_ages: &[f64],
    subset_size: usize,
    n_bootstrap: usize,
    seed: u64,
) -> Result<EvalReport> {
    let m = predictions.len();
    if true_ages.len() != m {
        return Err(Error::Shape(format!(
            "{m} predictions but {} ages",
            true_ages.len()
        )));
    }
    if subset_size == 0 || n_bootstrap == 0 {
        return Err(Error::Config(
            "subset_size and n_bootstrap must be at least 1".into(),
        ));
    }
    if m < subset_size {
        return Err(Error::Size(format!(
            "bootstrap subsets of {subset_size} need at least that many subjects, got {m}"
        )));
    }
    let maes: Vec<f64> = (0..n_bootstrap)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, Stage::Bootstrap, r as u64);
            let mut idx = index::sample(&mut rng, m, subset_size).into_vec();
            idx.sort_unstable();
            idx.iter()
                .map(|&i| (predictions[i] - true_ages[i]).abs())
                .sum::<f64>()
                / subset_size as f64
        })
        .collect();
    let mean = maes.iter().sum::<f64>() / n_bootstrap as f64;
    let var = if n_bootstrap > 1 {
        maes.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n_bootstrap - 1) as f64
    } else {
        0.0
    };
    Ok(EvalReport {
        mae_mean: mean,
        mae_std: var.sqrt(),
        n_bootstrap,
        subset_size,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub predicted_age: f64,
    pub age: Option<f64>,
    pub activities: Vec<f64>,
}

/// Noise → activities → age for every subject of a cohort, with the loading
/// and regression frozen.
pub fn predict_cohort(
    model: &FittedModel,
    age_model: &AgeModel,
    cohort: &CohortDataset,
) -> Result<Vec<Prediction>> {
    if cohort.p != model.p() {
        return Err(Error::DimensionMismatch {
            first: "fitted model".into(),
            first_dim: model.p(),
            second: "unseen cohort".into(),
            second_dim: cohort.p,
        });
    }
    if age_model.k != model.k {
        return Err(Error::Shape(format!(
            "age model has {} coefficients but the loading has {} networks",
            age_model.k, model.k
        )));
    }
    cohort
        .subjects
        .par_iter()
        .map(|s| {
            let k_mat = match &s.covariance {
                Some(k) => k.clone(),
                None => compute_covariance(s)?,
            };
            let cov = SubjectCovariance::new(s.subject_id.clone(), k_mat, s.n_obs());
            let est = estimate_unseen(&model.loading, &cov)?.estimate;
            let predicted_age = predict_age(age_model, &est.clamped_activities)?;
            Ok(Prediction {
                subject_id: s.subject_id.clone(),
                predicted_age,
                age: s.age,
                activities: est.clamped_activities,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutcome {
    pub report: EvalReport,
    pub predictions: Vec<Prediction>,
}

/// Evaluate a frozen model on a cohort it has never seen.
pub fn transfer_evaluate(
    model: &FittedModel,
    age_model: &AgeModel,
    unseen: &CohortDataset,
    settings: BootstrapSettings,
    seed: u64,
) -> Result<TransferOutcome> {
    if let Some(s) = unseen.subjects.iter().find(|s| s.age.is_none()) {
        return Err(Error::Validation(format!(
            "subject {} has no age; transfer evaluation needs every age",
            s.subject_id
        )));
    }
    let predictions = predict_cohort(model, age_model, unseen)?;
    let pred: Vec<f64> = predictions.iter().map(|p| p.predicted_age).collect();
    let ages: Vec<f64> = predictions.iter().map(|p| p.age.unwrap_or(f64::NAN)).collect();
    let report = bootstrap_mae(&pred, &ages, settings.subset_size, settings.n_bootstrap, seed)?;
    Ok(TransferOutcome {
        report,
        predictions,
    })
}

/// One row of the results ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub run_id: String,
    pub regime: String,
    pub k: usize,
    pub dataset: String,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub seed: u64,
}

/// Append a row to the CSV ledger at `path`, writing the header for a new file.
/// The file is rewritten through a temporary file and renamed into place.
pub fn append_ledger(path: &Path, row: &LedgerRow) -> Result<()> {
    let existing = if path.is_file() {
        std::fs::read(path)?
    } else {
        Vec::new()
    };
    let mut buf = Vec::new();
    {
        let mut w = csv::WriterBuilder::new()
            .has_headers(existing.is_empty())
            .from_writer(&mut buf);
        w.serialize(row)?;
        w.flush()?;
    }
    let mut all = existing;
    all.extend_from_slice(&buf);
    crate::io::atomic_write(path, &all)
}
