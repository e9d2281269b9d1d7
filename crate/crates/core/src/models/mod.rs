//! Shared-loading multi-subject covariance models.
//!
//! Every subject `i` is modelled as `Σᵢ = W Gᵢ Wᵀ + noiseᵢ`, with `W` (p×k)
//! shared across the cohort, `Gᵢ` diagonal and non-negative, and the noise
//! either isotropic (`vᵢ I`) or, for factor analysis, diagonal.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod fit;
mod io;
mod likelihood;
mod mcf;
mod select;

pub use fit::{fit, fit_from, fit_subject_factors, HyperParams};
pub use io::{FittedModelDocument, MODEL_SCHEMA_VERSION};
pub use likelihood::{
    grad_activities, grad_loading, log_likelihood, subject_log_likelihood, WoodburyInverse,
};
pub use mcf::{mcf_gradient, mcf_objective};
pub use select::{select_k, CandidateResult, Selection};

/// Floor applied to noise variances and optimizer activities.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Constraint regime for the shared loading matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Fa,
    Pca,
    Nnpca,
    Mcf,
    Mha,
}

impl Regime {
    pub const ALL: [Regime; 5] = [
        Regime::Fa,
        Regime::Pca,
        Regime::Nnpca,
        Regime::Mcf,
        Regime::Mha,
    ];

    /// `WᵀW = I` enforced through the augmented Lagrangian.
    pub fn orthonormal(self) -> bool {
        matches!(self, Regime::Pca | Regime::Mcf | Regime::Mha)
    }

    /// `W ≥ 0` enforced by projection.
    pub fn nonnegative(self) -> bool {
        matches!(self, Regime::Nnpca | Regime::Mcf | Regime::Mha)
    }

    /// Whether `W` is fitted by maximum likelihood (everything but MCF).
    pub fn likelihood_based(self) -> bool {
        !matches!(self, Regime::Mcf)
    }

    pub fn per_dimension_noise(self) -> bool {
        matches!(self, Regime::Fa)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Fa => "fa",
            Regime::Pca => "pca",
            Regime::Nnpca => "nnpca",
            Regime::Mcf => "mcf",
            Regime::Mha => "mha",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fa" => Ok(Regime::Fa),
            "pca" => Ok(Regime::Pca),
            "nnpca" => Ok(Regime::Nnpca),
            "mcf" => Ok(Regime::Mcf),
            "mha" => Ok(Regime::Mha),
            other => Err(Error::Config(format!(
                "unknown regime `{other}` (expected fa, pca, nnpca, mcf or mha)"
            ))),
        }
    }
}

/// The shared p×k loading matrix together with its constraint regime.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingMatrix {
    pub values: DMatrix<f64>,
    pub regime: Regime,
}

impl LoadingMatrix {
    pub fn new(values: DMatrix<f64>, regime: Regime) -> Self {
        Self { values, regime }
    }

    pub fn p(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }
}

/// Observation noise: one variance for isotropic regimes, one per region for FA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Noise {
    Isotropic(f64),
    Diagonal(Vec<f64>),
}

impl Noise {
    /// Expand to a length-`p` vector of variances.
    pub fn diagonal(&self, p: usize) -> DVector<f64> {
        match self {
            Noise::Isotropic(v) => DVector::from_element(p, *v),
            Noise::Diagonal(d) => DVector::from_column_slice(d),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Noise::Isotropic(v) => *v,
            Noise::Diagonal(d) => d.iter().sum::<f64>() / d.len().max(1) as f64,
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Noise::Isotropic(v) => std::slice::from_ref(v),
            Noise::Diagonal(d) => d,
        }
    }
}

/// Per-subject network activities (diagonal of `Gᵢ`) and noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectFactors {
    pub activities: Vec<f64>,
    pub noise: Noise,
}

impl SubjectFactors {
    pub fn isotropic(activities: Vec<f64>, noise: f64) -> Self {
        Self {
            activities,
            noise: Noise::Isotropic(noise),
        }
    }
}

/// A subject's sample covariance and the number of observations behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectCovariance {
    pub subject_id: String,
    pub covariance: DMatrix<f64>,
    pub n_obs: usize,
}

impl SubjectCovariance {
    pub fn new(subject_id: impl Into<String>, covariance: DMatrix<f64>, n_obs: usize) -> Self {
        Self {
            subject_id: subject_id.into(),
            covariance,
            n_obs,
        }
    }
}

/// Augmented-Lagrangian bookkeeping at the end of a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// Γ, k×k.
    pub lagrange_multipliers: DMatrix<f64>,
    /// δ.
    pub penalty_weight: f64,
    /// Last accepted step size η.
    pub step_size: f64,
    pub iteration: usize,
    pub objective_trace: Vec<f64>,
    pub constraint_violation: f64,
    pub converged: bool,
}

impl OptimizerState {
    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Where the per-subject activities stored in a fitted model came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivitySource {
    /// Values of Gᵢ at the optimizer's final iterate.
    Optimizer,
    /// Projection estimates `W_jᵀ K W_j − v` (MCF has no Gᵢ in its objective).
    Projection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub loading: LoadingMatrix,
    pub factors: BTreeMap<String, SubjectFactors>,
    pub k: usize,
    pub optimizer_state: OptimizerState,
    pub n_obs: BTreeMap<String, usize>,
    pub activity_source: ActivitySource,
}

impl FittedModel {
    pub fn regime(&self) -> Regime {
        self.loading.regime
    }

    pub fn p(&self) -> usize {
        self.loading.p()
    }

    /// Total log-likelihood of `covariances` under this loading with the given factors.
    pub fn log_likelihood(
        &self,
        covariances: &[SubjectCovariance],
        factors: &BTreeMap<String, SubjectFactors>,
    ) -> Result<f64> {
        log_likelihood(&self.loading.values, covariances, factors)
    }

    /// Training-subject activity matrix (rows follow `ids`).
    pub fn activity_matrix(&self, ids: &[String]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(ids.len(), self.k);
        for (r, id) in ids.iter().enumerate() {
            let f = self
                .factors
                .get(id)
                .ok_or_else(|| Error::Validation(format!("no factors for subject {id}")))?;
            for (c, g) in f.activities.iter().enumerate() {
                m[(r, c)] = g.max(0.0);
            }
        }
        Ok(m)
    }
}
