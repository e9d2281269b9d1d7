//! Versioned JSON representation of a fitted model.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{
    ActivitySource, FittedModel, LoadingMatrix, Noise, OptimizerState, Regime, SubjectFactors,
};
use crate::error::{Error, Result};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub activities: Vec<f64>,
    pub noise: Noise,
    pub n_obs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMetadata {
    pub iterations: usize,
    pub final_objective: f64,
    pub constraint_violation: f64,
    pub converged: bool,
    pub step_size: f64,
    pub penalty_weight: f64,
    /// Γ, row-major k×k.
    pub lagrange_multipliers: Vec<f64>,
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModelDocument {
    pub schema_version: u32,
    pub regime: Regime,
    pub k: usize,
    pub p: usize,
    /// W, row-major p×k.
    pub loading: Vec<f64>,
    pub activity_source: ActivitySource,
    pub subjects: BTreeMap<String, SubjectEntry>,
    pub optimizer: OptimizerMetadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl From<&FittedModel> for FittedModelDocument {
    fn from(m: &FittedModel) -> Self {
        let s = &m.optimizer_state;
        Self {
            schema_version: MODEL_SCHEMA_VERSION,
            regime: m.regime(),
            k: m.k,
            p: m.p(),
            loading: row_major(&m.loading.values),
            activity_source: m.activity_source,
            subjects: m
                .factors
                .iter()
                .map(|(id, f)| {
                    (
                        id.clone(),
                        SubjectEntry {
                            activities: f.activities.clone(),
                            noise: f.noise.clone(),
                            n_obs: m.n_obs.get(id).copied().unwrap_or(0),
                        },
                    )
                })
                .collect(),
            optimizer: OptimizerMetadata {
                iterations: s.iteration,
                final_objective: s.final_objective(),
                constraint_violation: s.constraint_violation,
                converged: s.converged,
                step_size: s.step_size,
                penalty_weight: s.penalty_weight,
                lagrange_multipliers: row_major(&s.lagrange_multipliers),
                objective_trace: s.objective_trace.clone(),
            },
            provenance: None,
        }
    }
}

impl FittedModelDocument {
    pub fn into_model(self) -> Result<FittedModel> {
        if self.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: MODEL_SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        let (p, k) = (self.p, self.k);
        if self.loading.len() != p * k {
            return Err(Error::Shape(format!(
                "loading has {} entries, expected {p}x{k}",
                self.loading.len()
            )));
        }
        if self.optimizer.lagrange_multipliers.len() != k * k {
            return Err(Error::Shape("multiplier matrix is not k×k".into()));
        }
        let mut factors = BTreeMap::new();
        let mut n_obs = BTreeMap::new();
        for (id, e) in self.subjects {
            if e.activities.len() != k {
                return Err(Error::Shape(format!("subject {id} has the wrong activity count")));
            }
            factors.insert(
                id.clone(),
                SubjectFactors {
                    activities: e.activities,
                    noise: e.noise,
                },
            );
            n_obs.insert(id, e.n_obs);
        }
        Ok(FittedModel {
            loading: LoadingMatrix::new(DMatrix::from_row_slice(p, k, &self.loading), self.regime),
            factors,
            k,
            optimizer_state: OptimizerState {
                lagrange_multipliers: DMatrix::from_row_slice(
                    k,
                    k,
                    &self.optimizer.lagrange_multipliers,
                ),
                penalty_weight: self.optimizer.penalty_weight,
                step_size: self.optimizer.step_size,
                iteration: self.optimizer.iterations,
                objective_trace: self.optimizer.objective_trace,
                constraint_violation: self.optimizer.constraint_violation,
                converged: self.optimizer.converged,
            },
            n_obs,
            activity_source: self.activity_source,
        })
    }
}

impl FittedModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&FittedModelDocument::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        peek_schema_version(s)?;
        serde_json::from_str::<FittedModelDocument>(s)?.into_model()
    }
}

/// Reject documents from another schema version before full deserialization.
pub(crate) fn peek_schema_version(s: &str) -> Result<()> {
    #[derive(Deserialize)]
    struct Peek {
        schema_version: u32,
    }
    let peek: Peek = serde_json::from_str(s)?;
    if peek.schema_version != MODEL_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            expected: MODEL_SCHEMA_VERSION,
            found: peek.schema_version,
        });
    }
    Ok(())
}
