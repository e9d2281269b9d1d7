//! Python bindings for the `brainage` library.
//!
//! Matrices cross the boundary as lists of rows (`list[list[float]]`).
//! Configuration and validation failures raise `ValueError`; numerical
//! failures raise `ArithmeticError`.

use std::collections::BTreeMap;

use brainage::agereg::{self, AgeModel as CoreAgeModel};
use brainage::data::Split;
use brainage::models::{self, HyperParams, LoadingMatrix, Regime, SubjectCovariance};
use brainage::synth::{self, SynthConfig};
use brainage::Error;
use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        3 => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged matrix: rows differ in length"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn parse_regime(regime: &str) -> PyResult<Regime> {
    regime.parse().map_err(to_py)
}

/// A fitted shared-loading model.
#[pyclass(name = "FittedModel", module = "brainage")]
pub struct PyFittedModel {
    inner: models::FittedModel,
}

#[pymethods]
impl PyFittedModel {
    #[getter]
    fn regime(&self) -> String {
        self.inner.regime().to_string()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    /// Loading matrix W as a list of `p` rows.
    #[getter]
    fn loading(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.loading.values)
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.optimizer_state.converged
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.optimizer_state.iteration
    }

    #[getter]
    fn constraint_violation(&self) -> f64 {
        self.inner.optimizer_state.constraint_violation
    }

    /// Per-subject activities of the training cohort.
    fn activities(&self) -> BTreeMap<String, Vec<f64>> {
        self.inner
            .factors
            .iter()
            .map(|(id, f)| (id.clone(), f.activities.clone()))
            .collect()
    }

    /// Mean noise variance per training subject.
    fn noise(&self) -> BTreeMap<String, f64> {
        self.inner
            .factors
            .iter()
            .map(|(id, f)| (id.clone(), f.noise.mean()))
            .collect()
    }

    /// `(noise, activities, clamped activities)` for an unseen covariance.
    fn estimate(&self, covariance: Vec<Vec<f64>>, n_obs: usize) -> PyResult<(f64, Vec<f64>, Vec<f64>)> {
        let cov = SubjectCovariance::new("subject", to_matrix(&covariance)?, n_obs);
        let e = brainage::activity::estimate_unseen(&self.inner.loading, &cov)
            .map_err(to_py)?
            .estimate;
        Ok((e.noise, e.activities, e.clamped_activities))
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: models::FittedModel::from_json(text).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "FittedModel(regime={}, p={}, k={}, converged={})",
            self.inner.regime(),
            self.inner.p(),
            self.inner.k,
            self.inner.optimizer_state.converged
        )
    }
}

/// Fit the shared loading under `regime` ("fa", "pca", "nnpca", "mcf", "mha").
///
/// `covariances` is a list of `p × p` matrices, `n_obs` the matching number
/// of time points, `ids` optional subject identifiers.
#[pyfunction]
#[pyo3(signature = (regime, k, covariances, n_obs, ids=None, max_iter=None, tolerance=None))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    regime: &str,
    k: usize,
    covariances: Vec<Vec<Vec<f64>>>,
    n_obs: Vec<usize>,
    ids: Option<Vec<String>>,
    max_iter: Option<usize>,
    tolerance: Option<f64>,
) -> PyResult<PyFittedModel> {
    let regime = parse_regime(regime)?;
    if n_obs.len() != covariances.len() {
        return Err(PyValueError::new_err("n_obs must have one entry per covariance"));
    }
    let ids = ids.unwrap_or_else(|| (0..covariances.len()).map(|i| format!("subject-{i}")).collect());
    if ids.len() != covariances.len() {
        return Err(PyValueError::new_err("ids must have one entry per covariance"));
    }
    let covs = covariances
        .iter()
        .zip(&n_obs)
        .zip(&ids)
        .map(|((c, &n), id)| Ok(SubjectCovariance::new(id.clone(), to_matrix(c)?, n)))
        .collect::<PyResult<Vec<_>>>()?;
    let mut hyper = HyperParams::default();
    if let Some(m) = max_iter {
        hyper.max_iter = m;
    }
    if let Some(t) = tolerance {
        hyper.tolerance = t;
    }
    let inner = py
        .detach(|| models::fit(regime, k, &covs, &hyper))
        .map_err(to_py)?;
    Ok(PyFittedModel { inner })
}

/// Random non-negative orthonormal `p × k` loading (one nonzero per row).
#[pyfunction]
fn sample_loading(p: usize, k: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&synth::sample_loading(p, k, seed).map_err(to_py)?.values))
}

/// A synthetic cohort drawn from the shared-loading model.
#[pyclass(name = "SynthCohort", module = "brainage", get_all)]
pub struct PySynthCohort {
    loading: Vec<Vec<f64>>,
    beta: Vec<f64>,
    train_ids: Vec<String>,
    train_covariances: Vec<Vec<Vec<f64>>>,
    train_ages: Vec<f64>,
    test_ids: Vec<String>,
    test_covariances: Vec<Vec<Vec<f64>>>,
    test_ages: Vec<f64>,
    n_obs: usize,
}

#[pyfunction]
#[pyo3(signature = (p=50, k=5, n_subjects=25, n_test_subjects=100, n_obs=100, seed=0))]
fn sample_cohort(
    py: Python<'_>,
    p: usize,
    k: usize,
    n_subjects: usize,
    n_test_subjects: usize,
    n_obs: usize,
    seed: u64,
) -> PyResult<PySynthCohort> {
    let cfg = SynthConfig {
        p,
        k,
        n_subjects,
        n_test_subjects,
        n_obs,
        seed,
        ..SynthConfig::default()
    };
    let cohort = py.detach(|| synth::sample_cohort(&cfg)).map_err(to_py)?;
    let part = |split: Split| {
        let covs = cohort.covariances(split);
        let ids: Vec<String> = covs.iter().map(|c| c.subject_id.clone()).collect();
        let ages: Vec<f64> = ids
            .iter()
            .map(|id| cohort.subjects.get(id).and_then(|s| s.age).unwrap_or(f64::NAN))
            .collect();
        let mats = covs.iter().map(|c| to_rows(&c.covariance)).collect();
        (ids, mats, ages)
    };
    let (train_ids, train_covariances, train_ages) = part(Split::Train);
    let (test_ids, test_covariances, test_ages) = part(Split::Test);
    Ok(PySynthCohort {
        loading: to_rows(&cohort.ground_truth_loading.values),
        beta: cohort.ground_truth_beta.clone(),
        train_ids,
        train_covariances,
        train_ages,
        test_ids,
        test_covariances,
        test_ages,
        n_obs,
    })
}

/// Squared Frobenius distance after optimal column matching. Sign flips are
/// allowed when `estimate_regime` is unconstrained ("fa" or "pca").
#[pyfunction]
#[pyo3(signature = (w_true, w_hat, estimate_regime="mha"))]
fn recovery_error(w_true: Vec<Vec<f64>>, w_hat: Vec<Vec<f64>>, estimate_regime: &str) -> PyResult<f64> {
    let a = LoadingMatrix::new(to_matrix(&w_true)?, Regime::Mha);
    let b = LoadingMatrix::new(to_matrix(&w_hat)?, parse_regime(estimate_regime)?);
    synth::recovery_error(&a, &b).map_err(to_py)
}

/// Isotropic noise of `sigma` outside the span of an orthonormal loading.
#[pyfunction]
fn estimate_noise(loading: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>) -> PyResult<f64> {
    let w = LoadingMatrix::new(to_matrix(&loading)?, Regime::Mha);
    brainage::activity::estimate_noise(&w, &to_matrix(&sigma)?).map_err(to_py)
}

/// Raw (possibly negative) activities `WⱼᵀΣWⱼ − noise`.
#[pyfunction]
fn estimate_activities(loading: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>, noise: f64) -> PyResult<Vec<f64>> {
    let w = LoadingMatrix::new(to_matrix(&loading)?, Regime::Mha);
    Ok(brainage::activity::estimate_activities(&w, &to_matrix(&sigma)?, noise)
        .map_err(to_py)?
        .activities)
}

/// Linear age model `β₀ + βᵀg`.
#[pyclass(name = "AgeModel", module = "brainage")]
pub struct PyAgeModel {
    inner: CoreAgeModel,
}

#[pymethods]
impl PyAgeModel {
    #[getter]
    fn coefficients(&self) -> Vec<f64> {
        self.inner.coefficients.clone()
    }

    #[getter]
    fn intercept(&self) -> Option<f64> {
        self.inner.intercept
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    fn predict(&self, activities: Vec<f64>) -> PyResult<f64> {
        agereg::predict_age(&self.inner, &activities).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "AgeModel(coefficients={:?}, intercept={:?})",
            self.inner.coefficients, self.inner.intercept
        )
    }
}

/// Least-squares age model on a subjects × networks feature matrix.
#[pyfunction]
#[pyo3(signature = (features, ages, use_intercept=true))]
fn fit_age_model(features: Vec<Vec<f64>>, ages: Vec<f64>, use_intercept: bool) -> PyResult<PyAgeModel> {
    let inner = agereg::fit_age_model(&to_matrix(&features)?, &ages, use_intercept).map_err(to_py)?;
    Ok(PyAgeModel { inner })
}

/// `(mean, std)` of the MAE over `n_bootstrap` random sub-cohorts.
#[pyfunction]
#[pyo3(signature = (predictions, ages, subset_size=30, n_bootstrap=1000, seed=0))]
fn bootstrap_mae(
    predictions: Vec<f64>,
    ages: Vec<f64>,
    subset_size: usize,
    n_bootstrap: usize,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let r = agereg::bootstrap_mae(&predictions, &ages, subset_size, n_bootstrap, seed).map_err(to_py)?;
    Ok((r.mae_mean, r.mae_std))
}

#[pymodule]
#[pyo3(name = "brainage")]
fn brainage_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFittedModel>()?;
    m.add_class::<PyAgeModel>()?;
    m.add_class::<PySynthCohort>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(sample_loading, m)?)?;
    m.add_function(wrap_pyfunction!(sample_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(recovery_error, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_noise, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_activities, m)?)?;
    m.add_function(wrap_pyfunction!(fit_age_model, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_mae, m)?)?;
    Ok(())
}
