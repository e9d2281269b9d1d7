//! Synthetic cohorts with a known clustered loading, loading-recovery
//! scoring, and the sample-size studies built on them.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activity::estimate_unseen;
use crate::agereg::{fit_age_model, mean_absolute_error, predict_age};
use crate::assignment::min_cost_assignment;
use crate::data::{compute_covariance, CohortDataset, Split, SubjectRecord};
use crate::error::{Error, Result};
use crate::models::{fit, HyperParams, LoadingMatrix, Regime, SubjectCovariance};
use crate::rng::{stream, Stage};

/// Test subjects draw from a separate index range so the held-out set does
/// not change when the number of training subjects does.
const TEST_SUBJECT_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Regions.
    pub p: usize,
    /// Networks.
    pub k: usize,
    /// Training subjects (N).
    pub n_subjects: usize,
    /// Held-out subjects used to score age prediction.
    pub n_test_subjects: usize,
    /// Observations per subject (n).
    pub n_obs: usize,
    pub activity_mean: f64,
    pub activity_std: f64,
    pub beta_low: f64,
    pub beta_high: f64,
    /// Observation noise variance v for every subject.
    pub subject_noise: f64,
    /// Age noise variance ε.
    pub age_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            p: 50,
            k: 5,
            n_subjects: 25,
            n_test_subjects: 100,
            n_obs: 100,
            activity_mean: 2.5,
            activity_std: 1.0,
            beta_low: 0.0,
            beta_high: 10.0,
            subject_noise: 1.0,
            age_noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k >= self.p {
            return Err(Error::Config(format!(
                "synthetic k = {} must satisfy 0 < k < p = {}",
                self.k, self.p
            )));
        }
        if self.n_subjects == 0 {
            return Err(Error::Config("n_subjects must be at least 1".into()));
        }
        if self.n_obs < 2 {
            return Err(Error::Config("n_obs must be at least 2".into()));
        }
        for (name, v) in [
            ("activity_std", self.activity_std),
            ("subject_noise", self.subject_noise),
            ("age_noise", self.age_noise),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.beta_high > self.beta_low) {
            return Err(Error::Config("beta range must be non-empty".into()));
        }
        Ok(())
    }
}

/// Dense U[0,1] draw, keep the row maxima (ties to the lowest column), then
/// normalize columns. Redrawn if a column ends up empty.
pub fn sample_loading(p: usize, k: usize, seed: u64) -> Result<LoadingMatrix> {
    if k == 0 || k >= p {
        return Err(Error::Config(format!("need 0 < k < p, got k = {k}, p = {p}")));
    }
    let unif = Uniform::new(0.0, 1.0).expect("valid range");
    for attempt in 0..100u64 {
        let mut rng = stream(seed, Stage::Loading, attempt);
        let dense = DMatrix::from_fn(p, k, |_, _| unif.sample(&mut rng));
        let mut w = DMatrix::zeros(p, k);
        for i in 0..p {
            let mut best = 0;
            for j in 1..k {
                if dense[(i, j)] > dense[(i, best)] {
                    best = j;
                }
            }
            w[(i, best)] = dense[(i, best)];
        }
        if (0..k).any(|j| w.column(j).iter().all(|v| *v == 0.0)) {
            continue;
        }
        for j in 0..k {
            let n = w.column(j).norm();
            w.column_mut(j).unscale_mut(n);
        }
        return Ok(LoadingMatrix::new(w, Regime::Mha));
    }
    Err(Error::Numeric {
        subject: "<loading>".into(),
        message: "could not draw a loading without empty columns in 100 attempts".into(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub ground_truth_loading: LoadingMatrix,
    pub ground_truth_beta: Vec<f64>,
    /// Training subjects are labelled `Train`, held-out ones `Test`.
    pub subjects: CohortDataset,
    pub true_activities: BTreeMap<String, Vec<f64>>,
    pub true_noise: BTreeMap<String, f64>,
}

impl SynthCohort {
    pub fn covariances(&self, split: Split) -> Vec<SubjectCovariance> {
        self.subjects
            .subjects_in(split)
            .map(|s| {
                SubjectCovariance::new(
                    s.subject_id.clone(),
                    s.covariance.clone().expect("synthetic covariances are precomputed"),
                    s.n_obs(),
                )
            })
            .collect()
    }
}

fn positive_normal<R: Rng>(rng: &mut R, dist: &Normal<f64>) -> f64 {
    loop {
        let x = dist.sample(rng);
        if x > 0.0 {
            return x;
        }
    }
}

fn sample_subject(
    cfg: &SynthConfig,
    w: &DMatrix<f64>,
    beta: &[f64],
    id: String,
    stream_index: u64,
) -> Result<(SubjectRecord, Vec<f64>)> {
    let mut rng = stream(cfg.seed, Stage::Subject, stream_index);
    let g_dist = Normal::new(cfg.activity_mean, cfg.activity_std)
        .map_err(|e| Error::Config(e.to_string()))?;
    let g: Vec<f64> = (0..cfg.k).map(|_| positive_normal(&mut rng, &g_dist)).collect();
    let sigma = w * DMatrix::from_diagonal(&DVector::from_column_slice(&g)) * w.transpose()
        + DMatrix::identity(cfg.p, cfg.p) * cfg.subject_noise;
    let chol = sigma.cholesky().ok_or_else(|| Error::Numeric {
        subject: id.clone(),
        message: "synthetic covariance is not positive definite".into(),
    })?;
    let z = DMatrix::<f64>::from_fn(cfg.n_obs, cfg.p, |_, _| StandardNormal.sample(&mut rng));
    let x = z * chol.l().transpose();
    let mean_age: f64 = beta.iter().zip(&g).map(|(b, gj)| b * gj).sum();
    let age = Normal::new(mean_age, cfg.age_noise.sqrt())
        .map_err(|e| Error::Config(e.to_string()))?
        .sample(&mut rng);
    let mut rec = SubjectRecord::new(id, x, Some(age));
    rec.covariance = Some(compute_covariance(&rec)?);
    Ok((rec, g))
}

/// Draw a full synthetic cohort. Deterministic given `config.seed`.
pub fn sample_cohort(config: &SynthConfig) -> Result<SynthCohort> {
    config.validate()?;
    let loading = sample_loading(config.p, config.k, config.seed)?;
    let mut rng = stream(config.seed, Stage::Beta, 0);
    let b_dist = Uniform::new(config.beta_low, config.beta_high)
        .map_err(|e| Error::Config(e.to_string()))?;
    let beta: Vec<f64> = (0..config.k).map(|_| b_dist.sample(&mut rng)).collect();

    let plan: Vec<(String, u64, Split)> = (0..config.n_subjects)
        .map(|i| (format!("train-{i:04}"), i as u64, Split::Train))
        .chain((0..config.n_test_subjects).map(|j| {
            (
                format!("test-{j:04}"),
                TEST_SUBJECT_OFFSET + j as u64,
                Split::Test,
            )
        }))
        .collect();
    let drawn = plan
        .par_iter()
        .map(|(id, idx, _)| sample_subject(config, &loading.values, &beta, id.clone(), *idx))
        .collect::<Result<Vec<_>>>()?;

    let mut true_activities = BTreeMap::new();
    let mut true_noise = BTreeMap::new();
    let mut records = Vec::with_capacity(drawn.len());
    for (rec, g) in drawn {
        true_activities.insert(rec.subject_id.clone(), g);
        true_noise.insert(rec.subject_id.clone(), config.subject_noise);
        records.push(rec);
    }
    let mut subjects = CohortDataset::new(records)?;
    subjects.split_labels = plan.into_iter().map(|(id, _, s)| (id, s)).collect();
    Ok(SynthCohort {
        ground_truth_loading: loading,
        ground_truth_beta: beta,
        subjects,
        true_activities,
        true_noise,
    })
}

/// Squared Frobenius distance after the best column permutation (and, for
/// FA/PCA estimates, per-column sign).
pub fn recovery_error(w_true: &LoadingMatrix, w_hat: &LoadingMatrix) -> Result<f64> {
    let (a, b) = (&w_true.values, &w_hat.values);
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "loadings differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let allow_sign = !w_hat.regime.nonnegative() || !w_true.regime.nonnegative();
    let k = a.ncols();
    let cost = DMatrix::from_fn(k, k, |i, j| {
        let plus = (a.column(i) - b.column(j)).norm_squared();
        if allow_sign {
            plus.min((a.column(i) + b.column(j)).norm_squared())
        } else {
            plus
        }
    });
    let assignment = min_cost_assignment(&cost);
    Ok(assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[(i, j)])
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StudyAxis {
    /// Vary observations per subject with the training cohort size fixed.
    #[serde(rename = "vary_n")]
    VaryObservations,
    /// Vary the number of training subjects with observations fixed.
    #[serde(rename = "vary_N")]
    VarySubjects,
}

impl std::str::FromStr for StudyAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vary_n" => Ok(StudyAxis::VaryObservations),
            "vary_N" => Ok(StudyAxis::VarySubjects),
            other => Err(Error::Config(format!(
                "unknown study axis `{other}` (expected vary_n or vary_N)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPlan {
    pub axis: StudyAxis,
    pub grid: Vec<usize>,
    pub regimes: Vec<Regime>,
    pub repeats: usize,
    pub base: SynthConfig,
}

impl StudyPlan {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config("study grid is empty".into()));
        }
        if self.regimes.is_empty() {
            return Err(Error::Config("no regimes requested".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        self.base.validate()?;
        for &v in &self.grid {
            self.config_for(v, 0).validate()?;
        }
        Ok(())
    }

    /// Cohort configuration for one grid value and repeat.
    pub fn config_for(&self, axis_value: usize, repeat: usize) -> SynthConfig {
        let mut cfg = self.base.clone();
        match self.axis {
            StudyAxis::VaryObservations => cfg.n_obs = axis_value,
            StudyAxis::VarySubjects => cfg.n_subjects = axis_value,
        }
        cfg.seed = self.base.seed.wrapping_add(repeat as u64);
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub axis_value: usize,
    pub regime: Regime,
    pub seed: u64,
    pub recovery_error: Option<f64>,
    pub mae: Option<f64>,
    pub status: String,
}

/// Fit one regime on a synthetic cohort and score loading recovery and
/// held-out age MAE.
pub fn evaluate_regime(
    cohort: &SynthCohort,
    regime: Regime,
    hyper: &HyperParams,
) -> Result<(f64, f64)> {
    let train = cohort.covariances(Split::Train);
    let k = cohort.ground_truth_loading.k();
    let model = fit(regime, k, &train, hyper)?;
    let rec = recovery_error(&cohort.ground_truth_loading, &model.loading)?;

    let ids: Vec<String> = train.iter().map(|c| c.subject_id.clone()).collect();
    let features = model.activity_matrix(&ids)?;
    let ages: Vec<f64> = cohort
        .subjects
        .subjects_in(Split::Train)
        .map(|s| s.age.expect("synthetic ages are always present"))
        .collect();
    let age_model = fit_age_model(&features, &ages, true)?;

    let test = cohort.covariances(Split::Test);
    if test.is_empty() {
        return Ok((rec, f64::NAN));
    }
    let mut predictions = Vec::with_capacity(test.len());
    let mut truth = Vec::with_capacity(test.len());
    for c in &test {
        let est = estimate_unseen(&model.loading, c)?;
        predictions.push(predict_age(&age_model, &est.estimate.clamped_activities)?);
        truth.push(
            cohort
                .subjects
                .get(&c.subject_id)
                .and_then(|s| s.age)
                .expect("synthetic ages are always present"),
        );
    }
    Ok((rec, mean_absolute_error(&predictions, &truth)))
}

/// Run every `(grid value, repeat)` cell for every regime. Rows come back
/// ordered by `(axis_value, regime, seed)` regardless of scheduling.
pub fn run_study(plan: &StudyPlan, hyper: &HyperParams) -> Result<Vec<StudyRow>> {
    plan.validate()?;
    hyper.validate()?;
    let cells: Vec<(usize, usize)> = plan
        .grid
        .iter()
        .flat_map(|&v| (0..plan.repeats).map(move |r| (v, r)))
        .collect();
    let nested = cells
        .par_iter()
        .map(|&(value, repeat)| {
            let cfg = plan.config_for(value, repeat);
            let cohort = sample_cohort(&cfg)?;
            Ok(plan
                .regimes
                .iter()
                .map(|&regime| match evaluate_regime(&cohort, regime, hyper) {
                    Ok((rec, mae)) => StudyRow {
                        axis_value: value,
                        regime,
                        seed: cfg.seed,
                        recovery_error: Some(rec),
                        mae: mae.is_finite().then_some(mae),
                        status: "ok".into(),
                    },
                    Err(e) => {
                        warn!("{regime} at {value} (seed {}) failed: {e}", cfg.seed);
                        StudyRow {
                            axis_value: value,
                            regime,
                            seed: cfg.seed,
                            recovery_error: None,
                            mae: None,
                            status: format!("failed: {e}"),
                        }
                    }
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<StudyRow> = nested.into_iter().flatten().collect();
    rows.sort_by(|a, b| {
        (a.axis_value, a.regime, a.seed).cmp(&(b.axis_value, b.regime, b.seed))
    });
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub axis_value: usize,
    pub regime: Regime,
    pub n_ok: usize,
    pub n_failed: usize,
    pub recovery_median: Option<f64>,
    pub recovery_q1: Option<f64>,
    pub recovery_q3: Option<f64>,
    pub mae_median: Option<f64>,
    pub mae_q1: Option<f64>,
    pub mae_q3: Option<f64>,
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

/// Median and inter-quartile range per `(axis_value, regime)` cell.
pub fn summarize(rows: &[StudyRow]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<(usize, Regime), Vec<&StudyRow>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.axis_value, r.regime)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|((axis_value, regime), rs)| {
            let rec: Vec<f64> = rs.iter().filter_map(|r| r.recovery_error).collect();
            let mae: Vec<f64> = rs.iter().filter_map(|r| r.mae).collect();
            let n_ok = rs.iter().filter(|r| r.status == "ok").count();
            SummaryRow {
                axis_value,
                regime,
                n_ok,
                n_failed: rs.len() - n_ok,
                recovery_median: median(&rec),
                recovery_q1: quantile(&rec, 0.25),
                recovery_q3: quantile(&rec, 0.75),
                mae_median: median(&mae),
                mae_q1: quantile(&mae, 0.25),
                mae_q3: quantile(&mae, 0.75),
            }
        })
        .collect()
}

/// Serialize rows as CSV into memory.
pub fn to_csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(buf)
}

pub fn write_rows_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    crate::io::atomic_write(path, &to_csv_bytes(rows)?)
}
