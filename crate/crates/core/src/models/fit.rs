//! Block-coordinate ascent for the shared loading model.
//!
//! Each outer iteration takes one projected-gradient step on `W` against the
//! augmented objective
//!
//! ```text
//! F(W) = f(W) − (δ/2)‖WᵀW − I‖²_F − tr(Γᵀ(WᵀW − I))
//! ```
//!
//! (the penalty terms only for orthonormal regimes), refreshes the noise in
//! closed form, takes preconditioned projected ascent steps on each subject's
//! activities, and every few iterations moves the multipliers
//! `Γ ← Γ + δ(WᵀW − I)`. `f` is the log-likelihood divided by the total
//! number of observations, or the MCF score divided by `Σᵢ‖Kᵢ‖²_F`, so that
//! the default penalty weight is meaningful regardless of cohort size.

use std::collections::BTreeMap;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::likelihood::{
    grad_activities, grad_noise_diagonal, subject_grad_loading, subject_log_likelihood,
};
use super::mcf::{mcf_gradient, mcf_objective};
use super::{
    ActivitySource, FittedModel, LoadingMatrix, Noise, OptimizerState, Regime, SubjectCovariance,
    SubjectFactors, VARIANCE_FLOOR,
};
use crate::error::{Error, Result};
use crate::linalg::{
    check_covariance, fix_column_signs, orthonormality_violation, pooled_covariance,
    top_eigenvectors,
};

/// Optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// η used for the first line search.
    pub initial_step: f64,
    /// Upper bound for η; each line search starts at twice the last accepted η.
    pub max_step: f64,
    pub max_halvings: usize,
    /// δ.
    pub penalty_weight: f64,
    /// Outer iterations between multiplier updates.
    pub multiplier_interval: usize,
    pub max_iter: usize,
    /// Relative change of the augmented objective over one outer iteration.
    pub tolerance: f64,
    /// Bound on ‖WᵀW − I‖_F required before stopping.
    pub constraint_tolerance: f64,
    /// Activity ascent steps per subject per outer iteration.
    pub activity_steps: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            initial_step: 1e-2,
            max_step: 1.0,
            max_halvings: 30,
            penalty_weight: 10.0,
            multiplier_interval: 10,
            max_iter: 5000,
            tolerance: 1e-6,
            constraint_tolerance: 1e-4,
            activity_steps: 3,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_step", self.initial_step),
            ("max_step", self.max_step),
            ("penalty_weight", self.penalty_weight),
            ("tolerance", self.tolerance),
            ("constraint_tolerance", self.constraint_tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_iter == 0 || self.multiplier_interval == 0 {
            return Err(Error::Config(
                "max_iter and multiplier_interval must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed data and settings for one fit.
pub(crate) struct Problem<'a> {
    pub regime: Regime,
    pub covs: &'a [SubjectCovariance],
    pub hyper: &'a HyperParams,
    scale: f64,
}

/// Mutable optimizer iterate.
#[derive(Debug, Clone)]
pub(crate) struct Iterate {
    pub w: DMatrix<f64>,
    pub factors: Vec<SubjectFactors>,
    pub gamma: DMatrix<f64>,
    pub step: f64,
}

impl<'a> Problem<'a> {
    pub fn new(regime: Regime, covs: &'a [SubjectCovariance], hyper: &'a HyperParams) -> Self {
        let scale = if regime.likelihood_based() {
            covs.iter().map(|c| c.n_obs as f64).sum::<f64>()
        } else {
            covs.iter()
                .map(|c| c.covariance.norm_squared())
                .sum::<f64>()
        };
        Self {
            regime,
            covs,
            hyper,
            scale: scale.max(f64::MIN_POSITIVE),
        }
    }

    fn base_value(&self, w: &DMatrix<f64>, factors: &[SubjectFactors]) -> Result<f64> {
        let total = if self.regime.likelihood_based() {
            let parts = self
                .covs
                .par_iter()
                .zip(factors.par_iter())
                .map(|(c, f)| subject_log_likelihood(w, c, f))
                .collect::<Result<Vec<_>>>()?;
            parts.into_iter().sum::<f64>()
        } else {
            mcf_objective(w, self.covs)?
        };
        Ok(total / self.scale)
    }

    fn base_gradient(&self, w: &DMatrix<f64>, factors: &[SubjectFactors]) -> Result<DMatrix<f64>> {
        let total = if self.regime.likelihood_based() {
            let parts = self
                .covs
                .par_iter()
                .zip(factors.par_iter())
                .map(|(c, f)| subject_grad_loading(w, c, f))
                .collect::<Result<Vec<_>>>()?;
            parts
                .into_iter()
                .fold(DMatrix::zeros(w.nrows(), w.ncols()), |acc, g| acc + g)
        } else {
            mcf_gradient(w, self.covs)?
        };
        Ok(total / self.scale)
    }

    fn constraint(w: &DMatrix<f64>) -> DMatrix<f64> {
        let mut c = w.tr_mul(w);
        for i in 0..c.nrows() {
            c[(i, i)] -= 1.0;
        }
        c
    }

    fn penalty(&self, w: &DMatrix<f64>, gamma: &DMatrix<f64>) -> f64 {
        if !self.regime.orthonormal() {
            return 0.0;
        }
        let c = Self::constraint(w);
        0.5 * self.hyper.penalty_weight * c.norm_squared() + gamma.dot(&c)
    }

    fn penalty_gradient(&self, w: &DMatrix<f64>, gamma: &DMatrix<f64>) -> DMatrix<f64> {
        let c = Self::constraint(w);
        w * (c * (2.0 * self.hyper.penalty_weight) + gamma + gamma.transpose())
    }

    /// Augmented objective at the current iterate (higher is better).
    pub fn augmented(&self, it: &Iterate) -> Result<f64> {
        self.augmented_at(&it.w, &it.factors, &it.gamma)
    }

    fn augmented_at(
        &self,
        w: &DMatrix<f64>,
        factors: &[SubjectFactors],
        gamma: &DMatrix<f64>,
    ) -> Result<f64> {
        Ok(self.base_value(w, factors)? - self.penalty(w, gamma))
    }

    fn project(&self, w: &mut DMatrix<f64>) {
        if self.regime.nonnegative() {
            w.apply(|x| *x = x.max(0.0));
        }
    }

    /// One projected-gradient step on `W` with backtracking.
    /// Returns `(value before, value after)`; the two are equal when no step is accepted.
    pub fn loading_step(&self, it: &mut Iterate) -> Result<(f64, f64)> {
        let before = self.augmented(it)?;
        let mut grad = self.base_gradient(&it.w, &it.factors)?;
        if self.regime.orthonormal() {
            grad -= self.penalty_gradient(&it.w, &it.gamma);
        }
        let mut eta = (2.0 * it.step).min(self.hyper.max_step);
        for _ in 0..=self.hyper.max_halvings {
            let mut candidate = &it.w + &grad * eta;
            self.project(&mut candidate);
            let moved = (&candidate - &it.w).norm_squared();
            if moved == 0.0 {
                break;
            }
            let value = self
                .augmented_at(&candidate, &it.factors, &it.gamma)
                .unwrap_or(f64::NEG_INFINITY);
            if value.is_finite() && value - before >= 1e-4 * moved / eta {
                it.w = candidate;
                it.step = eta;
                if !self.regime.orthonormal() {
                    normalize_columns(&mut it.w, &mut it.factors);
                }
                return Ok((before, value));
            }
            eta *= 0.5;
        }
        Ok((before, before))
    }

    /// Closed-form noise refresh followed by activity ascent, per subject.
    pub fn factor_step(&self, it: &mut Iterate) -> Result<()> {
        let w = &it.w;
        let steps = self.hyper.activity_steps;
        let regime = self.regime;
        let updated = self
            .covs
            .par_iter()
            .zip(it.factors.par_iter())
            .map(|(c, f)| {
                let mut f = f.clone();
                noise_update(regime, w, c, &mut f)?;
                activity_ascent(w, c, &mut f, steps)?;
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        it.factors = updated;
        Ok(())
    }

    pub fn update_multipliers(&self, it: &mut Iterate) {
        let c = Self::constraint(&it.w);
        it.gamma += c * self.hyper.penalty_weight;
    }
}

/// Rescale columns of `W` to unit norm and absorb the scale into the activities,
/// leaving every `Σᵢ` unchanged.
fn normalize_columns(w: &mut DMatrix<f64>, factors: &mut [SubjectFactors]) {
    let p = w.nrows();
    for j in 0..w.ncols() {
        let norm = w.column(j).norm();
        if norm > 1e-12 {
            w.column_mut(j).unscale_mut(norm);
            for f in factors.iter_mut() {
                f.activities[j] *= norm * norm;
            }
        } else {
            w.column_mut(j).fill(1.0 / (p as f64).sqrt());
            for f in factors.iter_mut() {
                f.activities[j] = VARIANCE_FLOOR;
            }
        }
    }
}

/// `tr((I − P_W) K) / (p − k)` with `P_W` the orthogonal projector onto span(W).
/// Equals `(tr K − tr(WᵀKW)) / (p − k)` for orthonormal `W`.
pub(crate) fn residual_noise(w: &DMatrix<f64>, k: &DMatrix<f64>) -> f64 {
    let p = w.nrows();
    let r = w.ncols();
    let wkw = w.tr_mul(&(k * w));
    let gram = w.tr_mul(w);
    let explained = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&wkw).trace(),
        None => wkw.trace(),
    };
    (k.trace() - explained) / (p - r) as f64
}

fn closed_form_noise(regime: Regime, w: &DMatrix<f64>, k: &DMatrix<f64>, g: &[f64]) -> Noise {
    if regime.per_dimension_noise() {
        let p = w.nrows();
        let psi = (0..p)
            .map(|l| {
                let explained: f64 = (0..w.ncols()).map(|j| g[j] * w[(l, j)].powi(2)).sum();
                (k[(l, l)] - explained).max(VARIANCE_FLOOR)
            })
            .collect();
        Noise::Diagonal(psi)
    } else {
        Noise::Isotropic(residual_noise(w, k).max(VARIANCE_FLOOR))
    }
}

/// Refresh one subject's noise without lowering its likelihood. The
/// closed-form residual estimate is tried first; it is exact only at a joint
/// optimum, so when it would lower the likelihood a preconditioned gradient
/// step (scaled by `(2/n)ψ²`, the exact Newton scaling for a lone variance)
/// is taken instead.
fn noise_update(
    regime: Regime,
    w: &DMatrix<f64>,
    cov: &SubjectCovariance,
    f: &mut SubjectFactors,
) -> Result<()> {
    let current = subject_log_likelihood(w, cov, f)?;
    let closed = SubjectFactors {
        activities: f.activities.clone(),
        noise: closed_form_noise(regime, w, &cov.covariance, &f.activities),
    };
    if let Ok(value) = subject_log_likelihood(w, cov, &closed) {
        if value >= current {
            *f = closed;
            return Ok(());
        }
    }
    let grad = grad_noise_diagonal(w, cov, f)?;
    let n = cov.n_obs as f64;
    let mut t = 1.0;
    for _ in 0..30 {
        let noise = match &f.noise {
            Noise::Isotropic(v) => {
                let p = w.nrows() as f64;
                let step = 2.0 / (n * p) * v * v * grad.sum();
                Noise::Isotropic((v + t * step).max(VARIANCE_FLOOR))
            }
            Noise::Diagonal(d) => Noise::Diagonal(
                d.iter()
                    .zip(grad.iter())
                    .map(|(psi, gr)| (psi + t * 2.0 / n * psi * psi * gr).max(VARIANCE_FLOOR))
                    .collect(),
            ),
        };
        if noise == f.noise {
            break;
        }
        let trial = SubjectFactors {
            activities: f.activities.clone(),
            noise,
        };
        if let Ok(value) = subject_log_likelihood(w, cov, &trial) {
            if value >= current {
                *f = trial;
                break;
            }
        }
        t *= 0.5;
    }
    Ok(())
}

/// Preconditioned projected ascent on one subject's activities with `W` and
/// noise fixed. The diagonal preconditioner `(2/n)(g_j + v̄)²` makes a unit
/// step land on the exact maximizer when `W` is orthonormal.
fn activity_ascent(
    w: &DMatrix<f64>,
    cov: &SubjectCovariance,
    f: &mut SubjectFactors,
    steps: usize,
) -> Result<()> {
    let n = cov.n_obs as f64;
    let vbar = f.noise.mean();
    let mut current = subject_log_likelihood(w, cov, f)?;
    for _ in 0..steps {
        let grad = grad_activities(w, cov, f)?;
        let dir: Vec<f64> = f
            .activities
            .iter()
            .zip(grad.iter())
            .map(|(g, d)| 2.0 / n * (g + vbar).powi(2) * d)
            .collect();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = SubjectFactors {
                activities: f
                    .activities
                    .iter()
                    .zip(&dir)
                    .map(|(g, d)| (g + t * d).max(VARIANCE_FLOOR))
                    .collect(),
                noise: f.noise.clone(),
            };
            if trial.activities == f.activities {
                break;
            }
            if let Ok(value) = subject_log_likelihood(w, cov, &trial) {
                if value >= current {
                    f.activities = trial.activities;
                    current = value;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(())
}

/// Nearest non-negative orthonormal loading to a spectral basis: rows are
/// clustered by direction (sign-invariant), each row keeps only its projection
/// onto its cluster's axis, then columns are normalized. The result has
/// exactly one nonzero per nonzero row.
pub(crate) fn cluster_projection(u: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, k) = u.shape();
    let rows: Vec<DVector<f64>> = (0..p).map(|l| u.row(l).transpose()).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.norm()).collect();

    // farthest-first seeding
    let mut centroids: Vec<DVector<f64>> = Vec::with_capacity(k);
    let first = (0..p)
        .max_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(b.cmp(&a)))
        .expect("non-empty loading");
    centroids.push(rows[first].normalize());
    while centroids.len() < k {
        let next = (0..p)
            .max_by(|&a, &b| {
                let score = |l: usize| {
                    let r = &rows[l];
                    let best = centroids
                        .iter()
                        .map(|c| c.dot(r).powi(2))
                        .fold(0.0, f64::max);
                    r.norm_squared() - best
                };
                score(a).total_cmp(&score(b)).then(b.cmp(&a))
            })
            .expect("non-empty loading");
        let r = &rows[next];
        if r.norm() > 0.0 {
            centroids.push(r.normalize());
        } else {
            let mut e = DVector::zeros(k);
            e[centroids.len()] = 1.0;
            centroids.push(e);
        }
    }

    let assign = |centroids: &[DVector<f64>]| -> Vec<usize> {
        rows.iter()
            .map(|r| {
                let mut best = 0;
                let mut best_val = f64::NEG_INFINITY;
                for (j, c) in centroids.iter().enumerate() {
                    let v = c.dot(r).abs();
                    if v > best_val {
                        best_val = v;
                        best = j;
                    }
                }
                best
            })
            .collect()
    };

    let mut labels = assign(&centroids);
    for _ in 0..50 {
        for (j, c) in centroids.iter_mut().enumerate() {
            let mut scatter = DMatrix::<f64>::zeros(k, k);
            for (l, r) in rows.iter().enumerate() {
                if labels[l] == j {
                    scatter += r * r.transpose();
                }
            }
            if scatter.norm() > 0.0 {
                let (v, _) = top_eigenvectors(&scatter, 1);
                *c = v.column(0).into_owned();
            }
        }
        let next = assign(&centroids);
        if next == labels {
            break;
        }
        labels = next;
    }

    let mut w = DMatrix::zeros(p, k);
    for l in 0..p {
        let j = labels[l];
        w[(l, j)] = centroids[j].dot(&rows[l]).abs();
    }
    // every column needs support
    for j in 0..k {
        if w.column(j).norm() > 0.0 {
            continue;
        }
        let mut counts = vec![0usize; k];
        for l in 0..p {
            if w.row(l).iter().any(|v| *v > 0.0) {
                counts[labels[l]] += 1;
            }
        }
        let donor = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap_or(0);
        let steal = (0..p)
            .filter(|&l| labels[l] == donor && w[(l, donor)] > 0.0)
            .min_by(|&a, &b| w[(a, donor)].total_cmp(&w[(b, donor)]));
        let l = steal.unwrap_or(j % p);
        w.row_mut(l).fill(0.0);
        w[(l, j)] = 1.0;
        labels[l] = j;
    }
    for j in 0..k {
        let n = w.column(j).norm();
        if n > 0.0 {
            w.column_mut(j).unscale_mut(n);
        }
    }
    w
}

fn initial_loading(regime: Regime, pooled: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let (mut u, _) = top_eigenvectors(pooled, k);
    match regime {
        Regime::Fa | Regime::Pca => {
            fix_column_signs(&mut u);
            u
        }
        Regime::Nnpca => {
            u.apply(|x| *x = x.abs());
            for j in 0..k {
                let n = u.column(j).norm();
                if n > 0.0 {
                    u.column_mut(j).unscale_mut(n);
                }
            }
            u
        }
        Regime::Mcf | Regime::Mha => cluster_projection(&u),
    }
}

/// Projection estimates of a subject's noise and activities given a loading.
pub(crate) fn projection_factors(regime: Regime, w: &DMatrix<f64>, k: &DMatrix<f64>) -> SubjectFactors {
    let v = residual_noise(w, k).max(VARIANCE_FLOOR);
    let kw = k * w;
    let activities: Vec<f64> = (0..w.ncols())
        .map(|j| (w.column(j).dot(&kw.column(j)) - v).max(VARIANCE_FLOOR))
        .collect();
    let noise = if regime.per_dimension_noise() {
        Noise::Diagonal(vec![v; w.nrows()])
    } else {
        Noise::Isotropic(v)
    };
    SubjectFactors { activities, noise }
}

fn validate_inputs(k: usize, covs: &[SubjectCovariance]) -> Result<usize> {
    let first = covs
        .first()
        .ok_or_else(|| Error::Validation("no training covariances supplied".into()))?;
    let p = first.covariance.nrows();
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if k >= p {
        return Err(Error::Config(format!(
            "k = {k} must be smaller than the number of regions p = {p}"
        )));
    }
    let mut ids = std::collections::BTreeSet::new();
    for c in covs {
        if c.covariance.nrows() != p {
            return Err(Error::DimensionMismatch {
                first: first.subject_id.clone(),
                first_dim: p,
                second: c.subject_id.clone(),
                second_dim: c.covariance.nrows(),
            });
        }
        if c.n_obs == 0 {
            return Err(Error::Validation(format!(
                "subject {} has zero observations",
                c.subject_id
            )));
        }
        if !ids.insert(c.subject_id.as_str()) {
            return Err(Error::Validation(format!(
                "duplicate subject id {}",
                c.subject_id
            )));
        }
        check_covariance(&c.covariance, &c.subject_id)?;
    }
    Ok(p)
}

/// Fit the shared loading model under `regime` with `k` networks.
pub fn fit(
    regime: Regime,
    k: usize,
    covariances: &[SubjectCovariance],
    hyper: &HyperParams,
) -> Result<FittedModel> {
    hyper.validate()?;
    validate_inputs(k, covariances)?;
    let pooled = pooled_covariance(covariances.iter().map(|c| &c.covariance));
    let w0 = initial_loading(regime, &pooled, k);
    optimize(regime, w0, covariances, hyper)
}

/// Like [`fit`], but starting from a caller-supplied `p × k` loading instead
/// of the spectral initialization. Non-negative regimes project the start
/// onto the non-negative orthant; columns must not vanish.
pub fn fit_from(
    regime: Regime,
    initial: &DMatrix<f64>,
    covariances: &[SubjectCovariance],
    hyper: &HyperParams,
) -> Result<FittedModel> {
    hyper.validate()?;
    let k = initial.ncols();
    let p = validate_inputs(k, covariances)?;
    if initial.nrows() != p {
        return Err(Error::Shape(format!(
            "initial loading has {} rows but covariances are {p}x{p}",
            initial.nrows()
        )));
    }
    if initial.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("initial loading must be finite".into()));
    }
    let mut w0 = initial.clone();
    if regime.nonnegative() {
        w0.apply(|x| *x = x.max(0.0));
    }
    for j in 0..k {
        let norm = w0.column(j).norm();
        if norm == 0.0 {
            return Err(Error::Validation(format!(
                "column {j} of the initial loading is zero"
            )));
        }
        if !regime.orthonormal() {
            w0.column_mut(j).unscale_mut(norm);
        }
    }
    optimize(regime, w0, covariances, hyper)
}

fn optimize(
    regime: Regime,
    w0: DMatrix<f64>,
    covariances: &[SubjectCovariance],
    hyper: &HyperParams,
) -> Result<FittedModel> {
    let k = w0.ncols();
    let factors = covariances
        .iter()
        .map(|c| projection_factors(regime, &w0, &c.covariance))
        .collect();
    let problem = Problem::new(regime, covariances, hyper);
    let mut it = Iterate {
        w: w0,
        factors,
        gamma: DMatrix::zeros(k, k),
        step: hyper.initial_step / 2.0,
    };

    let mut prev = problem.augmented(&it)?;
    if !prev.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            step_size: it.step,
        });
    }
    let mut trace = vec![prev];
    let mut converged = false;
    let mut iteration = 0;
    while iteration < hyper.max_iter {
        iteration += 1;
        problem.loading_step(&mut it)?;
        if regime.likelihood_based() {
            problem.factor_step(&mut it)?;
        }
        let value = problem.augmented(&it)?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                iteration,
                step_size: it.step,
            });
        }
        trace.push(value);
        let violation = if regime.orthonormal() {
            orthonormality_violation(&it.w)
        } else {
            0.0
        };
        let rel = (value - prev).abs() / prev.abs().max(1e-12);
        if rel < hyper.tolerance && violation < hyper.constraint_tolerance {
            converged = true;
            break;
        }
        prev = value;
        if regime.orthonormal() && iteration % hyper.multiplier_interval == 0 {
            problem.update_multipliers(&mut it);
            prev = problem.augmented(&it)?;
        }
    }
    debug!(
        "{regime} k={k}: {iteration} iterations, converged={converged}, objective={}",
        trace.last().copied().unwrap_or(f64::NAN)
    );

    let mut w = it.w;
    if matches!(regime, Regime::Fa | Regime::Pca) {
        fix_column_signs(&mut w);
    }
    let (factors, activity_source) = if regime.likelihood_based() {
        (it.factors, ActivitySource::Optimizer)
    } else {
        let f = covariances
            .iter()
            .map(|c| {
                let mut f = projection_factors(regime, &w, &c.covariance);
                for g in &mut f.activities {
                    if *g <= VARIANCE_FLOOR {
                        *g = 0.0;
                    }
                }
                f
            })
            .collect();
        (f, ActivitySource::Projection)
    };
    let constraint_violation = orthonormality_violation(&w);
    let factors: BTreeMap<String, SubjectFactors> = covariances
        .iter()
        .zip(factors)
        .map(|(c, f)| (c.subject_id.clone(), f))
        .collect();
    let n_obs = covariances
        .iter()
        .map(|c| (c.subject_id.clone(), c.n_obs))
        .collect();
    Ok(FittedModel {
        loading: LoadingMatrix::new(w, regime),
        factors,
        k,
        optimizer_state: OptimizerState {
            lagrange_multipliers: it.gamma,
            penalty_weight: hyper.penalty_weight,
            step_size: it.step,
            iteration,
            objective_trace: trace,
            constraint_violation,
            converged,
        },
        n_obs,
        activity_source,
    })
}

/// Maximum-likelihood noise and activities for one subject with the loading held fixed.
pub fn fit_subject_factors(
    loading: &LoadingMatrix,
    cov: &SubjectCovariance,
    max_steps: usize,
) -> Result<SubjectFactors> {
    let w = &loading.values;
    if cov.covariance.shape() != (w.nrows(), w.nrows()) {
        return Err(Error::DimensionMismatch {
            first: "loading".into(),
            first_dim: w.nrows(),
            second: cov.subject_id.clone(),
            second_dim: cov.covariance.nrows(),
        });
    }
    let regime = loading.regime;
    let mut f = projection_factors(regime, w, &cov.covariance);
    let mut prev = subject_log_likelihood(w, cov, &f)?;
    for _ in 0..max_steps {
        let mut trial = f.clone();
        noise_update(regime, w, cov, &mut trial)?;
        activity_ascent(w, cov, &mut trial, 3)?;
        let value = subject_log_likelihood(w, cov, &trial)?;
        if value < prev {
            break;
        }
        f = trial;
        let done = (value - prev).abs() <= 1e-12 * prev.abs().max(1.0);
        prev = value;
        if done {
            break;
        }
    }
    Ok(f)
}
