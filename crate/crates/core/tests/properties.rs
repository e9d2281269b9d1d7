//! Property-based invariants and closed-form oracles.

mod common;

use std::collections::BTreeMap;

use brainage::activity::estimate_subject;
use brainage::agereg::{bootstrap_mae, fit_age_model, mean_absolute_error};
use brainage::data::{compute_covariance, split_cohort, CohortDataset, Split, SplitFractions, SubjectRecord};
use brainage::linalg::{is_symmetric, symmetric_eigenvalues};
use brainage::models::{
    fit, log_likelihood, HyperParams, LoadingMatrix, Noise, Regime, SubjectCovariance, SubjectFactors,
};
use brainage::synth::{recovery_error, sample_cohort, sample_loading, SynthConfig};
use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sample_covariance_is_symmetric_psd(x in (2usize..20, 1usize..8).prop_flat_map(|(n, p)| matrix(n, p))) {
        let k = compute_covariance(&SubjectRecord::new("s", x, None)).unwrap();
        prop_assert!(is_symmetric(&k, 0.0));
        let scale = k.norm().max(1.0);
        prop_assert!(symmetric_eigenvalues(&k).iter().all(|e| *e >= -1e-12 * scale));
    }

    #[test]
    fn split_is_a_deterministic_order_free_partition(n in 3usize..60, seed in any::<u64>(), rot in 0usize..60) {
        let subjects: Vec<SubjectRecord> = (0..n)
            .map(|i| SubjectRecord::new(format!("sub-{i}"), DMatrix::zeros(3, 2), Some(30.0)))
            .collect();
        let mut rotated = subjects.clone();
        rotated.rotate_left(rot % n);
        let a = split_cohort(&CohortDataset::new(subjects).unwrap(), SplitFractions::default(), seed).unwrap();
        let b = split_cohort(&CohortDataset::new(rotated).unwrap(), SplitFractions::default(), seed).unwrap();
        prop_assert_eq!(&a.split_labels, &b.split_labels);
        prop_assert_eq!(a.split_labels.len(), n);
        for split in [Split::Train, Split::Validation, Split::Test] {
            prop_assert!(a.subjects_in(split).count() >= 1);
        }
    }

    #[test]
    fn recovery_error_ignores_column_order(seed in 0u64..500, shift in 1usize..5) {
        let w = sample_loading(20, 5, seed).unwrap();
        let mut permuted = w.values.clone();
        for j in 0..5 {
            permuted.set_column(j, &w.values.column((j + shift) % 5));
        }
        let e = recovery_error(&w, &LoadingMatrix::new(permuted, Regime::Mha)).unwrap();
        prop_assert!(e.abs() < 1e-24);
        // sign flips are free for unconstrained estimates only
        let flipped = LoadingMatrix::new(-&w.values, Regime::Pca);
        prop_assert!(recovery_error(&w, &flipped).unwrap() < 1e-24);
        let flipped = LoadingMatrix::new(-&w.values, Regime::Mha);
        prop_assert!(recovery_error(&w, &flipped).unwrap() > 1.0);
    }

    #[test]
    fn projection_estimates_recover_exact_parameters(
        seed in any::<u64>(),
        g in prop::collection::vec(0.0f64..6.0, 3),
        v in 0.01f64..4.0,
    ) {
        let mut rng = rng(seed);
        let w = random_nonneg_orthonormal(&mut rng, 15, 3);
        let sigma = model_covariance(&w, &g, &DVector::from_element(15, v));
        let est = estimate_subject("s", &LoadingMatrix::new(w, Regime::Mha), &sigma).unwrap();
        prop_assert!((est.noise - v).abs() < 1e-10);
        for (a, b) in est.activities.iter().zip(&g) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn likelihood_is_invariant_to_relabelling_networks(seed in any::<u64>(), swap in 1usize..3) {
        let mut rng = rng(seed);
        let covs = random_covs(&mut rng, 7, 2);
        let w = random_orthonormal(&mut rng, 7, 3);
        let factors: BTreeMap<String, SubjectFactors> = covs
            .iter()
            .map(|c| (c.subject_id.clone(), random_factors(&mut rng, 7, 3, false)))
            .collect();
        let mut w2 = w.clone();
        w2.swap_columns(0, swap);
        let f2: BTreeMap<String, SubjectFactors> = factors
            .iter()
            .map(|(id, f)| {
                let mut f = f.clone();
                f.activities.swap(0, swap);
                (id.clone(), f)
            })
            .collect();
        let a = log_likelihood(&w, &covs, &factors).unwrap();
        let b = log_likelihood(&w2, &covs, &f2).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs());
    }

    #[test]
    fn least_squares_residuals_are_orthogonal_to_the_design(
        x in matrix(12, 3),
        y in prop::collection::vec(0.0f64..90.0, 12),
    ) {
        let m = fit_age_model(&x, &y, true).unwrap();
        let beta0 = m.intercept.unwrap();
        let resid: Vec<f64> = (0..12)
            .map(|r| y[r] - beta0 - (0..3).map(|c| m.coefficients[c] * x[(r, c)]).sum::<f64>())
            .collect();
        let scale = 1e-8 * (1.0 + y.iter().map(|v| v.abs()).sum::<f64>()) * (1.0 + x.amax());
        prop_assert!(resid.iter().sum::<f64>().abs() < scale);
        for c in 0..3 {
            let dot: f64 = (0..12).map(|r| resid[r] * x[(r, c)]).sum();
            prop_assert!(dot.abs() < scale * 10.0, "column {c}: {dot}");
        }
    }

    #[test]
    fn bootstrap_mean_lies_within_absolute_errors(
        errs in prop::collection::vec(-20.0f64..20.0, 10..40),
        seed in any::<u64>(),
    ) {
        let truth = vec![50.0; errs.len()];
        let pred: Vec<f64> = errs.iter().map(|e| 50.0 + e).collect();
        let r = bootstrap_mae(&pred, &truth, 5, 50, seed).unwrap();
        let abs: Vec<f64> = errs.iter().map(|e| e.abs()).collect();
        let lo = abs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = abs.iter().cloned().fold(0.0, f64::max);
        prop_assert!(r.mae_mean >= lo - 1e-9 && r.mae_mean <= hi + 1e-9);
        let whole = bootstrap_mae(&pred, &truth, errs.len(), 5, seed).unwrap();
        prop_assert!((whole.mae_mean - mean_absolute_error(&pred, &truth)).abs() < 1e-9);
        prop_assert_eq!(bootstrap_mae(&pred, &truth, 5, 50, seed).unwrap(), r);
    }
}

#[test]
fn bootstrap_std_shrinks_with_larger_subsets() {
    let mut rng = rng(8);
    let truth: Vec<f64> = (0..200).map(|i| i as f64).collect();
    let pred: Vec<f64> = truth
        .iter()
        .map(|t| t + rand::Rng::random_range(&mut rng, -10.0..10.0))
        .collect();
    let small = bootstrap_mae(&pred, &truth, 10, 2000, 1).unwrap();
    let large = bootstrap_mae(&pred, &truth, 100, 2000, 1).unwrap();
    let full = mean_absolute_error(&pred, &truth);
    assert!(large.mae_std < small.mae_std);
    // sub-cohort means are unbiased for the full-sample MAE
    assert!((small.mae_mean - full).abs() < 4.0 * small.mae_std / (2000f64).sqrt());
}

#[test]
fn mha_recovers_a_noiseless_loading() {
    let w = sample_loading(20, 3, 4).unwrap();
    let mut rng = rng(4);
    let covs: Vec<SubjectCovariance> = (0..8)
        .map(|i| {
            let g: Vec<f64> = (0..3).map(|_| rand::Rng::random_range(&mut rng, 1.0..5.0)).collect();
            SubjectCovariance::new(format!("s{i}"), model_covariance(&w.values, &g, &DVector::from_element(20, 1.0)), 100)
        })
        .collect();
    for regime in [Regime::Mha, Regime::Mcf] {
        let m = fit(regime, 3, &covs, &HyperParams::default()).unwrap();
        let e = recovery_error(&w, &m.loading).unwrap();
        assert!(e < 1e-6, "{regime}: {e}");
    }
}

#[test]
fn pca_matches_the_eigen_decomposition_of_a_single_covariance() {
    // Probabilistic PCA: W spans the top eigenvectors, v is the mean of the rest.
    let mut rng = rng(12);
    let k_mat = random_covariance(&mut rng, 8, 200);
    let covs = vec![SubjectCovariance::new("a", k_mat.clone(), 200)];
    let hyper = HyperParams {
        tolerance: 1e-10,
        ..HyperParams::default()
    };
    let m = fit(Regime::Pca, 2, &covs, &hyper).unwrap();
    let eig = symmetric_eigenvalues(&k_mat);
    let mut ev: Vec<f64> = eig.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let v_oracle = ev[2..].iter().sum::<f64>() / 6.0;
    let f = &m.factors["a"];
    let Noise::Isotropic(v) = f.noise else { panic!("isotropic noise expected") };
    assert!((v - v_oracle).abs() < 1e-4, "{v} vs {v_oracle}");
    let mut g = f.activities.clone();
    g.sort_by(|a, b| b.total_cmp(a));
    assert!((g[0] - (ev[0] - v_oracle)).abs() < 1e-3, "{g:?} vs {ev:?}");
    assert!((g[1] - (ev[1] - v_oracle)).abs() < 1e-3, "{g:?} vs {ev:?}");
}

#[test]
fn synthetic_cohorts_are_reproducible_and_seed_sensitive() {
    let cfg = SynthConfig {
        p: 12,
        k: 3,
        n_subjects: 4,
        n_test_subjects: 3,
        n_obs: 20,
        ..SynthConfig::default()
    };
    let a = sample_cohort(&cfg).unwrap();
    let b = sample_cohort(&cfg).unwrap();
    assert_eq!(a, b);
    let c = sample_cohort(&SynthConfig { seed: 1, ..cfg.clone() }).unwrap();
    assert_ne!(a.subjects.subjects[0].timeseries, c.subjects.subjects[0].timeseries);
    // the held-out subjects do not depend on the training cohort size
    let d = sample_cohort(&SynthConfig { n_subjects: 6, ..cfg }).unwrap();
    assert_eq!(a.subjects.get("test-0002"), d.subjects.get("test-0002"));
}

#[test]
fn fitted_activities_are_permutation_equivariant_in_subjects() {
    let mut rng = rng(31);
    let covs = random_covs(&mut rng, 8, 4);
    let mut reversed = covs.clone();
    reversed.reverse();
    let hyper = HyperParams::default();
    let a = fit(Regime::Mha, 2, &covs, &hyper).unwrap();
    let b = fit(Regime::Mha, 2, &reversed, &hyper).unwrap();
    assert!((&a.loading.values - &b.loading.values).amax() < 1e-6);
    for (id, f) in &a.factors {
        let g = &b.factors[id];
        for (x, y) in f.activities.iter().zip(&g.activities) {
            assert!((x - y).abs() < 1e-6 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn noise_vectors_have_the_right_shape() {
    let mut rng = rng(2);
    let covs = random_covs(&mut rng, 6, 2);
    let fa = fit(Regime::Fa, 2, &covs, &HyperParams::default()).unwrap();
    for f in fa.factors.values() {
        assert!(matches!(&f.noise, Noise::Diagonal(d) if d.len() == 6));
    }
}
