"""End-to-end smoke test of the `brainage` Python extension.

Build and install the extension first, e.g.

    cd crates/python && maturin develop --release

then run `python python/smoke_test.py`.
"""

import json

import brainage


def main() -> None:
    cohort = brainage.sample_cohort(p=30, k=4, n_subjects=20, n_test_subjects=40, n_obs=100, seed=3)
    n_train = len(cohort.train_ids)
    model = brainage.fit(
        "mha",
        4,
        cohort.train_covariances,
        [cohort.n_obs] * n_train,
        ids=cohort.train_ids,
    )
    print(model)
    assert model.converged, "fit did not converge"

    err = brainage.recovery_error(cohort.loading, model.loading, "mha")
    print(f"recovery error: {err:.4f}")
    assert err < 0.5

    activities = model.activities()
    features = [activities[i] for i in cohort.train_ids]
    age_model = brainage.fit_age_model(features, cohort.train_ages)
    print(age_model)

    predictions = []
    for cov in cohort.test_covariances:
        _noise, g, _clamped = model.estimate(cov, cohort.n_obs)
        predictions.append(age_model.predict(g))
    mean, std = brainage.bootstrap_mae(predictions, cohort.test_ages, subset_size=30, n_bootstrap=200, seed=0)
    print(f"bootstrap MAE: {mean:.3f} +/- {std:.3f}")
    assert mean == mean and mean >= 0.0

    restored = brainage.FittedModel.from_json(model.to_json())
    assert restored.loading == model.loading
    json.loads(age_model.to_json())

    try:
        brainage.fit("nope", 4, cohort.train_covariances, [cohort.n_obs] * n_train)
    except ValueError as exc:
        print(f"invalid regime rejected: {exc}")
    else:
        raise AssertionError("invalid regime accepted")

    print("smoke test OK")


if __name__ == "__main__":
    main()
