//! End-to-end behaviour of the `brainage` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL_CONFIG: &str = r#"
schema_version = 1
seed = 5

[optimizer]
max_iter = 400

[bootstrap]
subset_size = 10
n_bootstrap = 100

[study]
axis = "vary_n"
grid = [60]
regimes = ["mha"]
repeats = 1

[study.cohort]
p = 14
k = 3
n_subjects = 30
n_test_subjects = 30
n_obs = 80
"#;

fn brainage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainage"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_report(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .rev()
        .find(|l| l.trim_start().starts_with('{'))
        .unwrap_or_else(|| panic!("no JSON report in stderr: {stderr}"));
    serde_json::from_str(line).unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("run.toml");
    fs::write(&config, SMALL_CONFIG).unwrap();
    let data = root.join("cohort");
    let out = brainage(&["synth-data", "--config", s(&config), "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    Fixture {
        _tmp: tmp,
        root,
        config,
        data,
    }
}

fn fit_into(fx: &Fixture, out: &Path, regime: &str) -> Output {
    brainage(&[
        "fit", "--config", s(&fx.config), "--data", s(&fx.data), "--out", s(out), "--k", "3",
        "--regime", regime,
    ])
}

#[test]
fn fit_writes_all_artifacts_and_a_ledger_row() {
    let fx = fixture();
    let out = fx.root.join("fit");
    let res = fit_into(&fx, &out, "mha");
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in [
        "model.json",
        "age_model.json",
        "eval_report.json",
        "predictions_test.csv",
        "activities_test.csv",
        "splits.csv",
        "ledger.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap();
    assert!(report["mae_mean"].as_f64().unwrap().is_finite());
    assert_eq!(report["provenance"]["config"]["seed"], 5);
    assert!(report["provenance"]["inputs"]["data"].as_str().unwrap().len() == 64);
    let ledger = fs::read_to_string(out.join("ledger.csv")).unwrap();
    assert_eq!(ledger.lines().count(), 2);
    assert!(ledger.starts_with("run_id,regime,k,dataset,mae_mean,mae_std,seed"));
}

#[test]
fn flags_override_the_config_file() {
    let fx = fixture();
    let out = fx.root.join("fit");
    let res = brainage(&[
        "fit", "--config", s(&fx.config), "--data", s(&fx.data), "--out", s(&out), "--k", "2",
        "--regime", "pca", "--seed", "9",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let model: Value = serde_json::from_str(&fs::read_to_string(out.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["regime"], "pca");
    assert_eq!(model["k"], 2);
    assert_eq!(model["provenance"]["config"]["seed"], 9);
}

#[test]
fn k_grid_writes_the_selection_table() {
    let fx = fixture();
    let out = fx.root.join("fit");
    let res = brainage(&[
        "fit", "--config", s(&fx.config), "--data", s(&fx.data), "--out", s(&out), "--k-grid",
        "2..4", "--regime", "mha",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let table = fs::read_to_string(out.join("selection.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(table.starts_with("k,validation_log_likelihood,error"));
}

#[test]
fn missing_training_age_exits_2_naming_the_subject() {
    let fx = fixture();
    let manifest = fx.data.join("manifest.csv");
    let text = fs::read_to_string(&manifest).unwrap();
    let patched: Vec<String> = text
        .lines()
        .map(|l| {
            if l.starts_with("train-0003,") {
                "train-0003,".to_string()
            } else {
                l.to_string()
            }
        })
        .collect();
    fs::write(&manifest, patched.join("\n") + "\n").unwrap();
    let res = fit_into(&fx, &fx.root.join("fit"), "mha");
    assert_eq!(res.status.code(), Some(2));
    let report = error_report(&res);
    assert!(report["message"].as_str().unwrap().contains("train-0003"), "{report}");
    assert_eq!(report["stage"], "ingest");
}

#[test]
fn missing_seed_and_bad_config_exit_2() {
    let fx = fixture();
    let cfg = fx.root.join("noseed.toml");
    fs::write(&cfg, "schema_version = 1\n").unwrap();
    let res = brainage(&[
        "fit", "--config", s(&cfg), "--data", s(&fx.data), "--out", s(&fx.root.join("x")), "--k",
        "3", "--regime", "mha",
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_report(&res)["stage"], "config");

    fs::write(&cfg, "schema_version = 1\nseed = 1\n[optimizer]\nmax_iters = 3\n").unwrap();
    let res = brainage(&["synth-bench", "--config", s(&cfg), "--out", s(&fx.root.join("y"))]);
    assert_eq!(res.status.code(), Some(2));
    let report = error_report(&res);
    assert!(report["message"].as_str().unwrap().contains("max_iters"), "{report}");

    let res = brainage(&["fit", "--data", s(&fx.data), "--out", "z", "--k", "3", "--k-grid", "2..4"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn transfer_is_deterministic_and_appends_to_the_ledger() {
    let fx = fixture();
    let out = fx.root.join("fit");
    assert!(fit_into(&fx, &out, "mha").status.success());
    // a fresh sample from the same generating distribution
    let fresh = fx.root.join("fresh");
    let res = brainage(&["synth-data", "--config", s(&fx.config), "--out", s(&fresh), "--seed", "99"]);
    assert!(res.status.success());
    let run = |dir: &str| {
        let res = brainage(&[
            "transfer", "--model", s(&out.join("model.json")), "--age-model",
            s(&out.join("age_model.json")), "--data", s(&fresh), "--seed", "3", "--config",
            s(&fx.config), "--out", s(&fx.root.join(dir)),
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        fs::read(fx.root.join(dir).join("transfer_report.json")).unwrap()
    };
    let a = run("t1");
    let b = run("t2");
    assert_eq!(a, b);
    let report: Value = serde_json::from_slice(&a).unwrap();
    assert!(report["mae_mean"].as_f64().unwrap().is_finite());
    let ledger = fs::read_to_string(out.join("ledger.csv")).unwrap();
    assert_eq!(ledger.lines().count(), 4, "{ledger}");
}

#[test]
fn transfer_with_mismatched_regions_exits_2() {
    let fx = fixture();
    let out = fx.root.join("fit");
    assert!(fit_into(&fx, &out, "mha").status.success());
    let other_cfg = fx.root.join("other.toml");
    fs::write(&other_cfg, SMALL_CONFIG.replace("p = 14", "p = 12")).unwrap();
    let other = fx.root.join("other");
    assert!(brainage(&["synth-data", "--config", s(&other_cfg), "--out", s(&other)]).status.success());
    let res = brainage(&[
        "transfer", "--model", s(&out.join("model.json")), "--age-model",
        s(&out.join("age_model.json")), "--data", s(&other), "--seed", "1",
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_report(&res)["kind"], "dimension_mismatch");
}

#[test]
fn schema_version_mismatch_exits_2() {
    let fx = fixture();
    let out = fx.root.join("fit");
    assert!(fit_into(&fx, &out, "mha").status.success());
    let model = out.join("model.json");
    let text = fs::read_to_string(&model).unwrap();
    fs::write(&model, text.replacen("\"schema_version\": 1", "\"schema_version\": 99", 1)).unwrap();
    let res = brainage(&[
        "transfer", "--model", s(&model), "--age-model", s(&out.join("age_model.json")), "--data",
        s(&fx.data), "--seed", "1",
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_report(&res)["kind"], "schema_version");
}

#[test]
fn predict_handles_missing_ages() {
    let fx = fixture();
    let out = fx.root.join("fit");
    assert!(fit_into(&fx, &out, "mha").status.success());
    let manifest = fx.data.join("manifest.csv");
    let text = fs::read_to_string(&manifest).unwrap();
    let stripped: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                l.to_string()
            } else {
                format!("{},", l.split(',').next().unwrap())
            }
        })
        .collect();
    fs::write(&manifest, stripped.join("\n") + "\n").unwrap();
    let pred = fx.root.join("pred.csv");
    let res = brainage(&[
        "predict", "--model", s(&out.join("model.json")), "--age-model",
        s(&out.join("age_model.json")), "--data", s(&fx.data), "--out", s(&pred),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(&pred).unwrap();
    assert_eq!(csv.lines().count(), 61);
    assert!(csv.starts_with("subject_id,predicted_age,age,g_1,g_2,g_3"));
    assert!(fx.root.join("pred.csv.manifest.json").is_file());
}

#[test]
fn minimal_synth_bench_writes_one_row_and_is_repeatable() {
    let fx = fixture();
    let a = fx.root.join("bench-a");
    let b = fx.root.join("bench-b");
    for out in [&a, &b] {
        let res = brainage(&["synth-bench", "--config", s(&fx.config), "--out", s(out)]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    let rows = fs::read_to_string(a.join("study.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2, "{rows}");
    for f in ["study.csv", "summary.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["provenance"]["config"]["study"]["cohort"]["p"], 14);
}

#[test]
fn mha_beats_fa_end_to_end_on_synthetic_files() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    fs::write(
        &config,
        r#"
schema_version = 1
seed = 21

[bootstrap]
subset_size = 30
n_bootstrap = 300

[study.cohort]
n_subjects = 100
n_test_subjects = 100
"#,
    )
    .unwrap();
    let data = tmp.path().join("cohort");
    assert!(brainage(&["synth-data", "--config", s(&config), "--out", s(&data)]).status.success());
    let mae = |regime: &str| {
        let out = tmp.path().join(regime);
        let res = brainage(&[
            "fit", "--config", s(&config), "--data", s(&data), "--out", s(&out), "--k", "5",
            "--regime", regime,
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        let r: Value = serde_json::from_str(&fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap();
        r["mae_mean"].as_f64().unwrap()
    };
    let (mha, fa) = (mae("mha"), mae("fa"));
    assert!(mha < fa, "MHA {mha} vs FA {fa}");
}
