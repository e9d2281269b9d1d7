//! Command-line front end: declarative run configuration, the subcommands,
//! artifact writing and machine-readable error reports.
//!
//! Every command is a pure function of its configuration file, input files
//! and seed. Artifacts carry the resolved configuration and a content hash of
//! their inputs; nothing depends on wall-clock time or absolute output paths.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::activity::{estimate_unseen, write_activity_csv, ActivityEstimate};
use crate::agereg::{
    append_ledger, bootstrap_mae, fit_age_model, predict_age, predict_cohort, transfer_evaluate,
    AgeModel, BootstrapSettings, EvalReport, LedgerRow, Prediction,
};
use crate::data::{load_cohort, split_cohort, CohortDataset, CohortFormat, Split, SplitFractions};
use crate::error::{Error, Result};
use crate::io::{atomic_write, hash_tree, sha256_hex};
use crate::models::{fit, select_k, FittedModel, HyperParams, Regime, SubjectCovariance};
use crate::synth::{
    run_study, sample_cohort, summarize, to_csv_bytes, StudyAxis, StudyPlan, SynthConfig,
};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
const LEDGER_FILE: &str = "ledger.csv";

/// Pipeline stage named in error reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    Split,
    Select,
    Fit,
    Regress,
    Evaluate,
    Predict,
    Study,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Split => "split",
            Stage::Select => "select",
            Stage::Fit => "fit",
            Stage::Regress => "regress",
            Stage::Evaluate => "evaluate",
            Stage::Predict => "predict",
            Stage::Study => "study",
            Stage::Write => "write",
        })
    }
}

/// An error tagged with the stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        self.error.exit_code()
    }

    /// JSON error report written to stderr.
    pub fn report(&self) -> Value {
        json!({
            "status": "error",
            "stage": self.stage.to_string(),
            "kind": self.error.kind(),
            "message": self.error.to_string(),
            "exit_code": self.exit_code(),
        })
    }
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.error)
    }
}

type StageResult<T> = std::result::Result<T, StageError>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T, E: Into<Error>> AtStage<T> for std::result::Result<T, E> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|error| StageError {
            stage,
            error: error.into(),
        })
    }
}

// ---------------------------------------------------------------------------
// configuration

/// Inclusive range of candidate network counts, written `a..b` or `a..=b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KGrid {
    pub low: usize,
    pub high: usize,
}

impl KGrid {
    pub fn values(&self) -> Vec<usize> {
        (self.low..=self.high).collect()
    }
}

impl std::str::FromStr for KGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("k grid `{s}` must look like `a..b` with 1 ≤ a ≤ b"));
        let (a, b) = s.split_once("..").ok_or_else(bad)?;
        let b = b.strip_prefix('=').unwrap_or(b);
        let low: usize = a.trim().parse().map_err(|_| bad())?;
        let high: usize = b.trim().parse().map_err(|_| bad())?;
        if low == 0 || low > high {
            return Err(bad());
        }
        Ok(KGrid { low, high })
    }
}

impl fmt::Display for KGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.low, self.high)
    }
}

impl Serialize for KGrid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for KGrid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub format: CohortFormat,
    pub split: SplitFractions,
    /// Label written to the results ledger; defaults to the data directory name.
    pub dataset: Option<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            format: CohortFormat::CsvDir,
            split: SplitFractions::default(),
            dataset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub regime: Option<Regime>,
    pub k: Option<usize>,
    pub k_grid: Option<KGrid>,
    pub use_intercept: bool,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            regime: None,
            k: None,
            k_grid: None,
            use_intercept: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub axis: StudyAxis,
    pub grid: Vec<usize>,
    pub regimes: Vec<Regime>,
    pub repeats: usize,
    /// Cohort settings shared by every cell; the swept field is overridden
    /// and the seed is replaced by the run seed.
    pub cohort: SynthConfig,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            axis: StudyAxis::VaryObservations,
            grid: vec![25, 50, 100, 200, 400],
            regimes: Regime::ALL.to_vec(),
            repeats: 20,
            cohort: SynthConfig::default(),
        }
    }
}

/// Declarative run configuration (TOML). Command-line flags take precedence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: Option<u64>,
    pub data: DataSection,
    pub fit: FitSection,
    pub optimizer: HyperParams,
    pub bootstrap: BootstrapSettings,
    pub study: StudySection,
    /// Results ledger; relative paths are resolved against the config file.
    pub ledger: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: None,
            data: DataSection::default(),
            fit: FitSection::default(),
            optimizer: HyperParams::default(),
            bootstrap: BootstrapSettings::default(),
            study: StudySection::default(),
            ledger: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()).with_field(&e))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: CONFIG_SCHEMA_VERSION,
                found: cfg.schema_version,
            });
        }
        Ok(cfg)
    }

    /// Read a config file; a missing `path` gives the defaults. Relative
    /// paths inside the file are resolved against its directory.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(ledger) = &cfg.ledger {
            if ledger.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.ledger = Some(base.join(ledger));
            }
        }
        Ok(cfg)
    }

    fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| {
            Error::Config("a seed is required: set `seed` in the config or pass --seed".into())
        })
    }

    fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.bootstrap.subset_size == 0 || self.bootstrap.n_bootstrap == 0 {
            return Err(Error::Config(
                "bootstrap.subset_size and bootstrap.n_bootstrap must be at least 1".into(),
            ));
        }
        if self.fit.k.is_some() && self.fit.k_grid.is_some() {
            return Err(Error::Config("fit.k and fit.k_grid are mutually exclusive".into()));
        }
        Ok(())
    }
}

trait WithField {
    fn with_field(self, e: &toml::de::Error) -> Self;
}

impl WithField for Error {
    fn with_field(self, e: &toml::de::Error) -> Self {
        match (self, e.span()) {
            (Error::Config(msg), Some(span)) => {
                Error::Config(format!("{msg} (at bytes {}..{})", span.start, span.end))
            }
            (other, _) => other,
        }
    }
}

// ---------------------------------------------------------------------------
// command-line surface

#[derive(Debug, Parser)]
#[command(name = "brainage", version, about = "Shared-loading covariance models and brain-age regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the synthetic benchmark study.
    SynthBench(SynthBenchArgs),
    /// Write a synthetic cohort to disk in the csv_dir layout.
    SynthData(SynthDataArgs),
    /// Split a cohort, fit the loading model and the age regression, evaluate on the test split.
    Fit(FitArgs),
    /// Evaluate frozen models on an unseen cohort and append to the results ledger.
    Transfer(TransferArgs),
    /// Predict ages for a cohort with frozen models.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct SynthBenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, conflicts_with = "k_grid")]
    pub k: Option<usize>,
    /// Inclusive candidate range such as `2..10`.
    #[arg(long)]
    pub k_grid: Option<KGrid>,
    #[arg(long)]
    pub regime: Option<Regime>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `csv_dir` (default) or `single_table`.
    #[arg(long)]
    pub format: Option<CohortFormat>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub age_model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub format: Option<CohortFormat>,
    /// Directory for the report and predictions; the report goes to stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Results ledger; defaults to `ledger.csv` next to the model file.
    #[arg(long)]
    pub ledger: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub age_model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub format: Option<CohortFormat>,
    /// Predictions CSV path; written to stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse arguments, run the command and return the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.report());
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> StageResult<()> {
    match command {
        Command::SynthBench(a) => cmd_synth_bench(&a),
        Command::SynthData(a) => cmd_synth_data(&a),
        Command::Fit(a) => cmd_fit(&a).map(|_| ()),
        Command::Transfer(a) => cmd_transfer(&a).map(|_| ()),
        Command::Predict(a) => cmd_predict(&a),
    }
}

// ---------------------------------------------------------------------------
// helpers

fn provenance(command: &str, config: &RunConfig, inputs: Value) -> Value {
    json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": config,
        "inputs": inputs,
    })
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// Serialize `body` and add a `provenance` key at the top level.
fn with_provenance<T: Serialize>(body: &T, prov: &Value) -> Result<Value> {
    let mut v = serde_json::to_value(body)?;
    if let Value::Object(map) = &mut v {
        map.insert("provenance".into(), prov.clone());
    }
    Ok(v)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn load_models(model: &Path, age_model: &Path) -> Result<(FittedModel, AgeModel)> {
    let m = FittedModel::from_json(&read_text(model)?)?;
    let a = AgeModel::from_json(&read_text(age_model)?)?;
    if a.k != m.k {
        return Err(Error::Shape(format!(
            "age model has {} coefficients but the loading has {} networks",
            a.k, m.k
        )));
    }
    Ok((m, a))
}

fn load_with_covariances(path: &Path, format: CohortFormat) -> Result<CohortDataset> {
    let mut cohort = load_cohort(path, format)?;
    cohort.compute_covariances()?;
    Ok(cohort)
}

fn covariances_in(cohort: &CohortDataset, split: Split) -> Result<Vec<SubjectCovariance>> {
    cohort
        .subjects_in(split)
        .map(|s| {
            let k = match &s.covariance {
                Some(k) => k.clone(),
                None => crate::data::compute_covariance(s)?,
            };
            Ok(SubjectCovariance::new(s.subject_id.clone(), k, s.n_obs()))
        })
        .collect()
}

fn dataset_label(config: &RunConfig, data: &Path) -> String {
    config.data.dataset.clone().unwrap_or_else(|| {
        data.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    })
}

/// Deterministic run identifier: a prefix of the hash of the command, the
/// resolved config and the input hashes.
fn run_id(prov: &Value) -> String {
    sha256_hex(prov.to_string().as_bytes())[..16].to_string()
}

fn predictions_csv(predictions: &[Prediction]) -> Result<Vec<u8>> {
    let k = predictions.first().map_or(0, |p| p.activities.len());
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut header = vec!["subject_id".to_string(), "predicted_age".into(), "age".into()];
        header.extend((1..=k).map(|j| format!("g_{j}")));
        w.write_record(&header)?;
        for p in predictions {
            let mut row = vec![
                p.subject_id.clone(),
                format!("{:?}", p.predicted_age),
                p.age.map(|a| format!("{a:?}")).unwrap_or_default(),
            ];
            row.extend(p.activities.iter().map(|g| format!("{g:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    Ok(buf)
}

// ---------------------------------------------------------------------------
// commands

/// Synthetic benchmark: long-format rows, per-cell summary and a manifest.
pub fn cmd_synth_bench(args: &SynthBenchArgs) -> StageResult<()> {
    let mut config = RunConfig::load(args.config.as_deref()).at(Stage::Config)?;
    if let Some(seed) = args.seed {
        config.seed = Some(seed);
    }
    let seed = config.require_seed().at(Stage::Config)?;
    config.validate().at(Stage::Config)?;
    let mut base = config.study.cohort.clone();
    base.seed = seed;
    config.study.cohort.seed = seed;
    let plan = StudyPlan {
        axis: config.study.axis,
        grid: config.study.grid.clone(),
        regimes: config.study.regimes.clone(),
        repeats: config.study.repeats,
        base,
    };
    plan.validate().at(Stage::Config)?;

    let rows = run_study(&plan, &config.optimizer).at(Stage::Study)?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        warn!("{failed} of {} study rows failed", rows.len());
    }
    let summary = summarize(&rows);
    let study_csv = to_csv_bytes(&rows).at(Stage::Write)?;
    let summary_csv = to_csv_bytes(&summary).at(Stage::Write)?;
    let manifest = json!({
        "provenance": provenance("synth-bench", &config, json!({})),
        "rows": rows.len(),
        "failed_rows": failed,
        "outputs": {
            "study.csv": sha256_hex(&study_csv),
            "summary.csv": sha256_hex(&summary_csv),
        },
    });
    atomic_write(&args.out.join("study.csv"), &study_csv).at(Stage::Write)?;
    atomic_write(&args.out.join("summary.csv"), &summary_csv).at(Stage::Write)?;
    write_json(&args.out.join("manifest.json"), &manifest).at(Stage::Write)?;
    info!("wrote {} study rows to {}", rows.len(), args.out.display());
    Ok(())
}

/// Write `study.cohort` (training and test subjects together) plus the
/// generating parameters.
pub fn cmd_synth_data(args: &SynthDataArgs) -> StageResult<()> {
    let mut config = RunConfig::load(args.config.as_deref()).at(Stage::Config)?;
    if let Some(seed) = args.seed {
        config.seed = Some(seed);
    }
    let seed = config.require_seed().at(Stage::Config)?;
    let mut synth = config.study.cohort.clone();
    synth.seed = seed;
    config.study.cohort.seed = seed;
    let cohort = sample_cohort(&synth).at(Stage::Config)?;
    crate::data::write_csv_dir(&cohort.subjects, &args.out).at(Stage::Write)?;
    let w = &cohort.ground_truth_loading.values;
    let truth = json!({
        "provenance": provenance("synth-data", &config, json!({})),
        "p": w.nrows(),
        "k": w.ncols(),
        "loading": w.transpose().as_slice(),
        "beta": cohort.ground_truth_beta,
        "activities": cohort.true_activities,
        "noise": cohort.true_noise,
    });
    write_json(&args.out.join("ground_truth.json"), &truth).at(Stage::Write)?;
    Ok(())
}

/// Everything `fit` produced, returned for callers that want it in memory.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: FittedModel,
    pub age_model: AgeModel,
    pub report: EvalReport,
    pub selected_k: usize,
}

pub fn cmd_fit(args: &FitArgs) -> StageResult<FitOutcome> {
    let mut config = RunConfig::load(args.config.as_deref()).at(Stage::Config)?;
    if let Some(seed) = args.seed {
        config.seed = Some(seed);
    }
    if let Some(regime) = args.regime {
        config.fit.regime = Some(regime);
    }
    if let Some(k) = args.k {
        config.fit.k = Some(k);
        config.fit.k_grid = None;
    }
    if let Some(grid) = args.k_grid {
        config.fit.k_grid = Some(grid);
        config.fit.k = None;
    }
    if let Some(format) = args.format {
        config.data.format = format;
    }
    let seed = config.require_seed().at(Stage::Config)?;
    config.validate().at(Stage::Config)?;
    let regime = config
        .fit
        .regime
        .ok_or_else(|| Error::Config("a regime is required: set fit.regime or pass --regime".into()))
        .at(Stage::Config)?;
    if config.fit.k.is_none() && config.fit.k_grid.is_none() {
        return Err(Error::Config(
            "either k or a k grid is required: set fit.k / fit.k_grid or pass --k / --k-grid".into(),
        ))
        .at(Stage::Config);
    }

    let cohort = load_with_covariances(&args.data, config.data.format).at(Stage::Ingest)?;
    if let Some(s) = cohort.subjects.iter().find(|s| s.age.is_none()) {
        return Err(Error::Validation(format!(
            "subject {} has no age; fitting needs ages for every subject",
            s.subject_id
        )))
        .at(Stage::Ingest);
    }
    let data_hash = hash_tree(&args.data).at(Stage::Ingest)?;
    let cohort = split_cohort(&cohort, config.data.split, seed).at(Stage::Split)?;
    let train = covariances_in(&cohort, Split::Train).at(Stage::Split)?;
    let validation = covariances_in(&cohort, Split::Validation).at(Stage::Split)?;
    let test = covariances_in(&cohort, Split::Test).at(Stage::Split)?;

    let selection = match config.fit.k_grid {
        Some(grid) => {
            let s = select_k(regime, &grid.values(), &train, &validation, &config.optimizer)
                .at(Stage::Select)?;
            for row in &s.table {
                match (row.validation_log_likelihood, &row.error) {
                    (Some(ll), _) => info!("k = {:>3}: validation log-likelihood {ll:.6}", row.k),
                    (None, Some(e)) => info!("k = {:>3}: failed ({e})", row.k),
                    (None, None) => {}
                }
            }
            Some(s)
        }
        None => None,
    };
    let k = selection
        .as_ref()
        .map(|s| s.best_k)
        .or(config.fit.k)
        .expect("k or k grid checked above");

    let model = fit(regime, k, &train, &config.optimizer).at(Stage::Fit)?;
    if !model.optimizer_state.converged {
        warn!(
            "{regime} k={k}: optimizer stopped after {} iterations without meeting the tolerance",
            model.optimizer_state.iteration
        );
    }

    let train_ids: Vec<String> = train.iter().map(|c| c.subject_id.clone()).collect();
    let features = model.activity_matrix(&train_ids).at(Stage::Regress)?;
    let ages: Vec<f64> = train_ids
        .iter()
        .map(|id| cohort.get(id).and_then(|s| s.age).expect("ages checked at ingest"))
        .collect();
    let age_model = fit_age_model(&features, &ages, config.fit.use_intercept).at(Stage::Regress)?;
    for w in &age_model.warnings {
        warn!("{w}");
    }

    let mut estimates: Vec<ActivityEstimate> = Vec::with_capacity(test.len());
    let mut predictions = Vec::with_capacity(test.len());
    for c in &test {
        let est = estimate_unseen(&model.loading, c).at(Stage::Evaluate)?.estimate;
        let age = cohort.get(&c.subject_id).and_then(|s| s.age);
        predictions.push(Prediction {
            subject_id: c.subject_id.clone(),
            predicted_age: predict_age(&age_model, &est.clamped_activities).at(Stage::Evaluate)?,
            age,
            activities: est.clamped_activities.clone(),
        });
        estimates.push(est);
    }
    let pred: Vec<f64> = predictions.iter().map(|p| p.predicted_age).collect();
    let truth: Vec<f64> = predictions.iter().map(|p| p.age.unwrap_or(f64::NAN)).collect();
    let report = bootstrap_mae(
        &pred,
        &truth,
        config.bootstrap.subset_size,
        config.bootstrap.n_bootstrap,
        seed,
    )
    .at(Stage::Evaluate)?;

    // artifacts
    let prov = provenance("fit", &config, json!({ "data": data_hash }));
    let out = &args.out;
    let mut doc = crate::models::FittedModelDocument::from(&model);
    doc.provenance = Some(prov.clone());
    let mut model_json = serde_json::to_string_pretty(&doc).at(Stage::Write)?;
    model_json.push('\n');
    atomic_write(&out.join("model.json"), model_json.as_bytes()).at(Stage::Write)?;

    let mut age_json: Value = serde_json::from_str(&age_model.to_json().at(Stage::Write)?)
        .at(Stage::Write)?;
    if let Value::Object(map) = &mut age_json {
        map.insert("provenance".into(), prov.clone());
    }
    write_json(&out.join("age_model.json"), &age_json).at(Stage::Write)?;
    write_json(
        &out.join("eval_report.json"),
        &with_provenance(&report, &prov).at(Stage::Write)?,
    )
    .at(Stage::Write)?;
    atomic_write(
        &out.join("predictions_test.csv"),
        &predictions_csv(&predictions).at(Stage::Write)?,
    )
    .at(Stage::Write)?;
    let activity_path = out.join("activities_test.csv");
    write_activity_csv(&activity_path, &estimates).at(Stage::Write)?;
    let split_rows: Vec<(String, &'static str)> = cohort
        .subjects
        .iter()
        .map(|s| {
            let label = match cohort.split_labels.get(&s.subject_id) {
                Some(Split::Train) => "train",
                Some(Split::Validation) => "validation",
                Some(Split::Test) => "test",
                None => "unassigned",
            };
            (s.subject_id.clone(), label)
        })
        .collect();
    atomic_write(&out.join("splits.csv"), &split_csv(&split_rows).at(Stage::Write)?)
        .at(Stage::Write)?;
    if let Some(s) = &selection {
        atomic_write(&out.join("selection.csv"), &to_csv_bytes(&s.table).at(Stage::Write)?)
            .at(Stage::Write)?;
    }
    let ledger = config.ledger.clone().unwrap_or_else(|| out.join(LEDGER_FILE));
    append_ledger(
        &ledger,
        &LedgerRow {
            run_id: run_id(&prov),
            regime: regime.to_string(),
            k,
            dataset: dataset_label(&config, &args.data),
            mae_mean: report.mae_mean,
            mae_std: report.mae_std,
            seed,
        },
    )
    .at(Stage::Write)?;
    info!(
        "{regime} k={k}: test MAE {:.3} ± {:.3}",
        report.mae_mean, report.mae_std
    );
    Ok(FitOutcome {
        model,
        age_model,
        report,
        selected_k: k,
    })
}

fn split_csv(rows: &[(String, &str)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["subject_id", "split"])?;
        for (id, label) in rows {
            w.write_record([id.as_str(), label])?;
        }
        w.flush()?;
    }
    Ok(buf)
}

pub fn cmd_transfer(args: &TransferArgs) -> StageResult<EvalReport> {
    let mut config = RunConfig::load(args.config.as_deref()).at(Stage::Config)?;
    if let Some(seed) = args.seed {
        config.seed = Some(seed);
    }
    if let Some(format) = args.format {
        config.data.format = format;
    }
    if let Some(ledger) = &args.ledger {
        config.ledger = Some(ledger.clone());
    }
    let seed = config.require_seed().at(Stage::Config)?;
    config.validate().at(Stage::Config)?;
    let (model, age_model) = load_models(&args.model, &args.age_model).at(Stage::Ingest)?;
    let cohort = load_with_covariances(&args.data, config.data.format).at(Stage::Ingest)?;
    let inputs = json!({
        "model": hash_tree(&args.model).at(Stage::Ingest)?,
        "age_model": hash_tree(&args.age_model).at(Stage::Ingest)?,
        "data": hash_tree(&args.data).at(Stage::Ingest)?,
    });
    let outcome = transfer_evaluate(&model, &age_model, &cohort, config.bootstrap, seed)
        .at(Stage::Evaluate)?;
    let prov = provenance("transfer", &config, inputs);
    let report_json = with_provenance(&outcome.report, &prov).at(Stage::Write)?;
    match &args.out {
        Some(dir) => {
            write_json(&dir.join("transfer_report.json"), &report_json).at(Stage::Write)?;
            atomic_write(
                &dir.join("predictions_transfer.csv"),
                &predictions_csv(&outcome.predictions).at(Stage::Write)?,
            )
            .at(Stage::Write)?;
        }
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report_json).at(Stage::Write)?
        ),
    }
    let ledger = config.ledger.clone().unwrap_or_else(|| {
        args.model
            .parent()
            .unwrap_or(Path::new("."))
            .join(LEDGER_FILE)
    });
    append_ledger(
        &ledger,
        &LedgerRow {
            run_id: run_id(&prov),
            regime: model.regime().to_string(),
            k: model.k,
            dataset: dataset_label(&config, &args.data),
            mae_mean: outcome.report.mae_mean,
            mae_std: outcome.report.mae_std,
            seed,
        },
    )
    .at(Stage::Write)?;
    Ok(outcome.report)
}

pub fn cmd_predict(args: &PredictArgs) -> StageResult<()> {
    let (model, age_model) = load_models(&args.model, &args.age_model).at(Stage::Ingest)?;
    let cohort = load_with_covariances(&args.data, args.format.unwrap_or(CohortFormat::CsvDir))
        .at(Stage::Ingest)?;
    let predictions = predict_cohort(&model, &age_model, &cohort).at(Stage::Predict)?;
    let csv = predictions_csv(&predictions).at(Stage::Write)?;
    match &args.out {
        Some(path) => {
            atomic_write(path, &csv).at(Stage::Write)?;
            let manifest = json!({
                "tool": env!("CARGO_PKG_NAME"),
                "version": env!("CARGO_PKG_VERSION"),
                "command": "predict",
                "inputs": {
                    "model": hash_tree(&args.model).at(Stage::Ingest)?,
                    "age_model": hash_tree(&args.age_model).at(Stage::Ingest)?,
                    "data": hash_tree(&args.data).at(Stage::Ingest)?,
                },
                "output": sha256_hex(&csv),
            });
            let mut name = path.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            write_json(&path.with_file_name(name), &manifest).at(Stage::Write)?;
        }
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(&csv)
                .at(Stage::Write)?;
        }
    }
    Ok(())
}
