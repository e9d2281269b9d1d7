//! Subject time series ingestion, sample covariances and cohort splits.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_hash;

pub const MANIFEST_FILE: &str = "manifest.csv";

/// One subject's region time series (rows = time, columns = regions).
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub timeseries: DMatrix<f64>,
    pub age: Option<f64>,
    pub covariance: Option<DMatrix<f64>>,
}

impl SubjectRecord {
    pub fn new(subject_id: impl Into<String>, timeseries: DMatrix<f64>, age: Option<f64>) -> Self {
        Self {
            subject_id: subject_id.into(),
            timeseries,
            age,
            covariance: None,
        }
    }

    pub fn n_obs(&self) -> usize {
        self.timeseries.nrows()
    }

    pub fn n_regions(&self) -> usize {
        self.timeseries.ncols()
    }

    /// Returns the stored covariance, computing it first if needed.
    pub fn covariance(&mut self) -> Result<&DMatrix<f64>> {
        if self.covariance.is_none() {
            self.covariance = Some(compute_covariance(self)?);
        }
        Ok(self.covariance.as_ref().expect("covariance just set"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortFormat {
    CsvDir,
    SingleTable,
}

impl std::str::FromStr for CohortFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv_dir" => Ok(CohortFormat::CsvDir),
            "single_table" => Ok(CohortFormat::SingleTable),
            other => Err(Error::Config(format!("unknown cohort format `{other}`"))),
        }
    }
}

/// A cohort of subjects sharing one region count.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortDataset {
    pub subjects: Vec<SubjectRecord>,
    pub p: usize,
    pub split_labels: BTreeMap<String, Split>,
}

impl CohortDataset {
    /// Builds a cohort, checking that every subject has the same region count
    /// and that ids are unique.
    pub fn new(subjects: Vec<SubjectRecord>) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| Error::Validation("cohort has no subjects".into()))?;
        let p = first.n_regions();
        if p == 0 {
            return Err(Error::Validation(format!(
                "subject {} has no regions",
                first.subject_id
            )));
        }
        let mut seen = HashMap::new();
        for s in &subjects {
            if s.n_regions() != p {
                return Err(Error::DimensionMismatch {
                    first: first.subject_id.clone(),
                    first_dim: p,
                    second: s.subject_id.clone(),
                    second_dim: s.n_regions(),
                });
            }
            if seen.insert(s.subject_id.as_str(), ()).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate subject id {}",
                    s.subject_id
                )));
            }
        }
        Ok(Self {
            subjects,
            p,
            split_labels: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Compute every missing covariance in parallel.
    pub fn compute_covariances(&mut self) -> Result<()> {
        self.subjects
            .par_iter_mut()
            .try_for_each(|s| s.covariance().map(|_| ()))
    }

    pub fn subjects_in(&self, split: Split) -> impl Iterator<Item = &SubjectRecord> {
        self.subjects
            .iter()
            .filter(move |s| self.split_labels.get(&s.subject_id) == Some(&split))
    }

    pub fn get(&self, subject_id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.subject_id == subject_id)
    }
}

/// Sample covariance with per-column centering and the `1/n` normalizer.
pub fn compute_covariance(record: &SubjectRecord) -> Result<DMatrix<f64>> {
    let x = &record.timeseries;
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InsufficientData {
            subject: record.subject_id.clone(),
            rows: n,
        });
    }
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
    }
    let mut k = centered.tr_mul(&centered) / n as f64;
    // exact symmetry
    let p = k.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            let v = 0.5 * (k[(i, j)] + k[(j, i)]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Fractions for a three-way subject-level split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
        }
    }
}

/// Random subject-level partition keyed on `(seed, subject_id)`.
///
/// Validation and test counts are the rounded fractions; the remainder goes
/// to training. Input order does not affect the assignment.
pub fn split_cohort(
    cohort: &CohortDataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<CohortDataset> {
    let SplitFractions {
        train,
        validation,
        test,
    } = fractions;
    if [train, validation, test]
        .iter()
        .any(|f| !f.is_finite() || *f <= 0.0)
    {
        return Err(Error::Config(format!(
            "split fractions must all be positive, got ({train}, {validation}, {test})"
        )));
    }
    if (train + validation + test - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {}",
            train + validation + test
        )));
    }
    let n = cohort.len();
    if n < 3 {
        return Err(Error::Size(format!(
            "splitting needs at least 3 subjects, cohort has {n}"
        )));
    }
    let n_val = ((validation * n as f64).round() as usize).max(1);
    let n_test = ((test * n as f64).round() as usize).max(1);
    if n_val + n_test >= n {
        return Err(Error::Config(format!(
            "split leaves no training subjects ({n} subjects, {n_val} validation, {n_test} test)"
        )));
    }

    let mut keyed: Vec<(u64, &str)> = cohort
        .subjects
        .iter()
        .map(|s| (keyed_hash(seed, &s.subject_id), s.subject_id.as_str()))
        .collect();
    keyed.sort_unstable();

    let mut labels = BTreeMap::new();
    for (rank, (_, id)) in keyed.into_iter().enumerate() {
        let split = if rank < n_test {
            Split::Test
        } else if rank < n_test + n_val {
            Split::Validation
        } else {
            Split::Train
        };
        labels.insert(id.to_string(), split);
    }
    let mut out = cohort.clone();
    out.split_labels = labels;
    Ok(out)
}

fn parse_cell(path: &Path, row: usize, column: usize, raw: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message: format!("`{raw}`: {e}"),
    })
}

fn parse_age(path: &Path, row: usize, column: usize, raw: &str) -> Result<Option<f64>> {
    let raw = raw.trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    let age = parse_cell(path, row, column, raw)?;
    if age < 0.0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row,
            column,
            message: format!("negative age {age}"),
        });
    }
    Ok(Some(age))
}

/// Reads a header-less numeric CSV matrix (rows = time points).
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let mut data = Vec::new();
    let mut ncols = None;
    let mut nrows = 0;
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        match ncols {
            None => ncols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: r + 1,
                    column: rec.len().min(c) + 1,
                    message: format!("expected {c} columns, found {}", rec.len()),
                })
            }
            _ => {}
        }
        for (c, cell) in rec.iter().enumerate() {
            data.push(parse_cell(path, r + 1, c + 1, cell)?);
        }
        nrows += 1;
    }
    let ncols = ncols.unwrap_or(0);
    Ok(DMatrix::from_row_slice(nrows, ncols, &data))
}

fn load_csv_dir(dir: &Path) -> Result<CohortDataset> {
    let manifest = dir.join(MANIFEST_FILE);
    if !manifest.is_file() {
        return Err(Error::Ingest {
            path: manifest,
            message: "missing manifest".into(),
        });
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&manifest)
        .map_err(|e| Error::Ingest {
            path: manifest.clone(),
            message: e.to_string(),
        })?;
    let headers = reader.headers()?.clone();
    let id_col = headers.iter().position(|h| h == "subject_id");
    let age_col = headers.iter().position(|h| h == "age");
    let (Some(id_col), Some(age_col)) = (id_col, age_col) else {
        return Err(Error::Ingest {
            path: manifest,
            message: "manifest header must contain `subject_id,age`".into(),
        });
    };

    let mut entries = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = r + 2;
        let id = rec.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                path: manifest.clone(),
                row,
                column: id_col + 1,
                message: "empty subject_id".into(),
            });
        }
        let age = parse_age(&manifest, row, age_col + 1, rec.get(age_col).unwrap_or(""))?;
        entries.push((id, age));
    }

    let subjects = entries
        .into_par_iter()
        .map(|(id, age)| {
            let file = dir.join(format!("{id}.csv"));
            if !file.is_file() {
                return Err(Error::Ingest {
                    path: file,
                    message: format!("time series for subject {id} not found"),
                });
            }
            let ts = read_matrix_csv(&file)?;
            Ok(SubjectRecord::new(id, ts, age))
        })
        .collect::<Result<Vec<_>>>()?;
    CohortDataset::new(subjects)
}

fn load_single_table(path: &Path) -> Result<CohortDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let (Some(id_col), Some(t_col)) = (find("subject_id"), find("time_index")) else {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            message: "table header must contain `subject_id` and `time_index`".into(),
        });
    };
    let age_col = find("age");
    let region_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != id_col && c != t_col && Some(c) != age_col)
        .collect();

    struct Acc {
        age: Option<f64>,
        rows: Vec<(f64, Vec<f64>)>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut acc: HashMap<String, Acc> = HashMap::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = r + 2;
        let id = rec.get(id_col).unwrap_or("").to_string();
        let t = parse_cell(path, row, t_col + 1, rec.get(t_col).unwrap_or(""))?;
        let values = region_cols
            .iter()
            .map(|&c| parse_cell(path, row, c + 1, rec.get(c).unwrap_or("")))
            .collect::<Result<Vec<_>>>()?;
        let age = match age_col {
            Some(c) => parse_age(path, row, c + 1, rec.get(c).unwrap_or(""))?,
            None => None,
        };
        let entry = acc.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Acc { age, rows: Vec::new() }
        });
        if entry.age != age {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row,
                column: age_col.map_or(0, |c| c + 1),
                message: format!("inconsistent age for subject {id}"),
            });
        }
        entry.rows.push((t, values));
    }

    let p = region_cols.len();
    let subjects = order
        .into_iter()
        .map(|id| {
            let mut a = acc.remove(&id).expect("subject recorded in order");
            a.rows.sort_by(|x, y| x.0.total_cmp(&y.0));
            let flat: Vec<f64> = a.rows.iter().flat_map(|(_, v)| v.iter().copied()).collect();
            SubjectRecord::new(id, DMatrix::from_row_slice(a.rows.len(), p, &flat), a.age)
        })
        .collect();
    CohortDataset::new(subjects)
}

/// Load a cohort from disk; covariances are not computed.
pub fn load_cohort(path: &Path, format: CohortFormat) -> Result<CohortDataset> {
    if !path.exists() {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            message: "path does not exist".into(),
        });
    }
    match format {
        CohortFormat::CsvDir => load_csv_dir(path),
        CohortFormat::SingleTable => load_single_table(path),
    }
}

/// Writes a cohort in the `csv_dir` layout (used by the synthetic tools and tests).
pub fn write_csv_dir(cohort: &CohortDataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut manifest = csv::Writer::from_path(dir.join(MANIFEST_FILE))?;
    manifest.write_record(["subject_id", "age"])?;
    for s in &cohort.subjects {
        let age = s.age.map(|a| format!("{a:?}")).unwrap_or_default();
        manifest.write_record([s.subject_id.as_str(), age.as_str()])?;
        let file = dir.join(format!("{}.csv", s.subject_id));
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&file)?;
        for row in s.timeseries.row_iter() {
            w.write_record(row.iter().map(|v| format!("{v:?}")))?;
        }
        w.flush()?;
        written.push(file);
    }
    manifest.flush()?;
    written.push(dir.join(MANIFEST_FILE));
    Ok(written)
}
