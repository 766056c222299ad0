//! Longitudinal dataset representation, CSV ingestion, biomarker
//! standardization and seeded train/calibration/test splitting.
//!
//! The on-disk format is long CSV, one row per (subject, visit):
//!
//! ```text
//! subject_id,time_months,biomarker,<feature_1..feature_d>,<group columns>
//! ```
//!
//! The month-0 row of every subject is its baseline observation; features and
//! group labels are read from that row.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DataError;

pub const SUBJECT_COLUMN: &str = "subject_id";
pub const TIME_COLUMN: &str = "time_months";
pub const BIOMARKER_COLUMN: &str = "biomarker";

/// One follow-up observation, `time` in whole months since the first visit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub time: u32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub features: Vec<f64>,
    pub group_labels: BTreeMap<String, String>,
    /// Biomarker at month 0.
    pub baseline_value: f64,
    /// Follow-up visits, strictly increasing in time, every time >= 1.
    pub visits: Vec<Visit>,
}

impl SubjectRecord {
    /// Predictor input: the covariates followed by the baseline biomarker.
    pub fn input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.features.len() + 1);
        x.extend_from_slice(&self.features);
        x.push(self.baseline_value);
        x
    }

    pub fn visit_times(&self) -> Vec<u32> {
        self.visits.iter().map(|v| v.time).collect()
    }

    pub fn group(&self, column: &str) -> Option<&str> {
        self.group_labels.get(column).map(String::as_str)
    }

    pub fn last_visit(&self) -> Option<&Visit> {
        self.visits.last()
    }
}

/// Biomarker z-scoring parameters, computed on training subjects only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: f64,
    pub std: f64,
}

impl StandardizationStats {
    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub subjects: Vec<SubjectRecord>,
    pub feature_names: Vec<String>,
    pub group_columns: Vec<String>,
    pub standardization: Option<StandardizationStats>,
}

impl Dataset {
    /// Builds a dataset after checking ids, feature lengths and visit order.
    pub fn new(
        subjects: Vec<SubjectRecord>,
        feature_names: Vec<String>,
        group_columns: Vec<String>,
    ) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(subjects.len());
        for s in &subjects {
            if !seen.insert(s.subject_id.as_str()) {
                return Err(DataError::DuplicateSubject(s.subject_id.clone()));
            }
            if s.features.len() != feature_names.len() {
                return Err(DataError::FeatureLength {
                    subject: s.subject_id.clone(),
                    got: s.features.len(),
                    expected: feature_names.len(),
                });
            }
            let mut prev = 0;
            for v in &s.visits {
                if v.time <= prev {
                    return Err(DataError::DuplicateVisit {
                        subject: s.subject_id.clone(),
                        time: v.time,
                    });
                }
                prev = v.time;
            }
        }
        Ok(Self {
            subjects,
            feature_names,
            group_columns,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Dimension of [`SubjectRecord::input`].
    pub fn input_dim(&self) -> usize {
        self.feature_names.len() + 1
    }

    pub fn n_visit_rows(&self) -> usize {
        self.subjects.iter().map(|s| s.visits.len()).sum()
    }

    /// Subjects with no follow-up visits.
    pub fn n_empty(&self) -> usize {
        self.subjects.iter().filter(|s| s.visits.is_empty()).count()
    }

    /// A new dataset holding the given subjects, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
            group_columns: self.group_columns.clone(),
            standardization: self.standardization,
        }
    }

    /// Subjects that carry at least one follow-up visit.
    pub fn scorable(&self) -> impl Iterator<Item = &SubjectRecord> {
        self.subjects.iter().filter(|s| !s.visits.is_empty())
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }
}

/// Which CSV column plays which role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub subject_id: String,
    pub time: String,
    pub biomarker: String,
    pub features: Vec<String>,
    pub groups: Vec<String>,
}

impl CsvSchema {
    pub fn new(features: Vec<String>, groups: Vec<String>) -> Self {
        Self {
            subject_id: SUBJECT_COLUMN.to_string(),
            time: TIME_COLUMN.to_string(),
            biomarker: BIOMARKER_COLUMN.to_string(),
            features,
            groups,
        }
    }

    /// Standard layout: every column after the first three that is not a
    /// listed group column is a feature.
    pub fn infer(header: &[String], groups: &[String]) -> Self {
        let features = header
            .iter()
            .filter(|h| {
                h.as_str() != SUBJECT_COLUMN
                    && h.as_str() != TIME_COLUMN
                    && h.as_str() != BIOMARKER_COLUMN
                    && !groups.contains(h)
            })
            .cloned()
            .collect();
        Self::new(features, groups.to_vec())
    }
}

/// Summary of a CSV load.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub rows: usize,
    pub subjects: usize,
    /// Subjects with only a baseline row.
    pub empty_trajectories: usize,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<(Dataset, LoadReport), DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

/// Reads the header of a CSV file.
pub fn read_header(path: impl AsRef<Path>) -> Result<Vec<String>, DataError> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.headers()?.iter().map(str::to_string).collect())
}

/// Schema for a file in the standard layout. Without explicit `groups`, any
/// extra column whose first value is not numeric is taken as a group column.
pub fn sniff_schema(path: impl AsRef<Path>, groups: &[String]) -> Result<CsvSchema, DataError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if !groups.is_empty() {
        return Ok(CsvSchema::infer(&header, groups));
    }
    let first = rdr.records().next().transpose()?;
    let inferred: Vec<String> = match first {
        Some(rec) => header
            .iter()
            .zip(rec.iter())
            .filter(|(h, v)| {
                ![SUBJECT_COLUMN, TIME_COLUMN, BIOMARKER_COLUMN].contains(&h.as_str()) && v.trim().parse::<f64>().is_err()
            })
            .map(|(h, _)| h.clone())
            .collect(),
        None => Vec::new(),
    };
    Ok(CsvSchema::infer(&header, &inferred))
}

struct PendingSubject {
    baseline: Option<(f64, Vec<f64>, BTreeMap<String, String>)>,
    visits: Vec<Visit>,
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<(Dataset, LoadReport), DataError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let id_col = col(&schema.subject_id)?;
    let time_col = col(&schema.time)?;
    let y_col = col(&schema.biomarker)?;
    let feature_cols = schema.features.iter().map(|f| col(f)).collect::<Result<Vec<_>, _>>()?;
    let group_cols = schema.groups.iter().map(|g| col(g)).collect::<Result<Vec<_>, _>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, PendingSubject> = HashMap::new();
    let mut rows = 0;

    for record in rdr.records() {
        let record = record?;
        rows += 1;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(rows + 1);
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let parse = |i: usize, name: &str| {
            field(i).parse::<f64>().map_err(|_| DataError::Parse {
                row,
                column: name.to_string(),
                value: field(i).to_string(),
            })
        };

        let id = field(id_col).to_string();
        let time = field(time_col)
            .parse::<u32>()
            .map_err(|_| DataError::BadTime {
                row,
                value: field(time_col).to_string(),
            })?;
        let value = parse(y_col, &schema.biomarker)?;
        let features = feature_cols
            .iter()
            .zip(&schema.features)
            .map(|(&i, name)| parse(i, name))
            .collect::<Result<Vec<_>, _>>()?;

        let entry = pending.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            PendingSubject {
                baseline: None,
                visits: Vec::new(),
            }
        });
        if time == 0 {
            if entry.baseline.is_some() {
                return Err(DataError::DuplicateVisit { subject: id, time });
            }
            let groups = group_cols
                .iter()
                .zip(&schema.groups)
                .map(|(&i, name)| (name.clone(), field(i).to_string()))
                .collect();
            entry.baseline = Some((value, features, groups));
        } else {
            if entry.visits.iter().any(|v| v.time == time) {
                return Err(DataError::DuplicateVisit { subject: id, time });
            }
            entry.visits.push(Visit { time, value });
        }
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut p = pending.remove(&id).expect("subject recorded in order");
        let (baseline_value, features, group_labels) =
            p.baseline.take().ok_or_else(|| DataError::MissingBaseline(id.clone()))?;
        p.visits.sort_by_key(|v| v.time);
        subjects.push(SubjectRecord {
            subject_id: id,
            features,
            group_labels,
            baseline_value,
            visits: p.visits,
        });
    }

    let ds = Dataset::new(subjects, schema.features.clone(), schema.groups.clone())?;
    let report = LoadReport {
        rows,
        subjects: ds.len(),
        empty_trajectories: ds.n_empty(),
    };
    if report.empty_trajectories > 0 {
        log::warn!(
            "{} subject(s) have no follow-up visits; they are excluded from scoring",
            report.empty_trajectories
        );
    }
    Ok((ds, report))
}

/// Writes the dataset in the long CSV layout accepted by [`read_csv`].
pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![
        SUBJECT_COLUMN.to_string(),
        TIME_COLUMN.to_string(),
        BIOMARKER_COLUMN.to_string(),
    ];
    header.extend(ds.feature_names.iter().cloned());
    header.extend(ds.group_columns.iter().cloned());
    wtr.write_record(&header)?;

    for s in &ds.subjects {
        let tail: Vec<String> = s
            .features
            .iter()
            .map(|f| f.to_string())
            .chain(
                ds.group_columns
                    .iter()
                    .map(|g| s.group_labels.get(g).cloned().unwrap_or_default()),
            )
            .collect();
        let rows = std::iter::once((0, s.baseline_value))
            .chain(s.visits.iter().map(|v| (v.time, v.value)));
        for (t, y) in rows {
            let mut rec = vec![s.subject_id.clone(), t.to_string(), y.to_string()];
            rec.extend(tail.iter().cloned());
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Z-scores every biomarker value (baseline and visits).
///
/// With `stats == None` the mean and population standard deviation are
/// computed from `ds` itself, which must then be the training set.
pub fn standardize(
    ds: &Dataset,
    stats: Option<StandardizationStats>,
) -> Result<(Dataset, StandardizationStats), DataError> {
    let stats = match stats {
        Some(s) => s,
        None => compute_stats(ds)?,
    };
    if !(stats.std > 0.0) {
        return Err(DataError::ZeroVariance);
    }
    let mut out = ds.clone();
    for s in &mut out.subjects {
        s.baseline_value = stats.apply(s.baseline_value);
        for v in &mut s.visits {
            v.value = stats.apply(v.value);
        }
    }
    out.standardization = Some(stats);
    Ok((out, stats))
}

fn compute_stats(ds: &Dataset) -> Result<StandardizationStats, DataError> {
    let values: Vec<f64> = ds
        .subjects
        .iter()
        .flat_map(|s| std::iter::once(s.baseline_value).chain(s.visits.iter().map(|v| v.value)))
        .collect();
    if values.is_empty() {
        return Err(DataError::NoObservations);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    // relative threshold: constant columns leave only rounding noise
    if std <= 1e-12 * mean.abs().max(1.0) {
        return Err(DataError::ZeroVariance);
    }
    Ok(StandardizationStats { mean, std })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub calib: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// `floor(x)` that tolerates representation error such as `0.29 * 100`.
pub(crate) fn floor_count(x: f64) -> usize {
    (x + 1e-9).floor().max(0.0) as usize
}

/// Shuffles `0..n` with a seeded generator, sends `floor(n * test_frac)`
/// subjects to test, then `floor(rest * calib_frac)` of the remainder to
/// calibration and the rest to training. Each index set is sorted.
pub fn split(n: usize, test_frac: f64, calib_frac: f64, seed: u64) -> Result<SplitIndices, DataError> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(DataError::SplitConfig(format!(
            "test fraction must lie in (0, 1), got {test_frac}"
        )));
    }
    if !(0.0..1.0).contains(&calib_frac) {
        return Err(DataError::SplitConfig(format!(
            "calibration fraction must lie in [0, 1), got {calib_frac}"
        )));
    }
    let n_test = floor_count(n as f64 * test_frac);
    let given = n - n_test;
    let n_calib = floor_count(given as f64 * calib_frac);
    if given <= n_calib {
        return Err(DataError::SplitConfig(format!(
            "fractions leave no training subjects (n = {n}, test = {n_test}, calibration = {n_calib})"
        )));
    }

    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);

    let mut test = idx[..n_test].to_vec();
    let mut calib = idx[n_test..n_test + n_calib].to_vec();
    let mut train = idx[n_test + n_calib..].to_vec();
    test.sort_unstable();
    calib.sort_unstable();
    train.sort_unstable();
    Ok(SplitIndices {
        train,
        calib,
        test,
        seed,
    })
}
