//! Cohort schema, ingestion, validation, and temporal splitting.
//!
//! The cohort CSV is the single ingestion format for real or synthetic data:
//! long-format rows `(patient_id, day, env, <continuous...>, <categorical...>)`,
//! one row per patient-day. The regression target is one of the continuous
//! columns (its value at day `t` is both that day's label and an input feature
//! for later days), so no separate label column exists on disk.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque patient identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatientId(pub String);

impl fmt::Display for PatientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PatientId {
    fn from(s: &str) -> Self {
        PatientId(s.to_string())
    }
}

/// A continuous (real-valued) feature with its measurement unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousFeature {
    pub name: String,
    pub unit: String,
}

/// A categorical feature with a fixed number of categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    pub cardinality: usize,
}

/// Ordered feature layout shared by every record of a cohort.
///
/// The target is one of the continuous features: the value measured at day `t`
/// is the day-`t` label, and the same column is an ordinary input feature for
/// any later prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile", into = "SchemaFile")]
pub struct FeatureSchema {
    continuous: Vec<ContinuousFeature>,
    categorical: Vec<CategoricalFeature>,
    target: String,
}

/// On-disk schema JSON shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SchemaFile {
    continuous: Vec<ContinuousFeature>,
    categorical: Vec<CategoricalFeature>,
    target: String,
}

impl TryFrom<SchemaFile> for FeatureSchema {
    type Error = Error;
    fn try_from(f: SchemaFile) -> Result<Self> {
        FeatureSchema::new(f.continuous, f.categorical, f.target)
    }
}

impl From<FeatureSchema> for SchemaFile {
    fn from(s: FeatureSchema) -> Self {
        SchemaFile {
            continuous: s.continuous,
            categorical: s.categorical,
            target: s.target,
        }
    }
}

impl FeatureSchema {
    pub fn new(
        continuous: Vec<ContinuousFeature>,
        categorical: Vec<CategoricalFeature>,
        target: impl Into<String>,
    ) -> Result<Self> {
        let target = target.into();
        let mut seen = HashSet::new();
        for name in continuous
            .iter()
            .map(|c| &c.name)
            .chain(categorical.iter().map(|c| &c.name))
        {
            if !seen.insert(name.clone()) {
                return Err(Error::Schema(format!("duplicate feature name '{name}'")));
            }
        }
        if !continuous.iter().any(|c| c.name == target) {
            return Err(Error::Schema(format!(
                "target '{target}' is not a continuous feature"
            )));
        }
        for c in &categorical {
            if c.cardinality < 2 {
                return Err(Error::Schema(format!(
                    "categorical '{}' has cardinality {}, need >= 2",
                    c.name, c.cardinality
                )));
            }
        }
        Ok(FeatureSchema {
            continuous,
            categorical,
            target,
        })
    }

    pub fn continuous(&self) -> &[ContinuousFeature] {
        &self.continuous
    }

    pub fn categorical(&self) -> &[CategoricalFeature] {
        &self.categorical
    }

    pub fn target_name(&self) -> &str {
        &self.target
    }

    /// Index of the target within the continuous block.
    pub fn target_index(&self) -> usize {
        self.continuous
            .iter()
            .position(|c| c.name == self.target)
            .expect("validated at construction")
    }

    pub fn continuous_index(&self, name: &str) -> Option<usize> {
        self.continuous.iter().position(|c| c.name == name)
    }

    pub fn categorical_index(&self, name: &str) -> Option<usize> {
        self.categorical.iter().position(|c| c.name == name)
    }

    /// Width of the encoded feature vector: continuous block plus all one-hot blocks.
    pub fn encoded_dim(&self) -> usize {
        self.continuous.len() + self.categorical.iter().map(|c| c.cardinality).sum::<usize>()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Schema mirroring the reference ICU cohort: nine biochemical markers and
    /// ten categorical demographic/nutrition attributes. The categorical
    /// albumin-supplementation attribute is suffixed `_USE` so names stay
    /// unique against the continuous ALB marker.
    pub fn anic_like() -> Self {
        let continuous = [
            ("ALB", "g/L"),
            ("IndirectBilirubin", "umol/L"),
            ("TB", "umol/L"),
            ("DirectBilirubin", "umol/L"),
            ("Hb", "g/L"),
            ("ALT", "u/L"),
            ("AST", "u/L"),
            ("MCH", "pg/L"),
            ("MCHC", "g/L"),
        ]
        .into_iter()
        .map(|(name, unit)| ContinuousFeature {
            name: name.to_string(),
            unit: unit.to_string(),
        })
        .collect();
        let categorical = [
            ("Age", 2),
            ("Sex", 2),
            ("Disease", 3),
            ("EN", 2),
            ("PN", 2),
            ("PN_EN", 2),
            ("ALB_USE", 2),
            ("EN_ALB", 2),
            ("PN_ALB", 2),
            ("EN_PN_ALB", 2),
        ]
        .into_iter()
        .map(|(name, cardinality)| CategoricalFeature {
            name: name.to_string(),
            cardinality,
        })
        .collect();
        FeatureSchema::new(continuous, categorical, "ALB").expect("static schema is valid")
    }
}

/// One patient-day observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRecord {
    pub patient: PatientId,
    /// 1-based day index within the cohort calendar.
    pub day: u32,
    /// Optional environment tag (e.g. admission year); used by the evaluation
    /// harness for grouping and holdouts, never by the model.
    pub env: Option<String>,
    /// Continuous values in schema order (includes the target's value this day).
    pub continuous: Vec<f64>,
    /// Category indices in schema order, each in `[0, cardinality)`.
    pub categorical: Vec<usize>,
    /// The target feature's measured value this day (redundant with the
    /// target's continuous column; enforced equal at validation).
    pub target: f64,
}

/// A validated long-format cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortTable {
    schema: FeatureSchema,
    records: Vec<CohortRecord>,
}

impl CohortTable {
    /// Validates and assembles a table. Row numbers in errors are 1-based
    /// positions within `records`.
    pub fn new(schema: FeatureSchema, records: Vec<CohortRecord>) -> Result<Self> {
        let n_cont = schema.continuous().len();
        let n_cat = schema.categorical().len();
        let target_idx = schema.target_index();
        let mut seen: HashSet<(PatientId, u32)> = HashSet::new();
        for (i, rec) in records.iter().enumerate() {
            let row = i + 1;
            if rec.day == 0 {
                return Err(Error::Validation {
                    row: Some(row),
                    message: format!("day must be >= 1 for patient {}", rec.patient),
                });
            }
            if rec.continuous.len() != n_cont {
                return Err(Error::Validation {
                    row: Some(row),
                    message: format!(
                        "expected {n_cont} continuous values, got {}",
                        rec.continuous.len()
                    ),
                });
            }
            if rec.categorical.len() != n_cat {
                return Err(Error::Validation {
                    row: Some(row),
                    message: format!(
                        "expected {n_cat} categorical values, got {}",
                        rec.categorical.len()
                    ),
                });
            }
            for (j, v) in rec.continuous.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Validation {
                        row: Some(row),
                        message: format!(
                            "non-finite value for '{}'",
                            schema.continuous()[j].name
                        ),
                    });
                }
            }
            for (j, &idx) in rec.categorical.iter().enumerate() {
                let card = schema.categorical()[j].cardinality;
                if idx >= card {
                    return Err(Error::Validation {
                        row: Some(row),
                        message: format!(
                            "category index {idx} out of range for '{}' (cardinality {card})",
                            schema.categorical()[j].name
                        ),
                    });
                }
            }
            if rec.target.to_bits() != rec.continuous[target_idx].to_bits() {
                return Err(Error::Validation {
                    row: Some(row),
                    message: format!(
                        "target {} disagrees with the '{}' column value {}",
                        rec.target,
                        schema.target_name(),
                        rec.continuous[target_idx]
                    ),
                });
            }
            if !seen.insert((rec.patient.clone(), rec.day)) {
                return Err(Error::Validation {
                    row: Some(row),
                    message: format!("duplicate (patient, day) = ({}, {})", rec.patient, rec.day),
                });
            }
        }
        // Days per patient must form a contiguous range from that patient's first day.
        let mut days_by_patient: BTreeMap<&PatientId, Vec<u32>> = BTreeMap::new();
        for rec in &records {
            days_by_patient.entry(&rec.patient).or_default().push(rec.day);
        }
        for (patient, mut days) in days_by_patient {
            days.sort_unstable();
            let first = days[0];
            for (k, &d) in days.iter().enumerate() {
                if d != first + k as u32 {
                    return Err(Error::Validation {
                        row: None,
                        message: format!(
                            "days for patient {patient} are not contiguous: missing day {}",
                            first + k as u32
                        ),
                    });
                }
            }
        }
        Ok(CohortTable { schema, records })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn records(&self) -> &[CohortRecord] {
        &self.records
    }

    pub fn n_records(&self) -> usize {
        self.records.len()
    }

    /// Patients in order of first appearance.
    pub fn patients(&self) -> Vec<PatientId> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for rec in &self.records {
            if seen.insert(rec.patient.clone()) {
                out.push(rec.patient.clone());
            }
        }
        out
    }

    /// Distinct day indices, ascending.
    pub fn days(&self) -> Vec<u32> {
        let mut days: Vec<u32> = self.records.iter().map(|r| r.day).collect();
        days.sort_unstable();
        days.dedup();
        days
    }

    /// Distinct environment tags in order of first appearance.
    pub fn environments(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for rec in &self.records {
            if let Some(env) = &rec.env {
                if seen.insert(env.clone()) {
                    out.push(env.clone());
                }
            }
        }
        out
    }

    /// Sub-table keeping only records whose environment tag is in `envs`.
    /// Used by the evaluation harness for environment holdouts.
    pub fn filter_by_envs(&self, envs: &[String]) -> Result<CohortTable> {
        let keep: Vec<CohortRecord> = self
            .records
            .iter()
            .filter(|r| r.env.as_ref().is_some_and(|e| envs.contains(e)))
            .cloned()
            .collect();
        if keep.is_empty() {
            return Err(Error::Split(format!(
                "no records match environments {envs:?}"
            )));
        }
        CohortTable::new(self.schema.clone(), keep)
    }

    /// The target series of one patient, ordered by day.
    pub fn target_series(&self, patient: &PatientId) -> Vec<(u32, f64)> {
        let mut out: Vec<(u32, f64)> = self
            .records
            .iter()
            .filter(|r| &r.patient == patient)
            .map(|r| (r.day, r.target))
            .collect();
        out.sort_unstable_by_key(|&(d, _)| d);
        out
    }

    /// Writes the cohort CSV. Floats are printed in shortest round-trip form,
    /// so `load_cohort` recovers bit-identical values.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("patient_id,day,env");
        for c in self.schema.continuous() {
            out.push(',');
            out.push_str(&c.name);
        }
        for c in self.schema.categorical() {
            out.push(',');
            out.push_str(&c.name);
        }
        out.push('\n');
        for rec in &self.records {
            check_csv_field(&rec.patient.0)?;
            out.push_str(&rec.patient.0);
            out.push(',');
            out.push_str(&rec.day.to_string());
            out.push(',');
            if let Some(env) = &rec.env {
                check_csv_field(env)?;
                out.push_str(env);
            }
            for v in &rec.continuous {
                out.push(',');
                out.push_str(&format_f64(*v));
            }
            for v in &rec.categorical {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Shortest decimal representation that round-trips exactly.
fn format_f64(v: f64) -> String {
    format!("{v}")
}

fn check_csv_field(s: &str) -> Result<()> {
    if s.contains([',', '"', '\n', '\r']) {
        return Err(Error::Validation {
            row: None,
            message: format!("field '{s}' contains a CSV delimiter or quote"),
        });
    }
    Ok(())
}

/// Loads and validates a cohort CSV against `schema`.
///
/// The header must be `patient_id,day,env,<continuous...>,<categorical...>`
/// in schema order; the `env` column may be omitted entirely or left empty
/// per row. Row numbers in errors are 1-based over data rows.
pub fn load_cohort(path: &Path, schema: &FeatureSchema) -> Result<CohortTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cohort_csv(&text, schema)
}

/// Parses cohort CSV text; see [`load_cohort`].
pub fn parse_cohort_csv(text: &str, schema: &FeatureSchema) -> Result<CohortTable> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Schema("empty file: missing header".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();

    let mut expected: Vec<&str> = vec!["patient_id", "day", "env"];
    expected.extend(schema.continuous().iter().map(|c| c.name.as_str()));
    expected.extend(schema.categorical().iter().map(|c| c.name.as_str()));
    let has_env = cols.get(2) == Some(&"env");
    let expected_no_env: Vec<&str> = expected
        .iter()
        .copied()
        .filter(|&c| c != "env")
        .collect();
    let want = if has_env { &expected } else { &expected_no_env };
    if cols != *want {
        // Name a specific missing column when possible.
        for name in &expected {
            if *name != "env" && !cols.contains(name) {
                return Err(Error::Schema(format!("missing column '{name}'")));
            }
        }
        return Err(Error::Schema(format!(
            "header mismatch: expected {want:?}, got {cols:?}"
        )));
    }

    let n_cont = schema.continuous().len();
    let n_cat = schema.categorical().len();
    let target_idx = schema.target_index();
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != want.len() {
            return Err(Error::Validation {
                row: Some(row),
                message: format!("expected {} fields, got {}", want.len(), fields.len()),
            });
        }
        let mut it = fields.into_iter();
        let patient = PatientId(it.next().unwrap().to_string());
        let day_str = it.next().unwrap();
        let day: u32 = day_str.parse().map_err(|_| Error::Validation {
            row: Some(row),
            message: format!("day '{day_str}' is not a positive integer"),
        })?;
        let env = if has_env {
            let e = it.next().unwrap();
            if e.is_empty() {
                None
            } else {
                Some(e.to_string())
            }
        } else {
            None
        };
        let mut continuous = Vec::with_capacity(n_cont);
        for j in 0..n_cont {
            let s = it.next().unwrap();
            let v: f64 = s.parse().map_err(|_| Error::Validation {
                row: Some(row),
                message: format!(
                    "non-numeric value '{s}' for '{}'",
                    schema.continuous()[j].name
                ),
            })?;
            continuous.push(v);
        }
        let mut categorical = Vec::with_capacity(n_cat);
        for j in 0..n_cat {
            let s = it.next().unwrap();
            let v: usize = s.parse().map_err(|_| Error::Validation {
                row: Some(row),
                message: format!(
                    "non-integer category '{s}' for '{}'",
                    schema.categorical()[j].name
                ),
            })?;
            categorical.push(v);
        }
        let target = continuous[target_idx];
        records.push(CohortRecord {
            patient,
            day,
            env,
            continuous,
            categorical,
            target,
        });
    }
    CohortTable::new(schema.clone(), records)
}

/// How to partition a cohort into train/validation/test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Earlier days train, later days test; induces the temporal shift.
    ByTime,
    /// Disjoint patient sets; every part keeps full series.
    ByPatient,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "by-time" => Ok(SplitMode::ByTime),
            "by-patient" => Ok(SplitMode::ByPatient),
            other => Err(Error::Config(format!(
                "unknown split mode '{other}' (expected by-time or by-patient)"
            ))),
        }
    }
}

/// Train/validation/test partition of a cohort.
#[derive(Debug, Clone)]
pub struct TemporalSplit {
    pub train: CohortTable,
    pub val: CohortTable,
    pub test: CohortTable,
}

/// Partitions `table` so that every record lands in exactly one part.
///
/// `by-time` cuts the sorted global day axis; `by-patient` cuts the patient
/// list in order of first appearance (deterministic for a given table).
/// Cut points use cumulative rounding, so fractions like (0.8, 0.1, 0.1) on
/// ten units give 8/1/1.
pub fn split_temporal(
    table: &CohortTable,
    mode: SplitMode,
    fractions: (f64, f64, f64),
) -> Result<TemporalSplit> {
    let (r_train, r_val, r_test) = fractions;
    if r_train <= 0.0 || r_val <= 0.0 || r_test <= 0.0 {
        return Err(Error::Config(format!(
            "split fractions must be positive, got ({r_train}, {r_val}, {r_test})"
        )));
    }
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {}",
            r_train + r_val + r_test
        )));
    }

    let assign = |n: usize| -> (usize, usize) {
        let c1 = (n as f64 * r_train).round() as usize;
        let c2 = (n as f64 * (r_train + r_val)).round() as usize;
        (c1.min(n), c2.min(n))
    };

    let (train_recs, val_recs, test_recs) = match mode {
        SplitMode::ByTime => {
            let days = table.days();
            let (c1, c2) = assign(days.len());
            let train_days: HashSet<u32> = days[..c1].iter().copied().collect();
            let val_days: HashSet<u32> = days[c1..c2].iter().copied().collect();
            partition(table, |r| {
                if train_days.contains(&r.day) {
                    0
                } else if val_days.contains(&r.day) {
                    1
                } else {
                    2
                }
            })
        }
        SplitMode::ByPatient => {
            let patients = table.patients();
            let (c1, c2) = assign(patients.len());
            let rank: HashMap<&PatientId, usize> =
                patients.iter().enumerate().map(|(i, p)| (p, i)).collect();
            partition(table, |r| {
                let i = rank[&r.patient];
                if i < c1 {
                    0
                } else if i < c2 {
                    1
                } else {
                    2
                }
            })
        }
    };

    for (name, recs) in [("train", &train_recs), ("val", &val_recs), ("test", &test_recs)] {
        if recs.is_empty() {
            return Err(Error::Split(format!(
                "{name} part is empty under fractions ({r_train}, {r_val}, {r_test})"
            )));
        }
    }

    Ok(TemporalSplit {
        train: CohortTable::new(table.schema().clone(), train_recs)?,
        val: CohortTable::new(table.schema().clone(), val_recs)?,
        test: CohortTable::new(table.schema().clone(), test_recs)?,
    })
}

/// Environment-holdout protocol: patients of `train_envs` are split by
/// patient into train/validation at `train_fraction`, and `test_env`'s
/// patients form the test part with their full series.
pub fn environment_holdout_split(
    table: &CohortTable,
    train_envs: &[String],
    test_env: &str,
    train_fraction: f64,
) -> Result<TemporalSplit> {
    if train_envs.iter().any(|e| e == test_env) {
        return Err(Error::Config(format!(
            "test environment '{test_env}' also appears in the training environments"
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let pool = table.filter_by_envs(train_envs)?;
    let test = table.filter_by_envs(&[test_env.to_string()])?;
    let patients = pool.patients();
    if patients.len() < 2 {
        return Err(Error::Split(
            "environment holdout needs at least 2 training-environment patients".into(),
        ));
    }
    let cut = ((patients.len() as f64) * train_fraction).round() as usize;
    let cut = cut.clamp(1, patients.len() - 1);
    let train_set: HashSet<&PatientId> = patients[..cut].iter().collect();
    let mut train_recs = Vec::new();
    let mut val_recs = Vec::new();
    for rec in pool.records() {
        if train_set.contains(&rec.patient) {
            train_recs.push(rec.clone());
        } else {
            val_recs.push(rec.clone());
        }
    }
    Ok(TemporalSplit {
        train: CohortTable::new(table.schema().clone(), train_recs)?,
        val: CohortTable::new(table.schema().clone(), val_recs)?,
        test,
    })
}

fn partition(
    table: &CohortTable,
    part_of: impl Fn(&CohortRecord) -> usize,
) -> (Vec<CohortRecord>, Vec<CohortRecord>, Vec<CohortRecord>) {
    let mut parts = (Vec::new(), Vec::new(), Vec::new());
    for rec in table.records() {
        match part_of(rec) {
            0 => parts.0.push(rec.clone()),
            1 => parts.1.push(rec.clone()),
            _ => parts.2.push(rec.clone()),
        }
    }
    parts
}
