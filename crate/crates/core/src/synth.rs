//! Synthetic cohort generator with planted invariant and variant mechanisms
//! and controllable environment shift.
//!
//! The generative law, all in measurement units:
//!
//! * invariant and distractor features are stationary per patient: a latent
//!   per-patient level drawn from the feature's (mean, std) plus day-to-day
//!   wiggle;
//! * the target for day `t >= 2` is
//!   `y[p,t] = w . x_inv[p,t-1] + gamma * mean_peers(w . x_inv[.,t-1]) + eps`,
//!   with peers the L1-KNN neighbors over the standardized full continuous
//!   block of day `t-1` (the same rule the preprocessing graph uses); day-1
//!   targets are plain draws from the target's range;
//! * each variant feature tracks the standardized target with an
//!   environment-specific coefficient:
//!   `x_var[p,t] = mean_j + std_j * (beta_env * (y[p,t] - mu_y) / sigma_y + eta)`,
//!   so its correlation with the target flips sign wherever beta does while
//!   the feature stays on its configured scale.
//!
//! Everything is a pure function of (config, seed).

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortRecord, CohortTable, FeatureSchema};
use crate::error::{Error, Result};
use crate::preprocess::knn_edges;

/// One environment: a name and its variant-correlation coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub name: String,
    pub beta: f64,
}

/// Reference means and standard deviations of the nine biochemical markers,
/// aligned with [`FeatureSchema::anic_like`] order.
pub fn reference_ranges() -> Vec<(f64, f64)> {
    vec![
        (36.9, 5.5),    // ALB
        (12.6, 13.0),   // IndirectBilirubin
        (25.4, 49.2),   // TB
        (12.7, 36.7),   // DirectBilirubin
        (106.5, 23.2),  // Hb
        (85.4, 296.9),  // ALT
        (102.0, 434.9), // AST
        (30.0, 2.5),    // MCH
        (324.4, 13.6),  // MCHC
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub n_days: u32,
    pub environments: Vec<EnvironmentSpec>,
    /// Continuous features driving the target (the invariant block).
    pub invariant_features: Vec<String>,
    /// Continuous features tied to the target with environment-specific sign.
    pub variant_features: Vec<String>,
    /// `w` over the invariant block.
    pub invariant_coefficients: Vec<f64>,
    /// `gamma`: weight of the peers' mean invariant signal.
    pub neighbor_strength: f64,
    /// Std of the target noise `eps`, in target units.
    pub noise_sigma: f64,
    /// Std of the variant noise `eta`, in standardized units.
    pub variant_noise: f64,
    /// Day-to-day variation of stationary features, as a fraction of their std.
    pub within_patient_wiggle: f64,
    /// Per continuous feature (mean, std), in schema order.
    pub feature_ranges: Vec<(f64, f64)>,
    pub k_peers: usize,
    /// Optionally tie one categorical feature to the invariant mechanism
    /// (its category becomes a quantile bin of the patient's latent signal).
    pub tie_categorical: Option<String>,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Default planted cohort on the reference schema: invariant block
    /// (Hb, MCH, MCHC), variant block (IndirectBilirubin, TB,
    /// DirectBilirubin), ALT/AST as pure distractors.
    pub fn standard(n_patients: usize, n_days: u32, betas: &[f64], seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_patients,
            n_days,
            environments: betas
                .iter()
                .enumerate()
                .map(|(i, &beta)| EnvironmentSpec {
                    name: format!("e{i}"),
                    beta,
                })
                .collect(),
            invariant_features: vec!["Hb".into(), "MCH".into(), "MCHC".into()],
            variant_features: vec![
                "IndirectBilirubin".into(),
                "TB".into(),
                "DirectBilirubin".into(),
            ],
            invariant_coefficients: vec![0.077, 0.462, 0.019],
            neighbor_strength: 0.3,
            noise_sigma: 1.5,
            variant_noise: 0.3,
            within_patient_wiggle: 0.4,
            feature_ranges: reference_ranges(),
            k_peers: 5.min(n_patients.saturating_sub(1)).max(1),
            tie_categorical: None,
            seed,
        }
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema::anic_like()
    }

    pub fn validate(&self) -> Result<()> {
        let schema = self.schema();
        if self.n_patients == 0 || self.n_days == 0 {
            return Err(Error::Config("need at least 1 patient and 1 day".into()));
        }
        if self.environments.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 environments so the variant correlation can shift, got {}",
                self.environments.len()
            )));
        }
        let betas: Vec<f64> = self.environments.iter().map(|e| e.beta).collect();
        let has_flip = betas
            .iter()
            .any(|&a| betas.iter().any(|&b| a.signum() != b.signum() && a != 0.0 && b != 0.0));
        if !has_flip {
            return Err(Error::Config(
                "at least one pair of environments must have opposite-sign beta".into(),
            ));
        }
        let mut names = std::collections::HashSet::new();
        for e in &self.environments {
            if !names.insert(&e.name) {
                return Err(Error::Config(format!("duplicate environment '{}'", e.name)));
            }
        }
        if self.noise_sigma < 0.0 || self.variant_noise < 0.0 || self.within_patient_wiggle < 0.0 {
            return Err(Error::Config("noise magnitudes must be >= 0".into()));
        }
        if self.k_peers >= self.n_patients {
            return Err(Error::Config(format!(
                "k_peers {} must be below n_patients {}",
                self.k_peers, self.n_patients
            )));
        }
        if self.invariant_coefficients.len() != self.invariant_features.len() {
            return Err(Error::Config(
                "invariant_coefficients length must match invariant_features".into(),
            ));
        }
        if self.feature_ranges.len() != schema.continuous().len() {
            return Err(Error::Config(format!(
                "feature_ranges has {} entries, schema has {} continuous features",
                self.feature_ranges.len(),
                schema.continuous().len()
            )));
        }
        if self.feature_ranges.iter().any(|&(_, s)| s <= 0.0) {
            return Err(Error::Config("feature stds must be positive".into()));
        }
        for name in self.invariant_features.iter().chain(&self.variant_features) {
            if schema.continuous_index(name).is_none() {
                return Err(Error::Config(format!(
                    "'{name}' is not a continuous feature of the schema"
                )));
            }
            if name == schema.target_name() {
                return Err(Error::Config(
                    "the target cannot be in the invariant or variant block".into(),
                ));
            }
        }
        for name in &self.invariant_features {
            if self.variant_features.contains(name) {
                return Err(Error::Config(format!(
                    "'{name}' cannot be both invariant and variant"
                )));
            }
        }
        if let Some(name) = &self.tie_categorical {
            if schema.categorical_index(name).is_none() {
                return Err(Error::Config(format!(
                    "tie_categorical '{name}' is not a categorical feature"
                )));
            }
        }
        Ok(())
    }
}

/// Mechanism parameters echoed for verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    pub invariant_coefficients: Vec<f64>,
    pub neighbor_strength: f64,
    pub k_peers: usize,
    pub noise_sigma: f64,
    pub feature_ranges: Vec<(f64, f64)>,
}

/// Ground truth about what was planted, for tests and verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedAnnotation {
    pub invariant: Vec<String>,
    pub variant: Vec<String>,
    pub beta: BTreeMap<String, f64>,
    pub mechanism: MechanismSpec,
}

impl PlantedAnnotation {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<PlantedAnnotation> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Box-Muller standard normal draw.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// The noiseless mechanism for one day given the previous day's full
/// continuous matrix (unit space, patients in generation order): the
/// invariant signal plus `gamma` times the mean signal of each patient's
/// `k` nearest peers under the standardized L1-KNN rule.
fn mechanism_from_previous_day(
    prev_full: &[Vec<f64>],
    inv_indices: &[usize],
    w: &[f64],
    gamma: f64,
    k_peers: usize,
    ranges: &[(f64, f64)],
) -> Vec<f64> {
    let n = prev_full.len();
    let inv_score: Vec<f64> = prev_full
        .iter()
        .map(|row| {
            inv_indices
                .iter()
                .zip(w)
                .map(|(&j, &wj)| wj * row[j])
                .sum::<f64>()
        })
        .collect();
    if gamma == 0.0 || n < 2 || k_peers == 0 {
        return inv_score
            .iter()
            .map(|&s| s + gamma * 0.0)
            .collect();
    }
    let standardized: Vec<Vec<f64>> = prev_full
        .iter()
        .map(|row| {
            row.iter()
                .zip(ranges)
                .map(|(v, (m, s))| (v - m) / s)
                .collect()
        })
        .collect();
    let edges = knn_edges(&standardized, k_peers);
    let mut peer_sum = vec![0.0; n];
    let mut peer_cnt = vec![0usize; n];
    for (src, dst) in edges {
        peer_sum[src] += inv_score[dst];
        peer_cnt[src] += 1;
    }
    inv_score
        .iter()
        .enumerate()
        .map(|(p, &s)| {
            let peer_mean = if peer_cnt[p] > 0 {
                peer_sum[p] / peer_cnt[p] as f64
            } else {
                0.0
            };
            s + gamma * peer_mean
        })
        .collect()
}

/// Generates a cohort and the annotation describing what was planted.
/// Deterministic in (config, seed); environment tags are set per record.
pub fn generate_cohort(config: &GeneratorConfig) -> Result<(CohortTable, PlantedAnnotation)> {
    config.validate()?;
    let schema = config.schema();
    let n_cont = schema.continuous().len();
    let target_idx = schema.target_index();
    let (target_mean, target_std) = config.feature_ranges[target_idx];
    let inv_indices: Vec<usize> = config
        .invariant_features
        .iter()
        .map(|n| schema.continuous_index(n).unwrap())
        .collect();
    let var_indices: Vec<usize> = config
        .variant_features
        .iter()
        .map(|n| schema.continuous_index(n).unwrap())
        .collect();
    // Stationary features: everything except the target and the variant block.
    let stationary: Vec<usize> = (0..n_cont)
        .filter(|j| *j != target_idx && !var_indices.contains(j))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_patients;
    let n_envs = config.environments.len();
    let env_of: Vec<usize> = (0..n).map(|p| p % n_envs).collect();

    // Per-patient latent levels for stationary features.
    let mut latent = vec![vec![0.0; n_cont]; n];
    for row in latent.iter_mut() {
        for &j in &stationary {
            let (mean, std) = config.feature_ranges[j];
            row[j] = mean + std * normal(&mut rng);
        }
    }

    // Per-patient demographics; daily treatment flags drawn later.
    let cats = schema.categorical().to_vec();
    let demo_names = ["Age", "Sex", "Disease"];
    let mut patient_cats = vec![vec![0usize; cats.len()]; n];
    for row in patient_cats.iter_mut() {
        for (j, cat) in cats.iter().enumerate() {
            if demo_names.contains(&cat.name.as_str()) {
                row[j] = rng.random_range(0..cat.cardinality);
            }
        }
    }
    if let Some(tied) = &config.tie_categorical {
        let cat_j = schema.categorical_index(tied).unwrap();
        let card = cats[cat_j].cardinality;
        let scores: Vec<f64> = latent
            .iter()
            .map(|row| {
                inv_indices
                    .iter()
                    .zip(&config.invariant_coefficients)
                    .map(|(&j, &w)| w * row[j])
                    .sum()
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
        for (rank, &p) in order.iter().enumerate() {
            patient_cats[p][cat_j] = (rank * card) / n;
        }
    }

    // values[day][patient][feature], filled day by day.
    let days = config.n_days as usize;
    let mut values = vec![vec![vec![0.0; n_cont]; n]; days];
    let mut daily_cats = vec![vec![vec![0usize; cats.len()]; n]; days];

    for day in 0..days {
        // Stationary features wiggle around the latent level.
        for p in 0..n {
            for &j in &stationary {
                let (_, std) = config.feature_ranges[j];
                values[day][p][j] =
                    latent[p][j] + config.within_patient_wiggle * std * normal(&mut rng);
            }
        }
        // Targets: day 1 is a plain draw (no lag exists); later days follow
        // the lagged mechanism.
        if day == 0 {
            for p in 0..n {
                values[day][p][target_idx] = target_mean + target_std * normal(&mut rng);
            }
        } else {
            let mech = mechanism_from_previous_day(
                &values[day - 1],
                &inv_indices,
                &config.invariant_coefficients,
                config.neighbor_strength,
                config.k_peers,
                &config.feature_ranges,
            );
            for p in 0..n {
                values[day][p][target_idx] = mech[p] + config.noise_sigma * normal(&mut rng);
            }
        }
        // Variant features track the standardized target with the
        // environment's coefficient.
        for p in 0..n {
            let y_std = (values[day][p][target_idx] - target_mean) / target_std;
            let beta = config.environments[env_of[p]].beta;
            for &j in &var_indices {
                let (mean, std) = config.feature_ranges[j];
                values[day][p][j] =
                    mean + std * (beta * y_std + config.variant_noise * normal(&mut rng));
            }
        }
        // Daily treatment flags.
        for p in 0..n {
            for (j, cat) in cats.iter().enumerate() {
                daily_cats[day][p][j] = if demo_names.contains(&cat.name.as_str()) {
                    patient_cats[p][j]
                } else {
                    rng.random_range(0..cat.cardinality)
                };
            }
        }
    }

    let mut records = Vec::with_capacity(n * days);
    for p in 0..n {
        for day in 0..days {
            let continuous = values[day][p].clone();
            records.push(CohortRecord {
                patient: format!("p{p}").as_str().into(),
                day: (day + 1) as u32,
                env: Some(config.environments[env_of[p]].name.clone()),
                target: continuous[target_idx],
                categorical: daily_cats[day][p].clone(),
                continuous,
            });
        }
    }
    let table = CohortTable::new(schema, records)?;
    let annotation = PlantedAnnotation {
        invariant: config.invariant_features.clone(),
        variant: config.variant_features.clone(),
        beta: config
            .environments
            .iter()
            .map(|e| (e.name.clone(), e.beta))
            .collect(),
        mechanism: MechanismSpec {
            invariant_coefficients: config.invariant_coefficients.clone(),
            neighbor_strength: config.neighbor_strength,
            k_peers: config.k_peers,
            noise_sigma: config.noise_sigma,
            feature_ranges: config.feature_ranges.clone(),
        },
    };
    Ok((table, annotation))
}

/// Verification of a generated table against its annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantingReport {
    /// `correlations[env][variant feature]`: Pearson correlation with the target.
    pub correlations: BTreeMap<String, BTreeMap<String, f64>>,
    /// R-squared of the recomputed noiseless mechanism against the stored
    /// targets for days >= 2.
    pub mechanism_r2: f64,
    /// Human-readable failures (sign disagreements).
    pub flags: Vec<String>,
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Checks that the planted structure is present: per-environment variant
/// correlations carry the sign of their `beta`, and the lagged mechanism
/// explains the targets (exactly, when `noise_sigma` is zero).
pub fn verify_planting(table: &CohortTable, annotation: &PlantedAnnotation) -> Result<PlantingReport> {
    let schema = table.schema();
    let var_indices: Vec<usize> = annotation
        .variant
        .iter()
        .map(|n| {
            schema.continuous_index(n).ok_or_else(|| {
                Error::Config(format!("annotation names unknown feature '{n}'"))
            })
        })
        .collect::<Result<_>>()?;
    let inv_indices: Vec<usize> = annotation
        .invariant
        .iter()
        .map(|n| {
            schema.continuous_index(n).ok_or_else(|| {
                Error::Config(format!("annotation names unknown feature '{n}'"))
            })
        })
        .collect::<Result<_>>()?;
    if annotation.mechanism.feature_ranges.len() != schema.continuous().len() {
        return Err(Error::Config(
            "annotation feature_ranges do not match the schema".into(),
        ));
    }

    // Per-environment correlations of each variant feature with the target.
    let mut correlations = BTreeMap::new();
    let mut flags = Vec::new();
    for (env, &beta) in &annotation.beta {
        let records: Vec<&CohortRecord> = table
            .records()
            .iter()
            .filter(|r| r.env.as_deref() == Some(env.as_str()))
            .collect();
        if records.is_empty() {
            return Err(Error::Config(format!(
                "annotation environment '{env}' has no records in the table"
            )));
        }
        let y: Vec<f64> = records.iter().map(|r| r.target).collect();
        let mut per_feature = BTreeMap::new();
        for (&j, name) in var_indices.iter().zip(&annotation.variant) {
            let x: Vec<f64> = records.iter().map(|r| r.continuous[j]).collect();
            let r = pearson(&x, &y);
            if r.signum() != beta.signum() {
                flags.push(format!(
                    "variant '{name}' in env '{env}': correlation {r:.4} disagrees with beta {beta}"
                ));
            }
            per_feature.insert(name.clone(), r);
        }
        correlations.insert(env.clone(), per_feature);
    }

    // Rebuild the per-day matrices in generation order and recompute the
    // mechanism for days >= 2.
    let patients = table.patients();
    let days = table.days();
    let mut index: BTreeMap<(&str, u32), &CohortRecord> = BTreeMap::new();
    for r in table.records() {
        index.insert((r.patient.0.as_str(), r.day), r);
    }
    let full_matrix = |day: u32| -> Result<Vec<Vec<f64>>> {
        patients
            .iter()
            .map(|p| {
                index
                    .get(&(p.0.as_str(), day))
                    .map(|r| r.continuous.clone())
                    .ok_or_else(|| Error::Validation {
                        row: None,
                        message: format!("patient {p} missing on day {day}"),
                    })
            })
            .collect()
    };
    let mut residual = 0.0;
    let mut sum_y = 0.0;
    let mut sum_yy = 0.0;
    let mut count = 0usize;
    for w in days.windows(2) {
        let (prev_day, day) = (w[0], w[1]);
        let prev = full_matrix(prev_day)?;
        let mech = mechanism_from_previous_day(
            &prev,
            &inv_indices,
            &annotation.mechanism.invariant_coefficients,
            annotation.mechanism.neighbor_strength,
            annotation.mechanism.k_peers,
            &annotation.mechanism.feature_ranges,
        );
        for (p, patient) in patients.iter().enumerate() {
            let y = index
                .get(&(patient.0.as_str(), day))
                .map(|r| r.target)
                .ok_or_else(|| Error::Validation {
                    row: None,
                    message: format!("patient {patient} missing on day {day}"),
                })?;
            let d = y - mech[p];
            residual += d * d;
            sum_y += y;
            sum_yy += y * y;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Validation {
            row: None,
            message: "table has fewer than 2 days; mechanism cannot be verified".into(),
        });
    }
    let mean_y = sum_y / count as f64;
    let ss_tot = sum_yy - count as f64 * mean_y * mean_y;
    let mechanism_r2 = if ss_tot > 0.0 {
        1.0 - residual / ss_tot
    } else {
        0.0
    };

    Ok(PlantingReport {
        correlations,
        mechanism_r2,
        flags,
    })
}
