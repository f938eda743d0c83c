//! Metrics, per-group and per-time breakdowns, multi-seed aggregation, and
//! gradient-saliency feature importance.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::PatientId;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ParamSet};
use crate::preprocess::DynamicGraph;

/// Root mean squared error over masked pairs.
pub fn rmse(pred: &[f64], label: &[f64], mask: &[bool]) -> Result<f64> {
    let (sum, n) = masked_fold(pred, label, mask, |d| d * d)?;
    Ok((sum / n as f64).sqrt())
}

/// Mean absolute error over masked pairs.
pub fn mae(pred: &[f64], label: &[f64], mask: &[bool]) -> Result<f64> {
    let (sum, n) = masked_fold(pred, label, mask, |d| d.abs())?;
    Ok(sum / n as f64)
}

fn masked_fold(
    pred: &[f64],
    label: &[f64],
    mask: &[bool],
    f: impl Fn(f64) -> f64,
) -> Result<(f64, usize)> {
    if pred.len() != label.len() || pred.len() != mask.len() {
        return Err(Error::Config(format!(
            "metric shape mismatch: {} predictions, {} labels, {} mask entries",
            pred.len(),
            label.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, l), m) in pred.iter().zip(label).zip(mask) {
        if *m {
            sum += f(p - l);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Validation {
            row: None,
            message: "no masked-in pairs to score".into(),
        });
    }
    Ok((sum, n))
}

/// MAE restricted to each day; days with no labeled pairs are omitted.
pub fn per_time_mae(pred: &[f64], label: &[f64], mask: &[bool], days: &[u32]) -> Vec<(u32, f64)> {
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (((p, l), m), d) in pred.iter().zip(label).zip(mask).zip(days) {
        if *m {
            let e = acc.entry(*d).or_insert((0.0, 0));
            e.0 += (p - l).abs();
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(d, (s, n))| (d, s / n as f64))
        .collect()
}

/// A metric value with an across-seed standard deviation once aggregated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

impl Stat {
    pub fn single(v: f64) -> Stat {
        Stat { mean: v, std: None }
    }

    /// Pretty cell: `mean±std` when a deviation is present.
    pub fn display(&self) -> String {
        match self.std {
            Some(s) => format!("{:.4}\u{00b1}{:.4}", self.mean, s),
            None => format!("{:.4}", self.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub rmse: Stat,
    pub mae: Stat,
    pub count: usize,
}

/// Structured results artifact: overall, per-group and per-time metrics with
/// seed statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: MetricCell,
    pub groups: BTreeMap<String, MetricCell>,
    /// (day, MAE) curve.
    pub per_time: Vec<(u32, Stat)>,
    pub seeds: Vec<u64>,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<MetricsReport> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Scores one seed's predictions into a report. `days` carries the label day
/// per pair; `groups`, when present, carries the per-pair group key.
pub fn evaluate(
    pred: &[f64],
    label: &[f64],
    mask: &[bool],
    days: &[u32],
    groups: Option<&[String]>,
    seed: u64,
) -> Result<MetricsReport> {
    let overall = MetricCell {
        rmse: Stat::single(rmse(pred, label, mask)?),
        mae: Stat::single(mae(pred, label, mask)?),
        count: mask.iter().filter(|m| **m).count(),
    };
    let mut group_cells = BTreeMap::new();
    if let Some(groups) = groups {
        let keys: std::collections::BTreeSet<&String> = groups.iter().collect();
        for key in keys {
            let sub_mask: Vec<bool> = mask
                .iter()
                .zip(groups)
                .map(|(m, g)| *m && g == key)
                .collect();
            if sub_mask.iter().any(|m| *m) {
                group_cells.insert(
                    key.clone(),
                    MetricCell {
                        rmse: Stat::single(rmse(pred, label, &sub_mask)?),
                        mae: Stat::single(mae(pred, label, &sub_mask)?),
                        count: sub_mask.iter().filter(|m| **m).count(),
                    },
                );
            }
        }
    }
    let per_time = per_time_mae(pred, label, mask, days)
        .into_iter()
        .map(|(d, v)| (d, Stat::single(v)))
        .collect();
    Ok(MetricsReport {
        overall,
        groups: group_cells,
        per_time,
        seeds: vec![seed],
    })
}

fn population_std(vals: &[f64]) -> f64 {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

fn aggregate_stat(stats: &[&Stat]) -> Stat {
    let vals: Vec<f64> = stats.iter().map(|s| s.mean).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    if vals.len() >= 2 {
        Stat {
            mean,
            std: Some(population_std(&vals)),
        }
    } else {
        Stat { mean, std: None }
    }
}

/// Merges per-seed reports: per-cell mean and population standard deviation.
/// Grouping keys, per-time day axes and pair counts must agree.
pub fn aggregate_seeds(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Config("no reports to aggregate".into()))?;
    if reports.len() == 1 {
        return Ok(first.clone());
    }
    for r in reports {
        let same_groups = r.groups.keys().eq(first.groups.keys());
        let same_days = r
            .per_time
            .iter()
            .map(|(d, _)| d)
            .eq(first.per_time.iter().map(|(d, _)| d));
        if !same_groups || !same_days {
            return Err(Error::Config(
                "reports have mismatched groups or day axes".into(),
            ));
        }
    }
    let agg_cell = |pick: &dyn Fn(&MetricsReport) -> &MetricCell| -> MetricCell {
        let cells: Vec<&MetricCell> = reports.iter().map(pick).collect();
        MetricCell {
            rmse: aggregate_stat(&cells.iter().map(|c| &c.rmse).collect::<Vec<_>>()),
            mae: aggregate_stat(&cells.iter().map(|c| &c.mae).collect::<Vec<_>>()),
            count: cells[0].count,
        }
    };
    let overall = agg_cell(&|r: &MetricsReport| &r.overall);
    let mut groups = BTreeMap::new();
    for key in first.groups.keys() {
        groups.insert(key.clone(), agg_cell(&|r: &MetricsReport| &r.groups[key]));
    }
    let mut per_time = Vec::with_capacity(first.per_time.len());
    for (i, (day, _)) in first.per_time.iter().enumerate() {
        let stats: Vec<&Stat> = reports.iter().map(|r| &r.per_time[i].1).collect();
        per_time.push((*day, aggregate_stat(&stats)));
    }
    let mut seeds: Vec<u64> = reports.iter().flat_map(|r| r.seeds.clone()).collect();
    seeds.dedup();
    Ok(MetricsReport {
        overall,
        groups,
        per_time,
        seeds,
    })
}

/// Gradient-magnitude feature importance: features x days, all entries >= 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub features: Vec<String>,
    /// Feature observation days (each feeds the next day's prediction loss).
    pub days: Vec<u32>,
    /// `values[feature][day]`.
    pub values: Vec<Vec<f64>>,
}

impl ImportanceTable {
    /// Mean importance of each feature across days.
    pub fn mean_by_feature(&self) -> Vec<(String, f64)> {
        self.features
            .iter()
            .cloned()
            .zip(
                self.values
                    .iter()
                    .map(|row| row.iter().sum::<f64>() / row.len().max(1) as f64),
            )
            .collect()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("feature,day,importance\n");
        for (fi, feature) in self.features.iter().enumerate() {
            for (di, day) in self.days.iter().enumerate() {
                out.push_str(&format!("{feature},{day},{}\n", self.values[fi][di]));
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Mean absolute gradient of each prediction's squared-error loss with
/// respect to the features that feed it (the previous day's inputs).
///
/// Continuous features are attributed through the scaled inputs the model
/// consumes; categorical features through their embedding lookups, averaged
/// over embedding dimensions. Column `day` is the observation day of the
/// features: predictions for day `t` attribute to column `t - 1`.
pub fn feature_importance(
    graph: &DynamicGraph,
    params: &ParamSet,
    config: &ModelConfig,
    patient: Option<&PatientId>,
) -> Result<ImportanceTable> {
    let mut fwd = forward(graph, params, config)?;
    let n_cont = graph.schema.continuous().len();
    let n_cat = graph.schema.categorical().len();
    let features: Vec<String> = graph
        .schema
        .continuous()
        .iter()
        .map(|c| c.name.clone())
        .chain(graph.schema.categorical().iter().map(|c| c.name.clone()))
        .collect();

    // Per-pair loss nodes appended after the forward pass.
    let pair_meta: Vec<(usize, usize, f64, crate::tape::VarId)> = fwd
        .pred_pairs
        .iter()
        .filter(|p| patient.is_none_or(|want| &p.patient == want))
        .map(|p| (p.snap_idx, p.prev_node_idx, p.label, p.pred))
        .collect();
    let losses: Vec<(usize, usize, crate::tape::VarId)> = pair_meta
        .into_iter()
        .map(|(snap_idx, prev_ni, label, pred)| {
            let loss = fwd.tape.mse_pairs(&[pred], &[label]);
            (snap_idx, prev_ni, loss)
        })
        .collect();
    if losses.is_empty() {
        return Err(Error::Validation {
            row: None,
            message: match patient {
                Some(p) => format!("no predictions for patient {p}"),
                None => "no predictions to attribute".into(),
            },
        });
    }

    let mut day_acc: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (snap_idx, prev_ni, loss) in losses {
        fwd.tape.zero_grad();
        fwd.tape.backward(loss);
        let feature_day = graph.snapshots[snap_idx - 1].time;
        let inputs = &fwd.inputs[snap_idx - 1][prev_ni];
        let entry = day_acc
            .entry(feature_day)
            .or_insert_with(|| (vec![0.0; n_cont + n_cat], 0));
        for (j, g) in fwd.tape.grad(inputs.continuous).iter().enumerate() {
            entry.0[j] += g.abs();
        }
        for (j, emb) in inputs.embeds.iter().enumerate() {
            let g = fwd.tape.grad(*emb);
            let mean_abs = g.iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64;
            entry.0[n_cont + j] += mean_abs;
        }
        entry.1 += 1;
    }

    let days: Vec<u32> = day_acc.keys().copied().collect();
    let mut values = vec![vec![0.0; days.len()]; features.len()];
    for (di, day) in days.iter().enumerate() {
        let (sums, n) = &day_acc[day];
        for (fi, s) in sums.iter().enumerate() {
            values[fi][di] = s / *n as f64;
        }
    }
    Ok(ImportanceTable {
        features,
        days,
        values,
    })
}

/// Writes the per-time MAE curve as `day,mae` CSV.
pub fn save_per_time_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut out = String::from("day,mae\n");
    for (day, stat) in &report.per_time {
        out.push_str(&format!("{day},{}\n", stat.mean));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
