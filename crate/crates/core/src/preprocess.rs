//! Leak-free scaling, one-hot encoding, per-snapshot KNN edges, and assembly
//! of the dynamic graph consumed by the model.
//!
//! The scaler is fit on the training part only and applied unchanged to the
//! validation and test parts. Edges are recomputed per day from that day's
//! scaled continuous features: each patient points at its K nearest peers
//! under L1 distance, ties broken toward the smaller node index, no
//! self-loops stored.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortTable, FeatureSchema, PatientId, TemporalSplit};
use crate::error::{Error, Result};

/// Per-feature standardization `x' = (x - mu) / sigma` with train-only statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    pub mean: Vec<f64>,
    /// Population standard deviation; entries that came out zero are stored
    /// as 1 and flagged in `constant`.
    pub std: Vec<f64>,
    pub constant: Vec<bool>,
    pub fitted_on: usize,
}

impl StandardScaler {
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Fits mean and population standard deviation over the training records only.
pub fn fit_scaler(train: &CohortTable) -> Result<StandardScaler> {
    let n = train.n_records();
    if n == 0 {
        return Err(Error::Validation {
            row: None,
            message: "cannot fit scaler on an empty table".into(),
        });
    }
    let dim = train.schema().continuous().len();
    let mut mean = vec![0.0; dim];
    for rec in train.records() {
        for (m, v) in mean.iter_mut().zip(&rec.continuous) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; dim];
    for rec in train.records() {
        for ((s, v), m) in var.iter_mut().zip(&rec.continuous).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let mut std = Vec::with_capacity(dim);
    let mut constant = Vec::with_capacity(dim);
    for s in &var {
        let sigma = (s / n as f64).sqrt();
        if sigma == 0.0 {
            std.push(1.0);
            constant.push(true);
        } else {
            std.push(sigma);
            constant.push(false);
        }
    }
    Ok(StandardScaler {
        mean,
        std,
        constant,
        fitted_on: n,
    })
}

/// Encodes one record: scaled continuous block followed by the one-hot blocks.
pub fn encode_record(
    continuous: &[f64],
    categorical: &[usize],
    schema: &FeatureSchema,
    scaler: &StandardScaler,
) -> Result<Vec<f64>> {
    if continuous.len() != schema.continuous().len() || scaler.mean.len() != continuous.len() {
        return Err(Error::Schema(format!(
            "encode: expected {} continuous values, got {} (scaler fit on {})",
            schema.continuous().len(),
            continuous.len(),
            scaler.mean.len()
        )));
    }
    let mut out = scaler.transform(continuous);
    for (j, &idx) in categorical.iter().enumerate() {
        let card = schema.categorical()[j].cardinality;
        if idx >= card {
            return Err(Error::Validation {
                row: None,
                message: format!(
                    "unseen category index {idx} for '{}' (cardinality {card})",
                    schema.categorical()[j].name
                ),
            });
        }
        let mut one_hot = vec![0.0; card];
        one_hot[idx] = 1.0;
        out.extend(one_hot);
    }
    Ok(out)
}

/// Encoded feature matrix for a whole table, one row per record, in record order.
pub fn encode(table: &CohortTable, scaler: &StandardScaler) -> Result<Vec<Vec<f64>>> {
    table
        .records()
        .iter()
        .map(|rec| encode_record(&rec.continuous, &rec.categorical, table.schema(), scaler))
        .collect()
}

/// Directed K-nearest-neighbor edges under L1 distance.
///
/// Every node gets out-edges to its `min(K, N-1)` nearest others; equal
/// distances resolve toward the smaller node index. `features` rows are the
/// scaled continuous blocks.
pub fn knn_edges(features: &[Vec<f64>], k: usize) -> Vec<(usize, usize)> {
    let n = features.len();
    let mut edges = Vec::with_capacity(n.saturating_mul(k.min(n.saturating_sub(1))));
    for i in 0..n {
        let mut dist: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (l1_distance(&features[i], &features[j]), j))
            .collect();
        dist.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        for &(_, j) in dist.iter().take(k) {
            edges.push((i, j));
        }
    }
    edges
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// One day of the dynamic graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    /// Day index this snapshot was built from.
    pub time: u32,
    /// Patients present this day, in table order.
    pub node_ids: Vec<PatientId>,
    /// Encoded features, one row per node (scaled continuous + one-hot).
    pub features: Vec<Vec<f64>>,
    /// Directed (src, dst) pairs into `node_ids`; no self-loops.
    pub edges: Vec<(usize, usize)>,
    /// Target value per node this day.
    pub label: Vec<f64>,
    /// True where the node's label is observed.
    pub label_mask: Vec<bool>,
}

impl Snapshot {
    pub fn node_index(&self, patient: &PatientId) -> Option<usize> {
        self.node_ids.iter().position(|p| p == patient)
    }
}

/// Time-ordered snapshots plus the schema and scaler they were built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicGraph {
    pub snapshots: Vec<Snapshot>,
    pub schema: FeatureSchema,
    pub scaler: StandardScaler,
}

impl DynamicGraph {
    pub fn n_snapshots(&self) -> usize {
        self.snapshots.len()
    }

    /// Total labeled prediction pairs: nodes labeled at snapshot `i >= 1` and
    /// present at snapshot `i - 1`.
    pub fn n_prediction_pairs(&self) -> usize {
        let mut count = 0;
        for i in 1..self.snapshots.len() {
            let prev = &self.snapshots[i - 1];
            let cur = &self.snapshots[i];
            for (ni, pid) in cur.node_ids.iter().enumerate() {
                if cur.label_mask[ni] && prev.node_index(pid).is_some() {
                    count += 1;
                }
            }
        }
        count
    }
}

fn build_graph_for_part(
    part: &CohortTable,
    scaler: &StandardScaler,
    k: usize,
    parallel_knn: bool,
) -> Result<DynamicGraph> {
    let schema = part.schema().clone();
    let n_cont = schema.continuous().len();
    let days = part.days();
    let mut snapshots = Vec::with_capacity(days.len());
    for day in days {
        let mut node_ids = Vec::new();
        let mut features = Vec::new();
        let mut label = Vec::new();
        let mut label_mask = Vec::new();
        for rec in part.records().iter().filter(|r| r.day == day) {
            node_ids.push(rec.patient.clone());
            features.push(encode_record(
                &rec.continuous,
                &rec.categorical,
                &schema,
                scaler,
            )?);
            label.push(rec.target);
            label_mask.push(true);
        }
        snapshots.push(Snapshot {
            time: day,
            node_ids,
            features,
            edges: Vec::new(),
            label,
            label_mask,
        });
    }
    let edge_input: Vec<Vec<Vec<f64>>> = snapshots
        .iter()
        .map(|s| {
            s.features
                .iter()
                .map(|row| row[..n_cont].to_vec())
                .collect()
        })
        .collect();
    let edge_lists: Vec<Vec<(usize, usize)>> = if parallel_knn {
        edge_input.par_iter().map(|f| knn_edges(f, k)).collect()
    } else {
        edge_input.iter().map(|f| knn_edges(f, k)).collect()
    };
    for (snap, edges) in snapshots.iter_mut().zip(edge_lists) {
        snap.edges = edges;
    }
    Ok(DynamicGraph {
        snapshots,
        schema,
        scaler: scaler.clone(),
    })
}

/// Builds the three dynamic graphs: scaler fit on train, applied to all parts.
pub fn build_dynamic_graph(
    split: &TemporalSplit,
    k: usize,
) -> Result<(DynamicGraph, DynamicGraph, DynamicGraph)> {
    build_dynamic_graph_with(split, k, false)
}

/// As [`build_dynamic_graph`], with opt-in parallel per-snapshot KNN.
pub fn build_dynamic_graph_with(
    split: &TemporalSplit,
    k: usize,
    parallel_knn: bool,
) -> Result<(DynamicGraph, DynamicGraph, DynamicGraph)> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    let scaler = fit_scaler(&split.train)?;
    let train = build_graph_for_part(&split.train, &scaler, k, parallel_knn)?;
    let val = build_graph_for_part(&split.val, &scaler, k, parallel_knn)?;
    let test = build_graph_for_part(&split.test, &scaler, k, parallel_knn)?;
    Ok((train, val, test))
}

/// Serialized snapshot line: `{"t", "nodes", "x", "edges", "y", "mask"}`.
#[derive(Serialize, Deserialize)]
struct SnapshotLine {
    t: u32,
    nodes: Vec<String>,
    x: Vec<Vec<f64>>,
    edges: Vec<(usize, usize)>,
    y: Vec<f64>,
    mask: Vec<bool>,
}

/// Writes one JSON line per snapshot.
pub fn write_graph_jsonl(graph: &DynamicGraph, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for snap in &graph.snapshots {
        let line = SnapshotLine {
            t: snap.time,
            nodes: snap.node_ids.iter().map(|p| p.0.clone()).collect(),
            x: snap.features.clone(),
            edges: snap.edges.clone(),
            y: snap.label.clone(),
            mask: snap.label_mask.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads snapshots written by [`write_graph_jsonl`]; schema and scaler must be
/// supplied by the caller (they are not part of the line format).
pub fn read_graph_jsonl(
    path: &Path,
    schema: FeatureSchema,
    scaler: StandardScaler,
) -> Result<DynamicGraph> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut snapshots = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SnapshotLine = serde_json::from_str(&line)?;
        for &(s, d) in &parsed.edges {
            if s >= parsed.nodes.len() || d >= parsed.nodes.len() || s == d {
                return Err(Error::Validation {
                    row: None,
                    message: format!("invalid edge ({s}, {d}) at t={}", parsed.t),
                });
            }
        }
        snapshots.push(Snapshot {
            time: parsed.t,
            node_ids: parsed.nodes.into_iter().map(PatientId).collect(),
            features: parsed.x,
            edges: parsed.edges,
            label: parsed.y,
            label_mask: parsed.mask,
        });
    }
    if !snapshots.windows(2).all(|w| w[0].time < w[1].time) {
        return Err(Error::Validation {
            row: None,
            message: "snapshot times are not strictly increasing".into(),
        });
    }
    Ok(DynamicGraph {
        snapshots,
        schema,
        scaler,
    })
}
