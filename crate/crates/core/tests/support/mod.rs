//! Shared builders for the integration suites.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use dygr::cohort::{
    environment_holdout_split, CategoricalFeature, CohortTable, ContinuousFeature, FeatureSchema,
    TemporalSplit,
};
use dygr::preprocess::{knn_edges, DynamicGraph, Snapshot, StandardScaler};
use dygr::Result;

/// Random dense dynamic graph: every node present on every day, KNN edges
/// over the continuous block, random labels.
pub fn tiny_graph(
    n_nodes: usize,
    n_snaps: usize,
    n_cont: usize,
    cards: &[usize],
    k: usize,
    seed: u64,
) -> DynamicGraph {
    let continuous = (0..n_cont)
        .map(|i| ContinuousFeature {
            name: format!("c{i}"),
            unit: String::new(),
        })
        .collect();
    let categorical = cards
        .iter()
        .enumerate()
        .map(|(i, &c)| CategoricalFeature {
            name: format!("k{i}"),
            cardinality: c,
        })
        .collect();
    let schema = FeatureSchema::new(continuous, categorical, "c0").unwrap();
    let scaler = StandardScaler {
        mean: vec![0.0; n_cont],
        std: vec![1.0; n_cont],
        constant: vec![false; n_cont],
        fitted_on: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let snapshots = (0..n_snaps)
        .map(|t| {
            let mut features = Vec::new();
            let mut label = Vec::new();
            for _ in 0..n_nodes {
                let mut row: Vec<f64> = (0..n_cont).map(|_| rng.random_range(-1.0..1.0)).collect();
                for &c in cards {
                    let idx = rng.random_range(0..c);
                    for j in 0..c {
                        row.push(if j == idx { 1.0 } else { 0.0 });
                    }
                }
                label.push(rng.random_range(-1.0..1.0));
                features.push(row);
            }
            let cont_rows: Vec<Vec<f64>> = features.iter().map(|r| r[..n_cont].to_vec()).collect();
            Snapshot {
                time: (t + 1) as u32,
                node_ids: (0..n_nodes)
                    .map(|i| format!("p{i}").as_str().into())
                    .collect(),
                edges: knn_edges(&cont_rows, k),
                features,
                label,
                label_mask: vec![true; n_nodes],
            }
        })
        .collect();
    DynamicGraph {
        snapshots,
        schema,
        scaler,
    }
}

/// Feature rows for KNN oracle trials; `duplicates` plants repeated rows so
/// the tie rule is exercised.
pub fn random_snapshot_features(
    rng: &mut ChaCha8Rng,
    n: usize,
    dim: usize,
    duplicates: bool,
) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    if duplicates && n >= 4 {
        for i in (0..n).step_by(3) {
            let src = rng.random_range(0..n);
            rows[i] = rows[src].clone();
        }
    }
    rows
}

/// Environment holdout split used by the shift benchmark.
pub fn env_holdout_split(
    table: &CohortTable,
    train_envs: &[String],
    test_env: &str,
    train_fraction: f64,
) -> Result<TemporalSplit> {
    environment_holdout_split(table, train_envs, test_env, train_fraction)
}
