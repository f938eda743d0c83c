//! Invariant-regression training: variant-pattern interventions, the
//! task/mixed/invariance losses, and the full-graph training loop.
//!
//! Per epoch the forward pass yields every node-and-time's invariant and
//! variant summaries. A set of variant patterns is sampled from the pool with
//! the epoch folded into the seed; each sample replaces all variant summaries
//! and the mixed head is scored against the labels. The objective is
//! `L_task + lambda * (mean + variance of the mixed losses)`, optimized by
//! Adam with decoupled weight decay (layer norms and gates exempt), early
//! stopping on validation MAE, best-epoch parameters returned.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{
    forward, mixed_pred_node, AttentionKind, DisentangledState, Forward, ModelConfig, ParamSet,
};
use crate::preprocess::DynamicGraph;
use crate::tape::{self, VarId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Number of variant patterns sampled per epoch.
    pub s_samples: usize,
    /// Invariance-loss weight.
    pub lambda: f64,
    pub seed: u64,
    /// Extension: draw an independent variant pattern per node-and-time
    /// within each sampled intervention instead of one global replacement.
    pub per_node_intervention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            weight_decay: 5e-7,
            max_epochs: 1000,
            patience: 50,
            s_samples: 3,
            lambda: 1.0,
            seed: 0,
            per_node_intervention: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s_samples == 0 {
            return Err(Error::Config("s_samples must be >= 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Mean squared error over masked pairs (the supervised task loss).
pub fn task_loss(predictions: &[f64], labels: &[f64], mask: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.len() != mask.len() {
        return Err(Error::Config("task_loss shape mismatch".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, y), m) in predictions.iter().zip(labels).zip(mask) {
        if *m {
            let d = p - y;
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Validation {
            row: None,
            message: "task_loss: empty mask".into(),
        });
    }
    Ok(sum / n as f64)
}

/// Mean plus population variance of the per-intervention mixed losses.
pub fn invariance_loss(mixed_losses: &[f64]) -> Result<f64> {
    if mixed_losses.is_empty() {
        return Err(Error::Config("invariance_loss: empty list".into()));
    }
    Ok(tape::mean_plus_population_variance(mixed_losses))
}

/// Uniformly samples (with replacement) `s` variant patterns from the
/// final-layer pool, deterministically under `seed`.
pub fn sample_variant_set(state: &DisentangledState, s: usize, seed: u64) -> Vec<Vec<f64>> {
    let pool = state.variant_pool();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..s)
        .map(|_| pool[rng.random_range(0..pool.len())].clone())
        .collect()
}

/// Pool indices drawn for one epoch; separated from values so the training
/// loop can address tape nodes.
fn sample_pool_indices(pool_len: usize, s: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..s).map(|_| rng.random_range(0..pool_len)).collect()
}

/// Folds the epoch index into the run seed for per-epoch resampling.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Replaces every variant summary (all layers, nodes and times) with `s`,
/// leaving invariant summaries untouched.
pub fn intervene(state: &DisentangledState, s: &[f64]) -> Result<DisentangledState> {
    let d = state.z_inv[0]
        .iter()
        .flat_map(|nodes| nodes.first())
        .next()
        .map(|v| v.len())
        .unwrap_or(0);
    if s.len() != d {
        return Err(Error::Config(format!(
            "variant pattern length {} does not match hidden dim {}",
            s.len(),
            d
        )));
    }
    let mut out = state.clone();
    for layer in &mut out.z_var {
        for snap in layer {
            for zv in snap {
                zv.copy_from_slice(s);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub inv_loss: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    /// One JSON line per epoch: `{"epoch", "task_loss", "inv_loss", "val_mae"}`.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for rec in &self.epochs {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Early stopping on a minimized metric: stop after `patience` consecutive
/// non-improving epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> EarlyStopper {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Returns true when the metric strictly improved.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_value(&self) -> f64 {
        self.best
    }
}

/// Adam with decoupled weight decay.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(params: &ParamSet) -> Adam {
        Adam {
            m: params.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn update(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64, weight_decay: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let decay = if p.decay { weight_decay } else { 0.0 };
            for (j, w) in p.data.iter_mut().enumerate() {
                let g = grads[i][j];
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i][j] / bc1;
                let v_hat = self.v[i][j] / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * *w);
            }
        }
    }
}

/// Builds the epoch objective on the forward tape. Returns the scalar
/// objective node plus the task and invariance loss values.
///
/// `sample_seed` fixes which pool entries are drawn, so rebuilding the tape
/// with perturbed parameters (finite differences) scores the same samples.
pub fn build_objective(
    fwd: &mut Forward,
    params: &ParamSet,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    sample_seed: u64,
) -> Result<(VarId, f64, f64)> {
    if fwd.pred_pairs.is_empty() {
        return Err(Error::Validation {
            row: None,
            message: "no labeled prediction pairs in the training graph".into(),
        });
    }
    let preds: Vec<VarId> = fwd.pred_pairs.iter().map(|p| p.pred).collect();
    let labels: Vec<f64> = fwd.pred_pairs.iter().map(|p| p.label).collect();
    let task = fwd.tape.mse_pairs(&preds, &labels);
    let task_value = fwd.tape.scalar(task);

    let use_invariance = train_config.lambda > 0.0
        && model_config.attention == AttentionKind::Disentangled;
    if !use_invariance {
        return Ok((task, task_value, 0.0));
    }

    let pool = fwd.variant_pool();
    if pool.is_empty() {
        return Err(Error::Validation {
            row: None,
            message: "variant pool is empty".into(),
        });
    }
    let d = model_config.hidden_dim;
    let pair_inputs: Vec<(VarId, f64)> = fwd
        .pred_pairs
        .iter()
        .map(|p| {
            let z_inv = fwd.state_ids.last().unwrap()[p.snap_idx - 1][p.prev_node_idx].0;
            (z_inv, p.label)
        })
        .collect();

    let n_draws = if train_config.per_node_intervention {
        train_config.s_samples * pair_inputs.len()
    } else {
        train_config.s_samples
    };
    let draws = sample_pool_indices(pool.len(), n_draws, sample_seed);

    let mut mixed_losses = Vec::with_capacity(train_config.s_samples);
    for s_idx in 0..train_config.s_samples {
        let mut mixed_preds = Vec::with_capacity(pair_inputs.len());
        if train_config.per_node_intervention {
            for (pi, (z_inv, _)) in pair_inputs.iter().enumerate() {
                let (_, _, zv) = pool[draws[s_idx * pair_inputs.len() + pi]];
                let sig = fwd.tape.sigmoid(zv);
                mixed_preds.push(mixed_pred_node(
                    &mut fwd.tape,
                    &fwd.param_ids,
                    &params.layout,
                    *z_inv,
                    sig,
                    d,
                )?);
            }
        } else {
            let (_, _, zv) = pool[draws[s_idx]];
            let sig = fwd.tape.sigmoid(zv);
            for (z_inv, _) in &pair_inputs {
                mixed_preds.push(mixed_pred_node(
                    &mut fwd.tape,
                    &fwd.param_ids,
                    &params.layout,
                    *z_inv,
                    sig,
                    d,
                )?);
            }
        }
        mixed_losses.push(fwd.tape.mse_pairs(&mixed_preds, &labels));
    }

    let inv = fwd.tape.mean_plus_var(&mixed_losses);
    let inv_value = fwd.tape.scalar(inv);
    let objective = fwd
        .tape
        .scalar_comb(&[(task, 1.0), (inv, train_config.lambda)]);
    Ok((objective, task_value, inv_value))
}

/// Validation MAE of the invariant-head predictions.
pub fn validation_mae(graph: &DynamicGraph, params: &ParamSet, config: &ModelConfig) -> Result<f64> {
    let fwd = forward(graph, params, config)?;
    let preds = fwd.predictions();
    let labels = fwd.labels();
    let mask = vec![true; preds.len()];
    metrics::mae(&preds, &labels, &mask)
}

/// Trains on the train graph with per-epoch validation; returns the
/// parameters of the best-validation-MAE epoch and the full history.
pub fn train(
    train_graph: &DynamicGraph,
    val_graph: &DynamicGraph,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(ParamSet, TrainHistory)> {
    model_config.validate()?;
    train_config.validate()?;
    let mut params = ParamSet::init(model_config, &train_graph.schema)?;
    let mut adam = Adam::new(&params);
    let mut stopper = EarlyStopper::new(train_config.patience);
    let mut best_params = params.clone();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=train_config.max_epochs {
        let mut fwd = forward(train_graph, &params, model_config)?;
        let (objective, task_value, inv_value) = build_objective(
            &mut fwd,
            &params,
            model_config,
            train_config,
            epoch_seed(train_config.seed, epoch),
        )?;
        let obj_value = fwd.tape.scalar(objective);
        if !obj_value.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("objective diverged to {obj_value}"),
            });
        }
        fwd.tape.backward(objective);
        let grads: Vec<Vec<f64>> = fwd
            .param_ids
            .iter()
            .map(|id| fwd.tape.grad(*id).to_vec())
            .collect();
        drop(fwd);
        adam.update(&mut params, &grads, train_config.lr, train_config.weight_decay);
        if !params.is_finite() {
            return Err(Error::Training {
                epoch,
                message: "parameters diverged".into(),
            });
        }

        let val_mae = validation_mae(val_graph, &params, model_config)?;
        epochs.push(EpochRecord {
            epoch,
            task_loss: task_value,
            inv_loss: inv_value,
            val_mae,
        });
        if stopper.observe(epoch, val_mae) {
            best_params = params.clone();
        }
        if stopper.should_stop() {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    Ok((
        best_params,
        TrainHistory {
            epochs,
            best_epoch: stopper.best_epoch(),
            stop_reason,
        },
    ))
}

/// One entry of a lambda sweep.
#[derive(Debug)]
pub struct SweepEntry {
    pub lambda: f64,
    pub params: ParamSet,
    pub history: TrainHistory,
    pub best_val_mae: f64,
}

/// Trains once per lambda and returns the entries ordered as given; the
/// caller picks by validation MAE (see [`best_sweep_entry`]).
pub fn sweep_lambda(
    train_graph: &DynamicGraph,
    val_graph: &DynamicGraph,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    lambdas: &[f64],
) -> Result<Vec<SweepEntry>> {
    if lambdas.is_empty() {
        return Err(Error::Config("lambda sweep needs at least one value".into()));
    }
    let mut entries = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let cfg = TrainConfig {
            lambda,
            ..train_config.clone()
        };
        let (params, history) = train(train_graph, val_graph, model_config, &cfg)?;
        let best_val_mae = history
            .epochs
            .iter()
            .map(|e| e.val_mae)
            .fold(f64::INFINITY, f64::min);
        entries.push(SweepEntry {
            lambda,
            params,
            history,
            best_val_mae,
        });
    }
    Ok(entries)
}

/// Index of the sweep entry with the lowest validation MAE.
pub fn best_sweep_entry(entries: &[SweepEntry]) -> usize {
    let mut best = 0;
    for (i, e) in entries.iter().enumerate() {
        if e.best_val_mae < entries[best].best_val_mae {
            best = i;
        }
    }
    best
}
