//! Disentangled dynamic graph attention network.
//!
//! Each layer computes, per node and time, query/key/value projections over
//! the dynamic neighborhood (current and past out-neighbors plus the node
//! itself), two softmax structural masks from opposite-sign logits, a
//! learnable featural mask on the invariant branch, gated feed-forward blocks,
//! and passes `h = z_inv + z_var` to the next layer. Prediction heads read the
//! final layer: `f` from the invariant summary alone, `g` from the invariant
//! summary plus a squashed variant summary.
//!
//! The forward pass is recorded on a [`Tape`], so gradients for training,
//! gradient checking, and feature importance all come from the same code path.

use serde::{Deserialize, Serialize};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use std::collections::HashMap;
use std::path::Path;

use crate::cohort::{FeatureSchema, PatientId};
use crate::error::{Error, Result};
use crate::preprocess::DynamicGraph;
use crate::tape::{self, Tape, VarId};

/// How far back the dynamic neighborhood reaches, in days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    /// All snapshots up to and including the query time.
    All,
    /// The most recent `w >= 1` days ending at the query time.
    Last(u32),
}

impl std::str::FromStr for Window {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Window::All);
        }
        let w: u32 = s.parse().map_err(|_| {
            Error::Config(format!(
                "window must be 'all' or a positive integer, got '{s}'"
            ))
        })?;
        if w == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        Ok(Window::Last(w))
    }
}

/// Temporal-encoding frequencies: fixed geometric ladder or trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeMode {
    FixedLadder,
    Learnable,
}

/// Full model or the single-branch ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    /// Dual masks, featural mask, variant branch and mixed head.
    Disentangled,
    /// Single softmax mask, frozen uniform featural mask, no variant branch.
    Entangled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub cat_embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub window: Window,
    pub te_mode: TeMode,
    pub attention: AttentionKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 8,
            cat_embed_dim: 2,
            n_layers: 2,
            n_heads: 2,
            window: Window::All,
            te_mode: TeMode::FixedLadder,
            attention: AttentionKind::Disentangled,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::Config(
                "hidden_dim, n_layers and n_heads must be >= 1".into(),
            ));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.cat_embed_dim == 0 {
            return Err(Error::Config("cat_embed_dim must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }
}

/// Fixed temporal-encoding ladder: `omega_k = 10000^(-(k-1)/d)` for k = 1..=d.
pub fn fixed_ladder(d: usize) -> Vec<f64> {
    (0..d)
        .map(|k| 10000f64.powf(-(k as f64) / d as f64))
        .collect()
}

/// `TE(t)_k = sin(omega_k * t)`; real-valued times accepted.
pub fn temporal_encoding(t: f64, omega: &[f64]) -> Vec<f64> {
    omega.iter().map(|w| (w * t).sin()).collect()
}

/// Structural masks from raw attention logits: the invariant mask is the
/// softmax of the logits, the variant mask the softmax of their negation.
pub fn attention_masks_from_logits(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let neg: Vec<f64> = logits.iter().map(|v| -v).collect();
    (tape::softmax(logits), tape::softmax(&neg))
}

/// One named parameter tensor (row-major when 2-D).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FfnLayout {
    pub ln_gain: usize,
    pub ln_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpLayout {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub heads: Vec<HeadLayout>,
    /// Featural-mask logits; absent in entangled mode.
    pub featural: Option<usize>,
    pub merge: usize,
    pub alpha: usize,
    pub ffn_inv: FfnLayout,
    pub ffn_var: Option<FfnLayout>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub input_w: usize,
    pub input_b: usize,
    pub embeds: Vec<usize>,
    /// Trainable TE frequencies; absent when the ladder is fixed.
    pub omega: Option<usize>,
    pub layers: Vec<LayerLayout>,
    pub head_f: MlpLayout,
    pub head_g: Option<MlpLayout>,
}

/// All learnable quantities plus their layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub params: Vec<Param>,
    pub layout: Layout,
}

struct ParamBuilder {
    params: Vec<Param>,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    fn uniform(&mut self, name: String, rows: usize, cols: usize, fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.push(name, rows, cols, data, true, true)
    }

    fn constant(
        &mut self,
        name: String,
        rows: usize,
        cols: usize,
        value: f64,
        decay: bool,
        trainable: bool,
    ) -> usize {
        self.push(name, rows, cols, vec![value; rows * cols], decay, trainable)
    }

    fn push(
        &mut self,
        name: String,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        decay: bool,
        trainable: bool,
    ) -> usize {
        self.params.push(Param {
            name,
            rows,
            cols,
            data,
            decay,
            trainable,
        });
        self.params.len() - 1
    }
}

impl ParamSet {
    /// Initializes all parameters with the run seed: weights uniform in
    /// `±1/sqrt(fan_in)`, layer-norm at identity, gates at 0.5, TE frequencies
    /// on the fixed ladder. Layer-norm parameters and gates are exempt from
    /// weight decay.
    pub fn init(config: &ModelConfig, schema: &FeatureSchema) -> Result<ParamSet> {
        config.validate()?;
        let d = config.hidden_dim;
        let d_head = config.head_dim();
        let n_cont = schema.continuous().len();
        let input_dim = n_cont + schema.categorical().len() * config.cat_embed_dim;

        let mut b = ParamBuilder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };

        let input_w = b.uniform("input.w".into(), d, input_dim, input_dim);
        let input_b = b.uniform("input.b".into(), d, 1, input_dim);
        let embeds = schema
            .categorical()
            .iter()
            .map(|c| {
                b.uniform(
                    format!("embed.{}", c.name),
                    c.cardinality,
                    config.cat_embed_dim,
                    c.cardinality,
                )
            })
            .collect();
        let omega = match config.te_mode {
            TeMode::FixedLadder => None,
            TeMode::Learnable => {
                let idx = b.push("te.omega".into(), d, 1, fixed_ladder(d), true, true);
                Some(idx)
            }
        };

        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let heads = (0..config.n_heads)
                .map(|h| HeadLayout {
                    wq: b.uniform(format!("layer{l}.head{h}.wq"), d_head, d, d),
                    bq: b.uniform(format!("layer{l}.head{h}.bq"), d_head, 1, d),
                    wk: b.uniform(format!("layer{l}.head{h}.wk"), d_head, d, d),
                    bk: b.uniform(format!("layer{l}.head{h}.bk"), d_head, 1, d),
                    wv: b.uniform(format!("layer{l}.head{h}.wv"), d_head, d, d),
                    bv: b.uniform(format!("layer{l}.head{h}.bv"), d_head, 1, d),
                })
                .collect();
            let featural = match config.attention {
                AttentionKind::Disentangled => {
                    Some(b.uniform(format!("layer{l}.featural.wf"), d, 1, d))
                }
                AttentionKind::Entangled => None,
            };
            let merge = b.uniform(format!("layer{l}.merge"), d, d, d);
            let alpha = b.constant(format!("layer{l}.alpha"), 1, 1, 0.5, false, true);
            let ffn = |b: &mut ParamBuilder, tag: &str| FfnLayout {
                ln_gain: b.constant(format!("layer{l}.{tag}.ln_gain"), d, 1, 1.0, false, true),
                ln_bias: b.constant(format!("layer{l}.{tag}.ln_bias"), d, 1, 0.0, false, true),
                w1: b.uniform(format!("layer{l}.{tag}.w1"), d, d, d),
                b1: b.uniform(format!("layer{l}.{tag}.b1"), d, 1, d),
                w2: b.uniform(format!("layer{l}.{tag}.w2"), d, d, d),
                b2: b.uniform(format!("layer{l}.{tag}.b2"), d, 1, d),
            };
            let ffn_inv = ffn(&mut b, "ffn_inv");
            let ffn_var = match config.attention {
                AttentionKind::Disentangled => Some(ffn(&mut b, "ffn_var")),
                AttentionKind::Entangled => None,
            };
            layers.push(LayerLayout {
                heads,
                featural,
                merge,
                alpha,
                ffn_inv,
                ffn_var,
            });
        }

        let mlp_head = |b: &mut ParamBuilder, tag: &str| MlpLayout {
            w1: b.uniform(format!("{tag}.w1"), d, d, d),
            b1: b.uniform(format!("{tag}.b1"), d, 1, d),
            w2: b.uniform(format!("{tag}.w2"), 1, d, d),
            b2: b.uniform(format!("{tag}.b2"), 1, 1, d),
        };
        let head_f = mlp_head(&mut b, "head_f");
        let head_g = match config.attention {
            AttentionKind::Disentangled => Some(mlp_head(&mut b, "head_g")),
            AttentionKind::Entangled => None,
        };

        Ok(ParamSet {
            params: b.params,
            layout: Layout {
                input_w,
                input_b,
                embeds,
                omega,
                layers,
                head_f,
                head_g,
            },
        })
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Scalar count of the variant branch (variant FFNs, mixed head, featural
    /// mask); zero in entangled mode by construction.
    pub fn variant_branch_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| {
                p.name.contains("ffn_var")
                    || p.name.starts_with("head_g")
                    || p.name.contains("featural")
            })
            .map(|p| p.data.len())
            .sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

/// On-disk checkpoint: config and schema echo plus the named arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    pub params: Vec<Param>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(config: &ModelConfig, schema: &FeatureSchema, params: &ParamSet) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: config.clone(),
            schema: schema.clone(),
            params: params.params.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    /// Rebuilds the parameter set, validating names and shapes against a
    /// freshly laid-out model.
    pub fn into_param_set(self) -> Result<(ModelConfig, FeatureSchema, ParamSet)> {
        let fresh = ParamSet::init(&self.config, &self.schema)?;
        if fresh.params.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                fresh.params.len()
            )));
        }
        for (got, want) in self.params.iter().zip(&fresh.params) {
            if got.name != want.name || got.rows != want.rows || got.cols != want.cols {
                return Err(Error::Config(format!(
                    "checkpoint tensor '{}' ({}x{}) does not match expected '{}' ({}x{})",
                    got.name, got.rows, got.cols, want.name, want.rows, want.cols
                )));
            }
        }
        let params = ParamSet {
            params: self.params,
            layout: fresh.layout,
        };
        Ok((self.config, self.schema, params))
    }
}

/// The dynamic neighborhood of `patient` at snapshot position `snap_idx`:
/// all `(snapshot position, node index)` pairs `(t', v)` with an out-edge
/// `(u, v)` at `t'` inside the window, plus the self pair at `snap_idx`.
pub fn dynamic_neighborhood(
    graph: &DynamicGraph,
    patient: &PatientId,
    snap_idx: usize,
    window: Window,
) -> Result<Vec<(usize, usize)>> {
    let snap = graph
        .snapshots
        .get(snap_idx)
        .ok_or_else(|| Error::Config(format!("snapshot index {snap_idx} out of range")))?;
    let u_here = snap.node_index(patient).ok_or_else(|| Error::Validation {
        row: None,
        message: format!("patient {patient} absent at t={}", snap.time),
    })?;
    let t = snap.time;
    let earliest = match window {
        Window::All => 0,
        Window::Last(w) => t.saturating_sub(w - 1),
    };
    let mut out = Vec::new();
    for (sj, s) in graph.snapshots.iter().enumerate().take(snap_idx + 1) {
        if s.time < earliest {
            continue;
        }
        if let Some(uj) = s.node_index(patient) {
            for &(src, dst) in &s.edges {
                if src == uj {
                    out.push((sj, dst));
                }
            }
        }
    }
    out.push((snap_idx, u_here));
    Ok(out)
}

/// Per-node-and-time inputs on the tape, kept for feature attribution.
#[derive(Debug, Clone)]
pub struct NodeInputs {
    /// Leaf holding the scaled continuous block.
    pub continuous: VarId,
    /// One embedding-lookup node per categorical feature.
    pub embeds: Vec<VarId>,
}

/// A supervised prediction: label at snapshot `snap_idx`, features through
/// snapshot `snap_idx - 1`.
#[derive(Debug, Clone)]
pub struct PredPair {
    pub patient: PatientId,
    /// Snapshot position carrying the label.
    pub snap_idx: usize,
    /// Node index within the labeled snapshot.
    pub node_idx: usize,
    /// Node index within the previous snapshot.
    pub prev_node_idx: usize,
    pub pred: VarId,
    pub label: f64,
}

/// Everything the forward pass produced, still attached to the tape.
pub struct Forward {
    pub tape: Tape,
    /// Tape leaf per parameter, aligned with `ParamSet::params`.
    pub param_ids: Vec<VarId>,
    /// `[layer][snapshot][node] -> (z_inv, z_var)`; `z_var` is `None` in
    /// entangled mode.
    pub state_ids: Vec<Vec<Vec<(VarId, Option<VarId>)>>>,
    /// `[snapshot][node]` input nodes.
    pub inputs: Vec<Vec<NodeInputs>>,
    pub pred_pairs: Vec<PredPair>,
}

impl Forward {
    /// Final-layer variant pool in deterministic (snapshot, node) order.
    pub fn variant_pool(&self) -> Vec<(usize, usize, VarId)> {
        let last = self.state_ids.last().expect("at least one layer");
        let mut pool = Vec::new();
        for (si, nodes) in last.iter().enumerate() {
            for (ni, (_, zv)) in nodes.iter().enumerate() {
                if let Some(zv) = zv {
                    pool.push((si, ni, *zv));
                }
            }
        }
        pool
    }

    /// Predicted values in pair order.
    pub fn predictions(&self) -> Vec<f64> {
        self.pred_pairs
            .iter()
            .map(|p| self.tape.scalar(p.pred))
            .collect()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.pred_pairs.iter().map(|p| p.label).collect()
    }
}

/// Value-level snapshot of the per-layer summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledState {
    /// `[layer][snapshot][node]` invariant summaries.
    pub z_inv: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[layer][snapshot][node]` variant summaries (zeros in entangled mode).
    pub z_var: Vec<Vec<Vec<Vec<f64>>>>,
}

impl DisentangledState {
    /// Hidden embedding `h = z_inv + z_var`, computed on demand so that
    /// interventions cannot desynchronize it.
    pub fn h(&self, layer: usize, snap: usize, node: usize) -> Vec<f64> {
        self.z_inv[layer][snap][node]
            .iter()
            .zip(&self.z_var[layer][snap][node])
            .map(|(a, b)| a + b)
            .collect()
    }

    /// Final-layer variant summaries flattened in (snapshot, node) order.
    pub fn variant_pool(&self) -> Vec<&Vec<f64>> {
        self.z_var
            .last()
            .expect("at least one layer")
            .iter()
            .flat_map(|nodes| nodes.iter())
            .collect()
    }

    pub fn final_layer(&self) -> usize {
        self.z_inv.len() - 1
    }
}

/// Runs the model over a dynamic graph, recording on a fresh tape.
///
/// Predictions are produced for every node labeled at snapshot position
/// `i >= 1` and present at position `i - 1`.
pub fn forward(graph: &DynamicGraph, params: &ParamSet, config: &ModelConfig) -> Result<Forward> {
    config.validate()?;
    if graph.snapshots.len() < 2 {
        return Err(Error::Validation {
            row: None,
            message: format!(
                "graph has {} snapshot(s); need >= 2 to predict from history",
                graph.snapshots.len()
            ),
        });
    }
    let d = config.hidden_dim;
    let d_head = config.head_dim();
    let n_cont = graph.schema.continuous().len();
    let cat_features = graph.schema.categorical().to_vec();
    let input_dim = n_cont + cat_features.len() * config.cat_embed_dim;
    let scale = 1.0 / (d_head as f64).sqrt();

    let mut tape = Tape::new();
    let param_ids: Vec<VarId> = params
        .params
        .iter()
        .map(|p| tape.leaf(p.data.clone()))
        .collect();
    let lt = &params.layout;

    // Temporal encodings per snapshot.
    let ladder = fixed_ladder(d);
    enum Te {
        Const(Vec<f64>),
        Node(VarId),
    }
    let te_per_snap: Vec<Te> = graph
        .snapshots
        .iter()
        .map(|s| {
            let t = s.time as f64;
            match lt.omega {
                None => Te::Const(temporal_encoding(t, &ladder)),
                Some(omega_idx) => Te::Node(tape.sin_scale(param_ids[omega_idx], t)),
            }
        })
        .collect();

    // Layer-0 states: projected scaled continuous block plus categorical embeddings.
    let mut inputs: Vec<Vec<NodeInputs>> = Vec::with_capacity(graph.snapshots.len());
    let mut h: Vec<Vec<VarId>> = Vec::with_capacity(graph.snapshots.len());
    for snap in &graph.snapshots {
        let mut snap_inputs = Vec::with_capacity(snap.node_ids.len());
        let mut snap_h = Vec::with_capacity(snap.node_ids.len());
        for row in &snap.features {
            let cont = tape.leaf(row[..n_cont].to_vec());
            let mut embeds = Vec::with_capacity(cat_features.len());
            let mut offset = n_cont;
            for (j, cat) in cat_features.iter().enumerate() {
                let block = &row[offset..offset + cat.cardinality];
                let idx =
                    block
                        .iter()
                        .position(|&v| v == 1.0)
                        .ok_or_else(|| Error::Validation {
                            row: None,
                            message: format!("feature row has no one-hot bit for '{}'", cat.name),
                        })?;
                embeds.push(tape.gather_row(param_ids[lt.embeds[j]], idx, config.cat_embed_dim));
                offset += cat.cardinality;
            }
            let mut parts = vec![cont];
            parts.extend(&embeds);
            let stacked = tape.concat(&parts);
            let h0 = tape.affine(
                param_ids[lt.input_w],
                Some(param_ids[lt.input_b]),
                stacked,
                d,
                input_dim,
            );
            snap_inputs.push(NodeInputs {
                continuous: cont,
                embeds,
            });
            snap_h.push(h0);
        }
        inputs.push(snap_inputs);
        h.push(snap_h);
    }

    // Dynamic neighborhoods are layer-independent; compute once.
    let mut neighborhoods: Vec<Vec<Vec<(usize, usize)>>> =
        Vec::with_capacity(graph.snapshots.len());
    for (si, snap) in graph.snapshots.iter().enumerate() {
        let mut per_node = Vec::with_capacity(snap.node_ids.len());
        for pid in &snap.node_ids {
            per_node.push(dynamic_neighborhood(graph, pid, si, config.window)?);
        }
        neighborhoods.push(per_node);
    }

    let mut state_ids: Vec<Vec<Vec<(VarId, Option<VarId>)>>> = Vec::with_capacity(config.n_layers);

    for (l, layer) in lt.layers.iter().enumerate() {
        // h + TE once per node-and-time.
        let mut hte: Vec<Vec<VarId>> = Vec::with_capacity(h.len());
        for (snap_h, te) in h.iter().zip(&te_per_snap) {
            let mut row = Vec::with_capacity(snap_h.len());
            for &hid in snap_h {
                row.push(match te {
                    Te::Const(c) => tape.add_const(hid, c),
                    Te::Node(n) => tape.add(hid, *n),
                });
            }
            hte.push(row);
        }

        // Featural mask on the invariant branch: softmax simplex over hidden
        // coordinates, shared across heads (entangled mode freezes it uniform).
        let mf_slices: Vec<MaskSlice> = match layer.featural {
            Some(wf) => {
                let mf = tape.softmax(param_ids[wf]);
                (0..config.n_heads)
                    .map(|hh| MaskSlice::Node(tape.slice(mf, hh * d_head, d_head)))
                    .collect()
            }
            None => (0..config.n_heads)
                .map(|_| MaskSlice::Uniform(1.0 / d as f64))
                .collect(),
        };

        // Keys, values and masked values once per (node, time, head).
        let mut keys: Vec<Vec<Vec<VarId>>> = Vec::with_capacity(config.n_heads);
        let mut vals: Vec<Vec<Vec<VarId>>> = Vec::with_capacity(config.n_heads);
        let mut masked_vals: Vec<Vec<Vec<VarId>>> = Vec::with_capacity(config.n_heads);
        for (hh, head) in layer.heads.iter().enumerate() {
            let mut k_snap = Vec::with_capacity(hte.len());
            let mut v_snap = Vec::with_capacity(hte.len());
            let mut mv_snap = Vec::with_capacity(hte.len());
            for snap_hte in &hte {
                let mut ks = Vec::with_capacity(snap_hte.len());
                let mut vs = Vec::with_capacity(snap_hte.len());
                let mut mvs = Vec::with_capacity(snap_hte.len());
                for &x in snap_hte {
                    let k = tape.affine(param_ids[head.wk], Some(param_ids[head.bk]), x, d_head, d);
                    let v = tape.affine(param_ids[head.wv], Some(param_ids[head.bv]), x, d_head, d);
                    let mv = match &mf_slices[hh] {
                        MaskSlice::Node(m) => tape.mul(v, *m),
                        MaskSlice::Uniform(c) => tape.scale(v, *c),
                    };
                    ks.push(k);
                    vs.push(v);
                    mvs.push(mv);
                }
                k_snap.push(ks);
                v_snap.push(vs);
                mv_snap.push(mvs);
            }
            keys.push(k_snap);
            vals.push(v_snap);
            masked_vals.push(mv_snap);
        }

        let mut layer_state: Vec<Vec<(VarId, Option<VarId>)>> = Vec::with_capacity(h.len());
        let mut next_h: Vec<Vec<VarId>> = Vec::with_capacity(h.len());
        for (si, snap_h) in h.iter().enumerate() {
            let mut snap_state = Vec::with_capacity(snap_h.len());
            let mut snap_next = Vec::with_capacity(snap_h.len());
            for (ni, &h_here) in snap_h.iter().enumerate() {
                let hood = &neighborhoods[si][ni];
                let mut inv_heads = Vec::with_capacity(config.n_heads);
                let mut var_heads = Vec::with_capacity(config.n_heads);
                for (hh, head) in layer.heads.iter().enumerate() {
                    let q = tape.affine(
                        param_ids[head.wq],
                        Some(param_ids[head.bq]),
                        hte[si][ni],
                        d_head,
                        d,
                    );
                    let ks: Vec<VarId> = hood.iter().map(|&(sj, vj)| keys[hh][sj][vj]).collect();
                    let logits = tape.dots(q, &ks, scale);
                    let m_inv = tape.softmax(logits);
                    let mvs: Vec<VarId> = hood
                        .iter()
                        .map(|&(sj, vj)| masked_vals[hh][sj][vj])
                        .collect();
                    inv_heads.push(tape.weighted_sum(m_inv, &mvs));
                    if config.attention == AttentionKind::Disentangled {
                        let neg = tape.scale(logits, -1.0);
                        let m_var = tape.softmax(neg);
                        let vs: Vec<VarId> =
                            hood.iter().map(|&(sj, vj)| vals[hh][sj][vj]).collect();
                        var_heads.push(tape.weighted_sum(m_var, &vs));
                    }
                }
                let inv_cat = tape.concat(&inv_heads);
                let inv_merged = tape.affine(param_ids[layer.merge], None, inv_cat, d, d);
                let inv_skip = tape.add(inv_merged, h_here);
                let z_inv =
                    ffn_block(&mut tape, &param_ids, &layer.ffn_inv, layer.alpha, inv_skip, d);

                let (z_var, h_next) = match (&layer.ffn_var, config.attention) {
                    (Some(ffn_var), AttentionKind::Disentangled) => {
                        let var_cat = tape.concat(&var_heads);
                        let var_merged = tape.affine(param_ids[layer.merge], None, var_cat, d, d);
                        let z_var =
                            ffn_block(&mut tape, &param_ids, ffn_var, layer.alpha, var_merged, d);
                        (Some(z_var), tape.add(z_inv, z_var))
                    }
                    _ => (None, z_inv),
                };

                if tape.value(h_next).iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric {
                        context: format!(
                            "non-finite activation at layer {l}, node {}, t={}",
                            graph.snapshots[si].node_ids[ni], graph.snapshots[si].time
                        ),
                    });
                }
                snap_state.push((z_inv, z_var));
                snap_next.push(h_next);
            }
            layer_state.push(snap_state);
            next_h.push(snap_next);
        }
        state_ids.push(layer_state);
        h = next_h;
    }

    // Prediction heads on the final layer: label at snapshot i from the
    // invariant summary at snapshot i-1.
    let final_layer = state_ids.last().expect("n_layers >= 1");
    let mut pred_pairs = Vec::new();
    for si in 1..graph.snapshots.len() {
        let prev = &graph.snapshots[si - 1];
        let cur = &graph.snapshots[si];
        let prev_index: HashMap<&PatientId, usize> = prev
            .node_ids
            .iter()
            .enumerate()
            .map(|(i, p)| (p, i))
            .collect();
        let mut new_pairs = Vec::new();
        for (ni, pid) in cur.node_ids.iter().enumerate() {
            if !cur.label_mask[ni] {
                continue;
            }
            let Some(&prev_ni) = prev_index.get(pid) else {
                continue;
            };
            let z_inv = final_layer[si - 1][prev_ni].0;
            new_pairs.push((ni, pid.clone(), prev_ni, z_inv, cur.label[ni]));
        }
        for (ni, pid, prev_ni, z_inv, label) in new_pairs {
            let pred = mlp_scalar(&mut tape, &param_ids, &lt.head_f, z_inv, d);
            pred_pairs.push(PredPair {
                patient: pid,
                snap_idx: si,
                node_idx: ni,
                prev_node_idx: prev_ni,
                pred,
                label,
            });
        }
    }

    Ok(Forward {
        tape,
        param_ids,
        state_ids,
        inputs,
        pred_pairs,
    })
}

enum MaskSlice {
    Node(VarId),
    Uniform(f64),
}

/// `FFN(x) = alpha * MLP(LayerNorm(x)) + (1 - alpha) * x` on the tape.
fn ffn_block(
    tape: &mut Tape,
    param_ids: &[VarId],
    ffn: &FfnLayout,
    alpha: usize,
    x: VarId,
    d: usize,
) -> VarId {
    let ln = tape.layer_norm(x, param_ids[ffn.ln_gain], param_ids[ffn.ln_bias]);
    let m1 = tape.affine(param_ids[ffn.w1], Some(param_ids[ffn.b1]), ln, d, d);
    let a1 = tape.tanh(m1);
    let m2 = tape.affine(param_ids[ffn.w2], Some(param_ids[ffn.b2]), a1, d, d);
    tape.gate_mix(param_ids[alpha], m2, x)
}

/// Two-layer scalar head on the tape.
fn mlp_scalar(tape: &mut Tape, param_ids: &[VarId], mlp: &MlpLayout, x: VarId, d: usize) -> VarId {
    let m1 = tape.affine(param_ids[mlp.w1], Some(param_ids[mlp.b1]), x, d, d);
    let a1 = tape.tanh(m1);
    tape.affine(param_ids[mlp.w2], Some(param_ids[mlp.b2]), a1, 1, d)
}

/// Mixed-head prediction on the tape from an invariant summary node and a
/// pre-squashed variant node.
pub fn mixed_pred_node(
    tape: &mut Tape,
    param_ids: &[VarId],
    layout: &Layout,
    z_inv: VarId,
    sig_z_var: VarId,
    d: usize,
) -> Result<VarId> {
    let head_g = layout
        .head_g
        .as_ref()
        .ok_or_else(|| Error::Config("entangled model has no mixed head".into()))?;
    let gin = tape.add(z_inv, sig_z_var);
    Ok(mlp_scalar(tape, param_ids, head_g, gin, d))
}

// --- value-level evaluation (shared kernels with the tape ops) ---

fn affine_val(w: &Param, b: &Param, x: &[f64]) -> Vec<f64> {
    let mut out = b.data.clone();
    tape::matvec_acc(&w.data, x, w.rows, w.cols, &mut out);
    out
}

fn mlp_scalar_val(params: &ParamSet, mlp: &MlpLayout, x: &[f64]) -> f64 {
    let p = &params.params;
    let h1 = affine_val(&p[mlp.w1], &p[mlp.b1], x);
    let a1: Vec<f64> = h1.iter().map(|v| v.tanh()).collect();
    affine_val(&p[mlp.w2], &p[mlp.b2], &a1)[0]
}

/// Inference head: reads the invariant summary only.
pub fn predict_invariant(z_inv: &[f64], params: &ParamSet) -> f64 {
    mlp_scalar_val(params, &params.layout.head_f, z_inv)
}

/// Mixed head: `g(z_inv, z_var) = MLP(z_inv + sigmoid(z_var))`.
pub fn predict_mixed(z_inv: &[f64], z_var: &[f64], params: &ParamSet) -> Result<f64> {
    let head_g = params
        .layout
        .head_g
        .as_ref()
        .ok_or_else(|| Error::Config("entangled model has no mixed head".into()))?;
    let gin: Vec<f64> = z_inv
        .iter()
        .zip(z_var)
        .map(|(a, b)| a + tape::sigmoid(*b))
        .collect();
    Ok(mlp_scalar_val(params, head_g, &gin))
}

/// Extracts the value-level state from a recorded forward pass.
pub fn extract_state(fwd: &Forward, d: usize) -> DisentangledState {
    let mut z_inv = Vec::with_capacity(fwd.state_ids.len());
    let mut z_var = Vec::with_capacity(fwd.state_ids.len());
    for layer in &fwd.state_ids {
        let mut li = Vec::with_capacity(layer.len());
        let mut lv = Vec::with_capacity(layer.len());
        for snap in layer {
            let mut si = Vec::with_capacity(snap.len());
            let mut sv = Vec::with_capacity(snap.len());
            for (zi, zv) in snap {
                si.push(fwd.tape.value(*zi).to_vec());
                sv.push(match zv {
                    Some(zv) => fwd.tape.value(*zv).to_vec(),
                    None => vec![0.0; d],
                });
            }
            li.push(si);
            lv.push(sv);
        }
        z_inv.push(li);
        z_var.push(lv);
    }
    DisentangledState { z_inv, z_var }
}


#[cfg(test)]
mod tests {
    use super::test_support::{random_graph, test_schema};
    use super::*;

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            hidden_dim: 4,
            cat_embed_dim: 2,
            n_layers: 1,
            n_heads: 1,
            window: Window::All,
            te_mode: TeMode::FixedLadder,
            attention: AttentionKind::Disentangled,
            seed,
        }
    }

    #[test]
    fn te_of_zero_is_zero_vector() {
        let omega = fixed_ladder(8);
        assert_eq!(temporal_encoding(0.0, &omega), vec![0.0; 8]);
    }

    #[test]
    fn te_first_component_hits_one_at_half_pi() {
        let omega = vec![1.0, 0.5];
        let te = temporal_encoding(std::f64::consts::FRAC_PI_2, &omega);
        assert!((te[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ladder_for_d2_is_1_and_001() {
        let omega = fixed_ladder(2);
        assert!((omega[0] - 1.0).abs() < 1e-15);
        assert!((omega[1] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn equal_logits_give_uniform_masks() {
        let (mi, mv) = attention_masks_from_logits(&[0.7, 0.7, 0.7]);
        for v in mi.iter().chain(&mv) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_masks_for_ln2_logits() {
        let (mi, mv) = attention_masks_from_logits(&[2.0f64.ln(), 0.0]);
        assert!((mi[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((mi[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((mv[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((mv[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn neighborhood_window_one_is_current_snapshot_plus_self() {
        let graph = random_graph(4, 3, 2, &[], 2, 7);
        let pid: PatientId = "p0".into();
        let hood = dynamic_neighborhood(&graph, &pid, 2, Window::Last(1)).unwrap();
        // 2 out-edges at the current snapshot plus the self pair.
        assert_eq!(hood.len(), 3);
        assert!(hood.iter().all(|&(sj, _)| sj == 2));
        assert_eq!(*hood.last().unwrap(), (2, 0));
    }

    #[test]
    fn isolated_node_neighborhood_is_self_only() {
        let mut graph = random_graph(3, 2, 2, &[], 1, 9);
        for snap in &mut graph.snapshots {
            snap.edges.clear();
        }
        let pid: PatientId = "p1".into();
        let hood = dynamic_neighborhood(&graph, &pid, 1, Window::All).unwrap();
        assert_eq!(hood, vec![(1, 1)]);
    }

    #[test]
    fn three_snapshots_two_neighbors_each_gives_seven_entries() {
        let graph = random_graph(5, 3, 2, &[], 2, 11);
        let pid: PatientId = "p2".into();
        let hood = dynamic_neighborhood(&graph, &pid, 2, Window::All).unwrap();
        assert_eq!(hood.len(), 3 * 2 + 1);
    }

    #[test]
    fn absent_patient_is_an_error() {
        let graph = random_graph(3, 2, 2, &[], 1, 5);
        let pid: PatientId = "nope".into();
        assert!(dynamic_neighborhood(&graph, &pid, 0, Window::All).is_err());
    }

    #[test]
    fn forward_shapes_and_pred_count() {
        let graph = random_graph(2, 2, 3, &[2], 1, 3);
        let config = small_config(1);
        let params = ParamSet::init(&config, &graph.schema).unwrap();
        let fwd = forward(&graph, &params, &config).unwrap();
        assert_eq!(fwd.state_ids.len(), 1);
        for snap in &fwd.state_ids[0] {
            for (zi, zv) in snap {
                assert_eq!(fwd.tape.value(*zi).len(), 4);
                assert_eq!(fwd.tape.value(zv.unwrap()).len(), 4);
            }
        }
        // Predictions only for the second snapshot.
        assert_eq!(fwd.pred_pairs.len(), 2);
        assert!(fwd.pred_pairs.iter().all(|p| p.snap_idx == 1));
    }

    #[test]
    fn forward_is_deterministic() {
        let graph = random_graph(4, 3, 3, &[2, 3], 2, 21);
        let config = ModelConfig {
            seed: 5,
            ..Default::default()
        };
        let params = ParamSet::init(&config, &graph.schema).unwrap();
        let a = forward(&graph, &params, &config).unwrap();
        let b = forward(&graph, &params, &config).unwrap();
        let pa = a.predictions();
        let pb = b.predictions();
        assert_eq!(pa.len(), pb.len());
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn init_is_seed_reproducible_and_seed_sensitive() {
        let schema = test_schema(3, &[2]);
        let config = small_config(9);
        let a = ParamSet::init(&config, &schema).unwrap();
        let b = ParamSet::init(&config, &schema).unwrap();
        assert_eq!(a, b);
        let c = ParamSet::init(&small_config(10), &schema).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn featural_mask_is_a_simplex_after_updates() {
        // Whatever w_f holds, softmax keeps m_f on the simplex.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let wf: Vec<f64> = (0..8).map(|_| rng.random_range(-30.0..30.0)).collect();
            let mf = tape::softmax(&wf);
            let sum: f64 = mf.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(mf.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn one_hot_featural_mask_isolates_coordinate() {
        // z_inv aggregation with a one-hot mask depends only on that value coordinate.
        let mut tape = Tape::new();
        let mask = tape.leaf(vec![0.0, 1.0, 0.0]);
        let v1 = tape.leaf(vec![5.0, 2.0, -3.0]);
        let v2 = tape.leaf(vec![-1.0, 4.0, 9.0]);
        let mv1 = tape.mul(v1, mask);
        let mv2 = tape.mul(v2, mask);
        let w = tape.leaf(vec![0.25, 0.75]);
        let z = tape.weighted_sum(w, &[mv1, mv2]);
        assert_eq!(tape.value(z), &[0.0, 0.25 * 2.0 + 0.75 * 4.0, 0.0]);
    }

    #[test]
    fn predict_invariant_is_a_pure_function_of_z_inv() {
        let schema = test_schema(3, &[2]);
        let config = small_config(17);
        let params = ParamSet::init(&config, &schema).unwrap();
        let z_inv = vec![0.3, -0.2, 0.9, 0.1];
        let y = predict_invariant(&z_inv, &params);
        assert!(y.is_finite());
        assert_eq!(y.to_bits(), predict_invariant(&z_inv, &params).to_bits());
    }

    #[test]
    fn zero_f_weights_output_bias() {
        let schema = test_schema(3, &[]);
        let config = small_config(2);
        let mut params = ParamSet::init(&config, &schema).unwrap();
        let head = params.layout.head_f;
        for idx in [head.w1, head.b1, head.w2] {
            for v in &mut params.params[idx].data {
                *v = 0.0;
            }
        }
        params.params[head.b2].data[0] = 1.25;
        assert_eq!(predict_invariant(&[9.0, -3.0, 0.5, 2.0], &params), 1.25);
    }

    #[test]
    fn mixed_head_at_zero_variant_uses_half_offset() {
        let schema = test_schema(3, &[]);
        let config = small_config(3);
        let params = ParamSet::init(&config, &schema).unwrap();
        let z_inv = vec![0.1, 0.2, -0.3, 0.4];
        let z_zero = vec![0.0; 4];
        let got = predict_mixed(&z_inv, &z_zero, &params).unwrap();
        let head_g = params.layout.head_g.unwrap();
        let shifted: Vec<f64> = z_inv.iter().map(|v| v + 0.5).collect();
        let want = mlp_scalar_val(&params, &head_g, &shifted);
        assert_eq!(got.to_bits(), want.to_bits());
    }

    #[test]
    fn mixed_head_approaches_plain_mlp_as_variant_goes_to_neg_infinity() {
        let schema = test_schema(3, &[]);
        let config = small_config(3);
        let params = ParamSet::init(&config, &schema).unwrap();
        let z_inv = vec![0.1, 0.2, -0.3, 0.4];
        let z_neg = vec![-60.0; 4];
        let got = predict_mixed(&z_inv, &z_neg, &params).unwrap();
        let head_g = params.layout.head_g.unwrap();
        let want = mlp_scalar_val(&params, &head_g, &z_inv);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn f_and_g_heads_differ_for_generic_parameters() {
        let schema = test_schema(3, &[]);
        let config = small_config(6);
        let params = ParamSet::init(&config, &schema).unwrap();
        let z = vec![0.5, -0.1, 0.7, 0.05];
        let f = predict_invariant(&z, &params);
        let g = predict_mixed(&z, &z, &params).unwrap();
        assert_ne!(f.to_bits(), g.to_bits());
    }

    #[test]
    fn entangled_mode_has_no_variant_parameters() {
        let schema = test_schema(3, &[2]);
        let mut config = small_config(8);
        config.attention = AttentionKind::Entangled;
        let params = ParamSet::init(&config, &schema).unwrap();
        assert_eq!(params.variant_branch_scalars(), 0);
        let full = ParamSet::init(&small_config(8), &schema).unwrap();
        assert!(full.variant_branch_scalars() > 0);
    }

    #[test]
    fn zeroed_variant_ffn_matches_entangled_wiring() {
        // With alpha = 1, zeroed variant MLP output, and uniform featural mask,
        // the full model's forward equals the invariant-only wiring that shares
        // its invariant parameters.
        let graph = random_graph(3, 3, 3, &[2], 1, 33);
        let mut config = ModelConfig {
            hidden_dim: 4,
            cat_embed_dim: 2,
            n_layers: 2,
            n_heads: 2,
            window: Window::All,
            te_mode: TeMode::FixedLadder,
            attention: AttentionKind::Disentangled,
            seed: 12,
        };
        let mut full = ParamSet::init(&config, &graph.schema).unwrap();
        for l in 0..config.n_layers {
            let layer = full.layout.layers[l].clone();
            full.params[layer.alpha].data[0] = 1.0;
            for v in &mut full.params[layer.featural.unwrap()].data {
                *v = 0.0; // softmax(0) = uniform simplex
            }
            let ffn_var = layer.ffn_var.unwrap();
            for idx in [ffn_var.w2, ffn_var.b2] {
                for v in &mut full.params[idx].data {
                    *v = 0.0;
                }
            }
        }
        let fwd_full = forward(&graph, &full, &config).unwrap();

        config.attention = AttentionKind::Entangled;
        let mut ent = ParamSet::init(&config, &graph.schema).unwrap();
        for p in &mut ent.params {
            let src = full.index_of(&p.name).expect("shared parameter");
            p.data = full.params[src].data.clone();
        }
        let fwd_ent = forward(&graph, &ent, &config).unwrap();

        let a = fwd_full.predictions();
        let b = fwd_ent.predictions();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits(), "{x} vs {y}");
        }
        // And the variant summaries are exactly zero, so h = z_inv everywhere.
        let state = extract_state(&fwd_full, 4);
        for zv in state.variant_pool() {
            assert!(zv.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn permuting_nodes_permutes_predictions() {
        let graph = random_graph(5, 3, 3, &[2], 2, 44);
        let config = ModelConfig {
            seed: 3,
            ..Default::default()
        };
        let params = ParamSet::init(&config, &graph.schema).unwrap();
        let base = forward(&graph, &params, &config).unwrap();

        // Reverse node order in every snapshot, remapping edges.
        let mut permuted = graph.clone();
        for snap in &mut permuted.snapshots {
            let n = snap.node_ids.len();
            let perm: Vec<usize> = (0..n).rev().collect();
            snap.node_ids = perm.iter().map(|&i| snap.node_ids[i].clone()).collect();
            snap.features = perm.iter().map(|&i| snap.features[i].clone()).collect();
            snap.label = perm.iter().map(|&i| snap.label[i]).collect();
            snap.label_mask = perm.iter().map(|&i| snap.label_mask[i]).collect();
            for (s, d) in &mut snap.edges {
                *s = n - 1 - *s;
                *d = n - 1 - *d;
            }
        }
        let other = forward(&permuted, &params, &config).unwrap();

        let mut base_map: HashMap<(String, usize), f64> = HashMap::new();
        for p in &base.pred_pairs {
            base_map.insert((p.patient.0.clone(), p.snap_idx), base.tape.scalar(p.pred));
        }
        assert_eq!(base.pred_pairs.len(), other.pred_pairs.len());
        for p in &other.pred_pairs {
            let want = base_map[&(p.patient.0.clone(), p.snap_idx)];
            let got = other.tape.scalar(p.pred);
            assert!(
                (got - want).abs() < 1e-9,
                "patient {} t{}: {got} vs {want}",
                p.patient,
                p.snap_idx
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let schema = test_schema(4, &[2, 3]);
        let config = ModelConfig {
            seed: 77,
            ..Default::default()
        };
        let params = ParamSet::init(&config, &schema).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        Checkpoint::new(&config, &schema, &params)
            .save(&path)
            .unwrap();
        let (config2, schema2, params2) =
            Checkpoint::load(&path).unwrap().into_param_set().unwrap();
        assert_eq!(config, config2);
        assert_eq!(schema, schema2);
        assert_eq!(params, params2);
    }

    #[test]
    fn non_finite_activation_is_reported_with_context() {
        let graph = random_graph(2, 2, 2, &[], 1, 8);
        let config = small_config(5);
        let mut params = ParamSet::init(&config, &graph.schema).unwrap();
        params.params[params.layout.input_w].data[0] = f64::NAN;
        let err = match forward(&graph, &params, &config) {
            Err(e) => e,
            Ok(_) => panic!("expected a numerical error"),
        };
        let msg = err.to_string();
        assert!(msg.contains("layer 0"), "got: {msg}");
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn window_parses_from_str() {
        assert_eq!("all".parse::<Window>().unwrap(), Window::All);
        assert_eq!("3".parse::<Window>().unwrap(), Window::Last(3));
        assert!("0".parse::<Window>().is_err());
        assert!("x".parse::<Window>().is_err());
    }
}
