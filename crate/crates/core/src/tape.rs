//! Reverse-mode automatic differentiation over `f64` vectors.
//!
//! The tape records vector-valued operations eagerly during the forward pass
//! and propagates gradients backward through them. Operations are sized for
//! this model family: affine maps, attention-style dot products and weighted
//! sums, softmax, layer normalization, smooth pointwise nonlinearities, and
//! scalar loss reductions. Every backward rule is covered by a finite
//! difference check in the tests below.
//!
//! Values are plain `Vec<f64>`; a scalar is a length-1 vector. Matrices only
//! appear as parameters of `affine`, stored row-major.

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// y = W x + b, W row-major (rows x cols), b optional.
    Affine {
        w: VarId,
        b: Option<VarId>,
        x: VarId,
        rows: usize,
        cols: usize,
    },
    Add(VarId, VarId),
    /// y = x + c for a constant vector c.
    AddConst(VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    /// y = gate * a + (1 - gate) * b, gate a scalar node.
    GateMix {
        gate: VarId,
        a: VarId,
        b: VarId,
    },
    /// y_i = scale * dot(q, k_i).
    Dots {
        q: VarId,
        keys: Vec<VarId>,
        scale: f64,
    },
    Softmax(VarId),
    /// y = sum_i w_i v_i for a weight vector node and value vector nodes.
    WeightedSum {
        weights: VarId,
        values: Vec<VarId>,
    },
    Concat(Vec<VarId>),
    Slice {
        x: VarId,
        start: usize,
    },
    /// Row `row` of a matrix-valued leaf (rows x cols, row-major).
    GatherRow {
        table: VarId,
        row: usize,
        cols: usize,
    },
    Tanh(VarId),
    Sigmoid(VarId),
    /// y_k = sin(omega_k * t).
    SinScale {
        omega: VarId,
        t: f64,
    },
    /// Layer normalization with learnable gain and bias.
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
    },
    /// Mean squared error between scalar prediction nodes and constant targets.
    MsePairs {
        preds: Vec<VarId>,
        targets: Vec<f64>,
    },
    /// mean(xs) + population variance(xs) over scalar nodes.
    MeanPlusVar(Vec<VarId>),
    /// Sum of scalar nodes with coefficients.
    ScalarComb(Vec<(VarId, f64)>),
}

struct Node {
    op: Op,
    value: Vec<f64>,
    grad: Vec<f64>,
}

/// Gradient tape. Build values with the `push_*`/op methods, then call
/// [`Tape::backward`] from a scalar node.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: VarId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    pub fn grad(&self, id: VarId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> VarId {
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { op, value, grad });
        VarId(self.nodes.len() - 1)
    }

    /// A differentiable leaf (input or parameter).
    pub fn leaf(&mut self, value: Vec<f64>) -> VarId {
        self.push(Op::Leaf, value)
    }

    pub fn leaf_scalar(&mut self, value: f64) -> VarId {
        self.leaf(vec![value])
    }

    /// y = W x + b. `w` holds a rows x cols matrix row-major; `x` has length cols.
    pub fn affine(&mut self, w: VarId, b: Option<VarId>, x: VarId, rows: usize, cols: usize) -> VarId {
        debug_assert_eq!(self.nodes[w.0].value.len(), rows * cols);
        debug_assert_eq!(self.nodes[x.0].value.len(), cols);
        let mut out = match b {
            Some(b) => self.nodes[b.0].value.clone(),
            None => vec![0.0; rows],
        };
        matvec_acc(&self.nodes[w.0].value, &self.nodes[x.0].value, rows, cols, &mut out);
        self.push(Op::Affine { w, b, x, rows, cols }, out)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add(a, b), value)
    }

    pub fn add_const(&mut self, x: VarId, c: &[f64]) -> VarId {
        let value: Vec<f64> = self.nodes[x.0].value.iter().zip(c).map(|(a, b)| a + b).collect();
        self.push(Op::AddConst(x), value)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v * c).collect();
        self.push(Op::Scale(x, c), value)
    }

    /// y = gate * a + (1 - gate) * b with a scalar gate node.
    pub fn gate_mix(&mut self, gate: VarId, a: VarId, b: VarId) -> VarId {
        let g = self.scalar(gate);
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| g * x + (1.0 - g) * y)
            .collect();
        self.push(Op::GateMix { gate, a, b }, value)
    }

    /// Attention logits: y_i = scale * dot(q, keys[i]).
    pub fn dots(&mut self, q: VarId, keys: &[VarId], scale: f64) -> VarId {
        let qv = &self.nodes[q.0].value;
        let value: Vec<f64> = keys
            .iter()
            .map(|k| dot(qv, &self.nodes[k.0].value) * scale)
            .collect();
        self.push(
            Op::Dots {
                q,
                keys: keys.to_vec(),
                scale,
            },
            value,
        )
    }

    pub fn softmax(&mut self, x: VarId) -> VarId {
        let value = softmax(&self.nodes[x.0].value);
        self.push(Op::Softmax(x), value)
    }

    /// y = sum_i weights_i * values_i.
    pub fn weighted_sum(&mut self, weights: VarId, values: &[VarId]) -> VarId {
        debug_assert_eq!(self.nodes[weights.0].value.len(), values.len());
        let dim = self.nodes[values[0].0].value.len();
        let mut out = vec![0.0; dim];
        for (i, v) in values.iter().enumerate() {
            let w = self.nodes[weights.0].value[i];
            for (o, x) in out.iter_mut().zip(&self.nodes[v.0].value) {
                *o += w * x;
            }
        }
        self.push(
            Op::WeightedSum {
                weights,
                values: values.to_vec(),
            },
            out,
        )
    }

    pub fn concat(&mut self, parts: &[VarId]) -> VarId {
        let mut value = Vec::new();
        for p in parts {
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(Op::Concat(parts.to_vec()), value)
    }

    pub fn slice(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let value = self.nodes[x.0].value[start..start + len].to_vec();
        self.push(Op::Slice { x, start }, value)
    }

    /// Row lookup into a matrix leaf (embedding tables).
    pub fn gather_row(&mut self, table: VarId, row: usize, cols: usize) -> VarId {
        let value = self.nodes[table.0].value[row * cols..(row + 1) * cols].to_vec();
        self.push(Op::GatherRow { table, row, cols }, value)
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(x), value)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| sigmoid(*v)).collect();
        self.push(Op::Sigmoid(x), value)
    }

    /// Temporal encoding against a trainable frequency vector: y_k = sin(omega_k * t).
    pub fn sin_scale(&mut self, omega: VarId, t: f64) -> VarId {
        let value: Vec<f64> = self.nodes[omega.0].value.iter().map(|w| (w * t).sin()).collect();
        self.push(Op::SinScale { omega, t }, value)
    }

    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId) -> VarId {
        let value = layer_norm(
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        self.push(Op::LayerNorm { x, gain, bias }, value)
    }

    /// Scalar loss: mean over pairs of (pred_i - target_i)^2.
    pub fn mse_pairs(&mut self, preds: &[VarId], targets: &[f64]) -> VarId {
        debug_assert_eq!(preds.len(), targets.len());
        debug_assert!(!preds.is_empty());
        let n = preds.len() as f64;
        let value = preds
            .iter()
            .zip(targets)
            .map(|(p, t)| {
                let d = self.scalar(*p) - t;
                d * d
            })
            .sum::<f64>()
            / n;
        self.push(
            Op::MsePairs {
                preds: preds.to_vec(),
                targets: targets.to_vec(),
            },
            vec![value],
        )
    }

    /// Scalar: mean(xs) + population variance(xs).
    pub fn mean_plus_var(&mut self, xs: &[VarId]) -> VarId {
        debug_assert!(!xs.is_empty());
        let vals: Vec<f64> = xs.iter().map(|x| self.scalar(*x)).collect();
        let value = mean_plus_population_variance(&vals);
        self.push(Op::MeanPlusVar(xs.to_vec()), vec![value])
    }

    /// Scalar: sum_i coeff_i * x_i.
    pub fn scalar_comb(&mut self, terms: &[(VarId, f64)]) -> VarId {
        let value = terms.iter().map(|(x, c)| self.scalar(*x) * c).sum();
        self.push(Op::ScalarComb(terms.to_vec()), vec![value])
    }

    /// Resets all gradients to zero (for reuse between backward passes).
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            for g in &mut node.grad {
                *g = 0.0;
            }
        }
    }

    /// Propagates d(root)/d(everything) backward from a scalar root.
    pub fn backward(&mut self, root: VarId) {
        debug_assert_eq!(self.nodes[root.0].value.len(), 1);
        self.nodes[root.0].grad[0] = 1.0;
        for i in (0..=root.0).rev() {
            // Detach this node's op and grad to appease the borrow checker;
            // ops never reference themselves.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let grad = std::mem::take(&mut self.nodes[i].grad);
            self.apply_backward(&op, i, &grad);
            self.nodes[i].op = op;
            self.nodes[i].grad = grad;
        }
    }

    fn apply_backward(&mut self, op: &Op, node_idx: usize, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Affine { w, b, x, rows, cols } => {
                let xv = self.nodes[x.0].value.clone();
                {
                    let wg = &mut self.nodes[w.0].grad;
                    for r in 0..*rows {
                        for c in 0..*cols {
                            wg[r * cols + c] += g[r] * xv[c];
                        }
                    }
                }
                if let Some(b) = b {
                    let bg = &mut self.nodes[b.0].grad;
                    for (bg, gr) in bg.iter_mut().zip(g) {
                        *bg += gr;
                    }
                }
                let wv = self.nodes[w.0].value.clone();
                let xg = &mut self.nodes[x.0].grad;
                for r in 0..*rows {
                    let gr = g[r];
                    for c in 0..*cols {
                        xg[c] += wv[r * cols + c] * gr;
                    }
                }
            }
            Op::Add(a, b) => {
                for (ga, gr) in self.nodes[a.0].grad.iter_mut().zip(g) {
                    *ga += gr;
                }
                for (gb, gr) in self.nodes[b.0].grad.iter_mut().zip(g) {
                    *gb += gr;
                }
            }
            Op::AddConst(x) => {
                for (gx, gr) in self.nodes[x.0].grad.iter_mut().zip(g) {
                    *gx += gr;
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                for ((ga, gr), bvi) in self.nodes[a.0].grad.iter_mut().zip(g).zip(&bv) {
                    *ga += gr * bvi;
                }
                for ((gb, gr), avi) in self.nodes[b.0].grad.iter_mut().zip(g).zip(&av) {
                    *gb += gr * avi;
                }
            }
            Op::Scale(x, c) => {
                for (gx, gr) in self.nodes[x.0].grad.iter_mut().zip(g) {
                    *gx += gr * c;
                }
            }
            Op::GateMix { gate, a, b } => {
                let gv = self.nodes[gate.0].value[0];
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let mut gate_grad = 0.0;
                for ((x, y), gr) in av.iter().zip(&bv).zip(g) {
                    gate_grad += gr * (x - y);
                }
                self.nodes[gate.0].grad[0] += gate_grad;
                for (ga, gr) in self.nodes[a.0].grad.iter_mut().zip(g) {
                    *ga += gr * gv;
                }
                for (gb, gr) in self.nodes[b.0].grad.iter_mut().zip(g) {
                    *gb += gr * (1.0 - gv);
                }
            }
            Op::Dots { q, keys, scale } => {
                let qv = self.nodes[q.0].value.clone();
                for (i, k) in keys.iter().enumerate() {
                    let gi = g[i] * scale;
                    let kv = self.nodes[k.0].value.clone();
                    for (gq, kvi) in self.nodes[q.0].grad.iter_mut().zip(&kv) {
                        *gq += gi * kvi;
                    }
                    for (gk, qvi) in self.nodes[k.0].grad.iter_mut().zip(&qv) {
                        *gk += gi * qvi;
                    }
                }
            }
            Op::Softmax(x) => {
                let y = self.nodes[node_idx].value.clone();
                let dot_gy: f64 = g.iter().zip(&y).map(|(a, b)| a * b).sum();
                for ((gx, yi), gi) in self.nodes[x.0].grad.iter_mut().zip(&y).zip(g) {
                    *gx += yi * (gi - dot_gy);
                }
            }
            Op::WeightedSum { weights, values } => {
                let wv = self.nodes[weights.0].value.clone();
                for (i, v) in values.iter().enumerate() {
                    let vv = self.nodes[v.0].value.clone();
                    self.nodes[weights.0].grad[i] += dot(g, &vv);
                    let wi = wv[i];
                    for (gv, gr) in self.nodes[v.0].grad.iter_mut().zip(g) {
                        *gv += wi * gr;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    for (gp, gr) in self.nodes[p.0].grad.iter_mut().zip(&g[offset..offset + len]) {
                        *gp += gr;
                    }
                    offset += len;
                }
            }
            Op::Slice { x, start } => {
                for (k, gr) in g.iter().enumerate() {
                    self.nodes[x.0].grad[start + k] += gr;
                }
            }
            Op::GatherRow { table, row, cols } => {
                for (k, gr) in g.iter().enumerate() {
                    self.nodes[table.0].grad[row * cols + k] += gr;
                }
            }
            Op::Tanh(x) => {
                let y = self.nodes[node_idx].value.clone();
                for ((gx, yi), gr) in self.nodes[x.0].grad.iter_mut().zip(&y).zip(g) {
                    *gx += gr * (1.0 - yi * yi);
                }
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[node_idx].value.clone();
                for ((gx, yi), gr) in self.nodes[x.0].grad.iter_mut().zip(&y).zip(g) {
                    *gx += gr * yi * (1.0 - yi);
                }
            }
            Op::SinScale { omega, t } => {
                let wv = self.nodes[omega.0].value.clone();
                for ((gw, wi), gr) in self.nodes[omega.0].grad.iter_mut().zip(&wv).zip(g) {
                    *gw += gr * t * (wi * t).cos();
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = self.nodes[x.0].value.clone();
                let gv = self.nodes[gain.0].value.clone();
                let n = xv.len() as f64;
                let mean = xv.iter().sum::<f64>() / n;
                let var = xv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                let xhat: Vec<f64> = xv.iter().map(|v| (v - mean) * inv_std).collect();

                for ((gb, _), gr) in self.nodes[bias.0].grad.iter_mut().zip(&xv).zip(g) {
                    *gb += gr;
                }
                for ((gg, xh), gr) in self.nodes[gain.0].grad.iter_mut().zip(&xhat).zip(g) {
                    *gg += gr * xh;
                }
                // dL/dxhat_i = g_i * gain_i; standard layer-norm backward.
                let dxhat: Vec<f64> = g.iter().zip(&gv).map(|(gr, gi)| gr * gi).collect();
                let sum_dxhat: f64 = dxhat.iter().sum();
                let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                for ((gx, xh), dxh) in self.nodes[x.0].grad.iter_mut().zip(&xhat).zip(&dxhat) {
                    *gx += inv_std * (dxh - sum_dxhat / n - xh * sum_dxhat_xhat / n);
                }
            }
            Op::MsePairs { preds, targets } => {
                let n = preds.len() as f64;
                let gr = g[0];
                for (p, t) in preds.iter().zip(targets) {
                    let d = self.nodes[p.0].value[0] - t;
                    self.nodes[p.0].grad[0] += gr * 2.0 * d / n;
                }
            }
            Op::MeanPlusVar(xs) => {
                let n = xs.len() as f64;
                let vals: Vec<f64> = xs.iter().map(|x| self.nodes[x.0].value[0]).collect();
                let mean = vals.iter().sum::<f64>() / n;
                let gr = g[0];
                for (x, v) in xs.iter().zip(&vals) {
                    self.nodes[x.0].grad[0] += gr * (1.0 / n + 2.0 * (v - mean) / n);
                }
            }
            Op::ScalarComb(terms) => {
                let gr = g[0];
                for (x, c) in terms {
                    self.nodes[x.0].grad[0] += gr * c;
                }
            }
        }
    }
}

// --- shared numeric kernels (used by the tape and by value-level evaluation) ---

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// out += W x for a row-major rows x cols matrix.
pub fn matvec_acc(w: &[f64], x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out[r] += dot(row, x);
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv_std * g + b)
        .collect()
}

pub fn mean_plus_population_variance(vals: &[f64]) -> f64 {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    mean + var
}
