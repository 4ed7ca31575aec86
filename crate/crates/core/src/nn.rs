//! Dense parameter storage and a small reverse-mode differentiation tape.
//!
//! Every value on the tape is a flat `Vec<f64>`; matrices only exist as
//! parameters. A forward pass records one [`Op`] per node and
//! [`Tape::backward`] replays them in reverse, accumulating parameter
//! gradients into a [`Gradients`] buffer aligned with the [`ParamStore`].

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named, row-major matrix. Vectors are `rows x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<NamedTensor>", into = "Vec<NamedTensor>")]
pub struct ParamStore {
    tensors: Vec<NamedTensor>,
    index: HashMap<String, usize>,
}

impl From<Vec<NamedTensor>> for ParamStore {
    fn from(tensors: Vec<NamedTensor>) -> Self {
        let index = tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
        ParamStore { tensors, index }
    }
}

impl From<ParamStore> for Vec<NamedTensor> {
    fn from(store: ParamStore) -> Self {
        store.tensors
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a zero-initialised tensor.
    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            shape: [rows, cols],
            data: vec![0.0; rows * cols],
        });
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    /// Registers a tensor drawn from U(-scale, scale).
    pub fn uniform<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let id = self.zeros(name, rows, cols);
        for v in &mut self.tensors[id.0].data {
            *v = rng.gen_range(-scale..=scale);
        }
        id
    }

    pub fn get(&self, id: ParamId) -> &NamedTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut NamedTensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Copies values from `other`, requiring identical names, order and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.tensors.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, archive has {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (mine, theirs) in self.tensors.iter().zip(&other.tensors) {
            if mine.name != theirs.name {
                return Err(Error::Shape(format!(
                    "expected tensor `{}`, archive has `{}`",
                    mine.name, theirs.name
                )));
            }
            if mine.shape != theirs.shape || theirs.data.len() != mine.data.len() {
                return Err(Error::Shape(format!(
                    "tensor `{}`: expected {:?}, archive has {:?}",
                    mine.name, mine.shape, theirs.shape
                )));
            }
        }
        for (mine, theirs) in self.tensors.iter_mut().zip(&other.tensors) {
            mine.data.copy_from_slice(&theirs.data);
        }
        Ok(())
    }

    /// Flat view used by optimisers and gradient checks.
    pub fn scalar_mut(&mut self, id: ParamId, i: usize) -> &mut f64 {
        &mut self.tensors[id.0].data[i]
    }
}

/// Gradient buffer with the same layout as a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    data: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            data: store
                .tensors
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.data.iter()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.data {
            for x in t {
                *x *= factor;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales in place so the global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.l2_norm();
        if max_norm > 0.0 && norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|t| t.iter().all(|&x| x == 0.0))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.data.iter().flat_map(|t| t.iter().copied()).collect()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Affine {
        w: ParamId,
        b: Option<ParamId>,
        x: Var,
    },
    Row {
        table: ParamId,
        row: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    /// Output is `[h; c]`; `acts` holds `[i, f, g, o, tanh(c)]`.
    Lstm {
        gates: Var,
        c_prev: Var,
        acts: Vec<f64>,
    },
    /// `score_k = v . tanh(query + key_k)`; `hidden[k]` caches the tanh.
    AdditiveScores {
        query: Var,
        keys: Vec<Var>,
        v: ParamId,
        hidden: Vec<Vec<f64>>,
    },
    Softmax {
        x: Var,
    },
    WeightedSum {
        weights: Var,
        items: Vec<Var>,
    },
    /// Scalar `log softmax(logits)[target]` over allowed entries.
    LogSoftmaxPick {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    LogSigmoid(Var),
    Sum(Vec<Var>),
    WeightedTotal {
        items: Vec<Var>,
        weights: Vec<f64>,
    },
    Mean(Var),
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Records a forward computation over a borrowed [`ParamStore`].
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Numerically stable `log softmax` restricted to `allowed` entries.
/// Disallowed entries come back as `-inf`.
pub fn log_softmax_masked(logits: &[f64], allowed: Option<&[bool]>) -> Vec<f64> {
    let ok = |i: usize| allowed.map_or(true, |m| m[i]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| ok(i))
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| ok(i))
        .map(|(_, &x)| (x - max).exp())
        .sum();
    let lse = max + sum.ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &x)| if ok(i) { x - lse } else { f64::NEG_INFINITY })
        .collect()
}

fn softmax_masked(x: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    log_softmax_masked(x, mask)
        .into_iter()
        .map(|l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() })
        .collect()
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `W x + b`.
    pub fn affine(&mut self, w: ParamId, b: Option<ParamId>, x: Var) -> Var {
        let wt = self.params.get(w);
        let xv = &self.nodes[x.0].value;
        assert_eq!(
            wt.cols(),
            xv.len(),
            "affine {}: input width mismatch",
            wt.name
        );
        let mut out = match b {
            Some(b) => self.params.get(b).data.clone(),
            None => vec![0.0; wt.rows()],
        };
        let cols = wt.cols();
        for (r, o) in out.iter_mut().enumerate() {
            let row = &wt.data[r * cols..(r + 1) * cols];
            *o += row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        self.push(out, Op::Affine { w, b, x })
    }

    /// Embedding lookup: one row of `table`.
    pub fn row(&mut self, table: ParamId, row: usize) -> Var {
        let value = self.params.get(table).row(row).to_vec();
        self.push(value, Op::Row { table, row })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        self.push(value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| x * k).collect();
        self.push(value, Op::Scale(a, k))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| sigmoid(x)).collect();
        self.push(value, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| log_sigmoid(x))
            .collect();
        self.push(value, Op::LogSigmoid(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::new();
        for p in parts {
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(value, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[x.0].value[start..start + len].to_vec();
        self.push(value, Op::Slice { x, start })
    }

    /// Fused LSTM cell. `gates` is the `4H` pre-activation in `[i, f, g, o]`
    /// order; returns `[h; c]`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Var {
        let g = &self.nodes[gates.0].value;
        let cp = &self.nodes[c_prev.0].value;
        let h = cp.len();
        assert_eq!(g.len(), 4 * h, "lstm gate width");
        let mut acts = vec![0.0; 5 * h];
        let mut out = vec![0.0; 2 * h];
        for k in 0..h {
            let i = sigmoid(g[k]);
            let f = sigmoid(g[h + k]);
            let gg = g[2 * h + k].tanh();
            let o = sigmoid(g[3 * h + k]);
            let c = f * cp[k] + i * gg;
            let tc = c.tanh();
            acts[k] = i;
            acts[h + k] = f;
            acts[2 * h + k] = gg;
            acts[3 * h + k] = o;
            acts[4 * h + k] = tc;
            out[k] = o * tc;
            out[h + k] = c;
        }
        self.push(
            out,
            Op::Lstm {
                gates,
                c_prev,
                acts,
            },
        )
    }

    /// Additive alignment scores `v . tanh(query + key_k)` for every key.
    pub fn additive_scores(&mut self, query: Var, keys: &[Var], v: ParamId) -> Var {
        let q = &self.nodes[query.0].value;
        let vt = &self.params.get(v).data;
        let mut hidden = Vec::with_capacity(keys.len());
        let mut scores = Vec::with_capacity(keys.len());
        for k in keys {
            let t: Vec<f64> = q
                .iter()
                .zip(&self.nodes[k.0].value)
                .map(|(a, b)| (a + b).tanh())
                .collect();
            scores.push(t.iter().zip(vt).map(|(a, b)| a * b).sum());
            hidden.push(t);
        }
        self.push(
            scores,
            Op::AdditiveScores {
                query,
                keys: keys.to_vec(),
                v,
                hidden,
            },
        )
    }

    /// Softmax; entries with `mask[k] == false` are exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let value = softmax_masked(&self.nodes[x.0].value, mask);
        self.push(value, Op::Softmax { x })
    }

    /// `sum_k weights[k] * items[k]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Var {
        let w = &self.nodes[weights.0].value;
        assert_eq!(w.len(), items.len());
        let dim = self.nodes[items[0].0].value.len();
        let mut out = vec![0.0; dim];
        for (wk, item) in w.iter().zip(items) {
            if *wk == 0.0 {
                continue;
            }
            for (o, x) in out.iter_mut().zip(&self.nodes[item.0].value) {
                *o += wk * x;
            }
        }
        self.push(
            out,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
        )
    }

    /// Scalar log-probability of `target` under `softmax(logits)` restricted
    /// to `allowed` entries.
    pub fn log_softmax_pick(&mut self, logits: Var, target: usize, allowed: Option<&[bool]>) -> Var {
        let lp = log_softmax_masked(&self.nodes[logits.0].value, allowed);
        let value = vec![lp[target]];
        let probs = lp
            .iter()
            .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() })
            .collect();
        self.push(
            value,
            Op::LogSoftmaxPick {
                logits,
                target,
                probs,
            },
        )
    }

    /// Elementwise sum of equally sized vectors.
    pub fn sum(&mut self, items: &[Var]) -> Var {
        let mut out = self.nodes[items[0].0].value.clone();
        for it in &items[1..] {
            for (o, x) in out.iter_mut().zip(&self.nodes[it.0].value) {
                *o += x;
            }
        }
        self.push(out, Op::Sum(items.to_vec()))
    }

    /// `sum_k weights[k] * items[k]` with constant weights.
    pub fn weighted_total(&mut self, items: &[Var], weights: &[f64]) -> Var {
        assert_eq!(items.len(), weights.len());
        let dim = self.nodes[items[0].0].value.len();
        let mut out = vec![0.0; dim];
        for (it, w) in items.iter().zip(weights) {
            for (o, x) in out.iter_mut().zip(&self.nodes[it.0].value) {
                *o += w * x;
            }
        }
        self.push(
            out,
            Op::WeightedTotal {
                items: items.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let value = vec![v.iter().sum::<f64>() / v.len() as f64];
        self.push(value, Op::Mean(x))
    }

    /// Back-propagates from the scalar `loss`, accumulating into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); loss.0 + 1];
        adj[loss.0] = vec![1.0];

        fn acc(adj: &mut [Vec<f64>], v: Var, len: usize) -> &mut Vec<f64> {
            let slot = &mut adj[v.0];
            if slot.is_empty() {
                *slot = vec![0.0; len];
            }
            slot
        }

        for idx in (0..=loss.0).rev() {
            if adj[idx].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut adj[idx]);
            let node = &self.nodes[idx];
            let len_of = |v: Var| self.nodes[v.0].value.len();
            match &node.op {
                Op::Leaf => {}
                Op::Affine { w, b, x } => {
                    let wt = self.params.get(*w);
                    let cols = wt.cols();
                    let xv = &self.nodes[x.0].value;
                    {
                        let dw = grads.get_mut(*w);
                        for (r, gr) in g.iter().enumerate() {
                            if *gr == 0.0 {
                                continue;
                            }
                            let row = &mut dw[r * cols..(r + 1) * cols];
                            for (d, xi) in row.iter_mut().zip(xv) {
                                *d += gr * xi;
                            }
                        }
                    }
                    if let Some(b) = b {
                        for (d, gr) in grads.get_mut(*b).iter_mut().zip(&g) {
                            *d += gr;
                        }
                    }
                    let dx = acc(&mut adj, *x, cols);
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        let row = &wt.data[r * cols..(r + 1) * cols];
                        for (d, wv) in dx.iter_mut().zip(row) {
                            *d += gr * wv;
                        }
                    }
                }
                Op::Row { table, row } => {
                    let cols = self.params.get(*table).cols();
                    let dt = &mut grads.get_mut(*table)[row * cols..(row + 1) * cols];
                    for (d, gr) in dt.iter_mut().zip(&g) {
                        *d += gr;
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        let d = acc(&mut adj, *v, g.len());
                        for (d, gr) in d.iter_mut().zip(&g) {
                            *d += gr;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    {
                        let d = acc(&mut adj, *a, g.len());
                        for ((d, gr), y) in d.iter_mut().zip(&g).zip(bv) {
                            *d += gr * y;
                        }
                    }
                    let d = acc(&mut adj, *b, g.len());
                    for ((d, gr), x) in d.iter_mut().zip(&g).zip(av) {
                        *d += gr * x;
                    }
                }
                Op::Scale(a, k) => {
                    let d = acc(&mut adj, *a, g.len());
                    for (d, gr) in d.iter_mut().zip(&g) {
                        *d += gr * k;
                    }
                }
                Op::Tanh(a) => {
                    let d = acc(&mut adj, *a, g.len());
                    for ((d, gr), y) in d.iter_mut().zip(&g).zip(&node.value) {
                        *d += gr * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(a) => {
                    let d = acc(&mut adj, *a, g.len());
                    for ((d, gr), y) in d.iter_mut().zip(&g).zip(&node.value) {
                        *d += gr * y * (1.0 - y);
                    }
                }
                Op::LogSigmoid(a) => {
                    let xv = &self.nodes[a.0].value;
                    let d = acc(&mut adj, *a, g.len());
                    for ((d, gr), x) in d.iter_mut().zip(&g).zip(xv) {
                        *d += gr * (1.0 - sigmoid(*x));
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = len_of(*p);
                        let d = acc(&mut adj, *p, n);
                        for (d, gr) in d.iter_mut().zip(&g[off..off + n]) {
                            *d += gr;
                        }
                        off += n;
                    }
                }
                Op::Slice { x, start } => {
                    let n = len_of(*x);
                    let d = acc(&mut adj, *x, n);
                    for (d, gr) in d[*start..*start + g.len()].iter_mut().zip(&g) {
                        *d += gr;
                    }
                }
                Op::Lstm {
                    gates,
                    c_prev,
                    acts,
                } => {
                    let h = g.len() / 2;
                    let cp = &self.nodes[c_prev.0].value;
                    let mut dgates = vec![0.0; 4 * h];
                    let mut dcp = vec![0.0; h];
                    for k in 0..h {
                        let (i, f, gg, o, tc) = (
                            acts[k],
                            acts[h + k],
                            acts[2 * h + k],
                            acts[3 * h + k],
                            acts[4 * h + k],
                        );
                        let dh = g[k];
                        let dc = g[h + k] + dh * o * (1.0 - tc * tc);
                        let do_ = dh * tc;
                        let di = dc * gg;
                        let dg = dc * i;
                        let df = dc * cp[k];
                        dcp[k] = dc * f;
                        dgates[k] = di * i * (1.0 - i);
                        dgates[h + k] = df * f * (1.0 - f);
                        dgates[2 * h + k] = dg * (1.0 - gg * gg);
                        dgates[3 * h + k] = do_ * o * (1.0 - o);
                    }
                    for (v, dv) in [(gates, dgates), (c_prev, dcp)] {
                        let d = acc(&mut adj, *v, dv.len());
                        for (d, x) in d.iter_mut().zip(&dv) {
                            *d += x;
                        }
                    }
                }
                Op::AdditiveScores {
                    query,
                    keys,
                    v,
                    hidden,
                } => {
                    let vt = &self.params.get(*v).data;
                    let dim = vt.len();
                    let mut dq = vec![0.0; dim];
                    let mut dv = vec![0.0; dim];
                    for ((k, t), gs) in keys.iter().zip(hidden).zip(&g) {
                        if *gs == 0.0 {
                            continue;
                        }
                        let dk = acc(&mut adj, *k, dim);
                        for j in 0..dim {
                            dv[j] += gs * t[j];
                            let dt = gs * vt[j] * (1.0 - t[j] * t[j]);
                            dk[j] += dt;
                            dq[j] += dt;
                        }
                    }
                    for (d, x) in grads.get_mut(*v).iter_mut().zip(&dv) {
                        *d += x;
                    }
                    let d = acc(&mut adj, *query, dim);
                    for (d, x) in d.iter_mut().zip(&dq) {
                        *d += x;
                    }
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    let d = acc(&mut adj, *x, y.len());
                    for ((d, gr), yi) in d.iter_mut().zip(&g).zip(y) {
                        *d += yi * (gr - dot);
                    }
                }
                Op::WeightedSum { weights, items } => {
                    let w = &self.nodes[weights.0].value;
                    let mut dw = vec![0.0; w.len()];
                    for (k, item) in items.iter().enumerate() {
                        let iv = &self.nodes[item.0].value;
                        dw[k] = g.iter().zip(iv).map(|(a, b)| a * b).sum();
                        if w[k] != 0.0 {
                            let d = acc(&mut adj, *item, g.len());
                            for (d, gr) in d.iter_mut().zip(&g) {
                                *d += w[k] * gr;
                            }
                        }
                    }
                    let d = acc(&mut adj, *weights, w.len());
                    for (d, x) in d.iter_mut().zip(&dw) {
                        *d += x;
                    }
                }
                Op::LogSoftmaxPick {
                    logits,
                    target,
                    probs,
                } => {
                    let gs = g[0];
                    let d = acc(&mut adj, *logits, probs.len());
                    for (j, (d, p)) in d.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *d += gs * (onehot - p);
                    }
                }
                Op::Sum(items) => {
                    for it in items {
                        let d = acc(&mut adj, *it, g.len());
                        for (d, gr) in d.iter_mut().zip(&g) {
                            *d += gr;
                        }
                    }
                }
                Op::WeightedTotal { items, weights } => {
                    for (it, w) in items.iter().zip(weights) {
                        if *w == 0.0 {
                            continue;
                        }
                        let d = acc(&mut adj, *it, g.len());
                        for (d, gr) in d.iter_mut().zip(&g) {
                            *d += w * gr;
                        }
                    }
                }
                Op::Mean(x) => {
                    let n = len_of(*x);
                    let d = acc(&mut adj, *x, n);
                    for d in d.iter_mut() {
                        *d += g[0] / n as f64;
                    }
                }
            }
        }
    }
}

/// Parameters of one LSTM layer: gates `W [x; h] + b`, rows in `[i, f, g, o]` order.
#[derive(Debug, Clone, Copy)]
pub struct LstmLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let scale = 1.0 / (hidden as f64).sqrt();
        let w = store.uniform(
            &format!("{prefix}.w"),
            4 * hidden,
            input + hidden,
            scale,
            rng,
        );
        let b = store.zeros(&format!("{prefix}.b"), 4 * hidden, 1);
        // forget-gate bias starts at 1
        for v in &mut store.get_mut(b).data[hidden..2 * hidden] {
            *v = 1.0;
        }
        LstmLayer { w, b, hidden }
    }
}

/// Per-layer `(h, c)` pairs living on a tape.
#[derive(Debug, Clone)]
pub struct LstmStateVars {
    pub layers: Vec<(Var, Var)>,
}

impl LstmStateVars {
    pub fn top(&self) -> Var {
        self.layers.last().expect("at least one layer").0
    }
}

/// Plain-value LSTM state, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl LstmState {
    pub fn zeros(layers: &[LstmLayer]) -> Self {
        LstmState {
            layers: layers
                .iter()
                .map(|l| (vec![0.0; l.hidden], vec![0.0; l.hidden]))
                .collect(),
        }
    }

    pub fn top_hidden(&self) -> &[f64] {
        &self.layers.last().expect("at least one layer").0
    }

    pub fn to_tape(&self, tape: &mut Tape) -> LstmStateVars {
        LstmStateVars {
            layers: self
                .layers
                .iter()
                .map(|(h, c)| (tape.constant(h.clone()), tape.constant(c.clone())))
                .collect(),
        }
    }

    pub fn from_tape(tape: &Tape, vars: &LstmStateVars) -> Self {
        LstmState {
            layers: vars
                .layers
                .iter()
                .map(|(h, c)| (tape.value(*h).to_vec(), tape.value(*c).to_vec()))
                .collect(),
        }
    }
}

/// One time step through a stack of LSTM layers.
pub fn lstm_stack_step(
    tape: &mut Tape,
    layers: &[LstmLayer],
    input: Var,
    state: &LstmStateVars,
) -> LstmStateVars {
    let mut x = input;
    let mut next = Vec::with_capacity(layers.len());
    for (layer, (h, c)) in layers.iter().zip(&state.layers) {
        let xh = tape.concat(&[x, *h]);
        let gates = tape.affine(layer.w, Some(layer.b), xh);
        let hc = tape.lstm_cell(gates, *c);
        let h_new = tape.slice(hc, 0, layer.hidden);
        let c_new = tape.slice(hc, layer.hidden, layer.hidden);
        next.push((h_new, c_new));
        x = h_new;
    }
    LstmStateVars { layers: next }
}

pub fn zero_state(tape: &mut Tape, layers: &[LstmLayer]) -> LstmStateVars {
    LstmStateVars {
        layers: layers
            .iter()
            .map(|l| {
                (
                    tape.constant(vec![0.0; l.hidden]),
                    tape.constant(vec![0.0; l.hidden]),
                )
            })
            .collect(),
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Central finite differences over every scalar of `store`.
    pub fn numeric_gradients(
        store: &mut ParamStore,
        eps: f64,
        mut loss: impl FnMut(&ParamStore) -> f64,
    ) -> Vec<f64> {
        let ids: Vec<ParamId> = store.ids().collect();
        let mut out = Vec::new();
        for id in ids {
            for i in 0..store.get(id).data.len() {
                let orig = store.get(id).data[i];
                *store.scalar_mut(id, i) = orig + eps;
                let up = loss(store);
                *store.scalar_mut(id, i) = orig - eps;
                let down = loss(store);
                *store.scalar_mut(id, i) = orig;
                out.push((up - down) / (2.0 * eps));
            }
        }
        out
    }

    /// Absolute error is used below 1e-6, where finite differences are noise.
    pub fn rel_errors(analytic: &[f64], numeric: &[f64]) -> Vec<f64> {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .collect()
    }

    pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        rel_errors(analytic, numeric).into_iter().fold(0.0, f64::max)
    }
}
