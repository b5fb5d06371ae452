use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops;
use super::{ParameterStore, TensorValue};
use crate::error::{shape_mismatch, Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Vec<f64>),
    Param(usize),
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Vec<bool>,
        heads: usize,
        probs: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    Reshape(Var),
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// One recorded forward computation over a borrowed [`ParameterStore`].
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for the backward sweep.
pub struct Graph<'p> {
    store: &'p ParameterStore,
    nodes: Vec<Node>,
    param_nodes: BTreeMap<usize, Var>,
    track: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&c, lead)) => (lead.iter().product(), c),
    }
}

impl<'p> Graph<'p> {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new(store: &'p ParameterStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
            track: true,
            dropout_rng: None,
        }
    }

    /// A forward-only graph; nothing requires gradients.
    pub fn inference(store: &'p ParameterStore) -> Self {
        Graph {
            track: false,
            ..Self::new(store)
        }
    }

    /// Enables dropout with a deterministic mask stream.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn store(&self) -> &'p ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(idx) => self.store.by_index(*idx).1.data(),
        }
    }

    /// Copies a node out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> TensorValue {
        TensorValue::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad: requires_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.track && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant or input tensor.
    pub fn input(&mut self, t: &TensorValue) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = TensorValue::new(shape.to_vec(), data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    /// Looks up a named parameter; repeated lookups return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if let Some(&v) = self.param_nodes.get(&idx) {
            return Ok(v);
        }
        let shape = self.store.by_index(idx).1.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Param(idx),
            op: Op::Param,
            requires_grad: self.track,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(idx, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_mismatch("matmul", &sa, &sb));
        }
        let data = ops::matmul(self.value(a), self.value(b), sa[0], sa[1], sb[1]);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![sa[0], sb[1]], data, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_mismatch("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), rg))
    }

    /// Adds a last-axis vector `bias` to every leading-axis row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(a));
        if self.shape(bias) != [cols] {
            return Err(shape_mismatch("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias);
        let data = self
            .value(a)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(self.shape(a).to_vec(), data, Op::AddBias(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_mismatch("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.value(a).iter().map(|x| x * factor).collect();
        let rg = self.any_grad(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, factor), rg)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = 0.0;
        for v in self.value(a) {
            s += v;
        }
        let rg = self.any_grad(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    /// Sums scalar nodes left to right; an empty list gives a constant zero.
    pub fn add_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let Some(&first) = iter.next() else {
            return Ok(self.push(Vec::new(), vec![0.0], Op::Leaf, false));
        };
        let mut acc = first;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Concatenates 2-D (or 1-D) tensors with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        let (rows, _) = rows_cols(&first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..s.len().saturating_sub(1)] != first[..first.len().saturating_sub(1)] {
                return Err(shape_mismatch("concat", &first, s));
            }
            widths.push(rows_cols(s).1);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = first;
        if let Some(last) = shape.last_mut() {
            *last = total;
        } else {
            shape = vec![total];
        }
        let rg = self.any_grad(parts);
        Ok(self.push(shape, data, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks 2-D tensors with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero tensors".into()));
        }
        let cols = self.shape(parts[0]).get(1).copied();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || Some(s[1]) != cols {
                return Err(shape_mismatch("concat_rows", self.shape(parts[0]), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p));
        }
        let cols = cols.expect("checked");
        let rg = self.any_grad(parts);
        Ok(self.push(vec![rows, cols], data, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Selects rows of a 2-D tensor; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Config(format!("gather_rows needs a matrix, got {s:?}")));
        }
        let cols = s[1];
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= s[0] {
                return Err(Error::Input(format!("row index {r} out of range for {} rows", s[0])));
            }
            data.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(vec![rows.len(), cols], data, Op::GatherRows(a, rows.to_vec()), rg))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let rg = self.any_grad(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| ops::gelu(x)).collect();
        let rg = self.any_grad(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Gelu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(a));
        let data = ops::softmax_rows(self.value(a), cols);
        let rg = self.any_grad(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Softmax(a), rg)
    }

    /// Per-row normalisation over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(shape_mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (y, xhat, inv_std) =
            ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), cols);
        let rg = self.any_grad(&[x, gamma, beta]);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            self.shape(x).to_vec(),
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Summed cross-entropy of each logit row against its target class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(logits));
        if rows != targets.len() {
            return Err(Error::Config(format!(
                "cross_entropy: {rows} logit rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Input(format!("target class {t} out of range for {cols} classes")));
        }
        let x = self.value(logits);
        let mut loss = 0.0;
        for (row, &t) in x.chunks(cols).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row {
                sum += (v - max).exp();
            }
            loss += max + sum.ln() - row[t];
        }
        let rg = self.any_grad(&[logits]);
        let probs = if rg { ops::softmax_rows(x, cols) } else { Vec::new() };
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Masked multi-head self-attention over `[t, d]` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &[bool], heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(shape_mismatch("attention", &s, self.shape(k)));
        }
        let (t, d) = (s[0], s[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("attention: {d} not divisible into {heads} heads")));
        }
        if mask.len() != t * t {
            return Err(Error::Config(format!(
                "attention: mask has {} entries for {t} tokens",
                mask.len()
            )));
        }
        let (out, probs) = ops::attention(self.value(q), self.value(k), self.value(v), mask, t, d, heads);
        let rg = self.any_grad(&[q, k, v]);
        let (mask, probs) = if rg { (mask.to_vec(), probs) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            s,
            out,
            Op::Attention {
                q,
                k,
                v,
                mask,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Inverted dropout; identity unless a dropout seed was set and `rate > 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return a;
        };
        let keep = 1.0 - rate;
        let n = self.nodes[a.0].shape.iter().product::<usize>();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.any_grad(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Dropout(a, mask), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(shape_mismatch("reshape", self.shape(a), shape));
        }
        let data = self.value(a).to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), rg))
    }

    /// `x · w + b` for `x[m,k]`, `w[k,n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.shape.iter().product::<usize>() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (&idx, &v) in &self.param_nodes {
            if let Some(Some(g)) = grads.get(v.0) {
                params.insert(idx, g.clone());
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, delta: Vec<f64>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&delta) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let da = ops::matmul_a_bt(g, self.value(*b), m, k, n);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = ops::matmul_at_b(self.value(*a), g, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.requires_grad(*bias) {
                    let cols = self.shape(*bias)[0];
                    let mut db = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let da = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * f).collect());
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = rows_cols(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let w = rows_cols(self.shape(p)).1;
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::GatherRows(a, rows) => {
                let cols = node.shape[1];
                let mut d = vec![0.0; self.value(*a).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        d[r * cols + c] += g[k * cols + c];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(gv, &x)| gv * ops::gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let (_, cols) = rows_cols(&node.shape);
                let y = self.value(Var(i));
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(d.chunks_mut(cols)) {
                    let mut dot = 0.0;
                    for (yv, gv) in yr.iter().zip(gr) {
                        dot += yv * gv;
                    }
                    for c in 0..cols {
                        dr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = rows_cols(&node.shape);
                let gam = self.value(*gamma);
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * xhat[r * cols + c];
                            db[c] += g[r * cols + c];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                }
                if self.requires_grad(*x) {
                    let n = cols as f64;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = g[r * cols + c] * gam[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * cols + c];
                        }
                        for c in 0..cols {
                            let dh = g[r * cols + c] * gam[c];
                            dx[r * cols + c] =
                                inv_std[r] / n * (n * dh - sum_dh - xhat[r * cols + c] * sum_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (_, cols) = rows_cols(self.shape(*logits));
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * cols + t] -= g[0];
                }
                self.accumulate(grads, *logits, d);
            }
            Op::Attention {
                q,
                k,
                v,
                mask,
                heads,
                probs,
            } => {
                let (t, d) = (node.shape[0], node.shape[1]);
                let (dq, dk, dv) = ops::attention_backward(
                    g,
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    mask,
                    t,
                    d,
                    *heads,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Dropout(a, mask) => {
                let d = g.iter().zip(mask).map(|(x, m)| x * m).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
        }
    }
}

/// Result of a reverse sweep: per-node gradients plus per-parameter totals.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: BTreeMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient with respect to any recorded node that required it.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, idx: usize) -> Option<&[f64]> {
        self.params.get(&idx).map(Vec::as_slice)
    }

    pub fn param_by_name(&self, store: &ParameterStore, name: &str) -> Option<&[f64]> {
        store.index_of(name).and_then(|i| self.param(i))
    }

    /// Parameter gradients in store-index order.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.params.iter().map(|(&i, g)| (i, g.as_slice()))
    }

    /// Keeps only parameter gradients (drops per-node buffers).
    pub fn into_params(self) -> Self {
        Gradients {
            nodes: Vec::new(),
            params: self.params,
        }
    }

    /// Adds another set of parameter gradients into this one.
    pub fn merge(&mut self, other: &Gradients) {
        for (&idx, g) in &other.params {
            match self.params.get_mut(&idx) {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => {
                    self.params.insert(idx, g.clone());
                }
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        let mut s = 0.0;
        for g in self.params.values() {
            for v in g {
                s += v * v;
            }
        }
        s
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.params.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorValue;

    fn store_with(name: &str, shape: &[usize], data: Vec<f64>) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, TensorValue::new(shape.to_vec(), data).unwrap()).unwrap();
        s
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = ParameterStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(&[2], vec![0.0, 0.0]).unwrap();
        let y = g.softmax(x);
        assert_eq!(g.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_uniform_two_classes() {
        let s = ParameterStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!((g.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_of_constant_row_is_shift() {
        let mut s = ParameterStore::new();
        s.insert("g", TensorValue::filled(&[4], 1.0)).unwrap();
        s.insert("b", TensorValue::zeros(&[4])).unwrap();
        let mut g = Graph::new(&s);
        let x = g.constant(&[1, 4], vec![1.0; 4]).unwrap();
        let (ga, be) = (g.param("g").unwrap(), g.param("b").unwrap());
        let y = g.layer_norm(x, ga, be).unwrap();
        assert_eq!(g.value(y), &[0.0; 4]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let s = store_with("x", &[2], vec![1.0, 2.0]);
        let mut g = Graph::new(&s);
        let x = g.param("x").unwrap();
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.param_by_name(&s, "x").unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let s = store_with("x", &[1, 1], vec![0.0]);
        let mut g = Graph::new(&s);
        let x = g.param("x").unwrap();
        let zero = g.constant(&[1, 1], vec![0.0]).unwrap();
        let logits = g.concat_cols(&[x, zero]).unwrap();
        let l = g.cross_entropy(logits, &[0]).unwrap();
        let grads = g.backward(l).unwrap();
        assert!((grads.param_by_name(&s, "x").unwrap()[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let s = store_with("x", &[2], vec![1.0, 2.0]);
        let mut g = Graph::new(&s);
        let x = g.param("x").unwrap();
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn gradients_accumulate_in_store() {
        let mut s = store_with("x", &[2], vec![1.0, 2.0]);
        for expected in [[2.0, 4.0], [4.0, 8.0]] {
            let grads = {
                let mut g = Graph::new(&s);
                let x = g.param("x").unwrap();
                let sq = g.mul(x, x).unwrap();
                let l = g.sum(sq);
                g.backward(l).unwrap()
            };
            s.accumulate(&grads);
            assert_eq!(s.get("x").unwrap().grad().unwrap(), &expected);
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let s = ParameterStore::new();
        let mut g = Graph::new(&s);
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn inference_graph_records_no_gradients() {
        let s = store_with("x", &[2], vec![1.0, 2.0]);
        let mut g = Graph::inference(&s);
        let x = g.param("x").unwrap();
        let l = g.sum(x);
        assert!(!g.requires_grad(l));
    }

    #[test]
    fn fully_masked_attention_row_is_self_only() {
        let s = ParameterStore::new();
        let mut g = Graph::new(&s);
        let q = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = g.constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let mask = [true, false, false, true];
        let out = g.attention(q, q, v, &mask, 1).unwrap();
        assert_eq!(g.value(out), &[3.0, 4.0, 5.0, 6.0]);
    }
}
