use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use super::kernels::{self, NormStats};
use super::{matmul_dims, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x` has `k·rows(y)` rows; `y` is added to every block of rows.
    AddTiled(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: NormStats,
    },
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        q_offsets: Arc<[usize]>,
        kv_offsets: Arc<[usize]>,
        heads: usize,
        /// Per batch element, `[head][tq][tk]`.
        probs: Vec<Vec<f64>>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddTiled(..) => "add_tiled",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(..) => "gelu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass. Owned exclusively by that pass.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    check_finite: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardStats {
    /// Operation nodes whose backward rule ran.
    pub replayed: usize,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
    pub stats: BackwardStats,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter leaf that received one, in registration order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.grads[v.0].as_ref())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    /// A fresh tape with the non-finite guard enabled.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            check_finite: true,
        }
    }

    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded operations (nodes that are not leaves or parameters).
    pub fn op_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf | Op::Param))
            .count()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input that is not backed by a parameter store.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter; repeated loads return the same leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param,
            requires_grad: p.requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|v| v * s).collect())?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Adds `y` to each consecutive block of `rows(y)` rows of `x`. With a
    /// one-row `y` this is a bias add.
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        if tx.cols() != ty.cols() || tx.rows() % ty.rows() != 0 {
            return Err(dim_err("add_tiled", tx, ty));
        }
        let yd = ty.data();
        let mut data = tx.data().to_vec();
        for block in data.chunks_mut(yd.len()) {
            for (a, b) in block.iter_mut().zip(yd) {
                *a += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, y]);
        self.push(t, Op::AddTiled(x, y), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = matmul_dims(ta, tb)?;
        let t = Tensor::new([m, n], kernels::matmul(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ` without materializing the transpose. This is the linear-layer
    /// product with weights stored `[out × in]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.cols() {
            return Err(dim_err("matmul_bt", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let t = Tensor::new([m, n], kernels::matmul_bt(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::MatMulBt(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), kernels::softmax_rows(ta.data(), ta.cols()))?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layernorm eps must be positive"));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d {
            return Err(dim_err("layernorm", tx, tg));
        }
        let (out, stats) = kernels::layernorm(tx.data(), tg.data(), tb.data(), eps);
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(t, Op::LayerNorm { x, gain, bias, stats }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&v| kernels::gelu(v)).collect())?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.data().iter().sum::<f64>() / ta.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if start >= end || end > tx.rows() {
            return Err(Error::contract(format!(
                "row slice {start}..{end} out of range for {:?}",
                tx.shape()
            )));
        }
        let c = tx.cols();
        let t = Tensor::new([end - start, c], tx.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(&[x]);
        self.push(t, Op::SliceRows { x, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            if tp.cols() != c {
                return Err(dim_err("concat_rows", self.value(*first), tp));
            }
            data.extend_from_slice(tp.data());
        }
        let rows = data.len() / c;
        let t = Tensor::new([rows, c], data)?;
        let rg = self.rg(parts);
        self.push(t, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Selects the given rows (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::contract(format!("gather index {i} out of range {r}")));
            }
            data.extend_from_slice(tx.row(i));
        }
        let t = Tensor::new([index.len(), c], data)?;
        let rg = self.rg(&[x]);
        self.push(
            t,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        )
    }

    /// Unmasked multi-head scaled dot-product attention over ragged blocks.
    ///
    /// Query rows `q_offsets[e]..q_offsets[e+1]` attend only to key/value rows
    /// `kv_offsets[e]..kv_offsets[e+1]`. `q`, `k`, `v` are already projected.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_offsets: Arc<[usize]>,
        kv_offsets: Arc<[usize]>,
        heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() {
            return Err(dim_err("attention", tq, tk));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!("{d} columns do not split into {heads} heads")));
        }
        check_offsets(&q_offsets, tq.rows())?;
        check_offsets(&kv_offsets, tk.rows())?;
        if q_offsets.len() != kv_offsets.len() {
            return Err(Error::contract(format!(
                "batch count mismatch: {} query vs {} key/value elements",
                q_offsets.len() - 1,
                kv_offsets.len() - 1
            )));
        }
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let b = q_offsets.len() - 1;
        let work: usize = (0..b)
            .map(|e| (q_offsets[e + 1] - q_offsets[e]) * (kv_offsets[e + 1] - kv_offsets[e]))
            .sum::<usize>()
            * d;
        let block = |e: usize| {
            let (q0, q1) = (q_offsets[e], q_offsets[e + 1]);
            let (k0, k1) = (kv_offsets[e], kv_offsets[e + 1]);
            kernels::attention_block(
                &qd[q0 * d..q1 * d],
                &kd[k0 * d..k1 * d],
                &vd[k0 * d..k1 * d],
                q1 - q0,
                k1 - k0,
                d,
                heads,
            )
        };
        let blocks: Vec<(Vec<f64>, Vec<f64>)> = if b > 1 && work >= (1 << 14) {
            (0..b).into_par_iter().map(block).collect()
        } else {
            (0..b).map(block).collect()
        };
        let mut out = Vec::with_capacity(tq.len());
        let mut probs = Vec::with_capacity(b);
        for (o, p) in blocks {
            out.extend_from_slice(&o);
            probs.push(p);
        }
        let t = Tensor::new([tq.rows(), d], out)?;
        let rg = self.rg(&[q, k, v]);
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                q_offsets,
                kv_offsets,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Attention weights saved by an [`Graph::attention`] node, per batch
    /// element laid out `[head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean cross-entropy of `logits[B×C]` against integer labels, using log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (b, c) = (tl.rows(), tl.cols());
        if labels.len() != b {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
        }
        let mut loss = 0.0;
        for (row, &y) in tl.data().chunks(c).zip(labels) {
            loss += kernels::log_sum_exp(row) - row[y];
        }
        loss /= b as f64;
        let probs = kernels::softmax_rows(tl.data(), c);
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Each recorded operation's backward rule runs at most once, in reverse
    /// recording order. Forward values are never modified.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut stats = BackwardStats::default();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !matches!(node.op, Op::Leaf | Op::Param) {
                stats.replayed += 1;
            }
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads: Vec<Option<Tensor>> = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("gradient shape"))
            })
            .collect();
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort();
        Ok(Gradients {
            grads,
            params,
            stats,
        })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.iter_mut().zip(&d).for_each(|(x, y)| *x += y),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
            Op::AddTiled(x, y) => {
                acc(*x, g.to_vec());
                if needs(*y) {
                    let n = val(*y).len();
                    let mut dy = vec![0.0; n];
                    for block in g.chunks(n) {
                        dy.iter_mut().zip(block).for_each(|(a, b)| *a += b);
                    }
                    acc(*y, dy);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if needs(*a) {
                    // g·bᵀ
                    acc(*a, kernels::matmul_bt(g, tb.data(), m, n, k));
                }
                if needs(*b) {
                    // aᵀ·g
                    let at = kernels::transpose(ta.data(), m, k);
                    acc(*b, kernels::matmul(&at, g, k, m, n));
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if needs(*a) {
                    // g·b
                    acc(*a, kernels::matmul(g, tb.data(), m, n, k));
                }
                if needs(*b) {
                    // gᵀ·a
                    let gt = kernels::transpose(g, m, n);
                    acc(*b, kernels::matmul(&gt, ta.data(), n, m, k));
                }
            }
            Op::Transpose(a) => {
                let ta = &self.nodes[a.0].value;
                acc(*a, kernels::transpose(g, ta.cols(), ta.rows()));
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Softmax(a) => {
                acc(*a, kernels::softmax_rows_backward(node.value.data(), g, node.value.cols()));
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let (dx, dg, db) = kernels::layernorm_backward(val(*x), val(*gain), stats, g);
                acc(*x, dx);
                acc(*gain, dg);
                acc(*bias, db);
            }
            Op::Gelu(a) => {
                acc(*a, g.iter().zip(val(*a)).map(|(gg, &x)| gg * kernels::gelu_grad(x)).collect());
            }
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::SliceRows { x, start } => {
                let tx = &self.nodes[x.0].value;
                let c = tx.cols();
                let mut dx = vec![0.0; tx.len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::GatherRows { x, index } => {
                let tx = &self.nodes[x.0].value;
                let c = tx.cols();
                let mut dx = vec![0.0; tx.len()];
                for (r, &i) in index.iter().enumerate() {
                    dx[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[r * c..(r + 1) * c])
                        .for_each(|(a, b)| *a += b);
                }
                acc(*x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                q_offsets,
                kv_offsets,
                heads,
                probs,
            } => {
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let d = node.value.cols();
                let b = q_offsets.len() - 1;
                let block = |e: usize| {
                    let (q0, q1) = (q_offsets[e], q_offsets[e + 1]);
                    let (k0, k1) = (kv_offsets[e], kv_offsets[e + 1]);
                    kernels::attention_block_backward(
                        &qd[q0 * d..q1 * d],
                        &kd[k0 * d..k1 * d],
                        &vd[k0 * d..k1 * d],
                        &probs[e],
                        &g[q0 * d..q1 * d],
                        q1 - q0,
                        k1 - k0,
                        d,
                        *heads,
                    )
                };
                let parts: Vec<_> = if b > 1 && g.len() * d >= (1 << 14) {
                    (0..b).into_par_iter().map(block).collect()
                } else {
                    (0..b).map(block).collect()
                };
                let mut dq = Vec::with_capacity(qd.len());
                let mut dk = Vec::with_capacity(kd.len());
                let mut dv = Vec::with_capacity(vd.len());
                for (a, bb, c) in parts {
                    dq.extend_from_slice(&a);
                    dk.extend_from_slice(&bb);
                    dv.extend_from_slice(&c);
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.nodes[logits.0].value.cols();
                let scale = g[0] / labels.len() as f64;
                let mut d = probs.clone();
                for (row, &y) in d.chunks_mut(c).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, d);
            }
        }
    }
}

fn check_offsets(offsets: &[usize], rows: usize) -> Result<()> {
    if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != rows {
        return Err(Error::contract(format!(
            "offsets {offsets:?} do not cover {rows} rows"
        )));
    }
    if offsets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("ragged offsets must be strictly increasing"));
    }
    Ok(())
}
