use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// The operation kinds a tape can record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Constant,
    Matmul,
    Add,
    Sub,
    Mul,
    Scale,
    Concat,
    Tanh,
    Sigmoid,
    Relu,
    Softmax,
    LayerNorm,
    EmbeddingLookup,
    SelectRows,
    Narrow,
    Reshape,
    Permute,
    Dropout,
    Sum,
    Mean,
    Mse,
}

enum Op {
    Leaf,
    Constant,
    Matmul { batch: usize, m: usize, k: usize, n: usize },
    Add { rhs_len: usize },
    Sub { rhs_len: usize },
    Mul { rhs_len: usize },
    Scale(f64),
    Concat { outer: usize, chunks: Vec<usize> },
    Tanh,
    Sigmoid,
    Relu,
    Softmax { cols: usize },
    LayerNorm { cols: usize, inv_std: Vec<f64> },
    Gather { rows: Vec<usize>, row_len: usize },
    SelectRows { take_lhs: Vec<bool>, row_len: usize },
    Narrow { outer: usize, axis_len: usize, start: usize, len: usize, inner: usize },
    Reshape,
    Permute { source: Vec<usize> },
    Dropout { mask: Vec<f64> },
    Sum,
    Mean,
    Mse,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::Concat { .. } => OpKind::Concat,
            Op::Tanh => OpKind::Tanh,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Relu => OpKind::Relu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gather { .. } => OpKind::EmbeddingLookup,
            Op::SelectRows { .. } => OpKind::SelectRows,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Reshape => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::Mse => OpKind::Mse,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in execution order, so every node's inputs precede
/// it and the reverse pass is a plain reverse iteration.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `t`; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = Tensor::new(t.shape.clone(), t.data.clone()).expect("valid tensor");
        value.requires_grad = t.requires_grad;
        let requires_grad = t.requires_grad;
        self.push_unchecked(value, Op::Leaf, Vec::new(), requires_grad)
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        t.requires_grad = false;
        self.push_unchecked(t, Op::Constant, Vec::new(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.index].op.kind()
    }

    fn check(&self, op: &'static str, v: Var) -> Result<&Tensor> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::op(op, "variable belongs to another tape"));
        }
        Ok(&self.nodes[v.index].value)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, inputs: Vec<usize>, rg: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad: rg,
        });
        Var { tape: self.id, index }
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push_unchecked(
            value,
            op,
            inputs.iter().map(|v| v.index).collect(),
            rg,
        ))
    }

    /// `[m,k] x [k,n]`, or batched `[g,m,k] x [g,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.check("matmul", a)?.shape().to_vec();
        let sb = self.check("matmul", b)?.shape().to_vec();
        let (batch, m, k, n, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => (1, m, k, n, vec![m, n]),
            (&[g, m, k], &[g2, k2, n]) if k == k2 && g == g2 => (g, m, k, n, vec![g, m, n]),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let av = self.nodes[a.index].value.data();
        let bv = self.nodes[b.index].value.data();
        let mut out = vec![0.0; batch * m * n];
        for g in 0..batch {
            gemm(
                &av[g * m * k..(g + 1) * m * k],
                &bv[g * k * n..(g + 1) * k * n],
                &mut out[g * m * n..(g + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push("matmul", out_shape, out, Op::Matmul { batch, m, k, n }, &[a, b])
    }

    fn broadcast_operands(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let sa = self.check(op, a)?.shape();
        let sb = self.check(op, b)?.shape();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(self.nodes[b.index].value.len())
    }

    /// Elementwise `a + b`; `b` may omit leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let rhs_len = self.broadcast_operands("add", a, b)?;
        let av = &self.nodes[a.index].value;
        let bv = self.nodes[b.index].value.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % rhs_len])
            .collect();
        let shape = av.shape().to_vec();
        self.push("add", shape, data, Op::Add { rhs_len }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let rhs_len = self.broadcast_operands("sub", a, b)?;
        let av = &self.nodes[a.index].value;
        let bv = self.nodes[b.index].value.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x - bv[i % rhs_len])
            .collect();
        let shape = av.shape().to_vec();
        self.push("sub", shape, data, Op::Sub { rhs_len }, &[a, b])
    }

    /// Elementwise `a * b`; `b` may omit leading dimensions of `a`
    /// (a rank-0 `b` scales the whole tensor).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let rhs_len = self.broadcast_operands("mul", a, b)?;
        let av = &self.nodes[a.index].value;
        let bv = self.nodes[b.index].value.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[i % rhs_len])
            .collect();
        let shape = av.shape().to_vec();
        self.push("mul", shape, data, Op::Mul { rhs_len }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let av = self.check("scale", a)?;
        let data = av.data().iter().map(|x| x * factor).collect();
        let shape = av.shape().to_vec();
        self.push("scale", shape, data, Op::Scale(factor), &[a])
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.check("concat", *v)?.shape().to_vec(),
            None => return Err(Error::op("concat", "no inputs")),
        };
        if axis >= first.len() {
            return Err(Error::op(
                "concat",
                format!("axis {axis} out of range for shape {first:?}"),
            ));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        let mut chunks = Vec::with_capacity(inputs.len());
        for v in inputs {
            let s = self.check("concat", *v)?.shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
            chunks.push(s[axis] * inner);
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &c) in inputs.iter().zip(&chunks) {
                data.extend_from_slice(&self.nodes[v.index].value.data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push("concat", shape, data, Op::Concat { outer, chunks }, inputs)
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let av = self.check(name, a)?;
        let data = av.data().iter().map(|&x| f(x)).collect();
        let shape = av.shape().to_vec();
        self.push(name, shape, data, op, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid, sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu, |x| x.max(0.0))
    }

    fn last_axis(&self, op: &'static str, a: Var) -> Result<usize> {
        let s = self.check(op, a)?.shape();
        match s.last() {
            Some(&c) if c > 0 => Ok(c),
            _ => Err(Error::op(op, format!("empty last axis in shape {s:?}"))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let cols = self.last_axis("softmax", a)?;
        let av = &self.nodes[a.index].value;
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let shape = av.shape().to_vec();
        self.push("softmax", shape, data, Op::Softmax { cols }, &[a])
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let cols = self.last_axis("layer_norm", a)?;
        let av = &self.nodes[a.index].value;
        let mut data = av.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / cols);
        for row in data.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let shape = av.shape().to_vec();
        self.push("layer_norm", shape, data, Op::LayerNorm { cols, inv_std }, &[a])
    }

    /// Selects rows of `table` (`[V, ...]`) by id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather("embedding_lookup", table, ids)
    }

    /// Row gather along the leading axis; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.gather("gather_rows", a, rows)
    }

    fn gather(&mut self, name: &'static str, a: Var, rows: &[usize]) -> Result<Var> {
        let av = self.check(name, a)?;
        let Some(&n) = av.shape().first() else {
            return Err(Error::op(name, "cannot gather rows of a scalar"));
        };
        let row_len: usize = av.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            if r >= n {
                return Err(Error::op(name, format!("row {r} out of range for {n} rows")));
            }
            data.extend_from_slice(&av.data()[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = av.shape().to_vec();
        shape[0] = rows.len();
        self.push(
            name,
            shape,
            data,
            Op::Gather {
                rows: rows.to_vec(),
                row_len,
            },
            &[a],
        )
    }

    /// Row-wise choice: row `r` comes from `a` when `take_a[r]`, else from `b`.
    pub fn select_rows(&mut self, take_a: &[bool], a: Var, b: Var) -> Result<Var> {
        let sa = self.check("select_rows", a)?.shape().to_vec();
        let sb = self.check("select_rows", b)?.shape();
        if sa != sb || sa.first() != Some(&take_a.len()) {
            return Err(Error::shape("select_rows", &sa, sb));
        }
        let row_len: usize = sa[1..].iter().product();
        let ad = self.nodes[a.index].value.data();
        let bd = self.nodes[b.index].value.data();
        let mut data = Vec::with_capacity(ad.len());
        for (r, &t) in take_a.iter().enumerate() {
            let src = if t { ad } else { bd };
            data.extend_from_slice(&src[r * row_len..(r + 1) * row_len]);
        }
        self.push(
            "select_rows",
            sa,
            data,
            Op::SelectRows {
                take_lhs: take_a.to_vec(),
                row_len,
            },
            &[a, b],
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.check("narrow", a)?.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::op(
                "narrow",
                format!("range {start}..{} on axis {axis} of shape {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let axis_len = s[axis];
        let ad = self.nodes[a.index].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * axis_len * inner + start * inner;
            data.extend_from_slice(&ad[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let op = Op::Narrow {
            outer,
            axis_len,
            start,
            len,
            inner,
        };
        self.push("narrow", shape, data, op, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.check("reshape", a)?;
        if shape.iter().product::<usize>() != av.len() {
            return Err(Error::shape("reshape", av.shape(), shape));
        }
        let data = av.data().to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape, &[a])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.check("permute", a)?.shape().to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::op("permute", format!("invalid permutation {perm:?} for shape {s:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let mut in_strides = vec![1; s.len()];
        for i in (0..s.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * s[i + 1];
        }
        let n = s.iter().product::<usize>();
        let mut source = Vec::with_capacity(n);
        let mut idx = vec![0usize; s.len()];
        for _ in 0..n {
            source.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
            for ax in (0..idx.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let ad = self.nodes[a.index].value.data();
        let data = source.iter().map(|&i| ad[i]).collect();
        self.push("permute", out_shape, data, Op::Permute { source }, &[a])
    }

    /// Inverted dropout. In eval mode (or with `keep == 1`) returns `a` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, keep: f64, train: bool, rng: &mut R) -> Result<Var> {
        let av = self.check("dropout", a)?;
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::op("dropout", format!("keep probability {keep} outside (0, 1]")));
        }
        if !train || keep == 1.0 {
            return Ok(a);
        }
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..av.len())
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = av.shape().to_vec();
        self.push("dropout", shape, data, Op::Dropout { mask }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check("sum", a)?.data().iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.check("mean", a)?;
        if av.is_empty() {
            return Err(Error::op("mean", "mean of an empty tensor"));
        }
        let m = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push("mean", Vec::new(), vec![m], Op::Mean, &[a])
    }

    /// Mean squared difference of two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.check("mse", a)?;
        let bv = self.check("mse", b)?;
        if av.shape() != bv.shape() {
            return Err(Error::shape("mse", av.shape(), bv.shape()));
        }
        if av.is_empty() {
            return Err(Error::op("mse", "mse of empty tensors"));
        }
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / av.len() as f64;
        self.push("mse", Vec::new(), vec![s], Op::Mse, &[a, b])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::Autograd("loss is not recorded on this tape".into()));
        }
        let lv = &self.nodes[loss.index].value;
        if lv.len() != 1 {
            return Err(Error::Autograd(format!(
                "loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        let input = |k: usize| &self.nodes[node.inputs[k]];
        let wants = |k: usize| self.nodes[node.inputs[k]].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::Matmul { batch, m, k, n } => {
                let a = input(0).value.data();
                let b = input(1).value.data();
                if wants(0) {
                    let da = slot(grads, node.inputs[0], a.len());
                    for bi in 0..batch {
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &b[bi * k * n..(bi + 1) * k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if wants(1) {
                    let db = slot(grads, node.inputs[1], b.len());
                    for bi in 0..batch {
                        gemm_tn(
                            &a[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            &Op::Add { rhs_len } | &Op::Sub { rhs_len } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if wants(0) {
                    let da = slot(grads, node.inputs[0], g.len());
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if wants(1) {
                    let db = slot(grads, node.inputs[1], rhs_len);
                    for (i, x) in g.iter().enumerate() {
                        db[i % rhs_len] += sign * x;
                    }
                }
            }
            &Op::Mul { rhs_len } => {
                let a = input(0).value.data();
                let b = input(1).value.data();
                if wants(0) {
                    let da = slot(grads, node.inputs[0], a.len());
                    for (i, x) in g.iter().enumerate() {
                        da[i] += x * b[i % rhs_len];
                    }
                }
                if wants(1) {
                    let db = slot(grads, node.inputs[1], rhs_len);
                    for (i, x) in g.iter().enumerate() {
                        db[i % rhs_len] += x * a[i];
                    }
                }
            }
            &Op::Scale(f) => {
                let da = slot(grads, node.inputs[0], g.len());
                da.iter_mut().zip(g).for_each(|(d, x)| *d += f * x);
            }
            Op::Concat { outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (k, &c) in chunks.iter().enumerate() {
                    if wants(k) {
                        let d = slot(grads, node.inputs[k], outer * c);
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + c];
                            d[o * c..(o + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, x)| *d += x);
                        }
                    }
                    offset += c;
                }
            }
            Op::Tanh => {
                let da = slot(grads, node.inputs[0], g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }
            Op::Sigmoid => {
                let da = slot(grads, node.inputs[0], g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }
            Op::Relu => {
                let a = input(0).value.data();
                let da = slot(grads, node.inputs[0], g.len());
                for i in 0..g.len() {
                    if a[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            }
            &Op::Softmax { cols } => {
                let da = slot(grads, node.inputs[0], g.len());
                for r in 0..g.len() / cols {
                    let y = &out[r * cols..(r + 1) * cols];
                    let dy = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        da[r * cols + c] += y[c] * (dy[c] - dot);
                    }
                }
            }
            Op::LayerNorm { cols, inv_std } => {
                let cols = *cols;
                let da = slot(grads, node.inputs[0], g.len());
                for (r, &inv) in inv_std.iter().enumerate() {
                    let y = &out[r * cols..(r + 1) * cols];
                    let dy = &g[r * cols..(r + 1) * cols];
                    let mean_dy = dy.iter().sum::<f64>() / cols as f64;
                    let mean_dy_y = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        da[r * cols + c] += inv * (dy[c] - mean_dy - y[c] * mean_dy_y);
                    }
                }
            }
            Op::Gather { rows, row_len } => {
                let n = input(0).value.len();
                let da = slot(grads, node.inputs[0], n);
                for (k, &r) in rows.iter().enumerate() {
                    let src = &g[k * row_len..(k + 1) * row_len];
                    da[r * row_len..(r + 1) * row_len]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, x)| *d += x);
                }
            }
            Op::SelectRows { take_lhs, row_len } => {
                for (k, pick) in [true, false].into_iter().enumerate() {
                    if !wants(k) {
                        continue;
                    }
                    let d = slot(grads, node.inputs[k], g.len());
                    for (r, &t) in take_lhs.iter().enumerate() {
                        if t == pick {
                            let span = r * row_len..(r + 1) * row_len;
                            d[span.clone()]
                                .iter_mut()
                                .zip(&g[span])
                                .for_each(|(d, x)| *d += x);
                        }
                    }
                }
            }
            &Op::Narrow {
                outer,
                axis_len,
                start,
                len,
                inner,
            } => {
                let da = slot(grads, node.inputs[0], outer * axis_len * inner);
                for o in 0..outer {
                    let base = o * axis_len * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    da[base..base + len * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, x)| *d += x);
                }
            }
            Op::Reshape => {
                let da = slot(grads, node.inputs[0], g.len());
                da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            Op::Permute { source } => {
                let da = slot(grads, node.inputs[0], g.len());
                for (i, &s) in source.iter().enumerate() {
                    da[s] += g[i];
                }
            }
            Op::Dropout { mask } => {
                let da = slot(grads, node.inputs[0], g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * mask[i];
                }
            }
            Op::Sum => {
                let n = input(0).value.len();
                let da = slot(grads, node.inputs[0], n);
                da.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean => {
                let n = input(0).value.len();
                let da = slot(grads, node.inputs[0], n);
                let s = g[0] / n as f64;
                da.iter_mut().for_each(|d| *d += s);
            }
            Op::Mse => {
                let a = input(0).value.data();
                let b = input(1).value.data();
                let s = 2.0 * g[0] / a.len() as f64;
                if wants(0) {
                    let da = slot(grads, node.inputs[0], a.len());
                    for i in 0..a.len() {
                        da[i] += s * (a[i] - b[i]);
                    }
                }
                if wants(1) {
                    let db = slot(grads, node.inputs[1], a.len());
                    for i in 0..a.len() {
                        db[i] -= s * (a[i] - b[i]);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], index: usize, len: usize) -> &mut [f64] {
    grads[index].get_or_insert_with(|| vec![0.0; len])
}

/// Gradients of one backward pass, indexed by tape node.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `target.grad`. A leaf the loss does
    /// not depend on receives zeros.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        if v.tape != self.tape {
            return Err(Error::Autograd("variable from another tape".into()));
        }
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.len()]),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[m,n] += a * b` where element `(i, j)` of `a` sits at
/// `a[i * rs_a + j * cs_a]`, likewise for `b`; `out` is row-major.
#[allow(clippy::too_many_arguments)]
fn dgemm_acc(m: usize, k: usize, n: usize, a: &[f64], rs_a: usize, cs_a: usize, b: &[f64], rs_b: usize, cs_b: usize, out: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rs_a + (k - 1) * cs_a);
    debug_assert!(b.len() > (k - 1) * rs_b + (n - 1) * cs_b);
    debug_assert!(out.len() >= m * n);
    // SAFETY: the asserted bounds cover every element dgemm reads or writes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rs_a as isize,
            cs_a as isize,
            b.as_ptr(),
            rs_b as isize,
            cs_b as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// out[m,n] += a[m,k] * b[k,n]
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dgemm_acc(m, k, n, a, k, 1, b, n, 1, out);
}

// out[m,k] += g[m,n] * b[k,n]^T
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    dgemm_acc(m, n, k, g, n, 1, b, 1, n, out);
}

// out[k,n] += a[m,k]^T * g[m,n]
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dgemm_acc(k, m, n, a, 1, k, g, n, 1, out);
}
