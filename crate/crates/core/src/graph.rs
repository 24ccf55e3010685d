//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op evaluates eagerly when it is recorded, so node values are
//! available immediately through [`Graph::value`]. Nodes are appended in
//! evaluation order, which is also a topological order; [`Graph::backward`]
//! walks the node list once in reverse.
//!
//! Broadcasting is limited to [`Graph::add_bias`], which adds a vector over
//! the last axis. Every other binary op requires identical shapes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::ctc;
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Normalize(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Conv1d { x: Var, w: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Select { x: Var, idx: Vec<usize> },
    Gather { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Ctc { logp: Var, occupancy: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Normalize(_) => "normalize",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPool { .. } => "max_pool_time",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Select { .. } => "select",
            Op::Gather { .. } => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::Ctc { .. } => "ctc_loss",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Conv1d { x, w } => vec![*x, *w],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::Scale(x, _)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Normalize(x)
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::MaxPool { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Select { x, .. }
            | Op::Reshape(x) => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::Ctc { logp, .. } => vec![*logp],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of evaluated nodes plus, after [`Graph::backward`], their gradients.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded at or after `mark`. Handles to those nodes
    /// become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.grads.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, dims: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Tensor::from_parts(dims, data), op, requires_grad)
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            op,
            node: self.nodes.len(),
            detail,
        }
    }

    fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.dims(v) {
            [r, c] => Ok((r, c)),
            ref d => Err(self.shape_err(
                op,
                format!("node {} must be a matrix, has dims {d:?}", v.0),
            )),
        }
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err(
                op,
                format!(
                    "node {} has dims {:?} but node {} has dims {:?}",
                    a.0,
                    self.dims(a),
                    b.0,
                    self.dims(b)
                ),
            ));
        }
        Ok(())
    }

    // ---- ops -------------------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(self.shape_err(
                "matmul",
                format!("inner dims differ: node {} is [{m}, {k}], node {} is [{k2}, {n}]", a.0, b.0),
            ));
        }
        let out = matmul_kernel(self.data(a), self.data(b), m, k, n);
        Ok(self.record(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let dims = self.dims(a).to_vec();
        Ok(self.record(dims, out, Op::Add(a, b)))
    }

    /// Adds `bias` (any shape with `last_dim` elements) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.nodes[x.0].value.last_dim();
        if self.nodes[bias.0].value.numel() != c {
            return Err(self.shape_err(
                "add_bias",
                format!(
                    "bias node {} has {} elements, node {} has last axis {c}",
                    bias.0,
                    self.nodes[bias.0].value.numel(),
                    x.0
                ),
            ));
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % c])
            .collect();
        let dims = self.dims(x).to_vec();
        Ok(self.record(dims, out, Op::AddBias(x, bias)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let dims = self.dims(a).to_vec();
        Ok(self.record(dims, out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let dims = self.dims(x).to_vec();
        self.record(dims, out, Op::Scale(x, factor))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, math::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, math::sigmoid, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, math::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, math::exp, Op::Exp(x))
    }

    fn unary(&mut self, x: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let dims = self.dims(x).to_vec();
        self.record(dims, out, op)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let c = t.last_dim();
        let mut out = vec![0.0; t.numel()];
        for (src, dst) in t.data().chunks(c).zip(out.chunks_mut(c)) {
            math::softmax_into(src, dst);
        }
        let dims = t.dims().to_vec();
        self.record(dims, out, Op::Softmax(x))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let c = t.last_dim();
        let mut out = vec![0.0; t.numel()];
        for (src, dst) in t.data().chunks(c).zip(out.chunks_mut(c)) {
            math::log_softmax_into(src, dst);
        }
        let dims = t.dims().to_vec();
        self.record(dims, out, Op::LogSoftmax(x))
    }

    /// Divides each row (last axis) by its sum. Inputs must be positive.
    pub fn normalize(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let c = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let dims = t.dims().to_vec();
        self.record(dims, out, Op::Normalize(x))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(self.shape_err("concat_cols", "no inputs".into()));
        }
        let mut widths = Vec::with_capacity(xs.len());
        let (rows, _) = self.matrix_dims("concat_cols", xs[0])?;
        for &x in xs {
            let (r, c) = self.matrix_dims("concat_cols", x)?;
            if r != rows {
                return Err(self.shape_err(
                    "concat_cols",
                    format!("node {} has {r} rows, expected {rows}", x.0),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(x)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.record(vec![rows, total], out, Op::ConcatCols(xs.to_vec())))
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(self.shape_err("concat_rows", "no inputs".into()));
        }
        let (_, cols) = self.matrix_dims("concat_rows", xs[0])?;
        let mut rows = 0;
        for &x in xs {
            let (r, c) = self.matrix_dims("concat_rows", x)?;
            if c != cols {
                return Err(self.shape_err(
                    "concat_rows",
                    format!("node {} has {c} columns, expected {cols}", x.0),
                ));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &x in xs {
            out.extend_from_slice(self.data(x));
        }
        Ok(self.record(vec![rows, cols], out, Op::ConcatRows(xs.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("slice_cols", x)?;
        if len == 0 || start + len > cols {
            return Err(self.shape_err(
                "slice_cols",
                format!("columns {start}..{} out of range for node {} with {cols}", start + len, x.0),
            ));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        Ok(self.record(vec![rows, len], out, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("slice_rows", x)?;
        if len == 0 || start + len > rows {
            return Err(self.shape_err(
                "slice_rows",
                format!("rows {start}..{} out of range for node {} with {rows}", start + len, x.0),
            ));
        }
        let out = self.data(x)[start * cols..(start + len) * cols].to_vec();
        Ok(self.record(vec![len, cols], out, Op::SliceRows { x, start }))
    }

    /// 1-d convolution over time with zero "same" padding.
    ///
    /// `x` is `[T, C_in]`, `w` is `[K, C_in, C_out]` with odd `K`; the result
    /// is `[T, C_out]` with `out[t][o] = sum_k sum_c x[t + k - K/2][c] * w[k][c][o]`.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t_len, c_in) = self.matrix_dims("conv1d", x)?;
        let (k, wc, c_out) = match *self.dims(w) {
            [k, c, o] => (k, c, o),
            ref d => {
                return Err(self.shape_err(
                    "conv1d",
                    format!("kernel node {} must be [K, C_in, C_out], has {d:?}", w.0),
                ))
            }
        };
        if wc != c_in || k % 2 == 0 {
            return Err(self.shape_err(
                "conv1d",
                format!(
                    "kernel node {} is [{k}, {wc}, {c_out}] but input node {} has {c_in} channels (kernel width must be odd)",
                    w.0, x.0
                ),
            ));
        }
        let xs = self.data(x);
        let ws = self.data(w);
        let pad = k / 2;
        let mut out = vec![0.0; t_len * c_out];
        for t in 0..t_len {
            let orow = &mut out[t * c_out..(t + 1) * c_out];
            for kk in 0..k {
                let src = t + kk;
                if src < pad || src - pad >= t_len {
                    continue;
                }
                let xrow = &xs[(src - pad) * c_in..(src - pad + 1) * c_in];
                for (c, &xv) in xrow.iter().enumerate() {
                    let wrow = &ws[(kk * c_in + c) * c_out..(kk * c_in + c + 1) * c_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        Ok(self.record(vec![t_len, c_out], out, Op::Conv1d { x, w }))
    }

    /// Max-pool by 2 along the row (time) axis; an odd trailing row forms its
    /// own window, so `T` rows become `ceil(T / 2)`.
    pub fn max_pool_time(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("max_pool_time", x)?;
        let out_rows = rows.div_ceil(2);
        let src = self.data(x);
        let mut out = Vec::with_capacity(out_rows * cols);
        let mut argmax = Vec::with_capacity(out_rows * cols);
        for r in 0..out_rows {
            for c in 0..cols {
                let a = 2 * r * cols + c;
                let mut best = a;
                if 2 * r + 1 < rows && src[a + cols] > src[a] {
                    best = a + cols;
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        Ok(self.record(vec![out_rows, cols], out, Op::MaxPool { x, argmax }))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.record(vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.record(vec![1], vec![s], Op::Mean(x))
    }

    /// Picks elements by flat index into a `[n]` tensor.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.nodes[x.0].value.numel();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(self.shape_err(
                "select",
                format!("indices {idx:?} invalid for node {} with {n} elements", x.0),
            ));
        }
        let src = self.data(x);
        let out = idx.iter().map(|&i| src[i]).collect();
        Ok(self.record(vec![idx.len()], out, Op::Select { x, idx: idx.to_vec() }))
    }

    /// Rows of `table` (`[V, E]`) in the order of `ids`, giving `[ids.len(), E]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, e) = self.matrix_dims("gather_rows", table)?;
        if ids.is_empty() || ids.iter().any(|&i| i >= v) {
            return Err(self.shape_err(
                "gather_rows",
                format!("ids {ids:?} invalid for table node {} with {v} rows", table.0),
            ));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&src[i * e..(i + 1) * e]);
        }
        Ok(self.record(vec![ids.len(), e], out, Op::Gather { table, ids: ids.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let n: usize = dims.iter().product();
        if n != self.nodes[x.0].value.numel() || dims.contains(&0) {
            return Err(self.shape_err(
                "reshape",
                format!("cannot view node {} with dims {:?} as {dims:?}", x.0, self.dims(x)),
            ));
        }
        let out = self.data(x).to_vec();
        Ok(self.record(dims.to_vec(), out, Op::Reshape(x)))
    }

    /// CTC negative log-likelihood of `labels` given per-frame log-probabilities
    /// `logp` (`[T, V]`). Yields `+inf` (with zero gradient) when no alignment
    /// exists.
    pub fn ctc_loss(&mut self, logp: Var, labels: &[u32], blank: u32) -> Result<Var> {
        let (t_len, v) = self.matrix_dims("ctc_loss", logp)?;
        if blank as usize >= v || labels.iter().any(|&l| l == blank || l as usize >= v) {
            return Err(self.shape_err(
                "ctc_loss",
                format!("labels {labels:?} invalid for {v} units with blank {blank}"),
            ));
        }
        let (loss, occupancy) =
            match ctc::forward_backward(self.data(logp), t_len, v, labels, blank) {
                Some(fb) => (fb.loss, fb.occupancy),
                None => (f64::INFINITY, Vec::new()),
            };
        Ok(self.record(vec![1], vec![loss], Op::Ctc { logp, occupancy }))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates `d(root)/d(node)` for every node that requires grad.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let numel = self.nodes[root.0].value.numel();
        if numel != 1 {
            return Err(Error::NonScalarRoot { numel });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` root with respect to `v`, if `v`
    /// received any.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.nodes[v.0].value.dims().to_vec(), g.clone()))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.dims()[0], nodes[a.0].value.dims()[1]);
                let n = nodes[b.0].value.dims()[1];
                let ad = nodes[a.0].value.data();
                let bd = nodes[b.0].value.data();
                acc(*a, &mut |da| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[r * k + p] += dot(grow, brow);
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    let c = d.len();
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let ad = nodes[a.0].value.data();
                let bd = nodes[b.0].value.data();
                acc(*a, &mut |d| {
                    for ((d, gv), bv) in d.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, gv), av) in d.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |d| {
                for (d, gv) in d.iter_mut().zip(g) {
                    *d += gv * f;
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |d| {
                for ((d, gv), yv) in d.iter_mut().zip(g).zip(y) {
                    *d += gv * (1.0 - yv * yv);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for ((d, gv), yv) in d.iter_mut().zip(g).zip(y) {
                    *d += gv * yv * (1.0 - yv);
                }
            }),
            Op::Softmax(x) => {
                let c = node.value.last_dim();
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s = dot(grow, yrow);
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = node.value.last_dim();
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s: f64 = grow.iter().sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gv - math::exp(*yv) * s;
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xd = nodes[x.0].value.data();
                acc(*x, &mut |d| {
                    for ((d, gv), xv) in d.iter_mut().zip(g).zip(xd) {
                        *d += gv / xv;
                    }
                });
            }
            Op::Exp(x) => acc(*x, &mut |d| {
                for ((d, gv), yv) in d.iter_mut().zip(g).zip(y) {
                    *d += gv * yv;
                }
            }),
            Op::Normalize(x) => {
                let c = node.value.last_dim();
                let xd = nodes[x.0].value.data();
                acc(*x, &mut |d| {
                    for (((drow, grow), yrow), xrow) in d
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(y.chunks(c))
                        .zip(xd.chunks(c))
                    {
                        let total: f64 = xrow.iter().sum();
                        let s = dot(grow, yrow);
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += (gv - s) / total;
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let rows = node.value.dims()[0];
                let total = node.value.dims()[1];
                let mut offset = 0;
                for &x in xs {
                    let w = nodes[x.0].value.dims()[1];
                    acc(x, &mut |d| {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = nodes[x.0].value.numel();
                    acc(x, &mut |d| add_into(d, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = nodes[x.0].value.dims()[1];
                let len = node.value.dims()[1];
                acc(*x, &mut |d| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        add_into(&mut d[r * cols + start..r * cols + start + len], grow);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let cols = node.value.dims()[1];
                acc(*x, &mut |d| add_into(&mut d[start * cols..start * cols + g.len()], g));
            }
            Op::Conv1d { x, w } => {
                let (t_len, c_in) = (nodes[x.0].value.dims()[0], nodes[x.0].value.dims()[1]);
                let (k, c_out) = (nodes[w.0].value.dims()[0], nodes[w.0].value.dims()[2]);
                let pad = k / 2;
                let xd = nodes[x.0].value.data();
                let wd = nodes[w.0].value.data();
                acc(*x, &mut |dx| {
                    for t in 0..t_len {
                        let grow = &g[t * c_out..(t + 1) * c_out];
                        for kk in 0..k {
                            let src = t + kk;
                            if src < pad || src - pad >= t_len {
                                continue;
                            }
                            let s = src - pad;
                            for c in 0..c_in {
                                let wrow = &wd[(kk * c_in + c) * c_out..(kk * c_in + c + 1) * c_out];
                                dx[s * c_in + c] += dot(grow, wrow);
                            }
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for t in 0..t_len {
                        let grow = &g[t * c_out..(t + 1) * c_out];
                        for kk in 0..k {
                            let src = t + kk;
                            if src < pad || src - pad >= t_len {
                                continue;
                            }
                            let s = src - pad;
                            for c in 0..c_in {
                                let xv = xd[s * c_in + c];
                                let drow = &mut dw[(kk * c_in + c) * c_out..(kk * c_in + c + 1) * c_out];
                                for (d, gv) in drow.iter_mut().zip(grow) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => acc(*x, &mut |d| {
                for (&src, gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
            }),
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => acc(*x, &mut |d| {
                let n = d.len() as f64;
                d.iter_mut().for_each(|v| *v += g[0] / n)
            }),
            Op::Select { x, idx } => acc(*x, &mut |d| {
                for (&i, gv) in idx.iter().zip(g) {
                    d[i] += gv;
                }
            }),
            Op::Gather { table, ids } => {
                let e = nodes[table.0].value.dims()[1];
                acc(*table, &mut |d| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut d[i * e..(i + 1) * e], &g[r * e..(r + 1) * e]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Ctc { logp, occupancy } => {
                if occupancy.is_empty() {
                    return;
                }
                acc(*logp, &mut |d| {
                    for (d, o) in d.iter_mut().zip(occupancy) {
                        *d -= g[0] * o;
                    }
                });
            }
        }
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for r in 0..m {
        let crow = &mut c[r * n..(r + 1) * n];
        for p in 0..k {
            let av = a[r * k + p];
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).dims(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_of_equal_values_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x);
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[4], &[0.3, -1.2, 2.0, 0.7]));
        let s = g.softmax(x);
        let r = g.sum(s);
        g.backward(r).unwrap();
        for &d in g.grad(x).unwrap().data() {
            assert!(d.abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_names_the_nodes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, node, detail }) => {
                assert_eq!(op, "matmul");
                assert_eq!(node, 2);
                assert!(detail.contains("node 0") && detail.contains("node 1"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        let y = g.tanh(x);
        assert_eq!(g.backward(y), Err(Error::NonScalarRoot { numel: 2 }));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + 3x at x = 2  ->  dy/dx = 2x + 3 = 7
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let sq = g.mul(x, x).unwrap();
        let tx = g.scale(x, 3.0);
        let y = g.add(sq, tx).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 7.0);
    }

    #[test]
    fn max_pool_uses_ceiling() {
        let mut g = Graph::new();
        let x = g.constant(t(&[5, 1], &[1.0, 3.0, 2.0, 0.0, 9.0]));
        let y = g.max_pool_time(x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 2.0, 9.0]);
    }

    #[test]
    fn conv1d_same_padding_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]));
        // kernel [0, 1, 0] copies; [1, 0, 0] shifts the previous frame in
        let w = g.constant(t(&[3, 1, 2], &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]));
        let y = g.conv1d(x, w).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 2.0, 1.0, 3.0, 2.0, 4.0, 3.0]);
    }

    #[test]
    fn truncate_discards_later_nodes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1.0));
        let mark = g.len();
        g.exp(x);
        g.truncate(mark);
        assert_eq!(g.len(), 1);
    }
}
