//! Dynamic tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and enough saved state
//! to run its backward rule. Nodes only ever reference earlier nodes, so the
//! tape is already in topological order and `backward` is a single reverse
//! sweep. A graph supports exactly one `backward`; build a fresh graph for
//! the next forward pass.

use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Select(Var, usize),
    Row(Var, usize),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Gather(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

const GELU_C: f64 = 0.044_715;
// sqrt(2/pi)
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose_vec(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("tensor has rank >= 1")
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.node(v).shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    /// Records a leaf. Gradients flow into it when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Records a leaf that always receives a gradient.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records a constant leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.node(a).value, &self.node(b).value, &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let out = transpose_vec(&self.node(a).value, r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.node(a).shape.clone(), out, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2("add_row", x)?;
        if self.node(bias).value.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.node(x).shape.clone(),
                rhs: self.node(bias).shape.clone(),
            });
        }
        let b = &self.node(bias).value;
        let out = self
            .node(x)
            .value
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(self.node(x).shape.clone(), out, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.node(a).shape.clone(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.node(a).value.iter().map(|x| x * factor).collect();
        let rg = self.rg(&[a]);
        self.push(self.node(a).shape.clone(), out, Op::Scale(a, factor), rg)
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.node(a).value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_const",
                lhs: self.node(a).shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let out = self.node(a).value.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.node(a).shape.clone(), out, Op::MulConst(a, mask), rg))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let node = self.node(x);
        if node.value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("softmax"));
        }
        let n = last_dim(&node.shape);
        let mut out = node.value.clone();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = node.shape.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis followed by `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = last_dim(&self.node(x).shape);
        for p in [gamma, beta] {
            if self.node(p).value.len() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.node(x).shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
        }
        let xs = &self.node(x).value;
        let g = &self.node(gamma).value;
        let b = &self.node(beta).value;
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.node(x).shape.clone();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
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

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.node(x).value.iter().map(|&v| gelu_scalar(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.node(x).shape.clone(), out, Op::Gelu(x), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2("cross_entropy", logits)?;
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![b, c],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange { label, classes: c });
        }
        let xs = &self.node(logits).value;
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &xs[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[label];
            for j in 0..c {
                probs[i * c + j] = (row[j] - max).exp() / sum;
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![total / b as f64],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.node(x).value.iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Picks one element (flat index) as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.node(x).value.len();
        if index >= n {
            return Err(TensorError::IndexOutOfRange {
                op: "select",
                index,
                size: n,
            });
        }
        let v = self.node(x).value[index];
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1], vec![v], Op::Select(x, index), rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                size: c,
            });
        }
        let xs = &self.node(x).value;
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&xs[row * c + start..row * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let (r, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2("concat_cols", p)?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.node(first).shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.node(p).value[row * w..(row + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_rows"))?;
        let (_, c) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims2("concat_rows", p)?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.node(first).shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
            rows += pr;
            out.extend_from_slice(&self.node(p).value);
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row `i` of a matrix, as a `1×n` matrix.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (r, c) = self.dims2("row", x)?;
        if i >= r {
            return Err(TensorError::IndexOutOfRange {
                op: "row",
                index: i,
                size: r,
            });
        }
        let out = self.node(x).value[i * c..(i + 1) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1, c], out, Op::Row(x, i), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.node(x).value.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.node(x).shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.node(x).value.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// `out[i] = x[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.node(x).value.len();
        if shape.iter().product::<usize>() != indices.len() {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                lhs: vec![indices.len()],
                rhs: shape.to_vec(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather",
                index: bad,
                size: n,
            });
        }
        let xs = &self.node(x).value;
        let out = indices.iter().map(|&i| xs[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Gather(x, indices), rg))
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    /// Reverse sweep from a scalar `loss`. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.node(loss).value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.node(loss).shape.clone()));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_node(i, &op, &gout);
            self.nodes[i].op = op;
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, op: &Op, gout: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    // dA = dC · Bᵀ
                    let bt = transpose_vec(&self.nodes[b.0].value, k, n);
                    self.acc(*a, |g| matmul_into(gout, &bt, g, m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · dC
                    let at = transpose_vec(&self.nodes[a.0].value, m, k);
                    self.acc(*b, |g| matmul_into(&at, gout, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let t = transpose_vec(gout, r, c);
                self.acc(*a, |g| add_assign(g, &t));
            }
            Op::Add(a, b) => {
                self.acc(*a, |g| add_assign(g, gout));
                self.acc(*b, |g| add_assign(g, gout));
            }
            Op::AddRow(x, bias) => {
                self.acc(*x, |g| add_assign(g, gout));
                let n = self.nodes[i].shape[1];
                self.acc(*bias, |g| {
                    for row in gout.chunks(n) {
                        add_assign(g, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.clone();
                let av = self.nodes[a.0].value.clone();
                self.acc(*a, |g| {
                    for ((g, d), y) in g.iter_mut().zip(gout).zip(&bv) {
                        *g += d * y;
                    }
                });
                self.acc(*b, |g| {
                    for ((g, d), x) in g.iter_mut().zip(gout).zip(&av) {
                        *g += d * x;
                    }
                });
            }
            Op::Scale(a, f) => {
                self.acc(*a, |g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += d * f));
            }
            Op::MulConst(a, mask) => {
                self.acc(*a, |g| {
                    for ((g, d), m) in g.iter_mut().zip(gout).zip(mask) {
                        *g += d * m;
                    }
                });
            }
            Op::Softmax(x) => {
                let n = last_dim(&self.nodes[i].shape);
                let y = self.nodes[i].value.clone();
                self.acc(*x, |g| {
                    for ((gr, dr), yr) in g.chunks_mut(n).zip(gout.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(d, y)| d * y).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = last_dim(&self.nodes[i].shape);
                let gv = self.nodes[gamma.0].value.clone();
                self.acc(*x, |g| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let dy = &gout[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let dxhat: Vec<f64> = dy.iter().zip(&gv).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            g[r * d + j] += is / d as f64 * (d as f64 * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                });
                self.acc(*gamma, |g| {
                    for (dy, xh) in gout.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            g[j] += dy[j] * xh[j];
                        }
                    }
                });
                self.acc(*beta, |g| {
                    for dy in gout.chunks(d) {
                        add_assign(g, dy);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.clone();
                self.acc(*x, |g| {
                    for ((g, d), v) in g.iter_mut().zip(gout).zip(&xv) {
                        *g += d * gelu_grad_scalar(*v);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = gout[0] / b as f64;
                self.acc(*logits, |g| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            g[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.acc(*x, |g| g.iter_mut().for_each(|g| *g += gout[0]));
            }
            Op::Select(x, index) => {
                self.acc(*x, |g| g[*index] += gout[0]);
            }
            Op::SliceCols { x, start } => {
                let c = self.nodes[x.0].shape[1];
                let w = self.nodes[i].shape[1];
                self.acc(*x, |g| {
                    for (row, dr) in gout.chunks(w).enumerate() {
                        add_assign(&mut g[row * c + start..row * c + start + w], dr);
                    }
                });
            }
            Op::Row(x, r) => {
                let c = self.nodes[x.0].shape[1];
                self.acc(*x, |g| add_assign(&mut g[r * c..(r + 1) * c], gout));
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].shape[1];
                    self.acc(*p, |g| {
                        for (row, gr) in g.chunks_mut(w).enumerate() {
                            add_assign(gr, &gout[row * total + offset..row * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    self.acc(*p, |g| add_assign(g, &gout[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Reshape(x) => {
                self.acc(*x, |g| add_assign(g, gout));
            }
            Op::Gather(x, indices) => {
                self.acc(*x, |g| {
                    for (&src, d) in indices.iter().zip(gout) {
                        g[src] += d;
                    }
                });
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
