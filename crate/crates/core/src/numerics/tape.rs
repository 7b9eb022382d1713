//! Reverse-mode gradient tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep simply walks it in reverse.
//! Gradient contributions to a node are accumulated in that fixed order,
//! which makes results bitwise reproducible.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::{Grads, ParamId, ParamStore, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Mask(Var, Vec<f64>),
    L2Norm(Var, Vec<f64>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Stack(Vec<Var>),
    /// Scalar output whose gradient w.r.t. each parent was computed in the
    /// forward pass.
    Fused(Vec<(Var, Vec<f64>)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    param_vars: HashMap<ParamId, Var>,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.param_vars.insert(id, v);
        self.params.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = dims2(self.value(a));
        let (p2, q) = dims2(self.value(b));
        if p != p2 {
            return Err(Error::Dimension(format!(
                "matmul {:?} × {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let c = kernels::matmul(self.value(a).data(), self.value(b).data(), m, p, q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, q], c), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = dims2(self.value(a));
        let (q, p2) = dims2(self.value(b));
        if p != p2 {
            return Err(Error::Dimension(format!(
                "matmul_bt {:?} × {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let c = kernels::matmul_bt(self.value(a).data(), self.value(b).data(), m, p, q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, q], c), Op::MatMulBt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = dims2(self.value(a));
        let t = kernels::transpose(self.value(a).data(), m, n);
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(vec![n, m], t), Op::Transpose(a), rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_broadcast(&mut self, x: Var, v: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(v).numel() != cols {
            return Err(Error::Dimension(format!(
                "row broadcast of {:?} over {:?}",
                self.shape(v),
                self.shape(x)
            )));
        }
        let vd = self.value(v).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, vd[i % cols]))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, v]);
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    /// `x + v` with `v` broadcast over rows.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast(x, v, Op::AddRow(x, v), |a, b| a + b)
    }

    /// `x ⊙ v` with `v` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast(x, v, Op::MulRow(x, v), |a, b| a * b)
    }

    /// `scale·x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = kernels::softmax_rows(t.data(), t.cols());
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, y), Op::Softmax(x), rg)
    }

    /// Normalizes over the last axis, then applies `gamma ⊙ · + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::Dimension(format!(
                "layer_norm over {d} columns with gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (xhat, rstd) = kernels::standardize_rows(self.value(x).data(), d, eps);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let y: Vec<f64> = xhat.iter().enumerate().map(|(i, &h)| g[i % d] * h + b[i % d]).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    /// Inverted dropout. Eval mode and `p = 0` return `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout rate must lie in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mask(x, mask), rg))
    }

    /// Divides each row by `‖row‖₂ + 1e-12`; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.cols();
        let norms: Vec<f64> = t.data().chunks(d).map(|r| kernels::dot(r, r).sqrt()).collect();
        let out: Vec<f64> = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v / norms[i / d].max(kernels::NORM_EPS))
            .collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::L2Norm(x, norms), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x));
        if len == 0 || start + len > n {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} of {n} columns",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![m, len], out), Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::Dimension("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x));
        if len == 0 || start + len > m {
            return Err(Error::Dimension(format!(
                "row slice {start}..{} of {m} rows",
                start + len
            )));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![len, n], out), Op::SliceRows(x, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != n) {
            return Err(Error::Dimension("concat_rows: column counts differ".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row lookup: `out[i] = table[indices[i]]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.value(table));
        if indices.is_empty() {
            return Err(Error::Length("gather of zero rows".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Data(format!("row index {bad} out of range {v}")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), d], out),
            Op::Gather(table, indices.to_vec()),
            rg,
        ))
    }

    /// `out[i] = x[i, cols[i]]`
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = dims2(self.value(x));
        if cols.len() != m || cols.iter().any(|&c| c >= n) {
            return Err(Error::Dimension(format!("pick of {} indices from {m}×{n}", cols.len())));
        }
        let out: Vec<f64> = cols.iter().enumerate().map(|(r, &c)| self.value(x).at(r, c)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![m], out), Op::Pick(x, cols.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Stack scalars into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        if scalars.is_empty() || scalars.iter().any(|&s| self.value(s).numel() != 1) {
            return Err(Error::Dimension("stack expects one or more scalars".into()));
        }
        let out: Vec<f64> = scalars.iter().map(|&s| self.value(s).item()).collect();
        let rg = self.rg(scalars);
        Ok(self.push(
            Tensor::from_parts(vec![scalars.len()], out),
            Op::Stack(scalars.to_vec()),
            rg,
        ))
    }

    /// Record a scalar computed outside the tape together with its gradient
    /// with respect to each input.
    pub fn fused_scalar(&mut self, value: f64, local_grads: Vec<(Var, Vec<f64>)>) -> Result<Var> {
        for (v, g) in &local_grads {
            if self.value(*v).numel() != g.len() {
                return Err(Error::Dimension(format!(
                    "fused gradient of length {} for {:?}",
                    g.len(),
                    self.shape(*v)
                )));
            }
        }
        let parents: Vec<Var> = local_grads.iter().map(|(v, _)| *v).collect();
        let rg = self.rg(&parents);
        Ok(self.push(Tensor::scalar(value), Op::Fused(local_grads), rg))
    }

    /// Mean softmax cross-entropy of logit rows against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, c) = dims2(self.value(logits));
        if targets.len() != m || targets.iter().any(|&t| t >= c) {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} targets for {m}×{c} logits",
                targets.len()
            )));
        }
        let x = self.value(logits).data();
        let mut probs = kernels::softmax_rows(x, c);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * c..(r + 1) * c];
            loss += kernels::log_sum_exp(row) - row[t];
        }
        for (r, &t) in targets.iter().enumerate() {
            probs[r * c + t] -= 1.0;
        }
        for g in &mut probs {
            *g /= m as f64;
        }
        self.fused_scalar(loss / m as f64, vec![(logits, probs)])
    }

    /// Fail if `v` holds NaN or infinity.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Reverse sweep from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward from non-scalar {:?}",
                self.shape(loss)
            )));
        }
        self.check_finite(loss, "loss")?;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Add the gradients of bound parameters into `out`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, out: &mut Grads) {
        for &(id, v) in &self.params {
            if let Some(g) = grads.wrt(v) {
                for (o, x) in out.get_mut(id).iter_mut().zip(g) {
                    *o += x;
                }
            }
        }
    }

    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.params
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, p) = dims2(val(*a));
                let q = val(*b).cols();
                acc(*a, &mut |s| {
                    let da = kernels::matmul_bt(g, val(*b).data(), m, q, p);
                    add_into(s, &da);
                });
                acc(*b, &mut |s| {
                    let db = kernels::matmul_at(val(*a).data(), g, m, p, q);
                    add_into(s, &db);
                });
            }
            Op::MatMulBt(a, b) => {
                let (m, p) = dims2(val(*a));
                let q = val(*b).rows();
                acc(*a, &mut |s| {
                    let da = kernels::matmul(g, val(*b).data(), m, q, p);
                    add_into(s, &da);
                });
                acc(*b, &mut |s| {
                    let db = kernels::matmul_at(g, val(*a).data(), m, q, p);
                    add_into(s, &db);
                });
            }
            Op::Transpose(a) => {
                let (m, n) = dims2(val(*a));
                acc(*a, &mut |s| add_into(s, &kernels::transpose(g, n, m)));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (o, x) in s.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |s| {
                    for ((o, x), y) in s.iter_mut().zip(g).zip(val(*b).data()) {
                        *o += x * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((o, x), y) in s.iter_mut().zip(g).zip(val(*a).data()) {
                        *o += x * y;
                    }
                });
            }
            Op::AddRow(x, v) => {
                let n = val(*x).cols();
                acc(*x, &mut |s| add_into(s, g));
                acc(*v, &mut |s| {
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                });
            }
            Op::MulRow(x, v) => {
                let n = val(*x).cols();
                let vd = val(*v).data();
                let xd = val(*x).data();
                acc(*x, &mut |s| {
                    for (i, (o, gi)) in s.iter_mut().zip(g).enumerate() {
                        *o += gi * vd[i % n];
                    }
                });
                acc(*v, &mut |s| {
                    for (i, (gi, xi)) in g.iter().zip(xd).enumerate() {
                        s[i % n] += gi * xi;
                    }
                });
            }
            Op::Affine(x, scale) => {
                acc(*x, &mut |s| {
                    for (o, gi) in s.iter_mut().zip(g) {
                        *o += scale * gi;
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                acc(*x, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let inner = kernels::dot(grow, yrow);
                        for ((o, gi), yi) in srow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - inner);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*x).cols();
                let gm = val(*gamma).data();
                acc(*x, &mut |s| {
                    for r in 0..rstd.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = kernels::dot(&dh, hr) / d as f64;
                        for j in 0..d {
                            s[r * d + j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                });
                acc(*gamma, &mut |s| {
                    for (i, (gi, hi)) in g.iter().zip(xhat).enumerate() {
                        s[i % d] += gi * hi;
                    }
                });
                acc(*beta, &mut |s| {
                    for row in g.chunks(d) {
                        add_into(s, row);
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |s| {
                    for ((o, gi), xi) in s.iter_mut().zip(g).zip(xd) {
                        *o += gi * kernels::gelu_grad(*xi);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for ((o, gi), yi) in s.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for ((o, gi), yi) in s.iter_mut().zip(g).zip(y) {
                        *o += gi * yi;
                    }
                });
            }
            Op::Mask(x, mask) => {
                acc(*x, &mut |s| {
                    for ((o, gi), mi) in s.iter_mut().zip(g).zip(mask) {
                        *o += gi * mi;
                    }
                });
            }
            Op::L2Norm(x, norms) => {
                let xd = val(*x).data();
                let d = val(*x).cols();
                acc(*x, &mut |s| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let xr = &xd[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        // Below the floor the map is linear, x / ε.
                        let (q, proj) = if norm > kernels::NORM_EPS {
                            (norm, kernels::dot(xr, gr) / (norm * norm * norm))
                        } else {
                            (kernels::NORM_EPS, 0.0)
                        };
                        for j in 0..d {
                            s[r * d + j] += gr[j] / q - xr[j] * proj;
                        }
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let n = val(*x).cols();
                let len = node.value.cols();
                acc(*x, &mut |s| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        add_into(&mut s[r * n + start..r * n + start + len], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |s| {
                        for (r, srow) in s.chunks_mut(w).enumerate() {
                            add_into(srow, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows(x, start) => {
                let n = val(*x).cols();
                acc(*x, &mut |s| add_into(&mut s[start * n..start * n + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    acc(p, &mut |s| add_into(s, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Gather(table, indices) => {
                let d = val(*table).cols();
                acc(*table, &mut |s| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut s[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Pick(x, cols) => {
                let n = val(*x).cols();
                acc(*x, &mut |s| {
                    for (r, &c) in cols.iter().enumerate() {
                        s[r * n + c] += g[r];
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |s| {
                    for o in s.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::Mean(x) => {
                let k = g[0] / val(*x).numel() as f64;
                acc(*x, &mut |s| {
                    for o in s.iter_mut() {
                        *o += k;
                    }
                });
            }
            Op::Stack(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    acc(p, &mut |s| s[0] += g[i]);
                }
            }
            Op::Fused(locals) => {
                for (p, local) in locals {
                    acc(*p, &mut |s| {
                        for (o, l) in s.iter_mut().zip(local) {
                            *o += g[0] * l;
                        }
                    });
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
