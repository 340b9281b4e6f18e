//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles. Values are
//! computed eagerly; [`Tape::backward`] walks the recorded nodes once in
//! reverse and returns gradients for every leaf that requires them. Nodes
//! whose inputs do not require gradients are recorded as constants, so a tape
//! doubles as a plain inference engine.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::tensor::{log_softmax_slice, logsumexp, matmul_acc, softmax_slice, Tensor};
use super::NumericsError;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Softmax(usize),
    CausalSoftmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: usize, ids: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    KlDiv { p: usize, q: usize, p_prob: Vec<f64>, q_prob: Vec<f64>, log_ratio: Vec<f64>, row_kl: Vec<f64> },
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.by_leaf.get(&var.id).map(Vec::as_slice)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Vec<f64>> {
        self.by_leaf.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> NumericsError {
    NumericsError::Shape { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records a leaf. It receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, mut tensor: Tensor) -> Var<'_> {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Constant, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if requires_grad || matches!(op, Op::Leaf) { op } else { Op::Constant };
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id }
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Propagates d`loss`/d(leaf) for every leaf that requires a gradient,
    /// then clears the tape. Handles into this tape are invalid afterwards.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, NumericsError> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes.is_empty() {
            return Err(NumericsError::EmptyTape);
        }
        let loss_node = &nodes[loss.id];
        if !loss_node.value.is_scalar() {
            return Err(NumericsError::NonScalarLoss { shape: loss_node.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            propagate(&nodes, id, g, &mut grads, &mut out);
        }
        nodes.clear();
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn propagate(
    nodes: &[Node],
    id: usize,
    g: Vec<f64>,
    grads: &mut [Option<Vec<f64>>],
    out: &mut Gradients,
) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {
            out.by_leaf.insert(id, g);
        }
        Op::Constant => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *b, g.clone());
            accumulate(grads, nodes, *a, g);
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *b, g.iter().map(|v| -v).collect());
            accumulate(grads, nodes, *a, g);
        }
        Op::AddRow(a, b) => {
            let n = nodes[*b].value.numel();
            let mut gb = vec![0.0; n];
            for row in g.chunks(n) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            accumulate(grads, nodes, *b, gb);
            accumulate(grads, nodes, *a, g);
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
            let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
            accumulate(grads, nodes, *a, ga);
            accumulate(grads, nodes, *b, gb);
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, g.iter().map(|v| v * c).collect());
        }
        Op::MatMul(a, b) => {
            let at = &nodes[*a].value;
            let bt = &nodes[*b].value;
            let (m, k, n) = (at.rows(), at.cols(), bt.cols());
            if nodes[*a].requires_grad {
                // dA = G · Bᵀ
                let mut ga = vec![0.0; m * k];
                let bd = bt.data();
                for i in 0..m {
                    let g_row = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let b_row = &bd[p * n..(p + 1) * n];
                        ga[i * k + p] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                    }
                }
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                // dB = Aᵀ · G
                let mut gb = vec![0.0; k * n];
                let ad = at.data();
                for i in 0..m {
                    let g_row = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let gb_row = &mut gb[p * n..(p + 1) * n];
                        for (o, gv) in gb_row.iter_mut().zip(g_row) {
                            *o += av * gv;
                        }
                    }
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (node.value.rows(), node.value.cols());
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[j * r + i] = g[i * c + j];
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Relu(a) => {
            let av = nodes[*a].value.data();
            let ga = g.iter().zip(av).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Softmax(a) | Op::CausalSoftmax(a) => {
            let y = node.value.data();
            let c = *node.value.shape().last().unwrap();
            let mut ga = vec![0.0; y.len()];
            for ((yr, gr), out) in y.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((o, y), g) in out.iter_mut().zip(yr).zip(gr) {
                    *o = y * (g - dot);
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::LogSoftmax(a) => {
            let y = node.value.data();
            let c = *node.value.shape().last().unwrap();
            let mut ga = vec![0.0; y.len()];
            for ((yr, gr), out) in y.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                let total: f64 = gr.iter().sum();
                for ((o, y), g) in out.iter_mut().zip(yr).zip(gr) {
                    *o = g - y.exp() * total;
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let c = nodes[*gamma].value.numel();
            let gam = nodes[*gamma].value.data();
            let mut g_gamma = vec![0.0; c];
            let mut g_beta = vec![0.0; c];
            let mut gx = vec![0.0; g.len()];
            for (r, (gr, xr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for j in 0..c {
                    g_gamma[j] += gr[j] * xr[j];
                    g_beta[j] += gr[j];
                    let d = gr[j] * gam[j];
                    sum_d += d;
                    sum_dx += d * xr[j];
                }
                let n = c as f64;
                let s = inv_std[r] / n;
                let out = &mut gx[r * c..(r + 1) * c];
                for j in 0..c {
                    let d = gr[j] * gam[j];
                    out[j] = s * (n * d - sum_d - xr[j] * sum_dx);
                }
            }
            accumulate(grads, nodes, *gamma, g_gamma);
            accumulate(grads, nodes, *beta, g_beta);
            accumulate(grads, nodes, *x, gx);
        }
        Op::Embedding { table, ids } => {
            let t = &nodes[*table].value;
            let c = t.cols();
            let mut gt = vec![0.0; t.numel()];
            for (row, &id) in ids.iter().enumerate() {
                let dst = &mut gt[id * c..(id + 1) * c];
                for (d, v) in dst.iter_mut().zip(&g[row * c..(row + 1) * c]) {
                    *d += v;
                }
            }
            accumulate(grads, nodes, *table, gt);
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let c = nodes[*logits].value.cols();
            let scale = g[0];
            let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (r, &t) in targets.iter().enumerate() {
                gl[r * c + t] -= scale;
            }
            accumulate(grads, nodes, *logits, gl);
        }
        Op::KlDiv { p, q, p_prob, q_prob, log_ratio, row_kl } => {
            let c = nodes[*p].value.cols();
            let scale = g[0];
            if nodes[*p].requires_grad {
                let mut gp = vec![0.0; p_prob.len()];
                for (r, kl) in row_kl.iter().enumerate() {
                    for j in r * c..(r + 1) * c {
                        gp[j] = scale * p_prob[j] * (log_ratio[j] - kl);
                    }
                }
                accumulate(grads, nodes, *p, gp);
            }
            if nodes[*q].requires_grad {
                let gq = q_prob.iter().zip(p_prob).map(|(q, p)| scale * (q - p)).collect();
                accumulate(grads, nodes, *q, gq);
            }
        }
        Op::SliceRows { x, start } => {
            let src = &nodes[*x].value;
            let c = src.cols();
            let mut gx = vec![0.0; src.numel()];
            gx[start * c..start * c + g.len()].copy_from_slice(&g);
            accumulate(grads, nodes, *x, gx);
        }
        Op::SliceCols { x, start } => {
            let src = &nodes[*x].value;
            let (r, c) = (src.rows(), src.cols());
            let w = node.value.cols();
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                gx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &part in parts {
                let n = nodes[part].value.numel();
                accumulate(grads, nodes, part, g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let rows = node.value.rows();
            let mut offset = 0;
            for &part in parts {
                let w = nodes[part].value.cols();
                let mut gp = vec![0.0; rows * w];
                for i in 0..rows {
                    gp[i * w..(i + 1) * w]
                        .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                }
                accumulate(grads, nodes, part, gp);
                offset += w;
            }
        }
        Op::Sum(a) => {
            let n = nodes[*a].value.numel();
            accumulate(grads, nodes, *a, vec![g[0]; n]);
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.numel();
            accumulate(grads, nodes, *a, vec![g[0] / n as f64; n]);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the recorded value.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a scalar node.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn emit(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'t> {
        let rg = self.tape.needs_grad(inputs);
        self.tape.push(value, op, rg)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars belong to different tapes");
    }

    fn zip_with(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        self.same_tape(&other);
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(shape_err(name, &[a.shape(), b.shape()]));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let v = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(self.emit(v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let v = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(self.emit(v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let v = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(self.emit(v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    /// `[m×n] + [n]`, broadcasting the vector over rows.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.same_tape(&bias);
        let v = {
            let a = self.value();
            let b = bias.value();
            if a.ndim() != 2 || b.ndim() != 1 || a.cols() != b.numel() {
                return Err(shape_err("add_row", &[a.shape(), b.shape()]));
            }
            let n = b.numel();
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(n) {
                for (x, y) in row.iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.emit(v, Op::AddRow(self.id, bias.id), &[self.id, bias.id]))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = {
            let a = self.value();
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x * c).collect())
                .expect("same shape")
        };
        self.emit(v, Op::Scale(self.id, c), &[self.id])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.same_tape(&other);
        let v = {
            let a = self.value();
            let b = other.value();
            if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows() {
                return Err(shape_err("matmul", &[a.shape(), b.shape()]));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = vec![0.0; m * n];
            matmul_acc(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)?
        };
        Ok(self.emit(v, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(self) -> Result<Var<'t>, NumericsError> {
        let v = {
            let a = self.value();
            if a.ndim() != 2 {
                return Err(shape_err("transpose", &[a.shape()]));
            }
            let (r, c) = (a.rows(), a.cols());
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out)?
        };
        Ok(self.emit(v, Op::Transpose(self.id), &[self.id]))
    }

    pub fn relu(self) -> Var<'t> {
        let v = {
            let a = self.value();
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x.max(0.0)).collect())
                .expect("same shape")
        };
        self.emit(v, Op::Relu(self.id), &[self.id])
    }

    fn rowwise(
        &self,
        name: &'static str,
        f: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Result<Tensor, NumericsError> {
        let a = self.value();
        if a.ndim() == 0 {
            return Err(shape_err(name, &[a.shape()]));
        }
        let c = *a.shape().last().unwrap();
        let mut data = Vec::with_capacity(a.numel());
        for row in a.data().chunks(c) {
            data.extend(f(row));
        }
        Tensor::new(a.shape().to_vec(), data)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>, NumericsError> {
        let v = self.rowwise("softmax", softmax_slice)?;
        Ok(self.emit(v, Op::Softmax(self.id), &[self.id]))
    }

    /// Log-softmax over the last axis, stabilised by log-sum-exp.
    pub fn log_softmax(self) -> Result<Var<'t>, NumericsError> {
        let v = self.rowwise("log_softmax", log_softmax_slice)?;
        Ok(self.emit(v, Op::LogSoftmax(self.id), &[self.id]))
    }

    /// Row `i` of a square score matrix is normalised over columns `0..=i`;
    /// later columns are exactly zero.
    pub fn causal_softmax(self) -> Result<Var<'t>, NumericsError> {
        let v = {
            let a = self.value();
            if a.ndim() != 2 || a.rows() != a.cols() {
                return Err(shape_err("causal_softmax", &[a.shape()]));
            }
            let n = a.rows();
            let mut data = vec![0.0; n * n];
            for i in 0..n {
                let p = softmax_slice(&a.data()[i * n..i * n + i + 1]);
                data[i * n..i * n + i + 1].copy_from_slice(&p);
            }
            Tensor::new(vec![n, n], data)?
        };
        Ok(self.emit(v, Op::CausalSoftmax(self.id), &[self.id]))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (v, xhat, inv_std) = {
            let x = self.value();
            let g = gamma.value();
            let b = beta.value();
            let c = x.shape().last().copied().unwrap_or(0);
            if x.ndim() != 2 || g.shape() != [c] || b.shape() != [c] {
                return Err(shape_err("layer_norm", &[x.shape(), g.shape(), b.shape()]));
            }
            let mut out = vec![0.0; x.numel()];
            let mut xhat = vec![0.0; x.numel()];
            let mut inv_std = Vec::with_capacity(x.rows());
            for (r, row) in x.data().chunks(c).enumerate() {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std.push(is);
                for j in 0..c {
                    let h = (row[j] - mean) * is;
                    xhat[r * c + j] = h;
                    out[r * c + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, inv_std)
        };
        let op = Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std };
        Ok(self.emit(v, op, &[self.id, gamma.id, beta.id]))
    }

    /// Gathers rows of an embedding table (`self: [V×d]`) by id.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t>, NumericsError> {
        let v = {
            let t = self.value();
            if t.ndim() != 2 {
                return Err(shape_err("embedding", &[t.shape()]));
            }
            let (rows, c) = (t.rows(), t.cols());
            if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
                return Err(NumericsError::Index { op: "embedding", index: bad, bound: rows });
            }
            let mut data = Vec::with_capacity(ids.len() * c);
            for &i in ids {
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![ids.len(), c], data)?
        };
        let op = Op::Embedding { table: self.id, ids: ids.to_vec() };
        Ok(self.emit(v, op, &[self.id]))
    }

    /// Summed negative log-likelihood of `targets` (one per row) under the
    /// row-wise softmax of `self: [T×V]`.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>, NumericsError> {
        let (v, probs) = {
            let l = self.value();
            if l.ndim() != 2 || l.rows() != targets.len() {
                return Err(shape_err("cross_entropy", &[l.shape(), &[targets.len()]]));
            }
            let c = l.cols();
            if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
                return Err(NumericsError::Index { op: "cross_entropy", index: bad, bound: c });
            }
            let mut probs = Vec::with_capacity(l.numel());
            let mut total = 0.0;
            for (row, &t) in l.data().chunks(c).zip(targets) {
                let lse = logsumexp(row);
                total += lse - row[t];
                probs.extend(row.iter().map(|x| (x - lse).exp()));
            }
            (Tensor::scalar(total), probs)
        };
        let op = Op::CrossEntropy { logits: self.id, targets: targets.to_vec(), probs };
        Ok(self.emit(v, op, &[self.id]))
    }

    /// `Σ_rows KL(softmax(self_row) ‖ softmax(other_row))` for two logit
    /// matrices of equal shape.
    pub fn kl_div(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.same_tape(&other);
        let (v, p_prob, q_prob, log_ratio, row_kl) = {
            let a = self.value();
            let b = other.value();
            if a.ndim() != 2 || a.shape() != b.shape() {
                return Err(shape_err("kl_div", &[a.shape(), b.shape()]));
            }
            let c = a.cols();
            let mut p_prob = Vec::with_capacity(a.numel());
            let mut q_prob = Vec::with_capacity(a.numel());
            let mut log_ratio = Vec::with_capacity(a.numel());
            let mut row_kl = Vec::with_capacity(a.rows());
            for (ra, rb) in a.data().chunks(c).zip(b.data().chunks(c)) {
                let lp = log_softmax_slice(ra);
                let lq = log_softmax_slice(rb);
                let mut kl = 0.0;
                for j in 0..c {
                    let p = lp[j].exp();
                    let d = lp[j] - lq[j];
                    kl += p * d;
                    p_prob.push(p);
                    q_prob.push(lq[j].exp());
                    log_ratio.push(d);
                }
                row_kl.push(kl);
            }
            let total = row_kl.iter().sum();
            (Tensor::scalar(total), p_prob, q_prob, log_ratio, row_kl)
        };
        let op = Op::KlDiv { p: self.id, q: other.id, p_prob, q_prob, log_ratio, row_kl };
        Ok(self.emit(v, op, &[self.id, other.id]))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>, NumericsError> {
        let v = {
            let a = self.value();
            if a.ndim() != 2 || start > end || end > a.rows() {
                return Err(NumericsError::Slice { op: "slice_rows", start, end, shape: a.shape().to_vec() });
            }
            let c = a.cols();
            Tensor::new(vec![end - start, c], a.data()[start * c..end * c].to_vec())?
        };
        Ok(self.emit(v, Op::SliceRows { x: self.id, start }, &[self.id]))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>, NumericsError> {
        let v = {
            let a = self.value();
            if a.ndim() != 2 || start > end || end > a.cols() {
                return Err(NumericsError::Slice { op: "slice_cols", start, end, shape: a.shape().to_vec() });
            }
            let (r, c) = (a.rows(), a.cols());
            let mut data = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                data.extend_from_slice(&a.data()[i * c + start..i * c + end]);
            }
            Tensor::new(vec![r, end - start], data)?
        };
        Ok(self.emit(v, Op::SliceCols { x: self.id, start }, &[self.id]))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().data().iter().sum());
        self.emit(v, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let v = {
            let a = self.value();
            Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)
        };
        self.emit(v, Op::Mean(self.id), &[self.id])
    }
}

/// Stacks 2-D tensors with equal column counts along rows.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>, NumericsError> {
    let first = parts.first().ok_or(NumericsError::EmptyConcat)?;
    let v = {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let c = vals[0].shape().get(1).copied();
        if vals.iter().any(|v| v.ndim() != 2 || v.shape().get(1).copied() != c) {
            let shapes: Vec<&[usize]> = vals.iter().map(|v| v.shape()).collect();
            return Err(shape_err("concat_rows", &shapes));
        }
        let rows = vals.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(rows * c.unwrap());
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        Tensor::new(vec![rows, c.unwrap()], data)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(first.emit(v, Op::ConcatRows(ids.clone()), &ids))
}

/// Joins 2-D tensors with equal row counts along columns.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>, NumericsError> {
    let first = parts.first().ok_or(NumericsError::EmptyConcat)?;
    let v = {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let r = vals[0].shape().first().copied();
        if vals.iter().any(|v| v.ndim() != 2 || v.shape().first().copied() != r) {
            let shapes: Vec<&[usize]> = vals.iter().map(|v| v.shape()).collect();
            return Err(shape_err("concat_cols", &shapes));
        }
        let rows = r.unwrap();
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(i));
            }
        }
        Tensor::new(vec![rows, total], data)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(first.emit(v, Op::ConcatCols(ids.clone()), &ids))
}
