//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive applied to a [`Var`] appends a node to its [`Tape`] that
//! holds the forward value plus whatever the backward rule needs. Nodes are
//! appended in evaluation order, so the tape is already topologically sorted
//! and [`Tape::backward`] is a single reverse sweep.
//!
//! Leaves are created either with [`Tape::leaf`] (gradients requested) or
//! [`Tape::constant`] (no gradient, and backward rules skip work that would
//! only feed constants).

use std::cell::{Ref, RefCell};

use super::kernels::{self, add_into, axpy, gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{Tensor, TensorError};

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Softmax {
        x: NodeId,
        outer: usize,
        dim: usize,
        inner: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatRows(Vec<NodeId>),
    Reshape(NodeId),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Bce {
        logits: NodeId,
        labels: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations for one forward pass.
///
/// A tape is a single-threaded context. Build a fresh one per forward pass
/// (or per training batch); values are freed when it is dropped.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf, `None` when it was not reachable from the loss.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when the leaf was unreachable.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }

    /// Moves a leaf gradient out of the collection.
    pub fn take(&mut self, v: Var<'_>) -> Tensor {
        match self.grads.get_mut(v.id).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<(), TensorError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(TensorError::Contract(format!(
            "{op}: expected a matrix, got shape {:?}",
            t.shape()
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds a differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from a scalar loss. Only leaves created with
    /// [`Tape::leaf`] keep their gradients in the result.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) => {
                    Some(Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Returns the gradient buffer of `id`, allocating zeros on first use.
fn slot<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    id: NodeId,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = as_matrix("matmul", &nodes[*a].value).unwrap();
            let n = nodes[*b].value.shape()[1];
            if let Some(da) = slot(nodes, grads, *a) {
                gemm_nt_acc(g, nodes[*b].value.data(), m, n, k, da);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                gemm_tn_acc(nodes[*a].value.data(), g, m, k, n, db);
            }
        }
        Op::MatMulNt(a, b) => {
            // c = a · bᵀ with a [m×k], b [n×k]
            let (m, k) = as_matrix("matmul_t", &nodes[*a].value).unwrap();
            let n = nodes[*b].value.shape()[0];
            if let Some(da) = slot(nodes, grads, *a) {
                gemm_acc(g, nodes[*b].value.data(), m, n, k, da);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                gemm_tn_acc(g, nodes[*a].value.data(), m, n, k, db);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = as_matrix("transpose", &nodes[*a].value).unwrap();
            if let Some(da) = slot(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(g, da);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                add_into(g, db);
            }
        }
        Op::AddRow(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(g, da);
            }
            let cols = nodes[*b].value.len();
            if let Some(db) = slot(nodes, grads, *b) {
                for row in g.chunks(cols) {
                    add_into(row, db);
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(nodes[*b].value.data()) {
                    *d += gv * bv;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for ((d, &gv), &av) in db.iter_mut().zip(g).zip(nodes[*a].value.data()) {
                    *d += gv * av;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(da) = slot(nodes, grads, *a) {
                axpy(*c, g, da);
            }
        }
        Op::Relu(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, &gv), &x) in da.iter_mut().zip(g).zip(nodes[*a].value.data()) {
                    if x > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        Op::Gelu(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, &gv), &x) in da.iter_mut().zip(g).zip(nodes[*a].value.data()) {
                    *d += gv * kernels::gelu_grad(x);
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, &gv), &s) in da.iter_mut().zip(g).zip(node.value.data()) {
                    *d += gv * s * (1.0 - s);
                }
            }
        }
        Op::Softmax {
            x,
            outer,
            dim,
            inner,
        } => {
            let y = node.value.data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * dim + j) * inner + i;
                        let s: f64 = (0..*dim).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*dim {
                            dx[idx(j)] += y[idx(j)] * (g[idx(j)] - s);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let h = nodes[*gain].value.len();
            let gv = nodes[*gain].value.data();
            if let Some(dgain) = slot(nodes, grads, *gain) {
                for (grow, xrow) in g.chunks(h).zip(xhat.chunks(h)) {
                    for ((d, &gg), &xh) in dgain.iter_mut().zip(grow).zip(xrow) {
                        *d += gg * xh;
                    }
                }
            }
            if let Some(dbias) = slot(nodes, grads, *bias) {
                for grow in g.chunks(h) {
                    add_into(grow, dbias);
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let hf = h as f64;
                for (r, ((grow, xrow), dxrow)) in g
                    .chunks(h)
                    .zip(xhat.chunks(h))
                    .zip(dx.chunks_mut(h))
                    .enumerate()
                {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..h {
                        let dxh = grow[j] * gv[j];
                        mean_d += dxh;
                        mean_dx += dxh * xrow[j];
                    }
                    mean_d /= hf;
                    mean_dx /= hf;
                    for j in 0..h {
                        let dxh = grow[j] * gv[j];
                        dxrow[j] += rstd[r] * (dxh - mean_d - xrow[j] * mean_dx);
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            let h = nodes[*table].value.last_dim();
            if let Some(dt) = slot(nodes, grads, *table) {
                for (row, &i) in g.chunks(h).zip(ids) {
                    add_into(row, &mut dt[i * h..(i + 1) * h]);
                }
            }
        }
        Op::SliceCols { x, start } => {
            let cols = nodes[*x].value.last_dim();
            let width = node.value.last_dim();
            if let Some(dx) = slot(nodes, grads, *x) {
                for (r, grow) in g.chunks(width).enumerate() {
                    add_into(grow, &mut dx[r * cols + start..r * cols + start + width]);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.last_dim();
            let mut offset = 0;
            for &p in parts {
                let width = nodes[p].value.last_dim();
                if let Some(dp) = slot(nodes, grads, p) {
                    for (r, drow) in dp.chunks_mut(width).enumerate() {
                        add_into(&g[r * total + offset..r * total + offset + width], drow);
                    }
                }
                offset += width;
            }
        }
        Op::SliceRows { x, start } => {
            let cols = nodes[*x].value.last_dim();
            if let Some(dx) = slot(nodes, grads, *x) {
                add_into(g, &mut dx[start * cols..start * cols + g.len()]);
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                if let Some(dp) = slot(nodes, grads, p) {
                    add_into(&g[offset..offset + n], dp);
                }
                offset += n;
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(g, da);
            }
        }
        Op::Sum(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let v = nodes[*logits].value.last_dim();
            let scale = g[0] / targets.len() as f64;
            if let Some(dl) = slot(nodes, grads, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    let prow = &probs[r * v..(r + 1) * v];
                    let drow = &mut dl[r * v..(r + 1) * v];
                    axpy(scale, prow, drow);
                    drow[t] -= scale;
                }
            }
        }
        Op::Bce { logits, labels } => {
            let scale = g[0] / labels.len() as f64;
            if let Some(dl) = slot(nodes, grads, *logits) {
                for ((d, &x), &y) in dl.iter_mut().zip(nodes[*logits].value.data()).zip(labels) {
                    *d += scale * (kernels::sigmoid(x) - y);
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the forward value.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'_>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    /// Matrix product `self[m×k] · rhs[k×n]`.
    pub fn matmul(&self, rhs: &Var<'_>) -> Result<Var<'t>, TensorError> {
        self.same_tape(rhs);
        let out = {
            let a = self.value();
            let b = rhs.value();
            let (m, k) = as_matrix("matmul", &a)?;
            let (k2, n) = as_matrix("matmul", &b)?;
            if k != k2 {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let mut out = vec![0.0; m * n];
            gemm_acc(a.data(), b.data(), m, k, n, &mut out);
            Tensor::new(vec![m, n], out)?
        };
        Ok(self.binary(rhs, out, Op::MatMul(self.id, rhs.id)))
    }

    /// `self[m×k] · rhs[n×k]ᵀ`.
    pub fn matmul_t(&self, rhs: &Var<'_>) -> Result<Var<'t>, TensorError> {
        self.same_tape(rhs);
        let out = {
            let a = self.value();
            let b = rhs.value();
            let (m, k) = as_matrix("matmul_t", &a)?;
            let (n, k2) = as_matrix("matmul_t", &b)?;
            if k != k2 {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul_t",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let mut out = vec![0.0; m * n];
            gemm_nt_acc(a.data(), b.data(), m, k, n, &mut out);
            Tensor::new(vec![m, n], out)?
        };
        Ok(self.binary(rhs, out, Op::MatMulNt(self.id, rhs.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>, TensorError> {
        let out = {
            let a = self.value();
            let (r, c) = as_matrix("transpose", &a)?;
            let d = a.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out)?
        };
        Ok(self.unary(out, Op::Transpose(self.id)))
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&self, rhs: &Var<'_>) -> Result<Var<'t>, TensorError> {
        self.same_tape(rhs);
        let out = {
            let a = self.value();
            let b = rhs.value();
            if a.shape() != b.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "add",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.binary(rhs, out, Op::Add(self.id, rhs.id)))
    }

    /// Adds a vector to every row (broadcast over the last axis).
    pub fn add_row(&self, row: &Var<'_>) -> Result<Var<'t>, TensorError> {
        self.same_tape(row);
        let out = {
            let a = self.value();
            let b = row.value();
            if a.last_dim() != b.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let mut data = a.data().to_vec();
            for r in data.chunks_mut(b.len()) {
                add_into(b.data(), r);
            }
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.binary(row, out, Op::AddRow(self.id, row.id)))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Var<'_>) -> Result<Var<'t>, TensorError> {
        self.same_tape(rhs);
        let out = {
            let a = self.value();
            let b = rhs.value();
            if a.shape() != b.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "mul",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.binary(rhs, out, Op::Mul(self.id, rhs.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = {
            let a = self.value();
            let data = a.data().iter().map(|x| x * c).collect();
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        };
        self.unary(out, Op::Scale(self.id, c))
    }

    pub fn relu(&self) -> Result<Var<'t>, TensorError> {
        let out = {
            let a = self.value();
            check_finite("relu", &a)?;
            let data = a
                .data()
                .iter()
                .map(|&x| if x > 0.0 { x } else { 0.0 })
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.unary(out, Op::Relu(self.id)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var<'t>, TensorError> {
        let out = {
            let a = self.value();
            check_finite("gelu", &a)?;
            let data = a.data().iter().map(|&x| kernels::gelu(x)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.unary(out, Op::Gelu(self.id)))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>, TensorError> {
        let out = {
            let a = self.value();
            check_finite("sigmoid", &a)?;
            let data = a.data().iter().map(|&x| kernels::sigmoid(x)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.unary(out, Op::Sigmoid(self.id)))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>, TensorError> {
        let (out, outer, dim, inner) = {
            let a = self.value();
            check_finite("softmax", &a)?;
            let shape = a.shape();
            if axis >= shape.len() {
                return Err(TensorError::Contract(format!(
                    "softmax: axis {axis} out of range for shape {shape:?}"
                )));
            }
            let outer: usize = shape[..axis].iter().product();
            let dim = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let x = a.data();
            let mut y = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * dim + j) * inner + i;
                    let max = (0..dim)
                        .map(|j| x[idx(j)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for j in 0..dim {
                        let e = (x[idx(j)] - max).exp();
                        y[idx(j)] = e;
                        s += e;
                    }
                    for j in 0..dim {
                        y[idx(j)] /= s;
                    }
                }
            }
            (Tensor::new(shape.to_vec(), y)?, outer, dim, inner)
        };
        Ok(self.unary(
            out,
            Op::Softmax {
                x: self.id,
                outer,
                dim,
                inner,
            },
        ))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(
        &self,
        gain: &Var<'_>,
        bias: &Var<'_>,
        eps: f64,
    ) -> Result<Var<'t>, TensorError> {
        self.same_tape(gain);
        self.same_tape(bias);
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(TensorError::Contract(format!(
                "layer_norm: invalid eps {eps}"
            )));
        }
        let (out, xhat, rstd) = {
            let a = self.value();
            let gv = gain.value();
            let bv = bias.value();
            let h = a.last_dim();
            if gv.len() != h || bv.len() != h {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: a.shape().to_vec(),
                    right: gv.shape().to_vec(),
                });
            }
            let rows = a.rows();
            let mut xhat = vec![0.0; a.len()];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; a.len()];
            for r in 0..rows {
                let x = a.row(r);
                let mean = x.iter().sum::<f64>() / h as f64;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
                let rs = 1.0 / (var + eps).sqrt();
                if !rs.is_finite() {
                    return Err(TensorError::NonFinite { op: "layer_norm" });
                }
                rstd[r] = rs;
                for j in 0..h {
                    let xh = (x[j] - mean) * rs;
                    xhat[r * h + j] = xh;
                    out[r * h + j] = xh * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new(a.shape().to_vec(), out)?, xhat, rstd)
        };
        let rg = self.tape.needs(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row lookup: `self` is a `[vocab×h]` table, result is `[ids.len()×h]`.
    pub fn gather(&self, ids: &[usize]) -> Result<Var<'t>, TensorError> {
        let out = {
            let t = self.value();
            let (v, h) = as_matrix("gather", &t)?;
            let mut data = Vec::with_capacity(ids.len() * h);
            for &i in ids {
                if i >= v {
                    return Err(TensorError::Contract(format!(
                        "gather: row {i} out of range for table with {v} rows"
                    )));
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![ids.len(), h], data)?
        };
        Ok(self.unary(
            out,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'t>, TensorError> {
        let out = {
            let a = self.value();
            let (r, c) = as_matrix("slice_cols", &a)?;
            if start + width > c {
                return Err(TensorError::Contract(format!(
                    "slice_cols: {start}+{width} exceeds {c} columns"
                )));
            }
            let mut data = Vec::with_capacity(r * width);
            for i in 0..r {
                data.extend_from_slice(&a.row(i)[start..start + width]);
            }
            Tensor::new(vec![r, width], data)?
        };
        Ok(self.unary(out, Op::SliceCols { x: self.id, start }))
    }

    /// Rows `start..start + count` of a matrix.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Var<'t>, TensorError> {
        let out = {
            let a = self.value();
            let (r, c) = as_matrix("slice_rows", &a)?;
            if start + count > r {
                return Err(TensorError::Contract(format!(
                    "slice_rows: {start}+{count} exceeds {r} rows"
                )));
            }
            Tensor::new(
                vec![count, c],
                a.data()[start * c..(start + count) * c].to_vec(),
            )?
        };
        Ok(self.unary(out, Op::SliceRows { x: self.id, start }))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>, TensorError> {
        let out = self.value().clone().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Mean cross-entropy of `self[n×vocab]` logits against target indices.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t>, TensorError> {
        let (loss, probs) = {
            let a = self.value();
            check_finite("cross_entropy", &a)?;
            let (n, v) = as_matrix("cross_entropy", &a)?;
            if targets.len() != n || n == 0 {
                return Err(TensorError::Contract(format!(
                    "cross_entropy: {} targets for {} rows",
                    targets.len(),
                    n
                )));
            }
            let mut probs = vec![0.0; n * v];
            let mut loss = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                if t >= v {
                    return Err(TensorError::Contract(format!(
                        "cross_entropy: target {t} out of range {v}"
                    )));
                }
                let row = a.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                    *p = (x - max).exp();
                    s += *p;
                }
                for p in probs[r * v..(r + 1) * v].iter_mut() {
                    *p /= s;
                }
                loss += max + s.ln() - row[t];
            }
            (loss / n as f64, probs)
        };
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy of logits against labels in `{0, 1}`.
    pub fn bce(&self, labels: &[f64]) -> Result<Var<'t>, TensorError> {
        let loss = {
            let a = self.value();
            check_finite("bce", &a)?;
            if labels.len() != a.len() || labels.is_empty() {
                return Err(TensorError::Contract(format!(
                    "bce: {} labels for {} logits",
                    labels.len(),
                    a.len()
                )));
            }
            if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
                return Err(TensorError::Contract("bce: labels must be 0 or 1".into()));
            }
            let s: f64 = a
                .data()
                .iter()
                .zip(labels)
                .map(|(&x, &y)| kernels::softplus(x) - y * x)
                .sum();
            s / labels.len() as f64
        };
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::Bce {
                logits: self.id,
                labels: labels.to_vec(),
            },
        ))
    }
}

/// Concatenates matrices with equal row counts along the column axis.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Contract("concat_cols: no inputs".into()))?;
    let tape = first.tape;
    let out = {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = as_matrix("concat_cols", &vals[0])?.0;
        let mut widths = Vec::with_capacity(vals.len());
        for v in &vals {
            let (r, c) = as_matrix("concat_cols", v)?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: vals[0].shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        Tensor::new(vec![rows, total], data)?
    };
    let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
    let rg = tape.needs(&ids);
    Ok(tape.push(out, Op::ConcatCols(ids), rg))
}

/// Stacks matrices with equal column counts along the row axis.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Contract("concat_rows: no inputs".into()))?;
    let tape = first.tape;
    let out = {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let cols = as_matrix("concat_rows", &vals[0])?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for v in &vals {
            let (r, c) = as_matrix("concat_rows", v)?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: vals[0].shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        Tensor::new(vec![rows, cols], data)?
    };
    let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
    let rg = tape.needs(&ids);
    Ok(tape.push(out, Op::ConcatRows(ids), rg))
}
