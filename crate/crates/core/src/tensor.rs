//! Dense row-major matrices and a define-by-run reverse-mode graph.
//!
//! A [`Graph`] records every operation as it is applied. Node ids are
//! handed out in creation order, so the node list is already a
//! topological order and [`Graph::backward`] only has to walk it in
//! reverse. Graphs are cheap and meant to be rebuilt for every step.
//!
//! Only the operations the classifier and its losses need are provided.
//! Leaves created with [`Graph::constant`] never receive gradients and
//! nothing is propagated into them, which keeps the input batch out of
//! the backward pass.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    Length { rows: usize, cols: usize, len: usize },
    #[error("non-finite value in matrix data")]
    NonFinite,
    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense `rows x cols` matrix of `f64`, row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            write!(f, "{:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::Length {
                rows,
                cols,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The scalar held by a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(TensorError::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(self, false, other, false, &mut out, 0.0);
        Ok(out)
    }

    /// Index of the largest entry in row `r`; ties go to the lowest index.
    pub fn argmax_row(&self, r: usize) -> usize {
        argmax(self.row(r))
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `out = op(a) * op(b) + beta * out` where `op` optionally transposes.
fn gemm(a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, out: &mut Matrix, beta: f64) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!(out.shape(), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.data.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: the strides above describe exactly the row-major buffers of
    // `a`, `b` and `out`, whose lengths match the checked (m, k, n) shapes,
    // and `out` is borrowed mutably so it cannot alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRowBroadcast(NodeId, NodeId),
    Relu(NodeId),
    Scale(NodeId, f64),
    ScaleBy(NodeId, NodeId),
    Exp(NodeId),
    SoftmaxRows(NodeId),
    MeanRows(NodeId),
    Outer3(NodeId, NodeId, NodeId),
    LogEps(NodeId, f64),
    ConstDot(NodeId, Matrix),
}

#[derive(Debug, Clone)]
struct NodeEntry {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<NodeEntry>,
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A trainable leaf; receives a gradient in [`Graph::backward`].
    pub fn parameter(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(NodeEntry {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Elementwise sum. `b` may also be a `1 x cols` row that is broadcast
    /// over every row of `a` (bias addition).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let rg = self.any_grad(&[a, b]);
        if sa == sb {
            let mut value = self.value(a).clone();
            value.add_assign(self.value(b));
            Ok(self.push(value, Op::Add(a, b), rg))
        } else if sb.0 == 1 && sb.1 == sa.1 {
            let mut value = self.value(a).clone();
            let bias = self.value(b).data().to_vec();
            for r in 0..sa.0 {
                for (v, bv) in value.row_mut(r).iter_mut().zip(&bias) {
                    *v += bv;
                }
            }
            Ok(self.push(value, Op::AddRowBroadcast(a, b), rg))
        } else {
            Err(TensorError::Shape {
                op: "add",
                left: sa,
                right: sb,
            })
        }
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Multiplies every entry of `x` by the 1x1 node `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let ss = self.value(s).shape();
        if ss != (1, 1) {
            return Err(TensorError::Shape {
                op: "scale_by",
                left: self.value(x).shape(),
                right: ss,
            });
        }
        let c = self.value(s).item();
        let value = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(value, Op::ScaleBy(x, s), rg))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::exp);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Exp(x), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, logits: NodeId) -> NodeId {
        let value = softmax_rows(self.value(logits));
        let rg = self.any_grad(&[logits]);
        self.push(value, Op::SoftmaxRows(logits), rg)
    }

    /// Column means, producing a `1 x cols` row.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let m = self.value(x);
        let mut out = vec![0.0; m.cols()];
        for r in 0..m.rows() {
            for (o, v) in out.iter_mut().zip(m.row(r)) {
                *o += v;
            }
        }
        let n = m.rows().max(1) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        let cols = m.cols();
        let rg = self.any_grad(&[x]);
        self.push(
            Matrix {
                rows: 1,
                cols,
                data: out,
            },
            Op::MeanRows(x),
            rg,
        )
    }

    /// Row-wise rank-3 outer product. For inputs of widths `k1, k2, k3`
    /// the output row has `k1*k2*k3` entries, entry `(i*k2 + j)*k3 + k`
    /// holding `p_i * q_j * r_k`.
    pub fn outer3(&mut self, p: NodeId, q: NodeId, r: NodeId) -> Result<NodeId> {
        let (pm, qm, rm) = (self.value(p), self.value(q), self.value(r));
        for other in [qm, rm] {
            if other.rows() != pm.rows() {
                return Err(TensorError::Shape {
                    op: "outer3",
                    left: pm.shape(),
                    right: other.shape(),
                });
            }
        }
        let (k1, k2, k3) = (pm.cols(), qm.cols(), rm.cols());
        let width = k1 * k2 * k3;
        let mut value = Matrix::zeros(pm.rows(), width);
        for b in 0..pm.rows() {
            let (pr, qr, rr) = (pm.row(b), qm.row(b), rm.row(b));
            let out = &mut value.data[b * width..(b + 1) * width];
            for i in 0..k1 {
                for j in 0..k2 {
                    let pq = pr[i] * qr[j];
                    let base = (i * k2 + j) * k3;
                    for k in 0..k3 {
                        out[base + k] = pq * rr[k];
                    }
                }
            }
        }
        let rg = self.any_grad(&[p, q, r]);
        Ok(self.push(value, Op::Outer3(p, q, r), rg))
    }

    /// `ln(x + eps)` elementwise.
    pub fn log_eps(&mut self, x: NodeId, eps: f64) -> NodeId {
        let value = self.value(x).map(|v| (v + eps).ln());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::LogEps(x, eps), rg)
    }

    /// Scalar `offset + sum(weights * x)` for a constant weight matrix of
    /// the same shape as `x`.
    pub fn const_dot(&mut self, x: NodeId, weights: Matrix, offset: f64) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(TensorError::Shape {
                op: "const_dot",
                left: xv.shape(),
                right: weights.shape(),
            });
        }
        let dot: f64 = xv.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Matrix::scalar(offset + dot), Op::ConstDot(x, weights), rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let (rows, cols) = self.value(loss).shape();
        if (rows, cols) != (1, 1) {
            return Err(TensorError::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match n.op {
                Op::Leaf if n.requires_grad => {
                    Some(g.unwrap_or_else(|| Matrix::zeros(n.value.rows, n.value.cols)))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut accumulate = |id: NodeId, delta: Matrix| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.requires_grad(a) {
                    let mut da = Matrix::zeros(av.rows, av.cols);
                    gemm(g, false, bv, true, &mut da, 0.0);
                    accumulate(a, da);
                }
                if self.requires_grad(b) {
                    let mut db = Matrix::zeros(bv.rows, bv.cols);
                    gemm(av, true, g, false, &mut db, 0.0);
                    accumulate(b, db);
                }
            }
            Op::Add(a, b) => {
                accumulate(a, g.clone());
                accumulate(b, g.clone());
            }
            Op::AddRowBroadcast(a, b) => {
                accumulate(a, g.clone());
                let mut db = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                accumulate(b, db);
            }
            Op::Relu(x) => {
                let xv = self.value(x);
                let mut dx = g.clone();
                for (d, &v) in dx.data.iter_mut().zip(&xv.data) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(x, dx);
            }
            Op::Scale(x, c) => accumulate(x, g.map(|v| v * c)),
            Op::ScaleBy(x, s) => {
                let c = self.value(s).item();
                accumulate(x, g.map(|v| v * c));
                let ds: f64 = g.data.iter().zip(&self.value(x).data).map(|(a, b)| a * b).sum();
                accumulate(s, Matrix::scalar(ds));
            }
            Op::Exp(x) => {
                let mut dx = g.clone();
                for (d, y) in dx.data.iter_mut().zip(&out.data) {
                    *d *= y;
                }
                accumulate(x, dx);
            }
            Op::SoftmaxRows(x) => {
                let mut dx = Matrix::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = y[c] * (gr[c] - dot);
                    }
                }
                accumulate(x, dx);
            }
            Op::MeanRows(x) => {
                let xv = self.value(x);
                let n = xv.rows.max(1) as f64;
                let mut dx = Matrix::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(0)) {
                        *d = v / n;
                    }
                }
                accumulate(x, dx);
            }
            Op::Outer3(p, q, r) => {
                let (pm, qm, rm) = (self.value(p), self.value(q), self.value(r));
                let (k1, k2, k3) = (pm.cols, qm.cols, rm.cols);
                let mut dp = Matrix::zeros(pm.rows, k1);
                let mut dq = Matrix::zeros(qm.rows, k2);
                let mut dr = Matrix::zeros(rm.rows, k3);
                for b in 0..pm.rows {
                    let (pr, qr, rr, gr) = (pm.row(b), qm.row(b), rm.row(b), g.row(b));
                    for i in 0..k1 {
                        for j in 0..k2 {
                            let base = (i * k2 + j) * k3;
                            let mut gr_dot_r = 0.0;
                            for k in 0..k3 {
                                let gv = gr[base + k];
                                gr_dot_r += gv * rr[k];
                                dr.data[b * k3 + k] += gv * pr[i] * qr[j];
                            }
                            dp.data[b * k1 + i] += gr_dot_r * qr[j];
                            dq.data[b * k2 + j] += gr_dot_r * pr[i];
                        }
                    }
                }
                accumulate(p, dp);
                accumulate(q, dq);
                accumulate(r, dr);
            }
            Op::LogEps(x, eps) => {
                let xv = self.value(x);
                let mut dx = g.clone();
                for (d, v) in dx.data.iter_mut().zip(&xv.data) {
                    *d /= v + eps;
                }
                accumulate(x, dx);
            }
            Op::ConstDot(x, ref w) => {
                let gs = g.item();
                accumulate(x, w.map(|v| v * gs));
            }
        }
    }
}

/// Gradients of a scalar with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Graph::parameter`]; `None` for
    /// constants and interior nodes.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

/// Numerically stable row-wise softmax on plain matrices.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}
