//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Sequences of tokens
//! are stored as stacked rows; operations that mix rows (attention, pooling)
//! take a segment length so that many independent sequences of equal length
//! share one matrix. Parameters are borrowed, never copied, and their
//! gradients are collected by parameter id after [`Tape::backward`].

use alloc::vec;
use alloc::vec::Vec;

use crate::geom::{chamfer_l2_grad, Point};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_points(points: &[Point]) -> Self {
        let data = points.iter().flat_map(|p| p.iter().copied()).collect();
        Self::from_vec(points.len(), 3, data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn argmax_row(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}

/// `c (m x n) = beta * c + a' * b'` where `a'` is `a` (m x k) or the transpose
/// of a stored (k x m) matrix, and likewise for `b'`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the slices whose lengths were checked
    // above; `c` does not alias `a` or `b` because it is a unique borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Matrix),
    Borrowed(&'p Matrix),
}

impl Value<'_> {
    fn get(&self) -> &Matrix {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { qkv: Var, seg: usize, heads: usize, probs: Vec<f64> },
    SegMax { x: Var, argmax: Vec<usize> },
    SegMean { x: Var, seg: usize },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    Gather { x: Var, idx: Vec<usize> },
    Reshape(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64>, batch_stats: bool },
    Dropout { x: Var, keep: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Chamfer { pred: Var, grad: Vec<f64> },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: Vec<(usize, Var)>,
    grads: Vec<Option<Matrix>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.nodes[v.0].value.get()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is propagated into it.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Input leaf whose gradient is retained (used by gradient checks).
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Borrowed parameter tensor with identifier `id`.
    pub fn param(&mut self, id: usize, m: &'p Matrix) -> Var {
        self.nodes.push(Node { value: Value::Borrowed(m), op: Op::Leaf, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.push((id, v));
        v
    }

    /// Borrowed tensor that is treated as a constant.
    pub fn frozen(&mut self, m: &'p Matrix) -> Var {
        self.nodes.push(Node { value: Value::Borrowed(m), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (a, b) = (self.value(x), self.value(w));
        assert_eq!(a.cols, b.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(a.rows, b.cols);
        gemm(a.rows, a.cols, b.cols, &a.data, false, &b.data, false, 0.0, &mut out.data);
        let ng = self.ng(x) || self.ng(w);
        self.push(out, Op::MatMul(x, w), ng)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (a, bias) = (self.value(x), self.value(b));
        assert_eq!(bias.len(), a.cols, "bias width");
        let mut out = a.clone();
        for r in 0..out.rows {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddBias(x, b), ng)
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn add(&mut self, x: Var, y: Var) -> Var {
        let (a, b) = (self.value(x), self.value(y));
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "add shapes");
        let mut out = a.clone();
        out.add_assign(b);
        let ng = self.ng(x) || self.ng(y);
        self.push(out, Op::Add(x, y), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = gelu(*v));
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let a = self.value(x);
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let (rows, cols) = (a.rows, a.cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = a.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / libm::sqrt(var + LN_EPS);
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// Multi-head self-attention over consecutive row segments of length
    /// `seg`. `qkv` holds `[q | k | v]` column blocks of equal width.
    pub fn attention(&mut self, qkv: Var, seg: usize, heads: usize) -> Var {
        let a = self.value(qkv);
        assert!(a.cols.is_multiple_of(3) && seg > 0 && a.rows.is_multiple_of(seg), "attention shapes");
        let d = a.cols / 3;
        assert_eq!(d % heads, 0, "heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let nseg = a.rows / seg;
        let mut out = Matrix::zeros(a.rows, d);
        let mut probs = vec![0.0; nseg * heads * seg * seg];
        let w = a.cols;
        for s in 0..nseg {
            let base = s * seg;
            for h in 0..heads {
                let p = &mut probs[(s * heads + h) * seg * seg..][..seg * seg];
                for i in 0..seg {
                    let q = &a.data[(base + i) * w + h * dh..][..dh];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..seg {
                        let k = &a.data[(base + j) * w + d + h * dh..][..dh];
                        let sc = q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>() * scale;
                        p[i * seg + j] = sc;
                        mx = mx.max(sc);
                    }
                    let mut z = 0.0;
                    for j in 0..seg {
                        let e = libm::exp(p[i * seg + j] - mx);
                        p[i * seg + j] = e;
                        z += e;
                    }
                    let o = &mut out.data[(base + i) * d + h * dh..][..dh];
                    for j in 0..seg {
                        let pij = p[i * seg + j] / z;
                        p[i * seg + j] = pij;
                        let v = &a.data[(base + j) * w + 2 * d + h * dh..][..dh];
                        for (oo, vv) in o.iter_mut().zip(v) {
                            *oo += pij * vv;
                        }
                    }
                }
            }
        }
        let ng = self.ng(qkv);
        self.push(out, Op::Attention { qkv, seg, heads, probs }, ng)
    }

    /// Column-wise max over consecutive row segments; ties go to the first row.
    pub fn seg_max(&mut self, x: Var, seg: usize) -> Var {
        let a = self.value(x);
        assert!(seg > 0 && a.rows.is_multiple_of(seg), "seg_max shapes");
        let nseg = a.rows / seg;
        let mut out = Matrix::zeros(nseg, a.cols);
        let mut argmax = vec![0usize; nseg * a.cols];
        for s in 0..nseg {
            for c in 0..a.cols {
                let mut best = s * seg;
                for r in s * seg + 1..(s + 1) * seg {
                    if a.get(r, c) > a.get(best, c) {
                        best = r;
                    }
                }
                argmax[s * a.cols + c] = best;
                out.data[s * a.cols + c] = a.get(best, c);
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::SegMax { x, argmax }, ng)
    }

    pub fn seg_mean(&mut self, x: Var, seg: usize) -> Var {
        let a = self.value(x);
        assert!(seg > 0 && a.rows.is_multiple_of(seg), "seg_mean shapes");
        let nseg = a.rows / seg;
        let mut out = Matrix::zeros(nseg, a.cols);
        let inv = 1.0 / seg as f64;
        for r in 0..a.rows {
            let s = r / seg;
            for c in 0..a.cols {
                out.data[s * a.cols + c] += a.get(r, c) * inv;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::SegMean { x, seg }, ng)
    }

    pub fn concat_cols(&mut self, x: Var, y: Var) -> Var {
        let (a, b) = (self.value(x), self.value(y));
        assert_eq!(a.rows, b.rows, "concat_cols rows");
        let mut out = Matrix::zeros(a.rows, a.cols + b.cols);
        for r in 0..a.rows {
            out.row_mut(r)[..a.cols].copy_from_slice(a.row(r));
            out.row_mut(r)[a.cols..].copy_from_slice(b.row(r));
        }
        let ng = self.ng(x) || self.ng(y);
        self.push(out, Op::ConcatCols(x, y), ng)
    }

    pub fn concat_rows(&mut self, x: Var, y: Var) -> Var {
        let (a, b) = (self.value(x), self.value(y));
        assert_eq!(a.cols, b.cols, "concat_rows cols");
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        let out = Matrix::from_vec(a.rows + b.rows, a.cols, data);
        let ng = self.ng(x) || self.ng(y);
        self.push(out, Op::ConcatRows(x, y), ng)
    }

    /// Rows of `x` selected (with repetition allowed) by `idx`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let a = self.value(x);
        let mut out = Matrix::zeros(idx.len(), a.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(a.row(i));
        }
        let ng = self.ng(x);
        self.push(out, Op::Gather { x, idx }, ng)
    }

    /// Row-major reinterpretation with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let a = self.value(x);
        assert_eq!(a.len(), rows * cols, "reshape size");
        let out = Matrix::from_vec(rows, cols, a.data.clone());
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng)
    }

    /// Batch normalization over rows using the batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BatchStats) {
        let a = self.value(x);
        let (rows, cols) = (a.rows, a.cols);
        let mut mean = vec![0.0; cols];
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                mean[c] += a.get(r, c) / rows as f64;
            }
        }
        for r in 0..rows {
            for c in 0..cols {
                let d = a.get(r, c) - mean[c];
                var[c] += d * d / rows as f64;
            }
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
        let unbiased = if rows > 1 {
            var.iter().map(|v| v * rows as f64 / (rows - 1) as f64).collect()
        } else {
            var.clone()
        };
        let stats = BatchStats { mean: mean.clone(), var: unbiased };
        let v = self.bn_apply(x, gamma, beta, &mean, rstd, true);
        (v, stats)
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, running_mean: &[f64], running_var: &[f64]) -> Var {
        let rstd = running_var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
        self.bn_apply(x, gamma, beta, running_mean, rstd, false)
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], rstd: Vec<f64>, batch_stats: bool) -> Var {
        let a = self.value(x);
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let (rows, cols) = (a.rows, a.cols);
        assert_eq!(mean.len(), cols, "batch norm width");
        let mut out = Matrix::zeros(rows, cols);
        let mut xhat = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let h = (a.get(r, c) - mean[c]) * rstd[c];
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::BatchNorm { x, gamma, beta, xhat, rstd, batch_stats }, ng)
    }

    /// Multiply by a fixed keep-mask (already scaled by `1 / (1 - p)`).
    pub fn dropout(&mut self, x: Var, keep: Vec<f64>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(keep.len(), out.len(), "dropout mask length");
        for (o, k) in out.data.iter_mut().zip(&keep) {
            *o *= k;
        }
        let ng = self.ng(x);
        self.push(out, Op::Dropout { x, keep }, ng)
    }

    /// Mean softmax cross-entropy over rows.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let a = self.value(logits);
        assert_eq!(a.rows, labels.len(), "one label per row");
        let mut probs = vec![0.0; a.len()];
        let mut loss = 0.0;
        for r in 0..a.rows {
            let row = a.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| libm::exp(v - mx)).sum();
            for c in 0..a.cols {
                probs[r * a.cols + c] = libm::exp(row[c] - mx) / z;
            }
            loss += -(row[labels[r]] - mx - libm::log(z));
        }
        loss /= a.rows as f64;
        let ng = self.ng(logits);
        self.push(Matrix::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, ng)
    }

    /// Mean over segments of the Chamfer distance between each segment of
    /// `pred` (rows of 3 coordinates) and the matching segment of `target`.
    pub fn chamfer(&mut self, pred: Var, target: &[Point], seg_pred: usize, seg_target: usize) -> Var {
        let a = self.value(pred);
        assert_eq!(a.cols, 3, "chamfer expects xyz rows");
        assert!(seg_pred > 0 && a.rows.is_multiple_of(seg_pred), "chamfer segments");
        let nseg = a.rows / seg_pred;
        assert_eq!(target.len(), nseg * seg_target, "chamfer target length");
        let pts: Vec<Point> = (0..a.rows).map(|r| [a.get(r, 0), a.get(r, 1), a.get(r, 2)]).collect();
        let mut grad = vec![0.0; a.len()];
        let mut total = 0.0;
        let inv = 1.0 / nseg as f64;
        for s in 0..nseg {
            let p = &pts[s * seg_pred..(s + 1) * seg_pred];
            let t = &target[s * seg_target..(s + 1) * seg_target];
            let (v, gp, _) = chamfer_l2_grad(p, t).expect("segments are non-empty");
            total += v;
            for (i, g) in gp.iter().enumerate() {
                for c in 0..3 {
                    grad[(s * seg_pred + i) * 3 + c] = g[c] * inv;
                }
            }
        }
        let ng = self.ng(pred);
        self.push(Matrix::scalar(total * inv), Op::Chamfer { pred, grad }, ng)
    }

    fn acc(&mut self, v: Var, g: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        if let Some(existing) = &mut self.grads[v.0] {
            existing.add_assign(&g);
        } else {
            self.grads[v.0] = Some(g);
        }
    }

    /// Back-propagate from scalar `root` (seed 1).
    pub fn backward(&mut self, root: Var) {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let seed = {
            let v = self.value(root);
            let mut m = Matrix::zeros(v.rows, v.cols);
            m.data.iter_mut().for_each(|x| *x = 1.0);
            m
        };
        self.grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn backward_node(&mut self, i: usize, g: &Matrix) {
        // Each arm computes parent gradients from immutable borrows, then
        // accumulates them.
        let mut pending: Vec<(Var, Matrix)> = Vec::new();
        {
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(x, w) => {
                    let (a, b) = (self.value(*x), self.value(*w));
                    if self.ng(*x) {
                        let mut dx = Matrix::zeros(a.rows, a.cols);
                        gemm(a.rows, b.cols, a.cols, &g.data, false, &b.data, true, 0.0, &mut dx.data);
                        pending.push((*x, dx));
                    }
                    if self.ng(*w) {
                        let mut dw = Matrix::zeros(b.rows, b.cols);
                        gemm(a.cols, a.rows, b.cols, &a.data, true, &g.data, false, 0.0, &mut dw.data);
                        pending.push((*w, dw));
                    }
                }
                Op::AddBias(x, b) => {
                    if self.ng(*b) {
                        let bias = self.value(*b);
                        let mut db = Matrix::zeros(bias.rows, bias.cols);
                        for r in 0..g.rows {
                            for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        pending.push((*b, db));
                    }
                    pending.push((*x, g.clone()));
                }
                Op::Add(x, y) => {
                    pending.push((*x, g.clone()));
                    pending.push((*y, g.clone()));
                }
                Op::Scale(x, s) => {
                    let mut d = g.clone();
                    d.data.iter_mut().for_each(|v| *v *= s);
                    pending.push((*x, d));
                }
                Op::Relu(x) => {
                    let a = self.value(*x);
                    let mut d = g.clone();
                    for (dv, &xv) in d.data.iter_mut().zip(&a.data) {
                        if xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    pending.push((*x, d));
                }
                Op::Gelu(x) => {
                    let a = self.value(*x);
                    let mut d = g.clone();
                    for (dv, &xv) in d.data.iter_mut().zip(&a.data) {
                        *dv *= gelu_grad(xv);
                    }
                    pending.push((*x, d));
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let gm = &self.value(*gamma).data;
                    let (rows, cols) = (g.rows, g.cols);
                    let mut dgamma = Matrix::zeros(1, cols);
                    let mut dbeta = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..cols {
                            dgamma.data[c] += gr[c] * xh[c];
                            dbeta.data[c] += gr[c];
                            let dxh = gr[c] * gm[c];
                            s1 += dxh;
                            s2 += dxh * xh[c];
                        }
                        let n = cols as f64;
                        for c in 0..cols {
                            let dxh = gr[c] * gm[c];
                            dx.data[r * cols + c] = rstd[r] * (dxh - s1 / n - xh[c] * s2 / n);
                        }
                    }
                    pending.push((*x, dx));
                    pending.push((*gamma, dgamma));
                    pending.push((*beta, dbeta));
                }
                Op::Attention { qkv, seg, heads, probs } => {
                    let (seg, heads) = (*seg, *heads);
                    let a = self.value(*qkv);
                    let w = a.cols;
                    let d = w / 3;
                    let dh = d / heads;
                    let scale = 1.0 / libm::sqrt(dh as f64);
                    let nseg = a.rows / seg;
                    let mut dq = Matrix::zeros(a.rows, w);
                    let mut dp = vec![0.0; seg * seg];
                    for s in 0..nseg {
                        let base = s * seg;
                        for h in 0..heads {
                            let p = &probs[(s * heads + h) * seg * seg..][..seg * seg];
                            // dV = P^T dO ; dP = dO V^T
                            for i in 0..seg {
                                let go = &g.data[(base + i) * d + h * dh..][..dh];
                                for j in 0..seg {
                                    let v = &a.data[(base + j) * w + 2 * d + h * dh..][..dh];
                                    dp[i * seg + j] = go.iter().zip(v).map(|(x, y)| x * y).sum();
                                    let pij = p[i * seg + j];
                                    let dv = &mut dq.data[(base + j) * w + 2 * d + h * dh..][..dh];
                                    for (dvv, gg) in dv.iter_mut().zip(go) {
                                        *dvv += pij * gg;
                                    }
                                }
                            }
                            // dS = P * (dP - rowsum(dP * P))
                            for i in 0..seg {
                                let dot: f64 = (0..seg).map(|j| dp[i * seg + j] * p[i * seg + j]).sum();
                                for j in 0..seg {
                                    dp[i * seg + j] = p[i * seg + j] * (dp[i * seg + j] - dot) * scale;
                                }
                            }
                            for i in 0..seg {
                                for j in 0..seg {
                                    let ds = dp[i * seg + j];
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    for t in 0..dh {
                                        let k = a.data[(base + j) * w + d + h * dh + t];
                                        let q = a.data[(base + i) * w + h * dh + t];
                                        dq.data[(base + i) * w + h * dh + t] += ds * k;
                                        dq.data[(base + j) * w + d + h * dh + t] += ds * q;
                                    }
                                }
                            }
                        }
                    }
                    pending.push((*qkv, dq));
                }
                Op::SegMax { x, argmax } => {
                    let a = self.value(*x);
                    let mut d = Matrix::zeros(a.rows, a.cols);
                    for (o, &r) in argmax.iter().enumerate() {
                        let c = o % a.cols;
                        d.data[r * a.cols + c] += g.data[o];
                    }
                    pending.push((*x, d));
                }
                Op::SegMean { x, seg } => {
                    let a = self.value(*x);
                    let mut d = Matrix::zeros(a.rows, a.cols);
                    let inv = 1.0 / *seg as f64;
                    for r in 0..a.rows {
                        let s = r / seg;
                        for c in 0..a.cols {
                            d.data[r * a.cols + c] = g.data[s * a.cols + c] * inv;
                        }
                    }
                    pending.push((*x, d));
                }
                Op::ConcatCols(x, y) => {
                    let ca = self.value(*x).cols;
                    let cb = self.value(*y).cols;
                    let mut da = Matrix::zeros(g.rows, ca);
                    let mut db = Matrix::zeros(g.rows, cb);
                    for r in 0..g.rows {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    pending.push((*x, da));
                    pending.push((*y, db));
                }
                Op::ConcatRows(x, y) => {
                    let ra = self.value(*x).rows;
                    let split = ra * g.cols;
                    pending.push((*x, Matrix::from_vec(ra, g.cols, g.data[..split].to_vec())));
                    pending.push((*y, Matrix::from_vec(g.rows - ra, g.cols, g.data[split..].to_vec())));
                }
                Op::Gather { x, idx } => {
                    let a = self.value(*x);
                    let mut d = Matrix::zeros(a.rows, a.cols);
                    for (o, &r) in idx.iter().enumerate() {
                        for (dv, gv) in d.row_mut(r).iter_mut().zip(g.row(o)) {
                            *dv += gv;
                        }
                    }
                    pending.push((*x, d));
                }
                Op::Reshape(x) => {
                    let a = self.value(*x);
                    pending.push((*x, Matrix::from_vec(a.rows, a.cols, g.data.clone())));
                }
                Op::BatchNorm { x, gamma, beta, xhat, rstd, batch_stats } => {
                    let gm = &self.value(*gamma).data;
                    let (rows, cols) = (g.rows, g.cols);
                    let mut dgamma = Matrix::zeros(1, cols);
                    let mut dbeta = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dgamma.data[c] += g.get(r, c) * xhat[r * cols + c];
                            dbeta.data[c] += g.get(r, c);
                        }
                    }
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = rows as f64;
                    for c in 0..cols {
                        for r in 0..rows {
                            let dxh = g.get(r, c) * gm[c];
                            dx.data[r * cols + c] = if *batch_stats {
                                rstd[c] * (dxh - dbeta.data[c] * gm[c] / n - xhat[r * cols + c] * dgamma.data[c] * gm[c] / n)
                            } else {
                                rstd[c] * dxh
                            };
                        }
                    }
                    pending.push((*x, dx));
                    pending.push((*gamma, dgamma));
                    pending.push((*beta, dbeta));
                }
                Op::Dropout { x, keep } => {
                    let mut d = g.clone();
                    for (dv, k) in d.data.iter_mut().zip(keep) {
                        *dv *= k;
                    }
                    pending.push((*x, d));
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let a = self.value(*logits);
                    let s = g.data[0] / a.rows as f64;
                    let mut d = Matrix::from_vec(a.rows, a.cols, probs.clone());
                    for (r, &l) in labels.iter().enumerate() {
                        d.data[r * a.cols + l] -= 1.0;
                    }
                    d.data.iter_mut().for_each(|v| *v *= s);
                    pending.push((*logits, d));
                }
                Op::Chamfer { pred, grad } => {
                    let a = self.value(*pred);
                    let s = g.data[0];
                    pending.push((*pred, Matrix::from_vec(a.rows, a.cols, grad.iter().map(|v| v * s).collect())));
                }
            }
        }
        for (v, d) in pending {
            self.acc(v, d);
        }
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients keyed by parameter id. Ids used more than once have
    /// their gradients summed.
    pub fn param_grads(&self) -> Vec<(usize, Matrix)> {
        let mut out: Vec<(usize, Matrix)> = Vec::new();
        for &(id, v) in &self.params {
            if let Some(g) = self.grad(v) {
                match out.iter_mut().find(|(i, _)| *i == id) {
                    Some((_, m)) => m.add_assign(g),
                    None => out.push((id, g.clone())),
                }
            }
        }
        out
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
