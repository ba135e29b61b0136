//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] is a tape: every op evaluates eagerly, records its inputs,
//! and [`Graph::backward`] replays the tape in reverse. Leaves wrap shared
//! parameter tensors (`Arc`) so staging a model onto a graph copies nothing.
//!
//! Gradients only flow where they are needed: a node participates in the
//! backward sweep iff one of its ancestors is a leaf with `requires_grad`,
//! which keeps the frozen backbone weights out of the weight-gradient GEMMs.

use std::sync::Arc;

use crate::mat::{Mat, Scalar};

/// Probability floor used when taking the log of a class probability.
pub const PROB_FLOOR: f64 = 1e-12;

/// Epsilon inside layer-norm variance.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

enum Op<T: Scalar> {
    Leaf,
    /// `op(a) @ op(b)` with optional transposes.
    Matmul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// `a + bias` where `bias` is `1 x n`, broadcast over the rows of `a`.
    AddRow {
        a: NodeId,
        bias: NodeId,
    },
    Scale {
        a: NodeId,
        alpha: T,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    SliceRows {
        a: NodeId,
        start: usize,
    },
    SliceCols {
        a: NodeId,
        start: usize,
    },
    Reshape {
        a: NodeId,
    },
    SoftmaxRows {
        a: NodeId,
    },
    /// Row-wise layer norm with affine parameters (`gamma`, `beta` are `1 x n`).
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Gelu {
        a: NodeId,
    },
    /// Rows rescaled to unit Euclidean norm.
    L2NormRows {
        a: NodeId,
    },
    MeanRows {
        a: NodeId,
    },
    SumCols {
        a: NodeId,
    },
    /// Input rows are a `grid x grid` patch map; output row `k` is the
    /// element-wise max over the patches of window `k` of a `w x w` tiling.
    WindowMaxPool {
        a: NodeId,
        grid: usize,
        w: usize,
    },
    GatherRows {
        table: NodeId,
        idx: Vec<usize>,
    },
    /// Fused scaled-dot-product multi-head attention over stacked items.
    /// `q` is `[items * tq, d]`, `k`/`v` are `[items * tk, d]`; each item and
    /// head attends independently. `attn` caches the softmax weights, one
    /// `tq x tk` block per (item, head) pair in row-major block order.
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        items: usize,
        scale: T,
        attn: Mat<T>,
    },
    /// Per-row negative log of the probability at the row's label column,
    /// with the probability clamped below at [`PROB_FLOOR`].
    NllRows {
        probs: NodeId,
        labels: Vec<usize>,
    },
    /// Per-row regression penalty between a column of predictions and fixed
    /// targets: smooth-L1 with parameter `beta`, or plain L1 when `plain`.
    SmoothL1Rows {
        pred: NodeId,
        targets: Vec<T>,
        beta: T,
        plain: bool,
    },
}

struct Node<T: Scalar> {
    value: Arc<Mat<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradient of a scalar output with respect to each graph node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient matrix for `id`, if any gradient reached it.
    pub fn get(&self, id: NodeId) -> Option<&Mat<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Mat<T>> {
        self.grads[id.0].take()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).shape()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Leaf over a shared tensor. No data is copied.
    pub fn leaf(&mut self, value: Arc<Mat<T>>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let v = self.value(a).matmul(ta, self.value(b), tb);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Matmul { a, b, ta, tb }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Add { a, b }, needs)
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(bias), (1, n), "add_row: bias must be 1x{}", n);
        let bias_row = self.value(bias).clone();
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            for (d, s) in v.row_mut(r).iter_mut().zip(bias_row.row(0)) {
                *d += *s;
            }
        }
        let needs = self.ng(a) || self.ng(bias);
        self.push(v, Op::AddRow { a, bias }, needs)
    }

    pub fn scale(&mut self, a: NodeId, alpha: T) -> NodeId {
        let v = self.value(a).map(|x| x * alpha);
        let needs = self.ng(a);
        self.push(v, Op::Scale { a, alpha }, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let vb = self.value(b).clone();
        let mut v = self.value(a).clone();
        for (d, s) in v.data_mut().iter_mut().zip(vb.data()) {
            *d *= *s;
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul { a, b }, needs)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let cols = self.shape(parts[0]).1;
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            assert_eq!(self.shape(p).1, cols, "concat_rows: column mismatch");
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(
            Mat::from_vec(rows, cols, data),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut col0 = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols: row mismatch");
            for r in 0..rows {
                out.row_mut(r)[col0..col0 + v.cols()].copy_from_slice(v.row(r));
            }
            col0 += v.cols();
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (rows, cols) = self.shape(a);
        assert!(start + len <= rows, "slice_rows: {}+{} > {}", start, len, rows);
        let src = self.value(a);
        let data = src.data()[start * cols..(start + len) * cols].to_vec();
        let needs = self.ng(a);
        self.push(Mat::from_vec(len, cols, data), Op::SliceRows { a, start }, needs)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (rows, cols) = self.shape(a);
        assert!(start + len <= cols, "slice_cols: {}+{} > {}", start, len, cols);
        let mut out = Mat::zeros(rows, len);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&self.value(a).row(r)[start..start + len]);
        }
        let needs = self.ng(a);
        self.push(out, Op::SliceCols { a, start }, needs)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.value(a).reshaped(rows, cols);
        let needs = self.ng(a);
        self.push(v, Op::Reshape { a }, needs)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut out = Mat::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            softmax_row(src.row(r), out.row_mut(r));
        }
        let needs = self.ng(a);
        self.push(out, Op::SoftmaxRows { a }, needs)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (_, n) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, n), "layer_norm: gamma must be 1x{}", n);
        assert_eq!(self.shape(beta), (1, n), "layer_norm: beta must be 1x{}", n);
        let src = self.value(x);
        let g = self.value(gamma).clone();
        let b = self.value(beta).clone();
        let mut out = Mat::zeros(src.rows(), n);
        for r in 0..src.rows() {
            let (xhat, _mu, sig) = normalize_row(src.row(r));
            let _ = sig;
            for c in 0..n {
                out.row_mut(r)[c] = g.row(0)[c] * xhat[c] + b.row(0)[c];
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta }, needs)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu_tanh);
        let needs = self.ng(a);
        self.push(v, Op::Gelu { a }, needs)
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut out = Mat::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            let norm = row_norm(src.row(r));
            for (o, &x) in out.row_mut(r).iter_mut().zip(src.row(r)) {
                *o = x / norm;
            }
        }
        let needs = self.ng(a);
        self.push(out, Op::L2NormRows { a }, needs)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let m = T::from_f64(src.rows() as f64);
        let mut out = Mat::zeros(1, src.cols());
        for r in 0..src.rows() {
            for (o, &x) in out.row_mut(0).iter_mut().zip(src.row(r)) {
                *o += x;
            }
        }
        for o in out.data_mut() {
            *o /= m;
        }
        let needs = self.ng(a);
        self.push(out, Op::MeanRows { a }, needs)
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut out = Mat::zeros(src.rows(), 1);
        for r in 0..src.rows() {
            let mut acc = T::zero();
            for &x in src.row(r) {
                acc += x;
            }
            out.set(r, 0, acc);
        }
        let needs = self.ng(a);
        self.push(out, Op::SumCols { a }, needs)
    }

    pub fn window_max_pool(&mut self, a: NodeId, grid: usize, w: usize) -> NodeId {
        let (rows, cols) = self.shape(a);
        assert_eq!(rows, grid * grid, "window_max_pool: rows != grid^2");
        assert!(w > 0 && grid % w == 0, "window_max_pool: grid {} not divisible by w {}", grid, w);
        let src = self.value(a);
        let mut out = Mat::zeros(w * w, cols);
        for win in 0..w * w {
            let dst = out.row_mut(win);
            for (k, p) in window_patches(grid, w, win).enumerate() {
                let row = src.row(p);
                if k == 0 {
                    dst.copy_from_slice(row);
                } else {
                    for (d, &x) in dst.iter_mut().zip(row) {
                        if x > *d {
                            *d = x;
                        }
                    }
                }
            }
        }
        let needs = self.ng(a);
        self.push(out, Op::WindowMaxPool { a, grid, w }, needs)
    }

    /// Multi-head attention: per item and head, `softmax(Q K^T / sqrt(dh)) V`
    /// where `dh = d / heads`. Inputs are projected queries/keys/values with
    /// `items` sequences stacked along rows; the output has the shape of `q`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, items: usize) -> NodeId {
        let (qr, d) = self.shape(q);
        let (kr, dk) = self.shape(k);
        let (vr, dv) = self.shape(v);
        assert!(d == dk && d == dv, "attention: operand widths differ");
        assert_eq!(kr, vr, "attention: key/value row mismatch");
        assert!(heads > 0 && d % heads == 0, "attention: heads must divide width");
        assert!(items > 0 && qr % items == 0 && kr % items == 0, "attention: rows not divisible by items");
        let tq = qr / items;
        let tk = kr / items;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let mut attn = Mat::zeros(items * heads * tq, tk);
        let mut out = Mat::zeros(qr, d);
        for i in 0..items {
            for h in 0..heads {
                let blk = (i * heads + h) * tq * tk;
                let q_off = i * tq * d + h * dh;
                let kv_off = i * tk * d + h * dh;
                T::gemm_view(
                    tq, dh, tk, scale,
                    vq.data(), q_off, d, 1,
                    vk.data(), kv_off, 1, d,
                    T::zero(), attn.data_mut(), blk, tk, 1,
                );
                for r in 0..tq {
                    softmax_in_place(&mut attn.data_mut()[blk + r * tk..blk + (r + 1) * tk]);
                }
                T::gemm_view(
                    tq, tk, dh, T::one(),
                    attn.data(), blk, tk, 1,
                    vv.data(), kv_off, d, 1,
                    T::zero(), out.data_mut(), q_off, d, 1,
                );
            }
        }
        let needs = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention { q, k, v, heads, items, scale, attn },
            needs,
        )
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let (rows, cols) = self.shape(table);
        let src = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < rows, "gather_rows: index {} out of {}", i, rows);
            data.extend_from_slice(src.row(i));
        }
        let needs = self.ng(table);
        self.push(
            Mat::from_vec(idx.len(), cols, data),
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            needs,
        )
    }

    pub fn nll_rows(&mut self, probs: NodeId, labels: &[usize]) -> NodeId {
        let (rows, cols) = self.shape(probs);
        assert_eq!(rows, labels.len(), "nll_rows: {} rows, {} labels", rows, labels.len());
        let floor = T::from_f64(PROB_FLOOR);
        let src = self.value(probs);
        let mut out = Mat::zeros(rows, 1);
        for (r, &lbl) in labels.iter().enumerate() {
            assert!(lbl < cols, "nll_rows: label {} out of {}", lbl, cols);
            let p = src.at(r, lbl).max(floor);
            out.set(r, 0, -p.ln());
        }
        let needs = self.ng(probs);
        self.push(
            out,
            Op::NllRows {
                probs,
                labels: labels.to_vec(),
            },
            needs,
        )
    }

    pub fn smooth_l1_rows(&mut self, pred: NodeId, targets: &[T], beta: T, plain: bool) -> NodeId {
        let (rows, cols) = self.shape(pred);
        assert_eq!(cols, 1, "smooth_l1_rows: predictions must be a column");
        assert_eq!(rows, targets.len(), "smooth_l1_rows: target count");
        let src = self.value(pred);
        let mut out = Mat::zeros(rows, 1);
        for r in 0..rows {
            let d = src.at(r, 0) - targets[r];
            out.set(r, 0, smooth_l1(d, beta, plain));
        }
        let needs = self.ng(pred);
        self.push(
            out,
            Op::SmoothL1Rows {
                pred,
                targets: targets.to_vec(),
                beta,
                plain,
            },
            needs,
        )
    }

    /// Backward from a `1x1` node, seeding with 1.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        assert_eq!(self.shape(root), (1, 1), "backward: root must be scalar");
        self.backward_seeded(vec![(root, Mat::scalar(T::one()))])
    }

    /// Backward with explicit output adjoints. Used to splice gradients
    /// across graphs: the adjoint of a value computed on another graph is
    /// injected here as a seed.
    pub fn backward_seeded(&self, seeds: Vec<(NodeId, Mat<T>)>) -> Gradients<T> {
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (id, seed) in seeds {
            assert_eq!(self.shape(id), seed.shape(), "backward seed shape");
            accumulate(&mut grads[id.0], &seed);
            top = top.max(id.0);
        }
        for i in (0..=top).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    // dA for C = op(A) @ op(B): undo the transposes.
                    let ga = grads_entry(grads, a.0, va.shape());
                    match (ta, tb) {
                        (false, false) => ga.gemm_acc(T::one(), g, false, vb, true),
                        (false, true) => ga.gemm_acc(T::one(), g, false, vb, false),
                        (true, false) => ga.gemm_acc(T::one(), vb, false, g, true),
                        (true, true) => ga.gemm_acc(T::one(), vb, true, g, true),
                    }
                }
                if self.ng(*b) {
                    let gb = grads_entry(grads, b.0, vb.shape());
                    match (ta, tb) {
                        (false, false) => gb.gemm_acc(T::one(), va, true, g, false),
                        (false, true) => gb.gemm_acc(T::one(), g, true, va, false),
                        (true, false) => gb.gemm_acc(T::one(), va, false, g, false),
                        (true, true) => gb.gemm_acc(T::one(), g, true, va, true),
                    }
                }
            }
            Op::Add { a, b } => {
                for &p in [a, b].into_iter() {
                    if self.ng(p) {
                        accumulate(&mut grads[p.0], g);
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.ng(*bias) {
                    let gb = grads_entry(grads, bias.0, (1, g.cols()));
                    for r in 0..g.rows() {
                        for (d, &s) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Scale { a, alpha } => {
                if self.ng(*a) {
                    let ga = grads_entry(grads, a.0, g.shape());
                    ga.axpy(*alpha, g);
                }
            }
            Op::Mul { a, b } => {
                if self.ng(*a) {
                    let vb = self.value(*b);
                    let ga = grads_entry(grads, a.0, g.shape());
                    for ((d, &gg), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *d += gg * x;
                    }
                }
                if self.ng(*b) {
                    let va = self.value(*a);
                    let gb = grads_entry(grads, b.0, g.shape());
                    for ((d, &gg), &x) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *d += gg * x;
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut row0 = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    if self.ng(p) {
                        let gp = grads_entry(grads, p.0, (pr, pc));
                        for r in 0..pr {
                            for (d, &s) in gp.row_mut(r).iter_mut().zip(g.row(row0 + r)) {
                                *d += s;
                            }
                        }
                    }
                    row0 += pr;
                }
            }
            Op::ConcatCols { parts } => {
                let mut col0 = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    if self.ng(p) {
                        let gp = grads_entry(grads, p.0, (pr, pc));
                        for r in 0..pr {
                            for (d, &s) in gp.row_mut(r).iter_mut().zip(&g.row(r)[col0..col0 + pc]) {
                                *d += s;
                            }
                        }
                    }
                    col0 += pc;
                }
            }
            Op::SliceRows { a, start } => {
                if self.ng(*a) {
                    let ga = grads_entry(grads, a.0, self.shape(*a));
                    for r in 0..g.rows() {
                        for (d, &s) in ga.row_mut(start + r).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if self.ng(*a) {
                    let ga = grads_entry(grads, a.0, self.shape(*a));
                    for r in 0..g.rows() {
                        for (d, &s) in ga.row_mut(r)[*start..start + g.cols()].iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if self.ng(*a) {
                    let (ar, ac) = self.shape(*a);
                    accumulate(&mut grads[a.0], &g.reshaped(ar, ac));
                }
            }
            Op::SoftmaxRows { a } => {
                if self.ng(*a) {
                    let y = &self.nodes[i].value;
                    let ga = grads_entry(grads, a.0, g.shape());
                    for r in 0..g.rows() {
                        let mut dot = T::zero();
                        for (&yy, &gg) in y.row(r).iter().zip(g.row(r)) {
                            dot += yy * gg;
                        }
                        for ((d, &yy), &gg) in ga.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *d += yy * (gg - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let vx = self.value(*x);
                let vg = self.value(*gamma);
                let n = vx.cols();
                let inv_n = T::one() / T::from_f64(n as f64);
                for r in 0..vx.rows() {
                    let (xhat, _mu, sig) = normalize_row(vx.row(r));
                    if self.ng(*gamma) || self.ng(*beta) {
                        if self.ng(*gamma) {
                            let gg = grads_entry(grads, gamma.0, (1, n));
                            for c in 0..n {
                                gg.row_mut(0)[c] += g.at(r, c) * xhat[c];
                            }
                        }
                        if self.ng(*beta) {
                            let gb = grads_entry(grads, beta.0, (1, n));
                            for c in 0..n {
                                gb.row_mut(0)[c] += g.at(r, c);
                            }
                        }
                    }
                    if self.ng(*x) {
                        // dx = (h - mean(h) - xhat * mean(h .* xhat)) / sigma
                        // where h = gamma .* dy.
                        let mut mean_h = T::zero();
                        let mut mean_hx = T::zero();
                        let mut h = vec![T::zero(); n];
                        for c in 0..n {
                            h[c] = vg.at(0, c) * g.at(r, c);
                            mean_h += h[c];
                            mean_hx += h[c] * xhat[c];
                        }
                        mean_h *= inv_n;
                        mean_hx *= inv_n;
                        let gx = grads_entry(grads, x.0, vx.shape());
                        for c in 0..n {
                            gx.row_mut(r)[c] += (h[c] - mean_h - xhat[c] * mean_hx) / sig;
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if self.ng(*a) {
                    let va = self.value(*a);
                    let ga = grads_entry(grads, a.0, g.shape());
                    for ((d, &x), &gg) in ga.data_mut().iter_mut().zip(va.data()).zip(g.data()) {
                        *d += gg * gelu_tanh_grad(x);
                    }
                }
            }
            Op::L2NormRows { a } => {
                if self.ng(*a) {
                    let va = self.value(*a);
                    let y = &self.nodes[i].value;
                    let ga = grads_entry(grads, a.0, g.shape());
                    for r in 0..g.rows() {
                        let norm = row_norm(va.row(r));
                        let mut dot = T::zero();
                        for (&yy, &gg) in y.row(r).iter().zip(g.row(r)) {
                            dot += yy * gg;
                        }
                        for ((d, &gg), &yy) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *d += (gg - yy * dot) / norm;
                        }
                    }
                }
            }
            Op::MeanRows { a } => {
                if self.ng(*a) {
                    let (m, n) = self.shape(*a);
                    let inv = T::one() / T::from_f64(m as f64);
                    let ga = grads_entry(grads, a.0, (m, n));
                    for r in 0..m {
                        for (d, &s) in ga.row_mut(r).iter_mut().zip(g.row(0)) {
                            *d += s * inv;
                        }
                    }
                }
            }
            Op::SumCols { a } => {
                if self.ng(*a) {
                    let (m, n) = self.shape(*a);
                    let ga = grads_entry(grads, a.0, (m, n));
                    for r in 0..m {
                        let gr = g.at(r, 0);
                        for d in ga.row_mut(r) {
                            *d += gr;
                        }
                    }
                }
            }
            Op::WindowMaxPool { a, grid, w } => {
                if self.ng(*a) {
                    let va = self.value(*a);
                    let cols = va.cols();
                    let ga = grads_entry(grads, a.0, va.shape());
                    for win in 0..w * w {
                        // Recompute the argmax per channel; first maximum in
                        // patch scan order wins, matching the forward pass.
                        for c in 0..cols {
                            let mut best_p = usize::MAX;
                            let mut best = T::neg_infinity();
                            for p in window_patches(*grid, *w, win) {
                                let x = va.at(p, c);
                                if best_p == usize::MAX || x > best {
                                    best = x;
                                    best_p = p;
                                }
                            }
                            ga.row_mut(best_p)[c] += g.at(win, c);
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                if self.ng(*table) {
                    let gt = grads_entry(grads, table.0, self.shape(*table));
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, &s) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::NllRows { probs, labels } => {
                if self.ng(*probs) {
                    let floor = T::from_f64(PROB_FLOOR);
                    let vp = self.value(*probs);
                    let gp = grads_entry(grads, probs.0, vp.shape());
                    for (r, &lbl) in labels.iter().enumerate() {
                        let p = vp.at(r, lbl);
                        if p >= floor {
                            gp.row_mut(r)[lbl] -= g.at(r, 0) / p;
                        }
                    }
                }
            }
            Op::SmoothL1Rows {
                pred,
                targets,
                beta,
                plain,
            } => {
                if self.ng(*pred) {
                    let vp = self.value(*pred);
                    let gp = grads_entry(grads, pred.0, vp.shape());
                    for (r, &t) in targets.iter().enumerate() {
                        let d = vp.at(r, 0) - t;
                        gp.row_mut(r)[0] += g.at(r, 0) * smooth_l1_grad(d, *beta, *plain);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                items,
                scale,
                attn,
            } => {
                let (items, heads, scale) = (*items, *heads, *scale);
                let (qr, d) = self.shape(*q);
                let tq = qr / items;
                let tk = self.shape(*k).0 / items;
                let dh = d / heads;
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (need_q, need_k, need_v) = (self.ng(*q), self.ng(*k), self.ng(*v));

                // dZ for the pre-softmax scores of every block, reused by the
                // dQ and dK passes. dz = scale * a .* (da - rowdot(da, a)).
                let mut dz = Mat::zeros(0, 0);
                if need_q || need_k {
                    dz = Mat::zeros(items * heads * tq, tk);
                    let mut da = vec![T::zero(); tk];
                    for i in 0..items {
                        for h in 0..heads {
                            let blk = (i * heads + h) * tq * tk;
                            let q_off = i * tq * d + h * dh;
                            let kv_off = i * tk * d + h * dh;
                            T::gemm_view(
                                tq, dh, tk, T::one(),
                                g.data(), q_off, d, 1,
                                vv.data(), kv_off, 1, d,
                                T::zero(), dz.data_mut(), blk, tk, 1,
                            );
                            for r in 0..tq {
                                let span = blk + r * tk..blk + (r + 1) * tk;
                                da.copy_from_slice(&dz.data()[span.clone()]);
                                let a_row = &attn.data()[span.clone()];
                                let mut dot = T::zero();
                                for (&aa, &dd) in a_row.iter().zip(&da) {
                                    dot += aa * dd;
                                }
                                for ((z, &aa), &dd) in
                                    dz.data_mut()[span].iter_mut().zip(a_row).zip(&da)
                                {
                                    *z = scale * aa * (dd - dot);
                                }
                            }
                        }
                    }
                }

                // Separate passes per operand keep the gradient buffers
                // disjoint even when q, k and v alias the same node.
                if need_v {
                    let gv = grads_entry(grads, v.0, vv.shape());
                    for i in 0..items {
                        for h in 0..heads {
                            let blk = (i * heads + h) * tq * tk;
                            T::gemm_view(
                                tk, tq, dh, T::one(),
                                attn.data(), blk, 1, tk,
                                g.data(), i * tq * d + h * dh, d, 1,
                                T::one(), gv.data_mut(), i * tk * d + h * dh, d, 1,
                            );
                        }
                    }
                }
                if need_q {
                    let gq = grads_entry(grads, q.0, vq.shape());
                    for i in 0..items {
                        for h in 0..heads {
                            let blk = (i * heads + h) * tq * tk;
                            T::gemm_view(
                                tq, tk, dh, T::one(),
                                dz.data(), blk, tk, 1,
                                vk.data(), i * tk * d + h * dh, d, 1,
                                T::one(), gq.data_mut(), i * tq * d + h * dh, d, 1,
                            );
                        }
                    }
                }
                if need_k {
                    let gk = grads_entry(grads, k.0, vk.shape());
                    for i in 0..items {
                        for h in 0..heads {
                            let blk = (i * heads + h) * tq * tk;
                            T::gemm_view(
                                tk, tq, dh, T::one(),
                                dz.data(), blk, 1, tk,
                                vq.data(), i * tq * d + h * dh, d, 1,
                                T::one(), gk.data_mut(), i * tk * d + h * dh, d, 1,
                            );
                        }
                    }
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Mat<T>>, g: &Mat<T>) {
    match slot {
        Some(m) => m.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}

fn grads_entry<'a, T: Scalar>(
    grads: &'a mut [Option<Mat<T>>],
    i: usize,
    shape: (usize, usize),
) -> &'a mut Mat<T> {
    grads[i].get_or_insert_with(|| Mat::zeros(shape.0, shape.1))
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mut mx = row[0];
    for &x in row.iter() {
        if x > mx {
            mx = x;
        }
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn softmax_row<T: Scalar>(src: &[T], dst: &mut [T]) {
    let mut mx = src[0];
    for &x in src {
        if x > mx {
            mx = x;
        }
    }
    let mut sum = T::zero();
    for (d, &x) in dst.iter_mut().zip(src) {
        *d = (x - mx).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

/// Row normalized to zero mean and unit variance; returns `(xhat, mu, sigma)`.
fn normalize_row<T: Scalar>(row: &[T]) -> (Vec<T>, T, T) {
    let n = T::from_f64(row.len() as f64);
    let mut mu = T::zero();
    for &x in row {
        mu += x;
    }
    mu /= n;
    let mut var = T::zero();
    for &x in row {
        var += (x - mu) * (x - mu);
    }
    var /= n;
    let sig = (var + T::from_f64(LAYER_NORM_EPS)).sqrt();
    (row.iter().map(|&x| (x - mu) / sig).collect(), mu, sig)
}

fn row_norm<T: Scalar>(row: &[T]) -> T {
    let mut acc = T::zero();
    for &x in row {
        acc += x * x;
    }
    acc.sqrt()
}

/// Patch-row indices covered by window `win` of a `w x w` tiling over a
/// `grid x grid` patch map (row-major both at the patch and window level).
fn window_patches(grid: usize, w: usize, win: usize) -> impl Iterator<Item = usize> {
    let cell = grid / w;
    let wr = win / w;
    let wc = win % w;
    (0..cell.pow(2)).map(move |k| {
        let pr = wr * cell + k / cell;
        let pc = wc * cell + k % cell;
        pr * grid + pc
    })
}

fn gelu_tanh<T: Scalar>(x: T) -> T {
    // tanh approximation of the Gaussian error linear unit
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_tanh_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

pub(crate) fn smooth_l1<T: Scalar>(d: T, beta: T, plain: bool) -> T {
    let ad = d.abs();
    if plain {
        ad
    } else if ad < beta {
        T::from_f64(0.5) * d * d / beta
    } else {
        ad - T::from_f64(0.5) * beta
    }
}

fn smooth_l1_grad<T: Scalar>(d: T, beta: T, plain: bool) -> T {
    if plain {
        if d > T::zero() {
            T::one()
        } else if d < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    } else if d.abs() < beta {
        d / beta
    } else if d > T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences against the analytic gradient for a
    /// scalar-valued function of several matrix inputs.
    fn fd_check(
        inputs: &[Mat<f64>],
        build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
        eps: f64,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .map(|m| g.leaf(Arc::new(m.clone()), true))
            .collect();
        let out = build(&mut g, &ids);
        let root = g.backward(out);
        for (ii, input) in inputs.iter().enumerate() {
            let analytic = root
                .get(ids[ii])
                .unwrap_or_else(|| panic!("input {} received no gradient", ii));
            for e in 0..input.len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<Mat<f64>> = inputs.to_vec();
                    perturbed[ii].data_mut()[e] += delta;
                    let mut g = Graph::new();
                    let ids: Vec<NodeId> = perturbed
                        .iter()
                        .map(|m| g.leaf(Arc::new(m.clone()), false))
                        .collect();
                    let out = build(&mut g, &ids);
                    g.value(out).item()
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data()[e];
                let denom = a.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (a - numeric).abs() / denom < tol,
                    "input {} elem {}: analytic {} vs numeric {}",
                    ii,
                    e,
                    a,
                    numeric
                );
            }
        }
    }

    fn mat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        // Cheap deterministic fill, away from kinks of max/abs.
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        Mat::from_fn(rows, cols, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        })
    }

    fn sum_all(g: &mut Graph<f64>, x: NodeId) -> NodeId {
        let col = g.sum_cols(x);
        let (rows, _) = g.shape(col);
        let row = g.reshape(col, 1, rows);
        g.sum_cols(row)
    }

    #[test]
    fn backward_matmul_all_transpose_combinations() {
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let a = if ta { mat(4, 3, 1) } else { mat(3, 4, 1) };
            let b = if tb { mat(5, 4, 2) } else { mat(4, 5, 2) };
            fd_check(
                &[a, b],
                |g, ids| {
                    let c = g.matmul_t(ids[0], ids[1], ta, tb);
                    let c2 = g.mul(c, c);
                    sum_all(g, c2)
                },
                1e-5,
                1e-7,
            );
        }
    }

    #[test]
    fn backward_elementwise_and_broadcast_ops() {
        fd_check(
            &[mat(3, 4, 3), mat(3, 4, 4), mat(1, 4, 5)],
            |g, ids| {
                let s = g.add(ids[0], ids[1]);
                let s = g.add_row(s, ids[2]);
                let s = g.scale(s, 0.7);
                let s = g.mul(s, ids[1]);
                sum_all(g, s)
            },
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn backward_softmax_gelu_l2norm() {
        fd_check(
            &[mat(3, 5, 6)],
            |g, ids| {
                let a = g.gelu(ids[0]);
                let a = g.softmax_rows(a);
                let a = g.l2_normalize_rows(a);
                let a = g.mul(a, a);
                sum_all(g, a)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn backward_layer_norm() {
        fd_check(
            &[mat(4, 6, 7), mat(1, 6, 8), mat(1, 6, 9)],
            |g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2]);
                let y = g.mul(y, y);
                sum_all(g, y)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn backward_concat_slice_reshape_gather() {
        fd_check(
            &[mat(2, 4, 10), mat(3, 4, 11), mat(5, 2, 12)],
            |g, ids| {
                let cat = g.concat_rows(&[ids[0], ids[1]]);
                let wide = g.concat_cols(&[cat, ids[2]]);
                let sl = g.slice_rows(wide, 1, 3);
                let sl = g.slice_cols(sl, 2, 3);
                let r = g.reshape(sl, 1, 9);
                let gathered = g.gather_rows(ids[2], &[0, 2, 2, 4]);
                let gs = sum_all(g, gathered);
                let rs = sum_all(g, r);
                let rs2 = g.mul(rs, rs);
                g.add(gs, rs2)
            },
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn backward_reductions_and_window_pool() {
        fd_check(
            &[mat(16, 3, 13)],
            |g, ids| {
                let pooled = g.window_max_pool(ids[0], 4, 2);
                let m = g.mean_rows(pooled);
                let m2 = g.mul(m, m);
                sum_all(g, m2)
            },
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn backward_nll_and_smooth_l1() {
        fd_check(
            &[mat(3, 4, 14), mat(3, 1, 15)],
            |g, ids| {
                let p = g.softmax_rows(ids[0]);
                let nll = g.nll_rows(p, &[2, 0, 3]);
                let nll = g.mean_rows(nll);
                let sl = g.smooth_l1_rows(ids[1], &[0.3, -2.0, 0.05], 1.0, false);
                let sl = g.mean_rows(sl);
                let sl = g.reshape(sl, 1, 1);
                let nll = g.reshape(nll, 1, 1);
                g.add(nll, sl)
            },
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn smooth_l1_reference_values() {
        // Quadratic branch at |d| = 0.5 with beta = 1, linear branch at |d| = 2.
        assert_eq!(smooth_l1(0.5, 1.0, false), 0.125);
        assert_eq!(smooth_l1(-0.5, 1.0, false), 0.125);
        assert_eq!(smooth_l1(2.0, 1.0, false), 1.5);
        assert_eq!(smooth_l1(-2.0, 1.0, false), 1.5);
        assert_eq!(smooth_l1(2.0, 1.0, true), 2.0);
        assert_eq!(smooth_l1(0.5, 1.0, true), 0.5);
    }

    #[test]
    fn nll_clamps_probabilities_at_floor() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Mat::from_vec(1, 2, vec![1.0, 0.0]));
        let nll = g.nll_rows(p, &[1]);
        assert_eq!(g.value(nll).item(), -PROB_FLOOR.ln());
    }

    #[test]
    fn window_pool_forward_matches_spec_layout() {
        // 6x6 grid pooled by a 2x2 tiling: window 0 must cover the top-left
        // 3x3 patch block.
        let grid = 6;
        let m = Mat::<f64>::from_fn(36, 1, |r, _| r as f64);
        let mut g = Graph::new();
        let id = g.constant(m);
        let pooled = g.window_max_pool(id, grid, 2);
        assert_eq!(g.shape(pooled), (4, 1));
        // Top-left window covers patch rows {0,1,2,6,7,8,12,13,14}; max 14.
        assert_eq!(g.value(pooled).at(0, 0), 14.0);
        assert_eq!(g.value(pooled).at(3, 0), 35.0);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let frozen = g.leaf(Arc::new(mat(2, 2, 20)), false);
        let live = g.leaf(Arc::new(mat(2, 2, 21)), true);
        let prod = g.matmul(frozen, live);
        let loss = sum_all(&mut g, prod);
        let grads = g.backward(loss);
        assert!(grads.get(frozen).is_none());
        assert!(grads.get(live).is_some());
    }

    /// Attention assembled from slice, matmul, softmax and concat nodes.
    fn naive_attention(
        g: &mut Graph<f64>,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        items: usize,
    ) -> NodeId {
        let (qr, d) = g.shape(q);
        let (kr, _) = g.shape(k);
        let (tq, tk, dh) = (qr / items, kr / items, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut per_item = Vec::new();
        for i in 0..items {
            let qi = g.slice_rows(q, i * tq, tq);
            let ki = g.slice_rows(k, i * tk, tk);
            let vi = g.slice_rows(v, i * tk, tk);
            let mut per_head = Vec::new();
            for h in 0..heads {
                let qh = g.slice_cols(qi, h * dh, dh);
                let kh = g.slice_cols(ki, h * dh, dh);
                let vh = g.slice_cols(vi, h * dh, dh);
                let s = g.matmul_t(qh, kh, false, true);
                let s = g.scale(s, scale);
                let a = g.softmax_rows(s);
                per_head.push(g.matmul(a, vh));
            }
            per_item.push(g.concat_cols(&per_head));
        }
        g.concat_rows(&per_item)
    }

    #[test]
    fn fused_attention_matches_naive_composition() {
        let (heads, items, tq, tk, d) = (2, 2, 3, 5, 4);
        let inputs = [mat(items * tq, d, 30), mat(items * tk, d, 31), mat(items * tk, d, 32)];
        let run = |fused: bool| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = inputs
                .iter()
                .map(|m| g.leaf(Arc::new(m.clone()), true))
                .collect();
            let out = if fused {
                g.attention(ids[0], ids[1], ids[2], heads, items)
            } else {
                naive_attention(&mut g, ids[0], ids[1], ids[2], heads, items)
            };
            let sq = g.mul(out, out);
            let loss = sum_all(&mut g, sq);
            let grads = g.backward(loss);
            let value = g.value(out).clone();
            let gs: Vec<Mat<f64>> = ids.iter().map(|&id| grads.get(id).unwrap().clone()).collect();
            (value, gs)
        };
        let (fv, fg) = run(true);
        let (nv, ng) = run(false);
        assert!(fv.max_abs_diff(&nv) < 1e-12, "forward mismatch {}", fv.max_abs_diff(&nv));
        for (a, b) in fg.iter().zip(&ng) {
            assert!(a.max_abs_diff(b) < 1e-12, "gradient mismatch {}", a.max_abs_diff(b));
        }
    }

    #[test]
    fn backward_fused_attention_finite_difference() {
        // Self-attention shares one node across q, k and v; cross-attention
        // keeps them distinct. Both must survive an FD check.
        fd_check(
            &[mat(4, 6, 33)],
            |g, ids| {
                let out = g.attention(ids[0], ids[0], ids[0], 3, 2);
                let sq = g.mul(out, out);
                sum_all(g, sq)
            },
            1e-5,
            1e-6,
        );
        fd_check(
            &[mat(4, 6, 34), mat(6, 6, 35), mat(6, 6, 36)],
            |g, ids| {
                let out = g.attention(ids[0], ids[1], ids[2], 2, 2);
                let sq = g.mul(out, out);
                sum_all(g, sq)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn fused_attention_skips_frozen_inputs() {
        let mut g = Graph::<f64>::new();
        let q = g.leaf(Arc::new(mat(3, 4, 37)), true);
        let k = g.leaf(Arc::new(mat(5, 4, 38)), false);
        let v = g.leaf(Arc::new(mat(5, 4, 39)), false);
        let out = g.attention(q, k, v, 2, 1);
        let loss = sum_all(&mut g, out);
        let grads = g.backward(loss);
        assert!(grads.get(q).is_some());
        assert!(grads.get(k).is_none());
        assert!(grads.get(v).is_none());
    }
}
