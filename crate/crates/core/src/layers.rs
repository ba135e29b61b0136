//! Transformer building blocks shared by the text encoder, the vision
//! encoder and the multi-modal decoder: parameter containers, graph staging
//! and forward builders.
//!
//! Weight convention: a linear map is `x @ w + b` with `w: [d_in, d_out]`
//! and `b: [1, d_out]`. Batches are stacked along rows; `items` tells the
//! attention builders how many independent sequences a matrix contains.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::mat::{Mat, Scalar};
use crate::rng;

/// Shared parameter tensor. Graph leaves alias these without copying.
pub type Shared<T> = Arc<Mat<T>>;

/// Gaussian-initialized parameter with per-element draws taken in f64, so
/// models built at different precisions from the same seed agree.
pub fn randn<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Shared<T> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(T::from_f64(rng::normal(rng) * std));
    }
    Arc::new(Mat::from_vec(rows, cols, data))
}

pub fn zeros<T: Scalar>(rows: usize, cols: usize) -> Shared<T> {
    Arc::new(Mat::zeros(rows, cols))
}

pub fn ones<T: Scalar>(rows: usize, cols: usize) -> Shared<T> {
    Arc::new(Mat::from_fn(rows, cols, |_, _| T::one()))
}

/// Name-to-node mapping of every parameter staged onto a graph.
#[derive(Default)]
pub struct Binder {
    entries: Vec<(String, NodeId)>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        name: String,
        p: &Shared<T>,
        trainable: bool,
    ) -> NodeId {
        let id = g.leaf(p.clone(), trainable);
        self.entries.push((name, id));
        id
    }

    pub fn entries(&self) -> &[(String, NodeId)] {
        &self.entries
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
    }
}

/// Visitor over named parameter tensors. `visit` walks immutable refs,
/// `visit_mut` mutable ones; both enumerate tensors in a fixed order.
macro_rules! visit_fields {
    ($self:ident, $prefix:ident, $f:ident, [$($field:ident),+]) => {
        $( $f(format!("{}.{}", $prefix, stringify!($field)), &$self.$field); )+
    };
}

macro_rules! visit_fields_mut {
    ($self:ident, $prefix:ident, $f:ident, [$($field:ident),+]) => {
        $( $f(format!("{}.{}", $prefix, stringify!($field)), &mut $self.$field); )+
    };
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct LayerNormParams<T: Scalar> {
    pub gamma: Shared<T>,
    pub beta: Shared<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn init(dim: usize) -> Self {
        LayerNormParams {
            gamma: ones(1, dim),
            beta: zeros(1, dim),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LayerNormParams<U> {
        LayerNormParams {
            gamma: Arc::new(self.gamma.cast()),
            beta: Arc::new(self.beta.cast()),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Shared<T>)) {
        visit_fields!(self, prefix, f, [gamma, beta]);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Shared<T>)) {
        visit_fields_mut!(self, prefix, f, [gamma, beta]);
    }
}

pub struct StagedLn {
    pub gamma: NodeId,
    pub beta: NodeId,
}

pub fn stage_ln<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder,
    prefix: &str,
    ln: &LayerNormParams<T>,
    trainable: bool,
) -> StagedLn {
    StagedLn {
        gamma: b.bind(g, format!("{prefix}.gamma"), &ln.gamma, trainable),
        beta: b.bind(g, format!("{prefix}.beta"), &ln.beta, trainable),
    }
}

pub fn ln_forward<T: Scalar>(g: &mut Graph<T>, x: NodeId, ln: &StagedLn) -> NodeId {
    g.layer_norm(x, ln.gamma, ln.beta)
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct AttnParams<T: Scalar> {
    pub wq: Shared<T>,
    pub bq: Shared<T>,
    pub wk: Shared<T>,
    pub bk: Shared<T>,
    pub wv: Shared<T>,
    pub bv: Shared<T>,
    pub wo: Shared<T>,
    pub bo: Shared<T>,
}

impl<T: Scalar> AttnParams<T> {
    pub fn init(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        AttnParams {
            wq: randn(rng, dim, dim, std),
            bq: zeros(1, dim),
            wk: randn(rng, dim, dim, std),
            bk: zeros(1, dim),
            wv: randn(rng, dim, dim, std),
            bv: zeros(1, dim),
            wo: randn(rng, dim, dim, std),
            bo: zeros(1, dim),
        }
    }

    pub fn cast<U: Scalar>(&self) -> AttnParams<U> {
        AttnParams {
            wq: Arc::new(self.wq.cast()),
            bq: Arc::new(self.bq.cast()),
            wk: Arc::new(self.wk.cast()),
            bk: Arc::new(self.bk.cast()),
            wv: Arc::new(self.wv.cast()),
            bv: Arc::new(self.bv.cast()),
            wo: Arc::new(self.wo.cast()),
            bo: Arc::new(self.bo.cast()),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Shared<T>)) {
        visit_fields!(self, prefix, f, [wq, bq, wk, bk, wv, bv, wo, bo]);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Shared<T>)) {
        visit_fields_mut!(self, prefix, f, [wq, bq, wk, bk, wv, bv, wo, bo]);
    }
}

pub struct StagedAttn {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

pub fn stage_attn<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder,
    prefix: &str,
    a: &AttnParams<T>,
    trainable: bool,
) -> StagedAttn {
    StagedAttn {
        wq: b.bind(g, format!("{prefix}.wq"), &a.wq, trainable),
        bq: b.bind(g, format!("{prefix}.bq"), &a.bq, trainable),
        wk: b.bind(g, format!("{prefix}.wk"), &a.wk, trainable),
        bk: b.bind(g, format!("{prefix}.bk"), &a.bk, trainable),
        wv: b.bind(g, format!("{prefix}.wv"), &a.wv, trainable),
        bv: b.bind(g, format!("{prefix}.bv"), &a.bv, trainable),
        wo: b.bind(g, format!("{prefix}.wo"), &a.wo, trainable),
        bo: b.bind(g, format!("{prefix}.bo"), &a.bo, trainable),
    }
}

/// Scaled-dot-product multi-head attention.
///
/// `q_src` holds `items` query sequences stacked along rows, `kv_src` the
/// matching key/value sequences (equal to `q_src` for self-attention).
/// Returns the output projection, same shape as `q_src`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    q_src: NodeId,
    kv_src: NodeId,
    p: &StagedAttn,
    heads: usize,
    items: usize,
) -> NodeId {
    let (_, dim) = g.shape(q_src);
    let (_, kv_dim) = g.shape(kv_src);
    assert_eq!(dim, kv_dim, "attention: query/key width mismatch");

    let q = g.matmul(q_src, p.wq);
    let q = g.add_row(q, p.bq);
    let k = g.matmul(kv_src, p.wk);
    let k = g.add_row(k, p.bk);
    let v = g.matmul(kv_src, p.wv);
    let v = g.add_row(v, p.bv);

    let ctx = g.attention(q, k, v, heads, items);
    let out = g.matmul(ctx, p.wo);
    g.add_row(out, p.bo)
}

// ---------------------------------------------------------------------------
// Feed-forward block
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct MlpParams<T: Scalar> {
    pub w1: Shared<T>,
    pub b1: Shared<T>,
    pub w2: Shared<T>,
    pub b2: Shared<T>,
}

impl<T: Scalar> MlpParams<T> {
    pub fn init(rng: &mut ChaCha8Rng, dim: usize, hidden: usize) -> Self {
        MlpParams {
            w1: randn(rng, dim, hidden, (1.0 / dim as f64).sqrt()),
            b1: zeros(1, hidden),
            w2: randn(rng, hidden, dim, (1.0 / hidden as f64).sqrt()),
            b2: zeros(1, dim),
        }
    }

    pub fn cast<U: Scalar>(&self) -> MlpParams<U> {
        MlpParams {
            w1: Arc::new(self.w1.cast()),
            b1: Arc::new(self.b1.cast()),
            w2: Arc::new(self.w2.cast()),
            b2: Arc::new(self.b2.cast()),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Shared<T>)) {
        visit_fields!(self, prefix, f, [w1, b1, w2, b2]);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Shared<T>)) {
        visit_fields_mut!(self, prefix, f, [w1, b1, w2, b2]);
    }
}

pub struct StagedMlp {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

pub fn stage_mlp<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder,
    prefix: &str,
    m: &MlpParams<T>,
    trainable: bool,
) -> StagedMlp {
    StagedMlp {
        w1: b.bind(g, format!("{prefix}.w1"), &m.w1, trainable),
        b1: b.bind(g, format!("{prefix}.b1"), &m.b1, trainable),
        w2: b.bind(g, format!("{prefix}.w2"), &m.w2, trainable),
        b2: b.bind(g, format!("{prefix}.b2"), &m.b2, trainable),
    }
}

pub fn mlp_forward<T: Scalar>(g: &mut Graph<T>, x: NodeId, m: &StagedMlp) -> NodeId {
    let h = g.matmul(x, m.w1);
    let h = g.add_row(h, m.b1);
    let h = g.gelu(h);
    let out = g.matmul(h, m.w2);
    g.add_row(out, m.b2)
}

// ---------------------------------------------------------------------------
// Pre-norm encoder layer
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct EncoderLayer<T: Scalar> {
    pub ln1: LayerNormParams<T>,
    pub attn: AttnParams<T>,
    pub ln2: LayerNormParams<T>,
    pub mlp: MlpParams<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    pub fn init(rng: &mut ChaCha8Rng, dim: usize, mlp_ratio: usize) -> Self {
        EncoderLayer {
            ln1: LayerNormParams::init(dim),
            attn: AttnParams::init(rng, dim),
            ln2: LayerNormParams::init(dim),
            mlp: MlpParams::init(rng, dim, dim * mlp_ratio),
        }
    }

    pub fn cast<U: Scalar>(&self) -> EncoderLayer<U> {
        EncoderLayer {
            ln1: self.ln1.cast(),
            attn: self.attn.cast(),
            ln2: self.ln2.cast(),
            mlp: self.mlp.cast(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Shared<T>)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.mlp.visit(&format!("{prefix}.mlp"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Shared<T>)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.mlp.visit_mut(&format!("{prefix}.mlp"), f);
    }
}

pub struct StagedEncoderLayer {
    pub ln1: StagedLn,
    pub attn: StagedAttn,
    pub ln2: StagedLn,
    pub mlp: StagedMlp,
}

pub fn stage_encoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder,
    prefix: &str,
    layer: &EncoderLayer<T>,
    trainable: bool,
) -> StagedEncoderLayer {
    StagedEncoderLayer {
        ln1: stage_ln(g, b, &format!("{prefix}.ln1"), &layer.ln1, trainable),
        attn: stage_attn(g, b, &format!("{prefix}.attn"), &layer.attn, trainable),
        ln2: stage_ln(g, b, &format!("{prefix}.ln2"), &layer.ln2, trainable),
        mlp: stage_mlp(g, b, &format!("{prefix}.mlp"), &layer.mlp, trainable),
    }
}

/// `x + attn(ln1(x))` then `x + mlp(ln2(x))`.
pub fn encoder_layer_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    layer: &StagedEncoderLayer,
    heads: usize,
    items: usize,
) -> NodeId {
    let normed = ln_forward(g, x, &layer.ln1);
    let attn = multi_head_attention(g, normed, normed, &layer.attn, heads, items);
    let x = g.add(x, attn);
    let normed = ln_forward(g, x, &layer.ln2);
    let ff = mlp_forward(g, normed, &layer.mlp);
    g.add(x, ff)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_preserves_shape_and_items_are_independent() {
        let mut rng = rng::rng_for(1, 0);
        let p = AttnParams::<f64>::init(&mut rng, 8);
        // Two stacked items: changing item 1's input must not change item 0's
        // output rows.
        let x0 = Mat::from_fn(6, 8, |r, c| ((r * 8 + c) as f64 * 0.37).sin());
        let mut x1 = x0.clone();
        for v in x1.data_mut()[24..].iter_mut() {
            *v += 1.0;
        }
        let run = |x: &Mat<f64>| {
            let mut g = Graph::new();
            let mut b = Binder::new();
            let staged = stage_attn(&mut g, &mut b, "a", &p, false);
            let xid = g.constant(x.clone());
            let out = multi_head_attention(&mut g, xid, xid, &staged, 2, 2);
            assert_eq!(g.shape(out), (6, 8));
            g.value(out).clone()
        };
        let o0 = run(&x0);
        let o1 = run(&x1);
        for r in 0..3 {
            assert_eq!(o0.row(r), o1.row(r), "item 0 row {r} changed");
        }
        let mut differs = false;
        for r in 3..6 {
            differs |= o0.row(r) != o1.row(r);
        }
        assert!(differs, "item 1 output never changed");
    }

    #[test]
    fn encoder_layer_gradients_match_finite_differences() {
        let mut rng = rng::rng_for(2, 0);
        let layer = EncoderLayer::<f64>::init(&mut rng, 8, 2);
        let x = Mat::from_fn(5, 8, |r, c| ((r * 8 + c) as f64 * 0.13).cos() * 0.5);

        let loss_of = |layer: &EncoderLayer<f64>, x: &Mat<f64>| {
            let mut g = Graph::new();
            let mut b = Binder::new();
            let staged = stage_encoder_layer(&mut g, &mut b, "l", layer, true);
            let xid = g.constant(x.clone());
            let out = encoder_layer_forward(&mut g, xid, &staged, 2, 1);
            let sq = g.mul(out, out);
            let col = g.sum_cols(sq);
            let row = g.reshape(col, 1, 5);
            (g, b, staged, col, row)
        };

        let (mut g, b, _staged, _col, row) = loss_of(&layer, &x);
        let loss = g.sum_cols(row);
        let grads = g.backward(loss);
        // Check one weight per sub-block via directional derivative.
        for name in ["l.attn.wq", "l.mlp.w1", "l.ln1.gamma", "l.attn.bo"] {
            let id = b.node(name).unwrap();
            let analytic = grads.get(id).expect(name);
            let (r, c) = (0, 1);
            let eps = 1e-6;
            let eval = |delta: f64| {
                let mut perturbed = layer.clone();
                perturbed.visit_mut("l", &mut |n, p| {
                    if n == name {
                        let m = Arc::make_mut(p);
                        let v = m.at(r, c);
                        m.set(r, c, v + delta);
                    }
                });
                let (mut g, _b, _s, _col, row) = loss_of(&perturbed, &x);
                let loss = g.sum_cols(row);
                g.value(loss).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.at(r, c);
            assert!(
                (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3) < 1e-6,
                "{name}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}
