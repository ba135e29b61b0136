//! Multi-modal decoder and scoring head.
//!
//! The decoder refines a per-crop query block (the stacked scene and
//! distortion class embeddings) with pre-norm self-attention followed by
//! pre-norm cross-attention over the crop's visual memory
//! `[z_img; patch_embeds]`. Decoder layers carry no feed-forward block.
//! The scoring head pools the decoded queries and maps them to one scalar
//! per crop through a two-layer MLP.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::config::HeadPool;
use crate::graph::{Graph, NodeId};
use crate::layers::{
    ln_forward, multi_head_attention, randn, stage_attn, stage_ln, zeros, AttnParams, Binder,
    LayerNormParams, Shared, StagedAttn, StagedLn,
};
use crate::mat::Scalar;

#[derive(Clone)]
pub struct DecoderLayer<T: Scalar> {
    pub ln_self: LayerNormParams<T>,
    pub self_attn: AttnParams<T>,
    pub ln_cross: LayerNormParams<T>,
    pub cross_attn: AttnParams<T>,
}

impl<T: Scalar> DecoderLayer<T> {
    pub fn init(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        DecoderLayer {
            ln_self: LayerNormParams::init(dim),
            self_attn: AttnParams::init(rng, dim),
            ln_cross: LayerNormParams::init(dim),
            cross_attn: AttnParams::init(rng, dim),
        }
    }

    pub fn cast<U: Scalar>(&self) -> DecoderLayer<U> {
        DecoderLayer {
            ln_self: self.ln_self.cast(),
            self_attn: self.self_attn.cast(),
            ln_cross: self.ln_cross.cast(),
            cross_attn: self.cross_attn.cast(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Shared<T>)) {
        self.ln_self.visit(&format!("{prefix}.ln_self"), f);
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.ln_cross.visit(&format!("{prefix}.ln_cross"), f);
        self.cross_attn.visit(&format!("{prefix}.cross_attn"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Shared<T>)) {
        self.ln_self.visit_mut(&format!("{prefix}.ln_self"), f);
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        self.ln_cross.visit_mut(&format!("{prefix}.ln_cross"), f);
        self.cross_attn.visit_mut(&format!("{prefix}.cross_attn"), f);
    }
}

pub struct MultiModalDecoder<T: Scalar> {
    pub layers: Vec<DecoderLayer<T>>,
    pub heads: usize,
}

impl<T: Scalar> MultiModalDecoder<T> {
    pub fn init(rng: &mut ChaCha8Rng, dim: usize, layers: usize, heads: usize) -> Self {
        MultiModalDecoder {
            layers: (0..layers).map(|_| DecoderLayer::init(rng, dim)).collect(),
            heads,
        }
    }

    pub fn cast<U: Scalar>(&self) -> MultiModalDecoder<U> {
        MultiModalDecoder {
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            heads: self.heads,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Shared<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("decoder.layers.{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Shared<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("decoder.layers.{i}"), f);
        }
    }
}

/// Two-layer MLP mapping pooled decoder output to one score per crop.
#[derive(Clone)]
pub struct ScoreHead<T: Scalar> {
    pub w1: Shared<T>,
    pub b1: Shared<T>,
    pub w2: Shared<T>,
    pub b2: Shared<T>,
    pub pool: HeadPool,
    /// Fixed output gain; lets the MLP operate near unit scale while the
    /// predicted score spans the target MOS range.
    pub scale: f64,
}

impl<T: Scalar> ScoreHead<T> {
    /// `in_dim` is `embed_dim` for mean pooling, `query_rows * embed_dim`
    /// for concat pooling; the hidden width is `hidden`.
    pub fn init(
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        hidden: usize,
        pool: HeadPool,
        scale: f64,
    ) -> Self {
        // The output layer starts near zero with a mid-range bias, so the
        // initial prediction is 0.5 * scale regardless of the input features.
        ScoreHead {
            w1: randn(rng, in_dim, hidden, (1.0 / in_dim as f64).sqrt()),
            b1: zeros(1, hidden),
            w2: randn(rng, hidden, 1, 0.02 * (1.0 / hidden as f64).sqrt()),
            b2: Arc::new(Mat::from_fn(1, 1, |_, _| T::from_f64(0.5))),
            pool,
            scale,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ScoreHead<U> {
        ScoreHead {
            w1: Arc::new(self.w1.cast()),
            b1: Arc::new(self.b1.cast()),
            w2: Arc::new(self.w2.cast()),
            b2: Arc::new(self.b2.cast()),
            pool: self.pool,
            scale: self.scale,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Shared<T>)) {
        f("score_head.w1".into(), &self.w1);
        f("score_head.b1".into(), &self.b1);
        f("score_head.w2".into(), &self.w2);
        f("score_head.b2".into(), &self.b2);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Shared<T>)) {
        f("score_head.w1".into(), &mut self.w1);
        f("score_head.b1".into(), &mut self.b1);
        f("score_head.w2".into(), &mut self.w2);
        f("score_head.b2".into(), &mut self.b2);
    }
}

pub struct StagedDecoderLayer {
    pub ln_self: StagedLn,
    pub self_attn: StagedAttn,
    pub ln_cross: StagedLn,
    pub cross_attn: StagedAttn,
}

pub struct StagedDecoder {
    pub layers: Vec<StagedDecoderLayer>,
    pub heads: usize,
}

pub fn stage_decoder<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder,
    d: &MultiModalDecoder<T>,
    trainable: bool,
) -> StagedDecoder {
    StagedDecoder {
        layers: d
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let p = format!("decoder.layers.{i}");
                StagedDecoderLayer {
                    ln_self: stage_ln(g, b, &format!("{p}.ln_self"), &l.ln_self, trainable),
                    self_attn: stage_attn(g, b, &format!("{p}.self_attn"), &l.self_attn, trainable),
                    ln_cross: stage_ln(g, b, &format!("{p}.ln_cross"), &l.ln_cross, trainable),
                    cross_attn: stage_attn(
                        g,
                        b,
                        &format!("{p}.cross_attn"),
                        &l.cross_attn,
                        trainable,
                    ),
                }
            })
            .collect(),
        heads: d.heads,
    }
}

pub struct StagedScoreHead {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub pool: HeadPool,
    pub scale: f64,
}

pub fn stage_score_head<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder,
    h: &ScoreHead<T>,
    trainable: bool,
) -> StagedScoreHead {
    StagedScoreHead {
        w1: b.bind(g, "score_head.w1".into(), &h.w1, trainable),
        b1: b.bind(g, "score_head.b1".into(), &h.b1, trainable),
        w2: b.bind(g, "score_head.w2".into(), &h.w2, trainable),
        b2: b.bind(g, "score_head.b2".into(), &h.b2, trainable),
        pool: h.pool,
        scale: h.scale,
    }
}

/// Stack the per-crop query block: the class embeddings replicated once per
/// crop, `[crops * rows(q), embed]`.
pub fn build_queries<T: Scalar>(g: &mut Graph<T>, class_embeds: &[NodeId], crops: usize) -> NodeId {
    assert!(!class_embeds.is_empty(), "query block needs at least one embedding family");
    let q0 = if class_embeds.len() == 1 {
        class_embeds[0]
    } else {
        g.concat_rows(class_embeds)
    };
    if crops == 1 {
        q0
    } else {
        g.concat_rows(&vec![q0; crops])
    }
}

/// Per-crop visual memory `[z_img_i; patch_embeds_i]` stacked along rows,
/// `[crops * (1 + patches), embed]`.
pub fn build_memory<T: Scalar>(
    g: &mut Graph<T>,
    z_img: NodeId,
    patch_embeds: NodeId,
    crops: usize,
) -> NodeId {
    let (zc, _) = g.shape(z_img);
    let (pr, _) = g.shape(patch_embeds);
    assert_eq!(zc, crops, "one z_img row per crop");
    assert_eq!(pr % crops, 0, "patch rows not divisible by crops");
    let p = pr / crops;
    let mut parts = Vec::with_capacity(2 * crops);
    for i in 0..crops {
        parts.push(g.slice_rows(z_img, i, 1));
        parts.push(g.slice_rows(patch_embeds, i * p, p));
    }
    g.concat_rows(&parts)
}

/// Run the decoder stack over stacked queries and memory.
pub fn build_decode<T: Scalar>(
    g: &mut Graph<T>,
    d: &StagedDecoder,
    queries: NodeId,
    memory: NodeId,
    crops: usize,
) -> NodeId {
    let mut q = queries;
    for layer in &d.layers {
        let normed = ln_forward(g, q, &layer.ln_self);
        let sa = multi_head_attention(g, normed, normed, &layer.self_attn, d.heads, crops);
        q = g.add(q, sa);
        let normed = ln_forward(g, q, &layer.ln_cross);
        let ca = multi_head_attention(g, normed, memory, &layer.cross_attn, d.heads, crops);
        q = g.add(q, ca);
    }
    q
}

/// Pool decoded queries per crop and apply the scoring MLP; `[crops, 1]`.
pub fn build_scores<T: Scalar>(
    g: &mut Graph<T>,
    h: &StagedScoreHead,
    decoded: NodeId,
    crops: usize,
) -> NodeId {
    let (rows, dim) = g.shape(decoded);
    assert_eq!(rows % crops, 0, "decoded rows not divisible by crops");
    let q = rows / crops;
    let mut pooled = Vec::with_capacity(crops);
    for i in 0..crops {
        let block = g.slice_rows(decoded, i * q, q);
        pooled.push(match h.pool {
            HeadPool::Mean => g.mean_rows(block),
            HeadPool::Concat => g.reshape(block, 1, q * dim),
        });
    }
    let x = if crops == 1 { pooled[0] } else { g.concat_rows(&pooled) };
    let hidden = g.matmul(x, h.w1);
    let hidden = g.add_row(hidden, h.b1);
    let hidden = g.gelu(hidden);
    let out = g.matmul(hidden, h.w2);
    let out = g.add_row(out, h.b2);
    g.scale(out, T::from_f64(h.scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Mat;
    use crate::rng;

    const D: usize = 8;
    const Q: usize = 5;
    const P: usize = 3;

    fn fixtures() -> (MultiModalDecoder<f64>, ScoreHead<f64>, Mat<f64>, Mat<f64>, Mat<f64>) {
        let mut r = rng::rng_for(21, 0);
        let dec = MultiModalDecoder::init(&mut r, D, 2, 2);
        let head = ScoreHead::init(&mut r, D, 2 * D, HeadPool::Mean, 1.0);
        let q = Mat::from_fn(Q, D, |a, b| ((a * D + b) as f64 * 0.19).sin());
        let z = Mat::from_fn(2, D, |a, b| ((a * D + b) as f64 * 0.11).cos());
        let patches = Mat::from_fn(2 * P, D, |a, b| ((a * D + b + 3) as f64 * 0.07).sin());
        (dec, head, q, z, patches)
    }

    #[test]
    fn decode_and_score_shapes() {
        let (dec, head, q, z, patches) = fixtures();
        let mut g = Graph::new();
        let mut b = Binder::new();
        let sd = stage_decoder(&mut g, &mut b, &dec, true);
        let sh = stage_score_head(&mut g, &mut b, &head, true);
        let qid = g.constant(q);
        let zid = g.constant(z);
        let pid = g.constant(patches);
        let queries = build_queries(&mut g, &[qid], 2);
        assert_eq!(g.shape(queries), (2 * Q, D));
        let memory = build_memory(&mut g, zid, pid, 2);
        assert_eq!(g.shape(memory), (2 * (1 + P), D));
        let decoded = build_decode(&mut g, &sd, queries, memory, 2);
        assert_eq!(g.shape(decoded), (2 * Q, D));
        let scores = build_scores(&mut g, &sh, decoded, 2);
        assert_eq!(g.shape(scores), (2, 1));
        for r in 0..2 {
            assert!(g.value(scores).at(r, 0).is_finite());
        }
    }

    #[test]
    fn crops_are_scored_independently() {
        let (dec, head, q, z, patches) = fixtures();
        let run = |patches: &Mat<f64>| {
            let mut g = Graph::new();
            let mut b = Binder::new();
            let sd = stage_decoder(&mut g, &mut b, &dec, false);
            let sh = stage_score_head(&mut g, &mut b, &head, false);
            let qid = g.constant(q.clone());
            let zid = g.constant(z.clone());
            let pid = g.constant(patches.clone());
            let queries = build_queries(&mut g, &[qid], 2);
            let memory = build_memory(&mut g, zid, pid, 2);
            let decoded = build_decode(&mut g, &sd, queries, memory, 2);
            let scores = build_scores(&mut g, &sh, decoded, 2);
            (g.value(scores).at(0, 0), g.value(scores).at(1, 0))
        };
        let (a0, a1) = run(&patches);
        // Perturb only crop 1's memory rows.
        let mut p2 = patches.clone();
        for v in &mut p2.data_mut()[P * D..] {
            *v += 0.5;
        }
        let (b0, b1) = run(&p2);
        assert_eq!(a0, b0, "crop 0 score changed with crop 1 memory");
        assert_ne!(a1, b1, "crop 1 score ignored its memory");
    }

    #[test]
    fn concat_pool_uses_flattened_queries() {
        let (dec, _, q, z, patches) = fixtures();
        let mut r = rng::rng_for(22, 0);
        let head = ScoreHead::init(&mut r, Q * D, D, HeadPool::Concat, 1.0);
        let mut g = Graph::new();
        let mut b = Binder::new();
        let sd = stage_decoder(&mut g, &mut b, &dec, false);
        let sh = stage_score_head(&mut g, &mut b, &head, false);
        let qid = g.constant(q);
        let zid = g.constant(z);
        let pid = g.constant(patches);
        let queries = build_queries(&mut g, &[qid], 2);
        let memory = build_memory(&mut g, zid, pid, 2);
        let decoded = build_decode(&mut g, &sd, queries, memory, 2);
        let scores = build_scores(&mut g, &sh, decoded, 2);
        assert_eq!(g.shape(scores), (2, 1));
    }

    #[test]
    fn gradients_reach_queries_memory_and_head() {
        let (dec, head, q, z, patches) = fixtures();

        let loss_of = |q: &Mat<f64>, z: &Mat<f64>, patches: &Mat<f64>, head: &ScoreHead<f64>| {
            let mut g = Graph::new();
            let mut b = Binder::new();
            let sd = stage_decoder(&mut g, &mut b, &dec, true);
            let sh = stage_score_head(&mut g, &mut b, head, true);
            let qid = g.leaf(Arc::new(q.clone()), true);
            let zid = g.leaf(Arc::new(z.clone()), true);
            let pid = g.leaf(Arc::new(patches.clone()), true);
            let queries = build_queries(&mut g, &[qid], 2);
            let memory = build_memory(&mut g, zid, pid, 2);
            let decoded = build_decode(&mut g, &sd, queries, memory, 2);
            let scores = build_scores(&mut g, &sh, decoded, 2);
            let sq = g.mul(scores, scores);
            let flat = g.reshape(sq, 1, 2);
            let loss = g.sum_cols(flat);
            (g, b, qid, zid, pid, loss)
        };

        let (g, b, qid, zid, pid, loss) = loss_of(&q, &z, &patches, &head);
        let grads = g.backward(loss);
        let eps = 1e-6;

        // Query leaf.
        {
            let a = grads.get(qid).unwrap().at(2, 3);
            let eval = |d: f64| {
                let mut q2 = q.clone();
                q2.set(2, 3, q2.at(2, 3) + d);
                let (g, _, _, _, _, loss) = loss_of(&q2, &z, &patches, &head);
                g.value(loss).item()
            };
            let n = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-4) < 1e-5, "query {a} vs {n}");
        }
        // z_img leaf.
        {
            let a = grads.get(zid).unwrap().at(1, 5);
            let eval = |d: f64| {
                let mut z2 = z.clone();
                z2.set(1, 5, z2.at(1, 5) + d);
                let (g, _, _, _, _, loss) = loss_of(&q, &z2, &patches, &head);
                g.value(loss).item()
            };
            let n = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-4) < 1e-5, "z {a} vs {n}");
        }
        // Patch memory leaf.
        {
            let a = grads.get(pid).unwrap().at(4, 1);
            let eval = |d: f64| {
                let mut p2 = patches.clone();
                p2.set(4, 1, p2.at(4, 1) + d);
                let (g, _, _, _, _, loss) = loss_of(&q, &z, &p2, &head);
                g.value(loss).item()
            };
            let n = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-4) < 1e-5, "patches {a} vs {n}");
        }
        // Head weight.
        {
            let w1 = b.node("score_head.w1").unwrap();
            let a = grads.get(w1).unwrap().at(0, 0);
            let eval = |d: f64| {
                let mut h2 = head.clone();
                let m = Arc::make_mut(&mut h2.w1);
                m.set(0, 0, m.at(0, 0) + d);
                let (g, _, _, _, _, loss) = loss_of(&q, &z, &patches, &h2);
                g.value(loss).item()
            };
            let n = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-4) < 1e-5, "w1 {a} vs {n}");
        }
    }
}
