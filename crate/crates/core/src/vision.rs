//! Vision branch: patch extraction, the frozen patch transformer, learnable
//! per-layer prompt tokens and the trainable patch projection.
//!
//! Token layout inside a layer is `[CLS, prompt_1..prompt_n, patch_1..patch_P]`.
//! In deep prompting mode a fresh set of prompt tokens is inserted before
//! every layer and the transformed rows at the prompt slots are dropped
//! afterwards; only `CLS` and the patch rows flow to the next layer.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::config::VisualPromptMode;
use crate::data::ImageBuf;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{
    encoder_layer_forward, ln_forward, randn, stage_encoder_layer, stage_ln, zeros, Binder,
    EncoderLayer, LayerNormParams, Shared, StagedEncoderLayer, StagedLn,
};
use crate::mat::{Mat, Scalar};

/// Flatten an image into patch rows: one row per patch, grid walked
/// row-major, pixels inside a patch flattened as `(y, x, channel)`.
/// Output shape `[(h/p)*(w/p), 3*p*p]`.
pub fn patch_matrix<T: Scalar>(img: &ImageBuf, patch: usize) -> Result<Mat<T>> {
    let (w, h) = (img.width(), img.height());
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        return Err(Error::Shape(format!(
            "image {w}x{h} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gx, gy) = (w / patch, h / patch);
    let mut out = Mat::zeros(gx * gy, 3 * patch * patch);
    for py in 0..gy {
        for px in 0..gx {
            let row = out.row_mut(py * gx + px);
            let mut i = 0;
            for y in 0..patch {
                for x in 0..patch {
                    for c in 0..3 {
                        row[i] = T::from_f64(img.get(px * patch + x, py * patch + y, c) as f64);
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Patch rows of several equally sized crops stacked along rows.
pub fn stacked_patch_matrix<T: Scalar>(crops: &[ImageBuf], patch: usize) -> Result<Mat<T>> {
    if crops.is_empty() {
        return Err(Error::Shape("no crops to patchify".into()));
    }
    let first = patch_matrix::<T>(&crops[0], patch)?;
    let (p_rows, p_cols) = (first.rows(), first.cols());
    let mut out = Mat::zeros(p_rows * crops.len(), p_cols);
    out.data_mut()[..p_rows * p_cols].copy_from_slice(first.data());
    for (i, crop) in crops.iter().enumerate().skip(1) {
        let m = patch_matrix::<T>(crop, patch)?;
        if m.rows() != p_rows {
            return Err(Error::Shape(format!(
                "crop {i} yields {} patches, expected {p_rows}",
                m.rows()
            )));
        }
        out.data_mut()[i * p_rows * p_cols..(i + 1) * p_rows * p_cols]
            .copy_from_slice(m.data());
    }
    Ok(out)
}

/// Frozen vision transformer plus its embedding tables and CLS projection.
pub struct VisionBranch<T: Scalar> {
    pub patch_embed_w: Shared<T>,
    pub patch_embed_b: Shared<T>,
    pub cls: Shared<T>,
    pub pos_embed: Shared<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub ln_post: LayerNormParams<T>,
    pub proj: Shared<T>,
    pub heads: usize,
}

impl<T: Scalar> VisionBranch<T> {
    pub fn init(
        rng: &mut ChaCha8Rng,
        patch: usize,
        patches: usize,
        dim: usize,
        embed_dim: usize,
        layers: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        let in_dim = 3 * patch * patch;
        VisionBranch {
            patch_embed_w: randn(rng, in_dim, dim, (1.0 / in_dim as f64).sqrt()),
            patch_embed_b: zeros(1, dim),
            cls: randn(rng, 1, dim, 0.02),
            pos_embed: randn(rng, 1 + patches, dim, 0.01),
            layers: (0..layers).map(|_| EncoderLayer::init(rng, dim, mlp_ratio)).collect(),
            ln_post: LayerNormParams::init(dim),
            proj: randn(rng, dim, embed_dim, (1.0 / dim as f64).sqrt()),
            heads,
        }
    }

    pub fn cast<U: Scalar>(&self) -> VisionBranch<U> {
        VisionBranch {
            patch_embed_w: Arc::new(self.patch_embed_w.cast()),
            patch_embed_b: Arc::new(self.patch_embed_b.cast()),
            cls: Arc::new(self.cls.cast()),
            pos_embed: Arc::new(self.pos_embed.cast()),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            ln_post: self.ln_post.cast(),
            proj: Arc::new(self.proj.cast()),
            heads: self.heads,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Shared<T>)) {
        f("vision.patch_embed_w".into(), &self.patch_embed_w);
        f("vision.patch_embed_b".into(), &self.patch_embed_b);
        f("vision.cls".into(), &self.cls);
        f("vision.pos_embed".into(), &self.pos_embed);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("vision.layers.{i}"), f);
        }
        self.ln_post.visit("vision.ln_post", f);
        f("vision.proj".into(), &self.proj);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Shared<T>)) {
        f("vision.patch_embed_w".into(), &mut self.patch_embed_w);
        f("vision.patch_embed_b".into(), &mut self.patch_embed_b);
        f("vision.cls".into(), &mut self.cls);
        f("vision.pos_embed".into(), &mut self.pos_embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("vision.layers.{i}"), f);
        }
        self.ln_post.visit_mut("vision.ln_post", f);
        f("vision.proj".into(), &mut self.proj);
    }
}

/// Trainable linear map taking normalized patch tokens into the shared
/// embedding space.
#[derive(Clone)]
pub struct PatchProjection<T: Scalar> {
    pub w: Shared<T>,
    pub b: Shared<T>,
}

impl<T: Scalar> PatchProjection<T> {
    pub fn init(rng: &mut ChaCha8Rng, vision_dim: usize, embed_dim: usize) -> Self {
        PatchProjection {
            w: randn(rng, vision_dim, embed_dim, (1.0 / vision_dim as f64).sqrt()),
            b: zeros(1, embed_dim),
        }
    }

    pub fn cast<U: Scalar>(&self) -> PatchProjection<U> {
        PatchProjection {
            w: Arc::new(self.w.cast()),
            b: Arc::new(self.b.cast()),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Shared<T>)) {
        f("patch_projection.w".into(), &self.w);
        f("patch_projection.b".into(), &self.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Shared<T>)) {
        f("patch_projection.w".into(), &mut self.w);
        f("patch_projection.b".into(), &mut self.b);
    }
}

pub struct StagedVision {
    pub patch_embed_w: NodeId,
    pub patch_embed_b: NodeId,
    pub cls: NodeId,
    pub pos_embed: NodeId,
    pub layers: Vec<StagedEncoderLayer>,
    pub ln_post: StagedLn,
    pub proj: NodeId,
    pub heads: usize,
}

pub fn stage_vision<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder,
    v: &VisionBranch<T>,
    proj_trainable: bool,
) -> StagedVision {
    StagedVision {
        patch_embed_w: b.bind(g, "vision.patch_embed_w".into(), &v.patch_embed_w, false),
        patch_embed_b: b.bind(g, "vision.patch_embed_b".into(), &v.patch_embed_b, false),
        cls: b.bind(g, "vision.cls".into(), &v.cls, false),
        pos_embed: b.bind(g, "vision.pos_embed".into(), &v.pos_embed, false),
        layers: v
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| stage_encoder_layer(g, b, &format!("vision.layers.{i}"), l, false))
            .collect(),
        ln_post: stage_ln(g, b, "vision.ln_post", &v.ln_post, false),
        proj: b.bind(g, "vision.proj".into(), &v.proj, proj_trainable),
        heads: v.heads,
    }
}

pub struct StagedPatchProjection {
    pub w: NodeId,
    pub b: NodeId,
}

pub fn stage_patch_projection<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder,
    p: &PatchProjection<T>,
    trainable: bool,
) -> StagedPatchProjection {
    StagedPatchProjection {
        w: b.bind(g, "patch_projection.w".into(), &p.w, trainable),
        b: b.bind(g, "patch_projection.b".into(), &p.b, trainable),
    }
}

/// Result of a vision forward pass over a batch of crops.
pub struct VisionOutput {
    /// Unit-norm global image embeddings, `[crops, embed_dim]`.
    pub z_img: NodeId,
    /// Projected patch tokens, `[crops * patches, embed_dim]`.
    pub patch_embeds: NodeId,
    /// Tokens per crop at each layer's input (diagnostic trace).
    pub layer_tokens: Vec<usize>,
}

/// Build the vision forward pass for `crops` equally sized crops whose
/// stacked patch rows are already on the graph.
///
/// `prompts` holds one staged `[n, vision_dim]` leaf per layer in deep
/// mode, exactly one in shallow mode and none in off mode. When
/// `slot_override` is set, the transformed rows at the prompt slots are
/// replaced by that matrix after every layer before being dropped; the
/// output must not depend on it.
pub fn build_vision_forward<T: Scalar>(
    g: &mut Graph<T>,
    sv: &StagedVision,
    pp: &StagedPatchProjection,
    prompts: &[NodeId],
    mode: VisualPromptMode,
    patch_rows: NodeId,
    crops: usize,
    slot_override: Option<NodeId>,
) -> VisionOutput {
    let (total_rows, _) = g.shape(patch_rows);
    assert!(crops > 0 && total_rows % crops == 0, "patch rows not divisible by crops");
    let p = total_rows / crops;
    match mode {
        VisualPromptMode::Deep => assert_eq!(prompts.len(), sv.layers.len()),
        VisualPromptMode::Shallow => assert_eq!(prompts.len(), 1),
        VisualPromptMode::Off => assert_eq!(prompts.len(), 0),
    }

    let embedded = g.matmul(patch_rows, sv.patch_embed_w);
    let embedded = g.add_row(embedded, sv.patch_embed_b);

    // Prepend CLS and add positional embeddings per crop.
    let mut per_crop = Vec::with_capacity(crops);
    for i in 0..crops {
        let patches_i = g.slice_rows(embedded, i * p, p);
        per_crop.push(g.concat_rows(&[sv.cls, patches_i]));
    }
    let pos_tiled = g.concat_rows(&vec![sv.pos_embed; crops]);
    let stacked = g.concat_rows(&per_crop);
    let mut cur = g.add(stacked, pos_tiled);
    let mut slots = 0usize;

    let insert = |g: &mut Graph<T>, cur: NodeId, slots: usize, prompt: NodeId| -> NodeId {
        let t = 1 + slots + p;
        let mut parts = Vec::with_capacity(3 * crops);
        for i in 0..crops {
            let cls_i = g.slice_rows(cur, i * t, 1);
            let patches_i = g.slice_rows(cur, i * t + 1 + slots, p);
            parts.push(cls_i);
            parts.push(prompt);
            parts.push(patches_i);
        }
        g.concat_rows(&parts)
    };
    let drop_slots = |g: &mut Graph<T>, cur: NodeId, slots: usize| -> NodeId {
        let t = 1 + slots + p;
        let mut parts = Vec::with_capacity(2 * crops);
        for i in 0..crops {
            parts.push(g.slice_rows(cur, i * t, 1));
            parts.push(g.slice_rows(cur, i * t + 1 + slots, p));
        }
        g.concat_rows(&parts)
    };
    let override_slots = |g: &mut Graph<T>, cur: NodeId, slots: usize, ov: NodeId| -> NodeId {
        let t = 1 + slots + p;
        let mut parts = Vec::with_capacity(3 * crops);
        for i in 0..crops {
            let cls_i = g.slice_rows(cur, i * t, 1);
            let patches_i = g.slice_rows(cur, i * t + 1 + slots, p);
            parts.push(cls_i);
            parts.push(ov);
            parts.push(patches_i);
        }
        g.concat_rows(&parts)
    };

    let mut layer_tokens = Vec::with_capacity(sv.layers.len());
    for (l, layer) in sv.layers.iter().enumerate() {
        match mode {
            VisualPromptMode::Deep => {
                cur = insert(g, cur, slots, prompts[l]);
                slots = g.shape(prompts[l]).0;
            }
            VisualPromptMode::Shallow if l == 0 => {
                cur = insert(g, cur, slots, prompts[0]);
                slots = g.shape(prompts[0]).0;
            }
            _ => {}
        }
        layer_tokens.push(1 + slots + p);
        cur = encoder_layer_forward(g, cur, layer, sv.heads, crops);
        if mode == VisualPromptMode::Deep {
            if let Some(ov) = slot_override {
                cur = override_slots(g, cur, slots, ov);
            }
            cur = drop_slots(g, cur, slots);
            slots = 0;
        }
    }
    if slots > 0 {
        if let Some(ov) = slot_override {
            cur = override_slots(g, cur, slots, ov);
        }
        cur = drop_slots(g, cur, slots);
        slots = 0;
    }
    let _ = slots;

    let normed = ln_forward(g, cur, &sv.ln_post);
    let t = 1 + p;
    let mut cls_rows = Vec::with_capacity(crops);
    let mut patch_rows_out = Vec::with_capacity(crops);
    for i in 0..crops {
        cls_rows.push(g.slice_rows(normed, i * t, 1));
        patch_rows_out.push(g.slice_rows(normed, i * t + 1, p));
    }
    let cls_stack = if crops == 1 { cls_rows[0] } else { g.concat_rows(&cls_rows) };
    let patch_stack = if crops == 1 {
        patch_rows_out[0]
    } else {
        g.concat_rows(&patch_rows_out)
    };

    let projected = g.matmul(cls_stack, sv.proj);
    let z_img = g.l2_normalize_rows(projected);
    let patch_embeds = g.matmul(patch_stack, pp.w);
    let patch_embeds = g.add_row(patch_embeds, pp.b);

    VisionOutput {
        z_img,
        patch_embeds,
        layer_tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny_branch(layers: usize) -> (VisionBranch<f64>, PatchProjection<f64>) {
        let mut r = rng::rng_for(11, 0);
        // 16x16 crops, 8x8 patches -> 4 patches per crop.
        let v = VisionBranch::init(&mut r, 8, 4, 16, 12, layers, 2, 2);
        let pp = PatchProjection::init(&mut r, 16, 12);
        (v, pp)
    }

    fn noisy_crop(seed: u64) -> ImageBuf {
        let mut r = rng::rng_for(seed, 1);
        let mut img = ImageBuf::new(16, 16);
        for v in img.data_mut() {
            *v = rand::Rng::random_range(&mut r, 0.0..1.0f32);
        }
        img
    }

    #[test]
    fn patch_matrix_layout_is_grid_row_major_then_y_x_c() {
        let mut img = ImageBuf::new(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    img.set(x, y, c, (y * 100 + x * 10 + c) as f32 / 1000.0);
                }
            }
        }
        let m = patch_matrix::<f64>(&img, 2).unwrap();
        assert_eq!((m.rows(), m.cols()), (4, 12));
        // Patch row 1 covers x in 2..4, y in 0..2; first entry is (y=0,x=2,c=0).
        assert!((m.at(1, 0) - 0.020).abs() < 1e-6);
        // Patch row 2 covers x in 0..2, y in 2..4; entry (y=1,x=1,c=2) is index 11.
        assert!((m.at(2, 11) - 0.312).abs() < 1e-6);
        assert!(patch_matrix::<f64>(&img, 3).is_err());
    }

    #[test]
    fn deep_mode_inserts_prompts_each_layer_and_discards_slot_outputs() {
        let (v, pp) = tiny_branch(3);
        let mut r = rng::rng_for(12, 0);
        let prompts: Vec<Shared<f64>> = (0..3).map(|_| randn(&mut r, 2, 16, 0.02)).collect();
        let crops = vec![noisy_crop(1), noisy_crop(2)];
        let patches = stacked_patch_matrix::<f64>(&crops, 8).unwrap();

        let run = |ov: Option<Mat<f64>>| {
            let mut g = Graph::new();
            let mut b = Binder::new();
            let sv = stage_vision(&mut g, &mut b, &v, false);
            let spp = stage_patch_projection(&mut g, &mut b, &pp, true);
            let prompt_ids: Vec<NodeId> =
                prompts.iter().map(|p| g.leaf(p.clone(), true)).collect();
            let pid = g.constant(patches.clone());
            let ov_id = ov.map(|m| g.constant(m));
            let out = build_vision_forward(
                &mut g,
                &sv,
                &spp,
                &prompt_ids,
                VisualPromptMode::Deep,
                pid,
                2,
                ov_id,
            );
            assert_eq!(out.layer_tokens, vec![7, 7, 7]);
            assert_eq!(g.shape(out.z_img), (2, 12));
            assert_eq!(g.shape(out.patch_embeds), (8, 12));
            (g.value(out.z_img).clone(), g.value(out.patch_embeds).clone())
        };

        let (z0, e0) = run(None);
        let garbage = Mat::from_fn(2, 16, |r, c| (r * 16 + c) as f64 * 123.5 - 7.0);
        let (z1, e1) = run(Some(garbage));
        assert_eq!(z0.data(), z1.data(), "slot outputs leaked into z_img");
        assert_eq!(e0.data(), e1.data(), "slot outputs leaked into patch embeds");
        for row in 0..2 {
            let n: f64 = z0.row(row).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn prompt_values_do_change_the_outputs() {
        let (v, pp) = tiny_branch(2);
        let mut r = rng::rng_for(13, 0);
        let crops = vec![noisy_crop(3)];
        let patches = stacked_patch_matrix::<f64>(&crops, 8).unwrap();
        let run = |prompts: &[Shared<f64>]| {
            let mut g = Graph::new();
            let mut b = Binder::new();
            let sv = stage_vision(&mut g, &mut b, &v, false);
            let spp = stage_patch_projection(&mut g, &mut b, &pp, true);
            let ids: Vec<NodeId> = prompts.iter().map(|p| g.leaf(p.clone(), true)).collect();
            let pid = g.constant(patches.clone());
            let out =
                build_vision_forward(&mut g, &sv, &spp, &ids, VisualPromptMode::Deep, pid, 1, None);
            g.value(out.z_img).clone()
        };
        let a: Vec<Shared<f64>> = (0..2).map(|_| randn(&mut r, 2, 16, 0.02)).collect();
        let mut b_prompts = a.clone();
        b_prompts[1] = randn(&mut r, 2, 16, 0.02);
        assert_ne!(run(&a).data(), run(&b_prompts).data());
    }

    #[test]
    fn off_and_shallow_modes_have_expected_token_counts() {
        let (v, pp) = tiny_branch(3);
        let mut r = rng::rng_for(14, 0);
        let crops = vec![noisy_crop(4)];
        let patches = stacked_patch_matrix::<f64>(&crops, 8).unwrap();
        for (mode, n_prompts, expect) in [
            (VisualPromptMode::Off, 0usize, vec![5usize, 5, 5]),
            (VisualPromptMode::Shallow, 1, vec![7, 7, 7]),
        ] {
            let mut g = Graph::new();
            let mut b = Binder::new();
            let sv = stage_vision(&mut g, &mut b, &v, false);
            let spp = stage_patch_projection(&mut g, &mut b, &pp, true);
            let ids: Vec<NodeId> = (0..n_prompts)
                .map(|_| {
                    let p = randn::<f64>(&mut r, 2, 16, 0.02);
                    g.leaf(p, true)
                })
                .collect();
            let pid = g.constant(patches.clone());
            let out = build_vision_forward(&mut g, &sv, &spp, &ids, mode, pid, 1, None);
            assert_eq!(out.layer_tokens, expect, "{mode:?}");
            assert_eq!(g.shape(out.z_img), (1, 12));
            assert_eq!(g.shape(out.patch_embeds), (4, 12));
        }
    }

    #[test]
    fn prompt_gradients_flow_through_deep_forward() {
        let (v, pp) = tiny_branch(2);
        let mut r = rng::rng_for(15, 0);
        let prompts: Vec<Shared<f64>> = (0..2).map(|_| randn(&mut r, 2, 16, 0.02)).collect();
        let crops = vec![noisy_crop(5), noisy_crop(6)];
        let patches = stacked_patch_matrix::<f64>(&crops, 8).unwrap();

        let loss_of = |prompts: &[Shared<f64>]| {
            let mut g = Graph::new();
            let mut b = Binder::new();
            let sv = stage_vision(&mut g, &mut b, &v, false);
            let spp = stage_patch_projection(&mut g, &mut b, &pp, true);
            let ids: Vec<NodeId> = prompts.iter().map(|p| g.leaf(p.clone(), true)).collect();
            let pid = g.constant(patches.clone());
            let out =
                build_vision_forward(&mut g, &sv, &spp, &ids, VisualPromptMode::Deep, pid, 2, None);
            let sq = g.mul(out.z_img, out.z_img);
            let col = g.sum_cols(sq);
            let flat = g.reshape(col, 1, 2);
            let loss = g.sum_cols(flat);
            (g, ids, loss)
        };

        let (g, ids, loss) = loss_of(&prompts);
        let grads = g.backward(loss);
        for (li, &id) in ids.iter().enumerate() {
            let analytic = grads.get(id).unwrap_or_else(|| panic!("prompt {li} got no grad"));
            let (pr, pc) = (1, 3);
            let eps = 1e-6;
            let eval = |delta: f64| {
                let mut p2 = prompts.clone();
                let m = Arc::make_mut(&mut p2[li]);
                let old = m.at(pr, pc);
                m.set(pr, pc, old + delta);
                let (g, _ids, loss) = loss_of(&p2);
                g.value(loss).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.at(pr, pc);
            assert!(
                (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4) < 1e-5,
                "layer {li}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}
