//! Full model assembly: frozen dual-encoder backbone, learnable prompt
//! bank, patch projection, multi-modal decoder and scoring head, plus the
//! graph builders for prediction and the combined training objective.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::align::{
    build_cross_entropy, build_distortion_probs, build_distortion_similarity,
    build_pooled_windows, build_scene_probs,
};
use crate::config::{
    distortion_taxonomy, scene_taxonomy, ModelConfig, Taxonomy, TaxonomyKind, VisualPromptMode,
};
use crate::config::HeadPool;
use crate::data::{random_crops, ImageBuf};
use crate::decoder::{
    build_decode, build_memory, build_queries, build_scores, stage_decoder, stage_score_head,
    MultiModalDecoder, ScoreHead, StagedDecoder, StagedScoreHead,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{randn, Binder, Shared};
use crate::mat::{Mat, Scalar};
use crate::rng;
use crate::text::{
    build_encode_plain_text, build_encode_taxonomy, stage_text, ContextVectors, StagedText,
    TextBranch, Vocab,
};
use crate::vision::{
    stacked_patch_matrix, stage_patch_projection, stage_vision, build_vision_forward,
    PatchProjection, StagedPatchProjection, StagedVision, VisionBranch, VisionOutput,
};

/// The six learnable parameter groups; everything else is frozen backbone
/// (except the two output projections when the backbone was randomly
/// initialized rather than loaded from pretrained weights).
pub const TRAINABLE_GROUPS: [&str; 6] = [
    "scene_ctx",
    "distortion_ctx",
    "visual_prompts",
    "patch_projection",
    "decoder",
    "score_head",
];

/// Parameter init streams, one per component, so disabling one component
/// does not shift the draws of another.
const STREAM_TEXT: u64 = 1;
const STREAM_VISION: u64 = 2;
const STREAM_SCENE_CTX: u64 = 3;
const STREAM_DIST_CTX: u64 = 4;
const STREAM_VISUAL_PROMPTS: u64 = 5;
const STREAM_PATCH_PROJ: u64 = 6;
const STREAM_DECODER: u64 = 7;
const STREAM_HEAD: u64 = 8;
const STREAM_PREDICT: u64 = 9;

/// Learnable prompt parameters: one context block per enabled text prompt
/// family and one token block per vision layer (deep mode), a single block
/// (shallow mode) or none (off).
pub struct PromptBank<T: Scalar> {
    pub scene_ctx: Option<ContextVectors<T>>,
    pub distortion_ctx: Option<ContextVectors<T>>,
    pub visual: Vec<Shared<T>>,
}

impl<T: Scalar> PromptBank<T> {
    pub fn cast<U: Scalar>(&self) -> PromptBank<U> {
        PromptBank {
            scene_ctx: self.scene_ctx.as_ref().map(|c| c.cast()),
            distortion_ctx: self.distortion_ctx.as_ref().map(|c| c.cast()),
            visual: self.visual.iter().map(|p| Arc::new(p.cast())).collect(),
        }
    }
}

pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub text: TextBranch<T>,
    pub vision: VisionBranch<T>,
    pub prompts: PromptBank<T>,
    pub patch_projection: PatchProjection<T>,
    pub decoder: MultiModalDecoder<T>,
    pub score_head: ScoreHead<T>,
    /// True when the backbone tensors were loaded from a pretrained archive;
    /// freezes the two output projections.
    pub backbone_pretrained: bool,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Model<T>> {
        cfg.validate()?;
        let vocab = if cfg.vocab_file.is_empty() {
            Vocab::default_vocab()
        } else {
            Vocab::load(&cfg.vocab_file)?
        };
        let seed = cfg.seed;
        let text = TextBranch::init(
            &mut rng::rng_for(seed, STREAM_TEXT),
            vocab,
            cfg.embed_dim,
            cfg.text_layers,
            cfg.text_heads,
            cfg.mlp_ratio,
        );
        let vision = VisionBranch::init(
            &mut rng::rng_for(seed, STREAM_VISION),
            cfg.patch_size,
            cfg.patches(),
            cfg.vision_dim,
            cfg.embed_dim,
            cfg.vision_layers,
            cfg.vision_heads,
            cfg.mlp_ratio,
        );
        let scene_ctx = cfg.scene_prompts.then(|| {
            ContextVectors::init(
                &mut rng::rng_for(seed, STREAM_SCENE_CTX),
                TaxonomyKind::Scene,
                cfg.text_prompt_len,
                cfg.embed_dim,
            )
        });
        let distortion_ctx = cfg.distortion_prompts.then(|| {
            ContextVectors::init(
                &mut rng::rng_for(seed, STREAM_DIST_CTX),
                TaxonomyKind::Distortion,
                cfg.text_prompt_len,
                cfg.embed_dim,
            )
        });
        let blocks = match cfg.visual_prompt_mode {
            VisualPromptMode::Deep => cfg.vision_layers,
            VisualPromptMode::Shallow => 1,
            VisualPromptMode::Off => 0,
        };
        let mut prompt_rng = rng::rng_for(seed, STREAM_VISUAL_PROMPTS);
        let visual = (0..blocks)
            .map(|_| randn(&mut prompt_rng, cfg.visual_prompt_len, cfg.vision_dim, 0.02))
            .collect();
        let patch_projection = PatchProjection::init(
            &mut rng::rng_for(seed, STREAM_PATCH_PROJ),
            cfg.vision_dim,
            cfg.embed_dim,
        );
        let decoder = MultiModalDecoder::init(
            &mut rng::rng_for(seed, STREAM_DECODER),
            cfg.embed_dim,
            cfg.decoder_layers,
            cfg.decoder_heads,
        );
        let head_in = match cfg.head_pool {
            HeadPool::Mean => cfg.embed_dim,
            HeadPool::Concat => cfg.query_rows() * cfg.embed_dim,
        };
        let score_head = ScoreHead::init(
            &mut rng::rng_for(seed, STREAM_HEAD),
            head_in,
            cfg.embed_dim,
            cfg.head_pool,
            cfg.score_scale,
        );
        Ok(Model {
            cfg,
            text,
            vision,
            prompts: PromptBank {
                scene_ctx,
                distortion_ctx,
                visual,
            },
            patch_projection,
            decoder,
            score_head,
            backbone_pretrained: false,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            text: self.text.cast(),
            vision: self.vision.cast(),
            prompts: self.prompts.cast(),
            patch_projection: self.patch_projection.cast(),
            decoder: self.decoder.cast(),
            score_head: self.score_head.cast(),
            backbone_pretrained: self.backbone_pretrained,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Shared<T>)) {
        self.text.visit(f);
        self.vision.visit(f);
        if let Some(c) = &self.prompts.scene_ctx {
            f("scene_ctx".into(), &c.rows);
        }
        if let Some(c) = &self.prompts.distortion_ctx {
            f("distortion_ctx".into(), &c.rows);
        }
        for (i, p) in self.prompts.visual.iter().enumerate() {
            f(format!("visual_prompts.{i}"), p);
        }
        self.patch_projection.visit(f);
        self.decoder.visit(f);
        self.score_head.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Shared<T>)) {
        self.text.visit_mut(f);
        self.vision.visit_mut(f);
        if let Some(c) = &mut self.prompts.scene_ctx {
            f("scene_ctx".into(), &mut c.rows);
        }
        if let Some(c) = &mut self.prompts.distortion_ctx {
            f("distortion_ctx".into(), &mut c.rows);
        }
        for (i, p) in self.prompts.visual.iter_mut().enumerate() {
            f(format!("visual_prompts.{i}"), p);
        }
        self.patch_projection.visit_mut(f);
        self.decoder.visit_mut(f);
        self.score_head.visit_mut(f);
    }

    /// Every named tensor, sorted by name.
    pub fn named_tensors(&self) -> Vec<(String, Shared<T>)> {
        let mut map = BTreeMap::new();
        self.visit(&mut |name, t| {
            map.insert(name, t.clone());
        });
        map.into_iter().collect()
    }

    pub fn tensor(&self, name: &str) -> Option<Shared<T>> {
        let mut found = None;
        self.visit(&mut |n, t| {
            if n == name {
                found = Some(t.clone());
            }
        });
        found
    }

    /// Replace a named tensor; the shape must match.
    pub fn set_tensor(&mut self, name: &str, value: Mat<T>) -> Result<()> {
        let mut result = Err(Error::Checkpoint(format!("unknown tensor {name:?}")));
        self.visit_mut(&mut |n, slot| {
            if n == name {
                if slot.shape() != value.shape() {
                    result = Err(Error::Checkpoint(format!(
                        "tensor {name:?}: expected shape {:?}, got {:?}",
                        slot.shape(),
                        value.shape()
                    )));
                } else {
                    *slot = Arc::new(value.clone());
                    result = Ok(());
                }
            }
        });
        result
    }

    /// Trainable group of a tensor name, if any.
    pub fn group_of(&self, name: &str) -> Option<&'static str> {
        match name {
            "scene_ctx" => Some("scene_ctx"),
            "distortion_ctx" => Some("distortion_ctx"),
            _ if name.starts_with("visual_prompts.") => Some("visual_prompts"),
            _ if name.starts_with("patch_projection.") => Some("patch_projection"),
            _ if name.starts_with("decoder.") => Some("decoder"),
            _ if name.starts_with("score_head.") => Some("score_head"),
            "text.proj" | "vision.proj" if !self.backbone_pretrained => Some("backbone_proj"),
            _ => None,
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.group_of(name).is_some()
    }

    /// Trainable tensors, sorted by name.
    pub fn trainable_parameters(&self) -> Vec<(String, Shared<T>)> {
        self.named_tensors()
            .into_iter()
            .filter(|(n, _)| self.is_trainable(n))
            .collect()
    }

    /// Stage every parameter onto a graph; trainability follows
    /// [`Model::is_trainable`].
    pub fn stage(&self, g: &mut Graph<T>, b: &mut Binder) -> StagedModel {
        StagedModel {
            text: stage_text(g, b, &self.text, self.is_trainable("text.proj")),
            vision: stage_vision(g, b, &self.vision, self.is_trainable("vision.proj")),
            scene_ctx: self
                .prompts
                .scene_ctx
                .as_ref()
                .map(|c| b.bind(g, "scene_ctx".into(), &c.rows, true)),
            distortion_ctx: self
                .prompts
                .distortion_ctx
                .as_ref()
                .map(|c| b.bind(g, "distortion_ctx".into(), &c.rows, true)),
            visual_prompts: self
                .prompts
                .visual
                .iter()
                .enumerate()
                .map(|(i, p)| b.bind(g, format!("visual_prompts.{i}"), p, true))
                .collect(),
            patch_projection: stage_patch_projection(g, b, &self.patch_projection, true),
            decoder: stage_decoder(g, b, &self.decoder, true),
            score_head: stage_score_head(g, b, &self.score_head, true),
        }
    }

    fn check_crops(&self, crops: &[ImageBuf]) -> Result<()> {
        if crops.is_empty() {
            return Err(Error::Data("image batch is empty".into()));
        }
        for c in crops {
            if c.width() != self.cfg.crop_size || c.height() != self.cfg.crop_size {
                return Err(Error::Data(format!(
                    "model input must be {}x{}, got {}x{}",
                    self.cfg.crop_size,
                    self.cfg.crop_size,
                    c.width(),
                    c.height()
                )));
            }
        }
        Ok(())
    }

    /// Encode both prompt-family taxonomies; `None` for a disabled family.
    pub fn class_embeddings(&self) -> Result<(Option<Mat<T>>, Option<Mat<T>>)> {
        let mut g = Graph::new();
        let mut b = Binder::new();
        let staged = self.stage(&mut g, &mut b);
        let (vs, vd) = build_taxonomies(&mut g, &staged, &self.text.vocab)?;
        Ok((
            vs.map(|id| g.value(id).clone()),
            vd.map(|id| g.value(id).clone()),
        ))
    }

    /// Unit-norm global embeddings and projected patch tokens for a batch of
    /// crop-sized images.
    pub fn encode_images(&self, crops: &[ImageBuf]) -> Result<(Mat<T>, Mat<T>)> {
        self.encode_images_with_override(crops, None)
    }

    /// Same as [`Model::encode_images`] but overwriting the discarded
    /// prompt-slot outputs with `override_rows` after every layer; outputs
    /// must not depend on it.
    pub fn encode_images_with_override(
        &self,
        crops: &[ImageBuf],
        override_rows: Option<Mat<T>>,
    ) -> Result<(Mat<T>, Mat<T>)> {
        self.check_crops(crops)?;
        let mut g = Graph::new();
        let mut b = Binder::new();
        let staged = self.stage(&mut g, &mut b);
        let ov = override_rows.map(|m| g.constant(m));
        let out = build_images(&mut g, &staged, &self.cfg, crops, ov)?;
        let z_img = g.value(out.z_img).clone();
        if z_img.data().iter().any(|&v| !v.to_f64().is_finite()) {
            return Err(Error::Numeric(
                "image embedding normalization produced a non-finite value".into(),
            ));
        }
        Ok((z_img, g.value(out.patch_embeds).clone()))
    }

    /// Token span of each vision layer's attention for one crop.
    pub fn attention_spans(&self, crops: &[ImageBuf]) -> Result<Vec<usize>> {
        self.check_crops(crops)?;
        let mut g = Graph::new();
        let mut b = Binder::new();
        let staged = self.stage(&mut g, &mut b);
        let out = build_images(&mut g, &staged, &self.cfg, crops, None)?;
        Ok(out.layer_tokens)
    }

    /// Quality scores of crop-sized images, one per crop.
    pub fn score_crops(&self, crops: &[ImageBuf]) -> Result<Vec<f64>> {
        self.check_crops(crops)?;
        let mut g = Graph::new();
        let mut b = Binder::new();
        let staged = self.stage(&mut g, &mut b);
        let scores = build_crop_scores(&mut g, &staged, &self.cfg, &self.text.vocab, crops)?;
        let m = g.value(scores);
        let out: Vec<f64> = (0..m.rows()).map(|r| m.at(r, 0).to_f64()).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("score forward produced a non-finite value".into()));
        }
        Ok(out)
    }

    /// Predicted quality of a full image: the mean score of
    /// `crops_per_image` random crops drawn from a seeded stream.
    pub fn predict(&self, img: &ImageBuf, seed: u64) -> Result<f64> {
        let mut r = rng::rng_for(seed, STREAM_PREDICT);
        let crops = random_crops(img, self.cfg.crops_per_image, self.cfg.crop_size, &mut r)?;
        let scores = self.score_crops(&crops)?;
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }

    /// Zero-shot (scene, distortion) labels for an image from the frozen
    /// backbone with handcrafted "a photo of a {class}" prompts, scored on
    /// the center crop without visual prompts.
    pub fn pseudo_labels(&self, img: &ImageBuf) -> Result<(usize, usize)> {
        let size = self.cfg.crop_size;
        if img.width() < size || img.height() < size {
            return Err(Error::Data(format!(
                "image {}x{} smaller than crop size {}",
                img.width(),
                img.height(),
                size
            )));
        }
        let crop = img.crop((img.width() - size) / 2, (img.height() - size) / 2, size)?;

        let mut g = Graph::new();
        let mut b = Binder::new();
        let staged = self.stage(&mut g, &mut b);
        let rows = g.constant(stacked_patch_matrix::<T>(
            std::slice::from_ref(&crop),
            self.cfg.patch_size,
        )?);
        let out = build_vision_forward(
            &mut g,
            &staged.vision,
            &staged.patch_projection,
            &[],
            VisualPromptMode::Off,
            rows,
            1,
            None,
        );
        let mut pick = |taxonomy: &Taxonomy| -> Result<usize> {
            let embeds = encode_plain_taxonomy(&mut g, &staged.text, &self.text.vocab, taxonomy)?;
            let sims = g.matmul_t(out.z_img, embeds, false, true);
            let row = g.value(sims).row(0);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if v > &row[best] {
                    best = i;
                }
            }
            Ok(best)
        };
        Ok((pick(scene_taxonomy())?, pick(distortion_taxonomy())?))
    }

    /// Build the full training objective over one batch as a single graph.
    pub fn training_graph(&self, batch: &TrainBatch) -> Result<TrainingGraph<T>> {
        let crops = batch.crops.len();
        self.check_crops(&batch.crops)?;
        if batch.targets.len() != crops {
            return Err(Error::Data(format!(
                "{} targets for {} crops",
                batch.targets.len(),
                crops
            )));
        }
        for labels in [&batch.scene_labels, &batch.distortion_labels].into_iter().flatten() {
            if labels.len() != crops {
                return Err(Error::Data(format!(
                    "{} labels for {} crops",
                    labels.len(),
                    crops
                )));
            }
        }

        let mut graph = Graph::new();
        let mut binder = Binder::new();
        let g = &mut graph;
        let staged = self.stage(g, &mut binder);
        let cfg = &self.cfg;

        let (v_scene, v_dist) = build_taxonomies(g, &staged, &self.text.vocab)?;
        let out = build_images(g, &staged, cfg, &batch.crops, None)?;

        let scene = match (v_scene, &batch.scene_labels) {
            (Some(vs), Some(labels)) => {
                check_labels(labels, scene_taxonomy())?;
                let probs = build_scene_probs(g, out.z_img, vs, cfg.temp_global);
                Some(build_cross_entropy(g, probs, labels))
            }
            _ => None,
        };

        let mut spatial_weights = Vec::new();
        let dist = match v_dist {
            Some(vd) => {
                let windows =
                    build_pooled_windows(g, out.patch_embeds, crops, cfg.grid(), cfg.window_count);
                let sim = build_distortion_similarity(g, &windows, vd, cfg.temp_spatial);
                spatial_weights = sim.weights.clone();
                match &batch.distortion_labels {
                    Some(labels) => {
                        check_labels(labels, distortion_taxonomy())?;
                        let probs = build_distortion_probs(g, &sim, cfg.temp_global);
                        Some(build_cross_entropy(g, probs, labels))
                    }
                    None => None,
                }
            }
            None => None,
        };

        let class_embeds: Vec<NodeId> = [v_scene, v_dist].into_iter().flatten().collect();
        let queries = build_queries(g, &class_embeds, crops);
        let memory = build_memory(g, out.z_img, out.patch_embeds, crops);
        let decoded = build_decode(g, &staged.decoder, queries, memory, crops);
        let scores = build_scores(g, &staged.score_head, decoded, crops);

        let targets: Vec<T> = batch.targets.iter().map(|&t| T::from_f64(t)).collect();
        let per_crop = g.smooth_l1_rows(
            scores,
            &targets,
            T::from_f64(cfg.smooth_l1_beta),
            cfg.plain_l1,
        );
        let score = g.mean_rows(per_crop);

        let mut total = g.scale(score, T::from_f64(cfg.lambda2));
        if let Some(d) = dist {
            let weighted = g.scale(d, T::from_f64(cfg.lambda1));
            total = g.add(total, weighted);
        }
        if let Some(s) = scene {
            total = g.add(total, s);
        }

        Ok(TrainingGraph {
            graph,
            binder,
            total,
            scene,
            dist,
            score,
            scores,
            spatial_weights,
            layer_tokens: out.layer_tokens,
        })
    }
}

/// `L_scene + lambda1 * L_dist + lambda2 * L_score`.
pub fn total_loss(l_scene: f64, l_dist: f64, l_score: f64, lambda1: f64, lambda2: f64) -> f64 {
    l_scene + lambda1 * l_dist + lambda2 * l_score
}

fn check_labels(labels: &[usize], taxonomy: &Taxonomy) -> Result<()> {
    for &l in labels {
        if l >= taxonomy.len() {
            return Err(Error::Data(format!(
                "{} label {} out of range [0, {})",
                taxonomy.kind(),
                l,
                taxonomy.len()
            )));
        }
    }
    Ok(())
}

/// Staged (graph-resident) model parameters.
pub struct StagedModel {
    pub text: StagedText,
    pub vision: StagedVision,
    pub scene_ctx: Option<NodeId>,
    pub distortion_ctx: Option<NodeId>,
    pub visual_prompts: Vec<NodeId>,
    pub patch_projection: StagedPatchProjection,
    pub decoder: StagedDecoder,
    pub score_head: StagedScoreHead,
}

/// One optimizer step's worth of data: all crops of a batch of images, each
/// crop carrying its image's target score and labels.
pub struct TrainBatch {
    pub crops: Vec<ImageBuf>,
    pub targets: Vec<f64>,
    pub scene_labels: Option<Vec<usize>>,
    pub distortion_labels: Option<Vec<usize>>,
}

/// One image's contribution to a batch.
pub struct BatchSample<'a> {
    pub image: &'a ImageBuf,
    pub target: f64,
    pub scene: Option<usize>,
    pub distortion: Option<usize>,
}

impl TrainBatch {
    /// Expand images into `crops_per_image` random crops each; every crop
    /// shares its image's target and labels. Label availability must be
    /// uniform across the batch.
    pub fn from_samples(
        cfg: &ModelConfig,
        samples: &[BatchSample],
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainBatch> {
        if samples.is_empty() {
            return Err(Error::Data("batch is empty".into()));
        }
        let with_scene = samples.iter().filter(|s| s.scene.is_some()).count();
        let with_dist = samples.iter().filter(|s| s.distortion.is_some()).count();
        if with_scene % samples.len() != 0 || with_dist % samples.len() != 0 {
            return Err(Error::Data(
                "label availability differs across the batch".into(),
            ));
        }
        let mut crops = Vec::with_capacity(samples.len() * cfg.crops_per_image);
        let mut targets = Vec::new();
        let mut scene = Vec::new();
        let mut dist = Vec::new();
        for s in samples {
            for crop in random_crops(s.image, cfg.crops_per_image, cfg.crop_size, rng)? {
                crops.push(crop);
                targets.push(s.target);
                if let Some(l) = s.scene {
                    scene.push(l);
                }
                if let Some(l) = s.distortion {
                    dist.push(l);
                }
            }
        }
        Ok(TrainBatch {
            crops,
            targets,
            scene_labels: (with_scene > 0).then_some(scene),
            distortion_labels: (with_dist > 0).then_some(dist),
        })
    }
}

/// Training objective assembled on one graph.
pub struct TrainingGraph<T: Scalar> {
    pub graph: Graph<T>,
    pub binder: Binder,
    /// Scalar `[1, 1]` total objective.
    pub total: NodeId,
    pub scene: Option<NodeId>,
    pub dist: Option<NodeId>,
    pub score: NodeId,
    /// Per-crop predicted scores, `[crops, 1]`.
    pub scores: NodeId,
    /// Per-crop spatial attention weights of the distortion branch.
    pub spatial_weights: Vec<NodeId>,
    pub layer_tokens: Vec<usize>,
}

/// Realized loss components of one step.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossValues {
    pub total: f64,
    pub scene: f64,
    pub dist: f64,
    pub score: f64,
}

impl<T: Scalar> TrainingGraph<T> {
    pub fn losses(&self) -> LossValues {
        let read = |id: NodeId| self.graph.value(id).item().to_f64();
        LossValues {
            total: read(self.total),
            scene: self.scene.map(read).unwrap_or(0.0),
            dist: self.dist.map(read).unwrap_or(0.0),
            score: read(self.score),
        }
    }
}

/// Encode the enabled prompt-family taxonomies with their learned context.
fn build_taxonomies<T: Scalar>(
    g: &mut Graph<T>,
    staged: &StagedModel,
    vocab: &Vocab,
) -> Result<(Option<NodeId>, Option<NodeId>)> {
    let scene = match staged.scene_ctx {
        Some(ctx) => Some(build_encode_taxonomy(g, &staged.text, ctx, scene_taxonomy(), vocab)?),
        None => None,
    };
    let dist = match staged.distortion_ctx {
        Some(ctx) => Some(build_encode_taxonomy(
            g,
            &staged.text,
            ctx,
            distortion_taxonomy(),
            vocab,
        )?),
        None => None,
    };
    Ok((scene, dist))
}

/// Context-free class embeddings of a whole taxonomy.
fn encode_plain_taxonomy<T: Scalar>(
    g: &mut Graph<T>,
    st: &StagedText,
    vocab: &Vocab,
    taxonomy: &Taxonomy,
) -> Result<NodeId> {
    let mut embeds = Vec::with_capacity(taxonomy.len());
    for name in taxonomy.names() {
        embeds.push(build_encode_plain_text(g, st, vocab, &format!("a photo of a {name}"))?);
    }
    Ok(g.concat_rows(&embeds))
}

/// Vision forward over a batch of crop images.
fn build_images<T: Scalar>(
    g: &mut Graph<T>,
    staged: &StagedModel,
    cfg: &ModelConfig,
    crops: &[ImageBuf],
    slot_override: Option<NodeId>,
) -> Result<VisionOutput> {
    let rows = g.constant(stacked_patch_matrix::<T>(crops, cfg.patch_size)?);
    Ok(build_vision_forward(
        g,
        &staged.vision,
        &staged.patch_projection,
        &staged.visual_prompts,
        cfg.visual_prompt_mode,
        rows,
        crops.len(),
        slot_override,
    ))
}

/// Scores for a batch of crops: taxonomy queries attend over the image
/// tokens, pooled per crop through the scoring head. `[crops, 1]`.
fn build_crop_scores<T: Scalar>(
    g: &mut Graph<T>,
    staged: &StagedModel,
    cfg: &ModelConfig,
    vocab: &Vocab,
    crops: &[ImageBuf],
) -> Result<NodeId> {
    let (v_scene, v_dist) = build_taxonomies(g, staged, vocab)?;
    let out = build_images(g, staged, cfg, crops, None)?;
    let class_embeds: Vec<NodeId> = [v_scene, v_dist].into_iter().flatten().collect();
    let queries = build_queries(g, &class_embeds, crops.len());
    let memory = build_memory(g, out.z_img, out.patch_embeds, crops.len());
    let decoded = build_decode(g, &staged.decoder, queries, memory, crops.len());
    Ok(build_scores(g, &staged.score_head, decoded, crops.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_scene, synthesize_dataset, ImageSource};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            vision_dim: 24,
            text_layers: 2,
            vision_layers: 2,
            decoder_layers: 1,
            text_heads: 2,
            vision_heads: 2,
            decoder_heads: 2,
            mlp_ratio: 2,
            patch_size: 8,
            image_size: 32,
            crop_size: 16,
            window_count: 2,
            crops_per_image: 2,
            batch_size: 2,
            ..ModelConfig::default()
        }
    }

    fn tiny_model() -> Model<f64> {
        Model::new(tiny_config()).unwrap()
    }

    fn tiny_batch(model: &Model<f64>, images: usize, seed: u64) -> TrainBatch {
        let ds = synthesize_dataset(images, seed, model.cfg.image_size);
        let imgs: Vec<ImageBuf> = ds
            .records
            .iter()
            .map(|r| match &r.source {
                ImageSource::Memory(img) => img.clone(),
                ImageSource::Path(_) => unreachable!(),
            })
            .collect();
        let samples: Vec<BatchSample> = imgs
            .iter()
            .zip(&ds.records)
            .map(|(image, r)| BatchSample {
                image,
                target: r.mos,
                scene: r.scene,
                distortion: r.distortion,
            })
            .collect();
        TrainBatch::from_samples(&model.cfg, &samples, &mut rng::rng_for(seed, 77)).unwrap()
    }

    #[test]
    fn trainable_partition_covers_exactly_the_six_groups_plus_projections() {
        let m = tiny_model();
        let mut groups: Vec<&str> = m
            .trainable_parameters()
            .iter()
            .filter_map(|(n, _)| m.group_of(n))
            .collect();
        groups.dedup();
        let mut expected: Vec<&str> = TRAINABLE_GROUPS.to_vec();
        expected.push("backbone_proj");
        groups.sort_unstable();
        expected.sort_unstable();
        assert_eq!(groups, expected);
        for (name, _) in m.named_tensors() {
            let trainable = m.is_trainable(&name);
            let backbone = name.starts_with("text.") || name.starts_with("vision.");
            if backbone && !name.ends_with(".proj") {
                assert!(!trainable, "{name} must stay frozen");
            }
        }
        let mut pretrained = tiny_model();
        pretrained.backbone_pretrained = true;
        assert!(!pretrained.is_trainable("text.proj"));
        assert!(!pretrained.is_trainable("vision.proj"));
    }

    #[test]
    fn staged_names_match_visited_names_and_shapes() {
        let m = tiny_model();
        let mut g = Graph::new();
        let mut b = Binder::new();
        m.stage(&mut g, &mut b);
        let named: BTreeMap<String, Shared<f64>> = m.named_tensors().into_iter().collect();
        assert_eq!(b.entries().len(), named.len());
        for (name, id) in b.entries() {
            let t = named.get(name).unwrap_or_else(|| panic!("{name} not visited"));
            assert_eq!(g.shape(*id), t.shape(), "{name} shape drift");
        }
    }

    #[test]
    fn training_graph_combines_losses_linearly() {
        let m = tiny_model();
        let batch = tiny_batch(&m, 3, 5);
        let tg = m.training_graph(&batch).unwrap();
        let l = tg.losses();
        assert!(l.total.is_finite() && l.scene > 0.0 && l.dist > 0.0 && l.score > 0.0);
        let expected = l.score * m.cfg.lambda2 + l.dist * m.cfg.lambda1 + l.scene;
        assert!((l.total - expected).abs() < 1e-12);
        assert_eq!(tg.spatial_weights.len(), batch.crops.len());
        assert_eq!(g_rows(&tg), batch.crops.len());
    }

    fn g_rows(tg: &TrainingGraph<f64>) -> usize {
        tg.graph.value(tg.scores).rows()
    }

    #[test]
    fn training_graph_without_labels_keeps_only_the_score_loss() {
        let m = tiny_model();
        let mut batch = tiny_batch(&m, 2, 6);
        batch.scene_labels = None;
        batch.distortion_labels = None;
        let tg = m.training_graph(&batch).unwrap();
        assert!(tg.scene.is_none() && tg.dist.is_none());
        let l = tg.losses();
        assert!((l.total - m.cfg.lambda2 * l.score).abs() < 1e-12);
    }

    #[test]
    fn disabled_scene_family_shrinks_queries_and_drops_its_loss() {
        let mut cfg = tiny_config();
        cfg.scene_prompts = false;
        let m: Model<f64> = Model::new(cfg).unwrap();
        assert!(m.prompts.scene_ctx.is_none());
        assert!(m.tensor("scene_ctx").is_none());
        let batch = tiny_batch(&m, 2, 7);
        let tg = m.training_graph(&batch).unwrap();
        assert!(tg.scene.is_none());
        assert!(tg.dist.is_some());
        let (q_rows, _) = tg.graph.shape(tg.scores);
        assert_eq!(q_rows, batch.crops.len());
    }

    #[test]
    fn predict_is_the_mean_of_seeded_crop_scores() {
        let m = tiny_model();
        let img = render_scene(2, 32, &mut rng::rng_for(3, 0));
        let a = m.predict(&img, 42).unwrap();
        let b = m.predict(&img, 42).unwrap();
        assert_eq!(a, b);
        let crops = random_crops(
            &img,
            m.cfg.crops_per_image,
            m.cfg.crop_size,
            &mut rng::rng_for(42, STREAM_PREDICT),
        )
        .unwrap();
        let scores = m.score_crops(&crops).unwrap();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!((a - mean).abs() < 1e-6);
        assert!(m.predict(&img, 43).unwrap() != a || scores.len() == 1);
    }

    #[test]
    fn predict_rejects_images_smaller_than_the_crop() {
        let m = tiny_model();
        let img = ImageBuf::new(8, 8);
        assert!(matches!(m.predict(&img, 1), Err(Error::Data(_))));
    }

    #[test]
    fn pseudo_labels_are_deterministic_and_in_range() {
        let m = tiny_model();
        let img = render_scene(4, 32, &mut rng::rng_for(9, 0));
        let (s1, d1) = m.pseudo_labels(&img).unwrap();
        let (s2, d2) = m.pseudo_labels(&img).unwrap();
        assert_eq!((s1, d1), (s2, d2));
        assert!(s1 < scene_taxonomy().len());
        assert!(d1 < distortion_taxonomy().len());
    }

    #[test]
    fn total_loss_is_linear_in_the_lambdas() {
        assert_eq!(total_loss(1.0, 2.0, 3.0, 1.0, 0.5), 4.5);
        assert_eq!(total_loss(1.5, 2.0, 3.0, 0.0, 0.0), 1.5);
        // Dyadic values keep f64 arithmetic exact.
        let (s, d, c) = (0.75, 0.5, 0.25);
        assert_eq!(total_loss(s, d, c, 2.0, 4.0) - total_loss(s, d, c, 1.0, 4.0), d);
        assert_eq!(total_loss(s, d, c, 2.0, 4.0) - total_loss(s, d, c, 2.0, 3.0), c);
    }

    #[test]
    fn cast_preserves_values_within_f32_precision() {
        let m = tiny_model();
        let m32: Model<f32> = m.cast();
        for ((n64, t64), (n32, t32)) in m.named_tensors().iter().zip(m32.named_tensors().iter()) {
            assert_eq!(n64, n32);
            for (a, b) in t64.data().iter().zip(t32.data().iter()) {
                assert!((a - *b as f64).abs() <= a.abs() * 1e-6 + 1e-9);
            }
        }
    }

    #[test]
    fn set_tensor_checks_name_and_shape() {
        let mut m = tiny_model();
        let shape = m.tensor("scene_ctx").unwrap().shape();
        assert!(m.set_tensor("scene_ctx", Mat::zeros(shape.0, shape.1)).is_ok());
        assert_eq!(m.tensor("scene_ctx").unwrap().sq_norm_f64(), 0.0);
        assert!(matches!(
            m.set_tensor("scene_ctx", Mat::zeros(1, 1)),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            m.set_tensor("nonexistent", Mat::zeros(1, 1)),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn gradients_reach_every_trainable_group() {
        let m = tiny_model();
        let batch = tiny_batch(&m, 2, 11);
        let tg = m.training_graph(&batch).unwrap();
        let grads = tg.graph.backward(tg.total);
        let mut seen: Vec<&str> = Vec::new();
        for (name, id) in tg.binder.entries() {
            if let Some(group) = m.group_of(name) {
                let g = grads
                    .get(*id)
                    .unwrap_or_else(|| panic!("{name} received no gradient"));
                if g.sq_norm_f64() > 0.0 && !seen.contains(&group) {
                    seen.push(group);
                }
            } else {
                assert!(grads.get(*id).is_none(), "{name} is frozen yet has a gradient");
            }
        }
        for group in TRAINABLE_GROUPS {
            assert!(seen.contains(&group), "group {group} has zero gradient");
        }
    }
}
