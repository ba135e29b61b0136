//! Model/training configuration and the fixed scene and distortion
//! taxonomies.
//!
//! Configs are stored as flat `key = value` text (UTF-8, `#` comments).
//! Unknown keys are rejected so typos surface instead of silently falling
//! back to defaults; missing keys keep their default.

use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Scene categories, in canonical index order.
pub const SCENE_CLASSES: [&str; 9] = [
    "animal",
    "cityscape",
    "human",
    "indoor scene",
    "landscape",
    "night scene",
    "plant",
    "still-life",
    "others",
];

/// Distortion categories, in canonical index order.
pub const DISTORTION_CLASSES: [&str; 11] = [
    "blur",
    "color-related",
    "contrast",
    "JPEG compression",
    "JPEG2000 compression",
    "noise",
    "over-exposure",
    "quantization",
    "under-exposure",
    "spatially-localized",
    "others",
];

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum TaxonomyKind {
    Scene,
    Distortion,
}

impl fmt::Display for TaxonomyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaxonomyKind::Scene => write!(f, "scene"),
            TaxonomyKind::Distortion => write!(f, "distortion"),
        }
    }
}

/// An ordered, immutable list of class names.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Taxonomy {
    kind: TaxonomyKind,
    names: Vec<&'static str>,
}

static SCENE: LazyLock<Taxonomy> = LazyLock::new(|| Taxonomy {
    kind: TaxonomyKind::Scene,
    names: SCENE_CLASSES.to_vec(),
});

static DISTORTION: LazyLock<Taxonomy> = LazyLock::new(|| Taxonomy {
    kind: TaxonomyKind::Distortion,
    names: DISTORTION_CLASSES.to_vec(),
});

/// The nine scene categories.
pub fn scene_taxonomy() -> &'static Taxonomy {
    &SCENE
}

/// The eleven distortion categories.
pub fn distortion_taxonomy() -> &'static Taxonomy {
    &DISTORTION
}

impl Taxonomy {
    pub fn kind(&self) -> TaxonomyKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[&'static str] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &'static str {
        self.names[index]
    }

    /// Case-insensitive lookup of a class name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        let needle = name.trim().to_ascii_lowercase();
        self.names
            .iter()
            .position(|n| n.to_ascii_lowercase() == needle)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualPromptMode {
    /// Fresh prompt tokens inserted before every vision layer; the previous
    /// layer's prompt-slot outputs are discarded.
    Deep,
    /// Prompt tokens inserted once before the first layer and left to
    /// propagate.
    Shallow,
    /// No prompt tokens; the vision branch is a plain patch transformer.
    Off,
}

impl VisualPromptMode {
    fn as_str(self) -> &'static str {
        match self {
            VisualPromptMode::Deep => "deep",
            VisualPromptMode::Shallow => "shallow",
            VisualPromptMode::Off => "off",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadPool {
    /// Mean over the decoded query rows before the scoring MLP.
    Mean,
    /// Flatten the decoded query rows into one vector before the MLP.
    Concat,
}

impl HeadPool {
    fn as_str(self) -> &'static str {
        match self {
            HeadPool::Mean => "mean",
            HeadPool::Concat => "concat",
        }
    }
}

/// Every dimension, temperature, loss weight and training hyperparameter of
/// the model. The default is the desk-scale configuration used throughout
/// the test suite; [`ModelConfig::paper_scale`] matches the published setup.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    // shared embedding space and backbone dimensions
    pub embed_dim: usize,
    pub vision_dim: usize,
    pub text_layers: usize,
    pub vision_layers: usize,
    pub decoder_layers: usize,
    pub text_heads: usize,
    pub vision_heads: usize,
    pub decoder_heads: usize,
    /// Width multiplier of the transformer feed-forward blocks.
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,

    // learned prompts
    /// Number of learnable context vectors per text prompt.
    pub text_prompt_len: usize,
    /// Number of learnable prompt tokens per vision layer.
    pub visual_prompt_len: usize,
    pub visual_prompt_mode: VisualPromptMode,
    pub scene_prompts: bool,
    pub distortion_prompts: bool,

    // alignment
    /// Side length of the pooled window grid (the patch map is reduced to
    /// `window_count^2` windows).
    pub window_count: usize,
    /// Temperature of the class softmaxes in both alignment losses.
    pub temp_global: f64,
    /// Temperature of the per-window weighting in the distortion branch.
    pub temp_spatial: f64,

    // objective
    pub lambda1: f64,
    pub lambda2: f64,
    pub smooth_l1_beta: f64,
    /// Use plain L1 for the score regression instead of smooth L1.
    pub plain_l1: bool,
    pub head_pool: HeadPool,
    /// Fixed output gain of the score head; should match the target MOS
    /// range so the regression MLP operates near unit scale.
    #[serde(default = "default_score_scale")]
    pub score_scale: f64,

    // training
    pub lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    /// Images per optimizer step (each contributes `crops_per_image` crops).
    pub batch_size: usize,
    pub crops_per_image: usize,
    pub crop_size: usize,
    pub seed: u64,

    /// Optional vocabulary file (one token per line, rank order = id order).
    /// Empty means the built-in word-level vocabulary.
    #[serde(default)]
    pub vocab_file: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            vision_dim: 96,
            text_layers: 4,
            vision_layers: 4,
            decoder_layers: 3,
            text_heads: 4,
            vision_heads: 4,
            decoder_heads: 4,
            mlp_ratio: 2,
            patch_size: 8,
            image_size: 64,
            text_prompt_len: 8,
            visual_prompt_len: 4,
            visual_prompt_mode: VisualPromptMode::Deep,
            scene_prompts: true,
            distortion_prompts: true,
            window_count: 2,
            temp_global: 0.01,
            temp_spatial: 0.1,
            lambda1: 1.0,
            lambda2: 0.5,
            smooth_l1_beta: 1.0,
            plain_l1: false,
            head_pool: HeadPool::Mean,
            score_scale: default_score_scale(),
            lr: 3e-3,
            warmup_epochs: 5,
            total_epochs: 30,
            batch_size: 16,
            crops_per_image: 4,
            crop_size: 48,
            seed: 0,
            vocab_file: String::new(),
        }
    }
}

fn default_score_scale() -> f64 {
    100.0
}

impl ModelConfig {
    /// Desk-scale configuration: small enough to train on a CPU in minutes.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Configuration matching the published full-scale setup (ViT-B/16
    /// backbone geometry, 224x224 crops, 30 epochs at lr 3e-5).
    pub fn paper_scale() -> Self {
        ModelConfig {
            embed_dim: 512,
            vision_dim: 768,
            text_layers: 12,
            vision_layers: 12,
            decoder_layers: 3,
            text_heads: 8,
            vision_heads: 12,
            decoder_heads: 8,
            mlp_ratio: 4,
            patch_size: 16,
            image_size: 224,
            text_prompt_len: 8,
            visual_prompt_len: 4,
            window_count: 7,
            lr: 3e-5,
            batch_size: 32,
            crops_per_image: 8,
            crop_size: 224,
            ..Self::default()
        }
    }

    /// Paper-scale configuration with the score-loss weight picked per
    /// dataset: 0.1 for LIVE and CSIQ, 0.5 otherwise.
    pub fn paper_scale_for(dataset: &str) -> Self {
        let mut cfg = Self::paper_scale();
        let name = dataset.trim().to_ascii_lowercase();
        cfg.lambda2 = if name == "live" || name == "csiq" { 0.1 } else { 0.5 };
        cfg
    }

    /// Patch-grid side length of a model input (a `crop_size` image).
    pub fn grid(&self) -> usize {
        self.crop_size / self.patch_size
    }

    /// Number of patch tokens of a model input.
    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Prompt tokens inserted per vision layer under the configured mode.
    pub fn active_visual_prompt_len(&self) -> usize {
        match self.visual_prompt_mode {
            VisualPromptMode::Off => 0,
            _ => self.visual_prompt_len,
        }
    }

    /// Rows of the multi-modal query block (9 scene + 11 distortion
    /// embeddings when both prompt families are enabled).
    pub fn query_rows(&self) -> usize {
        let mut rows = 0;
        if self.scene_prompts {
            rows += scene_taxonomy().len();
        }
        if self.distortion_prompts {
            rows += distortion_taxonomy().len();
        }
        rows
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: usize) -> Result<()> {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
            Ok(())
        }
        positive("embed_dim", self.embed_dim)?;
        positive("vision_dim", self.vision_dim)?;
        positive("text_layers", self.text_layers)?;
        positive("vision_layers", self.vision_layers)?;
        positive("decoder_layers", self.decoder_layers)?;
        positive("text_heads", self.text_heads)?;
        positive("vision_heads", self.vision_heads)?;
        positive("decoder_heads", self.decoder_heads)?;
        positive("mlp_ratio", self.mlp_ratio)?;
        positive("patch_size", self.patch_size)?;
        positive("image_size", self.image_size)?;
        positive("text_prompt_len", self.text_prompt_len)?;
        positive("window_count", self.window_count)?;
        positive("total_epochs", self.total_epochs)?;
        positive("batch_size", self.batch_size)?;
        positive("crops_per_image", self.crops_per_image)?;
        positive("crop_size", self.crop_size)?;

        if self.embed_dim % self.text_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by text_heads {}",
                self.embed_dim, self.text_heads
            )));
        }
        if self.embed_dim % self.decoder_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by decoder_heads {}",
                self.embed_dim, self.decoder_heads
            )));
        }
        if self.vision_dim % self.vision_heads != 0 {
            return Err(Error::Config(format!(
                "vision_dim {} not divisible by vision_heads {}",
                self.vision_dim, self.vision_heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if (self.image_size / self.patch_size) % self.window_count != 0 {
            return Err(Error::Config(format!(
                "patch grid {} not divisible by window_count {}",
                self.image_size / self.patch_size,
                self.window_count
            )));
        }
        if self.crop_size > self.image_size {
            return Err(Error::Config(format!(
                "crop_size {} exceeds image_size {}",
                self.crop_size, self.image_size
            )));
        }
        if self.crop_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "crop_size {} not divisible by patch_size {}",
                self.crop_size, self.patch_size
            )));
        }
        if (self.crop_size / self.patch_size) % self.window_count != 0 {
            return Err(Error::Config(format!(
                "crop patch grid {} not divisible by window_count {}",
                self.crop_size / self.patch_size,
                self.window_count
            )));
        }
        if !(self.temp_global > 0.0) {
            return Err(Error::Config("temp_global must be positive".into()));
        }
        if !(self.temp_spatial > 0.0) {
            return Err(Error::Config("temp_spatial must be positive".into()));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config("smooth_l1_beta must be positive".into()));
        }
        if !self.score_scale.is_finite() || !(self.score_scale > 0.0) {
            return Err(Error::Config("score_scale must be finite and positive".into()));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lr", self.lr)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !self.scene_prompts && !self.distortion_prompts {
            return Err(Error::Config(
                "at least one of scene_prompts / distortion_prompts must be enabled".into(),
            ));
        }
        Ok(())
    }

    /// Serialize as `key = value` lines. Loading the output reproduces the
    /// config exactly.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("embed_dim", self.embed_dim.to_string());
        push("vision_dim", self.vision_dim.to_string());
        push("text_layers", self.text_layers.to_string());
        push("vision_layers", self.vision_layers.to_string());
        push("decoder_layers", self.decoder_layers.to_string());
        push("text_heads", self.text_heads.to_string());
        push("vision_heads", self.vision_heads.to_string());
        push("decoder_heads", self.decoder_heads.to_string());
        push("mlp_ratio", self.mlp_ratio.to_string());
        push("patch_size", self.patch_size.to_string());
        push("image_size", self.image_size.to_string());
        push("text_prompt_len", self.text_prompt_len.to_string());
        push("visual_prompt_len", self.visual_prompt_len.to_string());
        push("visual_prompt_mode", self.visual_prompt_mode.as_str().to_string());
        push("scene_prompts", self.scene_prompts.to_string());
        push("distortion_prompts", self.distortion_prompts.to_string());
        push("window_count", self.window_count.to_string());
        push("temp_global", self.temp_global.to_string());
        push("temp_spatial", self.temp_spatial.to_string());
        push("lambda1", self.lambda1.to_string());
        push("lambda2", self.lambda2.to_string());
        push("smooth_l1_beta", self.smooth_l1_beta.to_string());
        push("plain_l1", self.plain_l1.to_string());
        push("head_pool", self.head_pool.as_str().to_string());
        push("score_scale", self.score_scale.to_string());
        push("lr", self.lr.to_string());
        push("warmup_epochs", self.warmup_epochs.to_string());
        push("total_epochs", self.total_epochs.to_string());
        push("batch_size", self.batch_size.to_string());
        push("crops_per_image", self.crops_per_image.to_string());
        push("crop_size", self.crop_size.to_string());
        push("seed", self.seed.to_string());
        if !self.vocab_file.is_empty() {
            push("vocab_file", self.vocab_file.clone());
        }
        out
    }

    /// Parse `key = value` text. Starts from the default config; keys
    /// present in the text override it. The result is validated.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {:?}",
                    lineno + 1,
                    raw
                )));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.set_key(key, value).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {}", lineno + 1, msg)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {:?} for {}", value, key)))
        }
        match key {
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "vision_dim" => self.vision_dim = parse(key, value)?,
            "text_layers" => self.text_layers = parse(key, value)?,
            "vision_layers" => self.vision_layers = parse(key, value)?,
            "decoder_layers" => self.decoder_layers = parse(key, value)?,
            "text_heads" => self.text_heads = parse(key, value)?,
            "vision_heads" => self.vision_heads = parse(key, value)?,
            "decoder_heads" => self.decoder_heads = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "text_prompt_len" => self.text_prompt_len = parse(key, value)?,
            "visual_prompt_len" => self.visual_prompt_len = parse(key, value)?,
            "visual_prompt_mode" => {
                self.visual_prompt_mode = match value {
                    "deep" => VisualPromptMode::Deep,
                    "shallow" => VisualPromptMode::Shallow,
                    "off" => VisualPromptMode::Off,
                    _ => {
                        return Err(Error::Config(format!(
                            "visual_prompt_mode must be deep|shallow|off, got {:?}",
                            value
                        )))
                    }
                }
            }
            "scene_prompts" => self.scene_prompts = parse(key, value)?,
            "distortion_prompts" => self.distortion_prompts = parse(key, value)?,
            "window_count" => self.window_count = parse(key, value)?,
            "temp_global" => self.temp_global = parse(key, value)?,
            "temp_spatial" => self.temp_spatial = parse(key, value)?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "smooth_l1_beta" => self.smooth_l1_beta = parse(key, value)?,
            "plain_l1" => self.plain_l1 = parse(key, value)?,
            "score_scale" => self.score_scale = parse(key, value)?,
            "head_pool" => {
                self.head_pool = match value {
                    "mean" => HeadPool::Mean,
                    "concat" => HeadPool::Concat,
                    _ => {
                        return Err(Error::Config(format!(
                            "head_pool must be mean|concat, got {:?}",
                            value
                        )))
                    }
                }
            }
            "lr" => self.lr = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "total_epochs" => self.total_epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "crops_per_image" => self.crops_per_image = parse(key, value)?,
            "crop_size" => self.crop_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "vocab_file" => self.vocab_file = value.to_string(),
            _ => return Err(Error::Config(format!("unknown key {:?}", key))),
        }
        Ok(())
    }

    /// Stable hex digest of the serialized config. Checkpoints embed this
    /// to detect evaluation against a different architecture.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_kv().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Load a config file (`key = value` text).
pub fn load_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ModelConfig::from_kv(&text)
}

/// Write a config file.
pub fn save_config(cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, cfg.to_kv()).map_err(|e| Error::io(path, e))
}
