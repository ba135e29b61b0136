//! Text branch: vocabulary, tokenizer, learnable prompt context vectors and
//! the frozen text transformer.
//!
//! A prompt for class `c` is `[SOS] v_1 ... v_M <class tokens> [EOS]` where
//! the `v_i` are learned context vectors shared across classes of one
//! taxonomy. The transformer runs over the assembled rows plus positional
//! embeddings; the output at the `[EOS]` position, projected and unit
//! normalized, is the class embedding.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::config::{Taxonomy, TaxonomyKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{
    encoder_layer_forward, ln_forward, randn, stage_encoder_layer, stage_ln, Binder, EncoderLayer,
    LayerNormParams, Shared, StagedEncoderLayer, StagedLn,
};
use crate::mat::{Mat, Scalar};

/// Hard cap on assembled token sequences.
pub const MAX_TEXT_LEN: usize = 77;

pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Word-level vocabulary. Tokens are lower-cased whitespace-separated
/// words; unknown words map to the reserved `<unk>` id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    id_of: BTreeMap<String, usize>,
    tokens: Vec<String>,
    sos: usize,
    eos: usize,
    unk: usize,
}

impl Vocab {
    /// Built-in vocabulary: the three specials, every word of both
    /// taxonomies and the words of the handcrafted zero-shot prompt.
    pub fn default_vocab() -> Vocab {
        let mut words: Vec<String> = Vec::new();
        for name in crate::config::SCENE_CLASSES
            .iter()
            .chain(crate::config::DISTORTION_CLASSES.iter())
        {
            words.extend(name.to_ascii_lowercase().split_whitespace().map(String::from));
        }
        for w in ["a", "photo", "of"] {
            words.push(w.to_string());
        }
        words.sort();
        words.dedup();
        let mut tokens = vec![SOS.to_string(), EOS.to_string(), UNK.to_string()];
        tokens.extend(words);
        Self::from_token_list(tokens).expect("built-in vocabulary is well-formed")
    }

    /// Vocabulary from an explicit token list; ids follow list order. The
    /// special tokens are picked up where the list places them, or appended
    /// when absent.
    pub fn from_token_list(mut tokens: Vec<String>) -> Result<Vocab> {
        for special in [SOS, EOS, UNK] {
            if !tokens.iter().any(|t| t == special) {
                tokens.push(special.to_string());
            }
        }
        let mut id_of = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if id_of.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab {
            sos: id_of[SOS],
            eos: id_of[EOS],
            unk: id_of[UNK],
            id_of,
            tokens,
        })
    }

    /// Load a vocabulary file: one token per line, rank order = id order.
    /// Tokens are lower-cased to match the tokenizer's casing.
    pub fn load(path: impl AsRef<Path>) -> Result<Vocab> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text
            .lines()
            .map(|l| l.trim().to_ascii_lowercase())
            .filter(|l| !l.is_empty())
            .collect();
        if tokens.is_empty() {
            return Err(Error::Data(format!(
                "vocabulary file {} has no tokens",
                path.display()
            )));
        }
        Self::from_token_list(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sos(&self) -> usize {
        self.sos
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn unk(&self) -> usize {
        self.unk
    }

    /// Ids of the words of `text`, without `[SOS]`/`[EOS]`.
    pub fn word_ids(&self, text: &str) -> Result<Vec<usize>> {
        let lowered = text.to_ascii_lowercase();
        let words: Vec<&str> = lowered.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::Data("cannot tokenize empty text".into()));
        }
        Ok(words
            .into_iter()
            .map(|w| self.id_of.get(w).copied().unwrap_or(self.unk))
            .collect())
    }

    /// Full sequence `[SOS] words [EOS]`, checked against [`MAX_TEXT_LEN`].
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![self.sos];
        ids.extend(self.word_ids(text)?);
        ids.push(self.eos);
        if ids.len() > MAX_TEXT_LEN {
            return Err(Error::Data(format!(
                "sequence of {} tokens exceeds the {} limit",
                ids.len(),
                MAX_TEXT_LEN
            )));
        }
        Ok(ids)
    }
}

/// Learnable prompt context vectors for one taxonomy (`M x embed_dim`).
#[derive(Clone)]
pub struct ContextVectors<T: Scalar> {
    pub kind: TaxonomyKind,
    pub rows: Shared<T>,
}

impl<T: Scalar> ContextVectors<T> {
    pub fn init(rng: &mut ChaCha8Rng, kind: TaxonomyKind, len: usize, dim: usize) -> Self {
        ContextVectors {
            kind,
            rows: randn(rng, len, dim, 0.02),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ContextVectors<U> {
        ContextVectors {
            kind: self.kind,
            rows: Arc::new(self.rows.cast()),
        }
    }
}

/// Frozen text transformer plus its embedding tables and output projection.
pub struct TextBranch<T: Scalar> {
    pub vocab: Vocab,
    pub token_embed: Shared<T>,
    pub pos_embed: Shared<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub ln_final: LayerNormParams<T>,
    pub proj: Shared<T>,
    pub heads: usize,
}

impl<T: Scalar> TextBranch<T> {
    pub fn init(
        rng: &mut ChaCha8Rng,
        vocab: Vocab,
        dim: usize,
        layers: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        TextBranch {
            token_embed: randn(rng, vocab.len(), dim, 0.02),
            pos_embed: randn(rng, MAX_TEXT_LEN, dim, 0.01),
            layers: (0..layers).map(|_| EncoderLayer::init(rng, dim, mlp_ratio)).collect(),
            ln_final: LayerNormParams::init(dim),
            proj: randn(rng, dim, dim, (1.0 / dim as f64).sqrt()),
            heads,
            vocab,
        }
    }

    pub fn cast<U: Scalar>(&self) -> TextBranch<U> {
        TextBranch {
            vocab: self.vocab.clone(),
            token_embed: Arc::new(self.token_embed.cast()),
            pos_embed: Arc::new(self.pos_embed.cast()),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            ln_final: self.ln_final.cast(),
            proj: Arc::new(self.proj.cast()),
            heads: self.heads,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Shared<T>)) {
        f("text.token_embed".into(), &self.token_embed);
        f("text.pos_embed".into(), &self.pos_embed);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("text.layers.{i}"), f);
        }
        self.ln_final.visit("text.ln_final", f);
        f("text.proj".into(), &self.proj);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Shared<T>)) {
        f("text.token_embed".into(), &mut self.token_embed);
        f("text.pos_embed".into(), &mut self.pos_embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("text.layers.{i}"), f);
        }
        self.ln_final.visit_mut("text.ln_final", f);
        f("text.proj".into(), &mut self.proj);
    }

    /// Context-free prompt rows for `text` (token embeddings only). Rows
    /// follow `[SOS] words [EOS]` order.
    pub fn plain_prompt_rows(&self, text: &str) -> Result<Mat<T>> {
        let ids = self.vocab.tokenize(text)?;
        let mut out = Mat::zeros(ids.len(), self.token_embed.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.token_embed.row(id));
        }
        Ok(out)
    }
}

/// Staged (graph-resident) text branch.
pub struct StagedText {
    pub token_embed: NodeId,
    pub pos_embed: NodeId,
    pub layers: Vec<StagedEncoderLayer>,
    pub ln_final: StagedLn,
    pub proj: NodeId,
    pub heads: usize,
}

/// Stage the text backbone. The backbone is frozen; only the output
/// projection is optionally trainable (it is when the backbone was randomly
/// initialized rather than loaded from pretrained weights).
pub fn stage_text<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder,
    t: &TextBranch<T>,
    proj_trainable: bool,
) -> StagedText {
    StagedText {
        token_embed: b.bind(g, "text.token_embed".into(), &t.token_embed, false),
        pos_embed: b.bind(g, "text.pos_embed".into(), &t.pos_embed, false),
        layers: t
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| stage_encoder_layer(g, b, &format!("text.layers.{i}"), l, false))
            .collect(),
        ln_final: stage_ln(g, b, "text.ln_final", &t.ln_final, false),
        proj: b.bind(g, "text.proj".into(), &t.proj, proj_trainable),
        heads: t.heads,
    }
}

/// Token layout of an assembled prompt: ids for the embedding-table rows
/// and the position where the learned context block is spliced in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptLayout {
    /// `[SOS]` id, then class-token ids, then `[EOS]` id.
    pub ids: Vec<usize>,
    /// Context rows are inserted after the first `ids` entry.
    pub ctx_len: usize,
}

impl PromptLayout {
    pub fn total_len(&self) -> usize {
        self.ids.len() + self.ctx_len
    }
}

/// Layout for one taxonomy class: `[SOS] <ctx x M> <class tokens> [EOS]`.
pub fn class_prompt_layout(
    vocab: &Vocab,
    taxonomy: &Taxonomy,
    class_name: &str,
    ctx_len: usize,
) -> Result<PromptLayout> {
    let Some(index) = taxonomy.index_of(class_name) else {
        return Err(Error::Data(format!(
            "{:?} is not a {} class",
            class_name,
            taxonomy.kind()
        )));
    };
    let mut ids = vec![vocab.sos()];
    ids.extend(vocab.word_ids(taxonomy.name(index))?);
    ids.push(vocab.eos());
    let layout = PromptLayout { ids, ctx_len };
    if layout.total_len() > MAX_TEXT_LEN {
        return Err(Error::Data(format!(
            "assembled prompt of {} rows exceeds the {} limit",
            layout.total_len(),
            MAX_TEXT_LEN
        )));
    }
    Ok(layout)
}

/// Assemble prompt rows on the graph: `[SOS]` embedding, the context rows
/// verbatim, class-token embeddings, `[EOS]` embedding. Positional
/// embeddings are added later by the encoder.
pub fn build_prompt_rows<T: Scalar>(
    g: &mut Graph<T>,
    st: &StagedText,
    ctx: Option<NodeId>,
    layout: &PromptLayout,
) -> NodeId {
    let sos = g.gather_rows(st.token_embed, &layout.ids[..1]);
    let rest = g.gather_rows(st.token_embed, &layout.ids[1..]);
    match ctx {
        Some(ctx) => {
            assert_eq!(
                g.shape(ctx).0,
                layout.ctx_len,
                "context rows disagree with layout"
            );
            g.concat_rows(&[sos, ctx, rest])
        }
        None => {
            assert_eq!(layout.ctx_len, 0, "layout expects context rows");
            g.concat_rows(&[sos, rest])
        }
    }
}

/// Encode assembled prompt rows into a unit-norm class embedding
/// (`1 x embed_dim`): add positional embeddings, run the transformer, take
/// the `[EOS]` row, project, normalize.
pub fn build_encode_text<T: Scalar>(g: &mut Graph<T>, st: &StagedText, rows: NodeId) -> NodeId {
    let (len, _) = g.shape(rows);
    let pos = g.slice_rows(st.pos_embed, 0, len);
    let mut x = g.add(rows, pos);
    for layer in &st.layers {
        x = encoder_layer_forward(g, x, layer, st.heads, 1);
    }
    let x = ln_forward(g, x, &st.ln_final);
    let eos = g.slice_rows(x, len - 1, 1);
    let projected = g.matmul(eos, st.proj);
    g.l2_normalize_rows(projected)
}

/// Encode every class of a taxonomy with the given context vectors;
/// returns the stacked `[num_classes x embed_dim]` node.
pub fn build_encode_taxonomy<T: Scalar>(
    g: &mut Graph<T>,
    st: &StagedText,
    ctx: NodeId,
    taxonomy: &Taxonomy,
    vocab: &Vocab,
) -> Result<NodeId> {
    let ctx_len = g.shape(ctx).0;
    let mut class_embeds = Vec::with_capacity(taxonomy.len());
    for name in taxonomy.names() {
        let layout = class_prompt_layout(vocab, taxonomy, name, ctx_len)?;
        let rows = build_prompt_rows(g, st, Some(ctx), &layout);
        class_embeds.push(build_encode_text(g, st, rows));
    }
    Ok(g.concat_rows(&class_embeds))
}

/// Encode a handcrafted text (no learned context), e.g. the zero-shot
/// pseudo-label prompts.
pub fn build_encode_plain_text<T: Scalar>(
    g: &mut Graph<T>,
    st: &StagedText,
    vocab: &Vocab,
    text: &str,
) -> Result<NodeId> {
    let ids = vocab.tokenize(text)?;
    let rows = g.gather_rows(st.token_embed, &ids);
    Ok(build_encode_text(g, st, rows))
}
