//! Unimodal text encoder and the video-grounded text encoder.
//!
//! Both run the same [`TextLayer`] stack; the grounded encoder additionally
//! runs one [`CrossLayer`] between self-attention and the feed-forward block
//! of every layer. Sharing is structural: both paths read the same
//! [`ParamId`]s, so a write through either is seen by the other.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Attention, FeedForward, LayerNorm, Linear};
use crate::params::{normal_tensor, ParamGroup, ParamId, ParamStore};
use crate::tensor::Float;

/// Reserved id of the unimodal summary token.
pub const CLS_ID: usize = 0;
/// Reserved id of the grounded summary token.
pub const ENCODE_ID: usize = 1;

/// Which summary token occupies position 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Cls,
    Encode,
}

impl Mode {
    pub fn token(self) -> usize {
        match self {
            Mode::Cls => CLS_ID,
            Mode::Encode => ENCODE_ID,
        }
    }
}

/// Token ids with the mode token at position 0.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    /// Prefix `words` with the mode token.
    pub fn new(mode: Mode, words: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(words.len() + 1);
        ids.push(mode.token());
        ids.extend_from_slice(words);
        Self { ids }
    }

    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn words(&self) -> &[usize] {
        &self.ids[1..]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mode(&self) -> Option<Mode> {
        match self.ids[0] {
            CLS_ID => Some(Mode::Cls),
            ENCODE_ID => Some(Mode::Encode),
            _ => None,
        }
    }

    /// Same words, re-prefixed for the other encoder.
    pub fn with_mode(&self, mode: Mode) -> Self {
        let mut ids = self.ids.clone();
        ids[0] = mode.token();
        Self { ids }
    }

    pub fn validate(&self, vocab: usize, max_len: usize) -> Result<()> {
        if self.ids.is_empty() || self.ids.len() > max_len {
            return Err(Error::InvalidArgument(format!(
                "token sequence length {} not in 1..={max_len}",
                self.ids.len()
            )));
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        Ok(())
    }
}

/// Fixed synthetic vocabulary: two reserved ids, then "object" words, then "motion" words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    objects: usize,
}

impl Vocabulary {
    pub fn synthetic(vocab_size: usize) -> Self {
        let free = vocab_size.saturating_sub(2);
        let objects = free / 2;
        let motions = free - objects;
        let mut words = vec!["[CLS]".to_string(), "[ENC]".to_string()];
        words.extend((0..objects).map(|i| format!("obj{i:02}")));
        words.extend((0..motions).map(|i| format!("mot{i:02}")));
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index, objects }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn object_ids(&self) -> std::ops::Range<usize> {
        2..2 + self.objects
    }

    pub fn motion_ids(&self) -> std::ops::Range<usize> {
        2 + self.objects..self.words.len()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Whitespace tokenization; any word outside the vocabulary is an error.
    pub fn tokenize(&self, text: &str, mode: Mode) -> Result<TokenSequence> {
        let words = text
            .split_whitespace()
            .map(|w| self.index.get(w).copied().ok_or_else(|| Error::UnknownWord(w.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenSequence::new(mode, &words))
    }

    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        seq.words()
            .iter()
            .map(|&id| self.word(id).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextLayer {
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossLayer {
    pub norm_cross: LayerNorm,
    pub cross_attn: Attention,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextEncoder {
    pub dim: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub heads: usize,
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub norm_embed: LayerNorm,
    pub layers: Vec<TextLayer>,
    pub cross: Vec<CrossLayer>,
    pub norm_final: LayerNorm,
    pub proj: Linear,
}

/// Unimodal encoder output as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct EncodedText {
    /// `len × D`
    pub states: Var,
    /// Row-0 output before projection, `1 × D`.
    pub cls_full: Var,
    /// l2-normalized projection of `cls_full`, `1 × D_p`.
    pub cls: Var,
}

/// Grounded encoder output as graph nodes.
#[derive(Debug, Clone)]
pub struct GroundedOutput {
    /// Output at the [Encode] position, `1 × D`.
    pub t_enc: Var,
    /// Cross-attention probabilities, indexed `[layer][head]`, each `len × rows(V_f)`.
    pub cross_probs: Vec<Vec<Var>>,
}

impl TextEncoder {
    pub fn new<F: Float, R: Rng>(cfg: &ModelConfig, store: &mut ParamStore<F>, rng: &mut R) -> Self {
        let d = cfg.hidden_dim;
        let std = cfg.init_std;
        let token_embed = store.insert("text.token_embed", normal_tensor(&[cfg.vocab_size, d], std, rng), ParamGroup::NoDecay);
        let pos_embed = store.insert("text.pos_embed", normal_tensor(&[cfg.max_text_len, d], std, rng), ParamGroup::NoDecay);
        let norm_embed = LayerNorm::new(store, "text.norm_embed", d);
        let layers = (0..cfg.num_layers)
            .map(|l| TextLayer {
                norm_self: LayerNorm::new(store, &format!("text.layers.{l}.norm_self"), d),
                self_attn: Attention::new(store, &format!("text.layers.{l}.self_attn"), d, std, rng),
                norm_ffn: LayerNorm::new(store, &format!("text.layers.{l}.norm_ffn"), d),
                ffn: FeedForward::new(store, &format!("text.layers.{l}.ffn"), d, cfg.ffn_dim, std, rng),
            })
            .collect();
        let cross = (0..cfg.num_layers)
            .map(|l| CrossLayer {
                norm_cross: LayerNorm::new(store, &format!("text.cross.{l}.norm_cross"), d),
                cross_attn: Attention::new(store, &format!("text.cross.{l}.cross_attn"), d, std, rng),
            })
            .collect();
        let norm_final = LayerNorm::new(store, "text.norm_final", d);
        let proj = Linear::new(store, "text.proj", d, cfg.projection_dim, std, rng);
        Self {
            dim: d,
            vocab: cfg.vocab_size,
            max_len: cfg.max_text_len,
            heads: cfg.num_heads,
            token_embed,
            pos_embed,
            norm_embed,
            layers,
            cross,
            norm_final,
            proj,
        }
    }

    fn embed<F: Float>(&self, g: &mut Graph<'_, F>, tokens: &TokenSequence) -> Result<Var> {
        tokens.validate(self.vocab, self.max_len)?;
        let table = g.param(self.token_embed);
        let x = g.embedding(table, tokens.ids())?;
        let pos = g.param(self.pos_embed);
        let pos = g.slice_rows(pos, 0, tokens.len())?;
        let x = g.add(x, pos)?;
        self.norm_embed.forward(g, x)
    }

    /// Run the layer stack; cross-attend to `video` when given.
    fn run<F: Float>(&self, g: &mut Graph<'_, F>, tokens: &TokenSequence, video: Option<Var>) -> Result<(Var, Vec<Vec<Var>>)> {
        let mut x = self.embed(g, tokens)?;
        let mut probs = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer.norm_self.forward(g, x)?;
            let (a, _) = layer.self_attn.forward(g, h, h, self.heads)?;
            x = g.add(x, a)?;
            if let Some(v) = video {
                let cross = &self.cross[l];
                let h = cross.norm_cross.forward(g, x)?;
                let (a, p) = cross.cross_attn.forward(g, h, v, self.heads)?;
                x = g.add(x, a)?;
                probs.push(p);
            }
            let h = layer.norm_ffn.forward(g, x)?;
            let f = layer.ffn.forward(g, h)?;
            x = g.add(x, f)?;
        }
        Ok((self.norm_final.forward(g, x)?, probs))
    }

    /// Unimodal encoding. Position 0 must hold the [CLS] token.
    pub fn encode_text<F: Float>(&self, g: &mut Graph<'_, F>, tokens: &TokenSequence) -> Result<EncodedText> {
        if tokens.mode() != Some(Mode::Cls) {
            return Err(Error::InvalidArgument("unimodal encoder needs [CLS] at position 0".into()));
        }
        let (states, _) = self.run(g, tokens, None)?;
        let cls_full = g.slice_rows(states, 0, 1)?;
        let proj = self.proj.forward(g, cls_full)?;
        let cls = g.l2_normalize_rows(proj)?;
        Ok(EncodedText { states, cls_full, cls })
    }

    /// Unimodal layer stack on any mode prefix, returning all token states.
    pub fn unimodal_states<F: Float>(&self, g: &mut Graph<'_, F>, tokens: &TokenSequence) -> Result<Var> {
        Ok(self.run(g, tokens, None)?.0)
    }

    /// Grounded encoding against pooled video features `video_features` (`rows × D`).
    /// Position 0 must hold the [Encode] token.
    pub fn encode_grounded<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        tokens: &TokenSequence,
        video_features: Var,
    ) -> Result<GroundedOutput> {
        if tokens.mode() != Some(Mode::Encode) {
            return Err(Error::InvalidArgument("grounded encoder needs [Encode] at position 0".into()));
        }
        let width = g.dims(video_features).1;
        let d = self.dim;
        if width != d {
            return shape_err("encode_grounded", format!("video features have width {width}, expected {d}"));
        }
        let (states, cross_probs) = self.run(g, tokens, Some(video_features))?;
        let t_enc = g.slice_rows(states, 0, 1)?;
        Ok(GroundedOutput { t_enc, cross_probs })
    }

    /// Parameters read by [`encode_text`](Self::encode_text).
    pub fn unimodal_param_ids(&self) -> BTreeSet<ParamId> {
        let mut ids: BTreeSet<ParamId> = [self.token_embed, self.pos_embed].into_iter().collect();
        ids.extend(self.norm_embed.ids());
        for l in &self.layers {
            ids.extend(l.norm_self.ids());
            ids.extend(l.self_attn.ids());
            ids.extend(l.norm_ffn.ids());
            ids.extend(l.ffn.ids());
        }
        ids.extend(self.norm_final.ids());
        ids.extend(self.proj.ids());
        ids
    }

    /// Parameters owned by the cross-attention blocks alone.
    pub fn cross_param_ids(&self) -> BTreeSet<ParamId> {
        let mut ids = BTreeSet::new();
        for c in &self.cross {
            ids.extend(c.norm_cross.ids());
            ids.extend(c.cross_attn.ids());
        }
        ids
    }

    /// Parameters read by [`encode_grounded`](Self::encode_grounded).
    pub fn grounded_param_ids(&self) -> BTreeSet<ParamId> {
        let mut ids = self.unimodal_param_ids();
        ids.remove(&self.proj.weight);
        ids.remove(&self.proj.bias);
        ids.extend(self.cross_param_ids());
        ids
    }

    /// True when the grounded encoder reads exactly the unimodal self-attention,
    /// feed-forward and embedding tensors plus its own cross-attention blocks,
    /// and those blocks share nothing with the unimodal set.
    pub fn shared_parameter_check(&self) -> bool {
        let uni = self.unimodal_param_ids();
        let cross = self.cross_param_ids();
        let grounded = self.grounded_param_ids();
        let shared: BTreeSet<ParamId> = uni
            .iter()
            .copied()
            .filter(|id| *id != self.proj.weight && *id != self.proj.bias)
            .collect();
        let expected: BTreeSet<ParamId> = shared.union(&cross).copied().collect();
        uni.is_disjoint(&cross) && grounded == expected && cross.len() == self.cross.len() * 10
    }
}
