//! Dual encoders, the multi-modal fusion encoder, prediction heads and
//! contrastive projections.
//!
//! The visual backbone is reduced to a linear projection of pre-pooled
//! frame features, plus a learned per-frame temporal embedding. Text goes
//! through a small pre-norm transformer. The fusion encoder sees frame
//! slots first and word slots after, with full bidirectional attention
//! over unmasked slots.

mod params;
mod transformer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use params::{BoundParams, ParamStore};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use transformer::{attention_mask, block_forward, init_block, init_normal, linear, LN_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Width of the shared contrastive embedding space.
    pub proj_dim: usize,
    pub text_vocab_size: usize,
    /// Maximum number of word tokens per sentence, excluding CLS and SEP.
    pub max_text_len: usize,
    pub frames_per_video: usize,
    pub raw_frame_dim: usize,
    pub n_layers_text: usize,
    pub n_layers_fusion: usize,
    /// Upper bound on slots entering the fusion encoder; also the length of
    /// the merged-sequence position table.
    pub max_merged_len: usize,
    pub pad_token_id: usize,
    pub cls_token_id: usize,
    pub sep_token_id: usize,
    pub mask_token_id: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            proj_dim: 32,
            text_vocab_size: 128,
            max_text_len: 16,
            frames_per_video: 8,
            raw_frame_dim: 32,
            n_layers_text: 2,
            n_layers_fusion: 2,
            max_merged_len: 160,
            pad_token_id: 0,
            cls_token_id: 1,
            sep_token_id: 2,
            mask_token_id: 3,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "model.d_model ({}) must be a positive multiple of model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        for (name, v) in [
            ("model.d_ff", self.d_ff),
            ("model.proj_dim", self.proj_dim),
            ("model.frames_per_video", self.frames_per_video),
            ("model.raw_frame_dim", self.raw_frame_dim),
            ("model.max_text_len", self.max_text_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        let specials = self.special_ids();
        for (i, a) in specials.iter().enumerate() {
            if *a >= self.text_vocab_size {
                return bad(format!("special token id {a} >= model.text_vocab_size {}", self.text_vocab_size));
            }
            if specials[i + 1..].contains(a) {
                return bad(format!("special token id {a} is used twice"));
            }
        }
        if self.init_std.is_nan() || self.init_std <= 0.0 {
            return bad("model.init_std must be positive".into());
        }
        Ok(())
    }

    pub fn special_ids(&self) -> [usize; 4] {
        [self.pad_token_id, self.cls_token_id, self.sep_token_id, self.mask_token_id]
    }

    pub fn is_special(&self, id: usize) -> bool {
        self.special_ids().contains(&id)
    }

    /// Token count of the longest sentence, CLS and SEP included.
    pub fn max_text_tokens(&self) -> usize {
        self.max_text_len + 2
    }
}

/// Frame tokens of one video after projection and temporal embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTokenSequence {
    pub video_id: u64,
    pub tokens: Tensor,
}

/// A sentence as token ids, framed by exactly one CLS and one SEP.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub text_id: u64,
    pub ids: Vec<usize>,
}

impl TokenizedText {
    /// Wraps `words` in CLS ... SEP.
    pub fn from_words(text_id: u64, words: &[usize], cfg: &ModelConfig) -> Result<Self> {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(cfg.cls_token_id);
        ids.extend_from_slice(words);
        ids.push(cfg.sep_token_id);
        let t = Self { text_id, ids };
        t.validate(cfg)?;
        Ok(t)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let n = self.ids.len();
        if n < 2 || n > cfg.max_text_tokens() {
            return Err(Error::Config(format!(
                "text {} has {n} tokens, expected 2..={}",
                self.text_id,
                cfg.max_text_tokens()
            )));
        }
        if self.ids[0] != cfg.cls_token_id || self.ids[n - 1] != cfg.sep_token_id {
            return Err(Error::Config(format!("text {} must start with CLS and end with SEP", self.text_id)));
        }
        let inner = &self.ids[1..n - 1];
        if inner.iter().any(|&t| t == cfg.cls_token_id || t == cfg.sep_token_id) {
            return Err(Error::Config(format!("text {} has an interior CLS or SEP", self.text_id)));
        }
        if let Some(&bad) = self.ids.iter().find(|&&t| t >= cfg.text_vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                len: cfg.text_vocab_size,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Frame,
    Word,
}

/// Frame slots followed by word slots, ready for [`TemporalModel::fuse`].
#[derive(Clone, Debug)]
pub struct MultiModalBatch {
    pub tokens: Var,
    /// false hides the slot from every query.
    pub attention_mask: Vec<bool>,
    pub segment: Vec<Segment>,
    pub frame_count: usize,
}

impl MultiModalBatch {
    pub fn new(g: &mut Graph, frames: Var, words: Var) -> Result<Self> {
        let nf = g.value(frames).rows();
        let nw = g.value(words).rows();
        let tokens = g.concat_rows(&[frames, words])?;
        let mut segment = vec![Segment::Frame; nf];
        segment.extend(std::iter::repeat_n(Segment::Word, nw));
        Ok(Self {
            tokens,
            attention_mask: vec![true; nf + nw],
            segment,
            frame_count: nf,
        })
    }

    pub fn len(&self) -> usize {
        self.segment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment.is_empty()
    }

    pub fn word_count(&self) -> usize {
        self.len() - self.frame_count
    }
}

#[derive(Clone, Debug)]
pub struct TemporalModel {
    cfg: ModelConfig,
}

impl TemporalModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn init_params(&self, seed: u64, temperature: f64) -> ParamStore {
        let c = &self.cfg;
        let d = c.d_model;
        let std = c.init_std;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::default();

        s.insert("video.proj.w", init_normal(&mut rng, &[c.raw_frame_dim, d], std));
        s.insert("video.proj.b", Tensor::zeros(&[d]));
        s.insert("video.temporal_pos", init_normal(&mut rng, &[c.frames_per_video, d], std));

        s.insert("text.tok_emb", init_normal(&mut rng, &[c.text_vocab_size, d], std));
        s.insert("text.pos_emb", init_normal(&mut rng, &[c.max_text_tokens(), d], std));
        for l in 0..c.n_layers_text {
            init_block(&mut s, &format!("text.layer{l}"), d, c.d_ff, std, &mut rng);
        }
        s.insert("text.ln_f.g", Tensor::full(&[d], 1.0));
        s.insert("text.ln_f.b", Tensor::zeros(&[d]));

        s.insert("fusion.merged_pos", init_normal(&mut rng, &[c.max_merged_len, d], std));
        s.insert("fusion.type_emb", init_normal(&mut rng, &[2, d], std));
        for l in 0..c.n_layers_fusion {
            init_block(&mut s, &format!("fusion.layer{l}"), d, c.d_ff, std, &mut rng);
        }
        s.insert("fusion.ln_f.g", Tensor::full(&[d], 1.0));
        s.insert("fusion.ln_f.b", Tensor::zeros(&[d]));

        for head in ["head.boundary", "head.span"] {
            s.insert(format!("{head}.w1"), init_normal(&mut rng, &[d, d], std));
            s.insert(format!("{head}.b1"), Tensor::zeros(&[d]));
            s.insert(format!("{head}.ln.g"), Tensor::full(&[d], 1.0));
            s.insert(format!("{head}.ln.b"), Tensor::zeros(&[d]));
            s.insert(format!("{head}.w2"), init_normal(&mut rng, &[d, 2], std));
            s.insert(format!("{head}.b2"), Tensor::zeros(&[2]));
        }
        s.insert("head.match.w", init_normal(&mut rng, &[d, 1], std));
        s.insert("head.match.b", Tensor::zeros(&[1]));
        s.insert("head.mlm.w", init_normal(&mut rng, &[d, c.text_vocab_size], std));
        s.insert("head.mlm.b", Tensor::zeros(&[c.text_vocab_size]));

        s.insert("proj.video.w", init_normal(&mut rng, &[d, c.proj_dim], std));
        s.insert("proj.text.w", init_normal(&mut rng, &[d, c.proj_dim], std));
        s.insert("contrastive.logit_scale", Tensor::scalar((1.0 / temperature).ln()));
        s
    }

    /// Linear projection of pooled frame features plus temporal embeddings.
    pub fn encode_video(&self, g: &mut Graph, p: &BoundParams<'_>, raw_frames: Var) -> Result<Var> {
        let shape = g.shape(raw_frames);
        if shape != [self.cfg.frames_per_video, self.cfg.raw_frame_dim] {
            return Err(Error::Shape {
                op: "encode_video",
                lhs: shape.to_vec(),
                rhs: vec![self.cfg.frames_per_video, self.cfg.raw_frame_dim],
            });
        }
        let x = linear(g, raw_frames, p.get("video.proj.w"), Some(p.get("video.proj.b")))?;
        g.add(x, p.get("video.temporal_pos"))
    }

    /// Value-level convenience over [`TemporalModel::encode_video`].
    pub fn encode_video_tokens(&self, params: &ParamStore, video_id: u64, raw_frames: &Tensor) -> Result<FrameTokenSequence> {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let raw = g.constant(raw_frames.clone());
        let out = self.encode_video(&mut g, &p, raw)?;
        Ok(FrameTokenSequence {
            video_id,
            tokens: g.value(out).clone(),
        })
    }

    /// Token features for every position of `text`, CLS at row 0.
    pub fn encode_text(&self, g: &mut Graph, p: &BoundParams<'_>, text: &TokenizedText, causal: bool) -> Result<Var> {
        self.encode_ids(g, p, &text.ids, causal)
    }

    pub(crate) fn encode_ids(&self, g: &mut Graph, p: &BoundParams<'_>, ids: &[usize], causal: bool) -> Result<Var> {
        let n = ids.len();
        if n == 0 || n > self.cfg.max_text_tokens() {
            return Err(Error::Config(format!(
                "text of {n} tokens exceeds limit {}",
                self.cfg.max_text_tokens()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.cfg.text_vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                len: self.cfg.text_vocab_size,
            });
        }
        let tok = g.gather_rows(p.get("text.tok_emb"), ids)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.gather_rows(p.get("text.pos_emb"), &positions)?;
        let mut x = g.add(tok, pos)?;
        let mask = attention_mask(n, None, causal);
        for l in 0..self.cfg.n_layers_text {
            x = block_forward(g, p, &format!("text.layer{l}"), x, self.cfg.n_heads, mask.clone(), None)?;
        }
        g.layer_norm(x, p.get("text.ln_f.g"), p.get("text.ln_f.b"), LN_EPS)
    }

    /// Adds merged-sequence position embeddings 0..M to M frame tokens.
    pub fn with_merged_positions(&self, g: &mut Graph, p: &BoundParams<'_>, frames: Var) -> Result<Var> {
        let m = g.value(frames).rows();
        if m > self.cfg.max_merged_len {
            return Err(Error::Index {
                what: "merged frame count",
                index: m,
                len: self.cfg.max_merged_len,
            });
        }
        let idx: Vec<usize> = (0..m).collect();
        let pos = g.gather_rows(p.get("fusion.merged_pos"), &idx)?;
        g.add(frames, pos)
    }

    pub fn fuse(&self, g: &mut Graph, p: &BoundParams<'_>, batch: &MultiModalBatch) -> Result<Var> {
        self.fuse_traced(g, p, batch, None)
    }

    /// Like [`TemporalModel::fuse`], also collecting every attention
    /// probability matrix (layer-major, then head).
    pub fn fuse_traced(
        &self,
        g: &mut Graph,
        p: &BoundParams<'_>,
        batch: &MultiModalBatch,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let n = batch.len();
        if n > self.cfg.max_merged_len {
            return Err(Error::Index {
                what: "fused sequence length",
                index: n,
                len: self.cfg.max_merged_len,
            });
        }
        if g.value(batch.tokens).rows() != n || batch.attention_mask.len() != n {
            return Err(Error::Shape {
                op: "fuse",
                lhs: g.shape(batch.tokens).to_vec(),
                rhs: vec![n, batch.attention_mask.len()],
            });
        }
        let type_idx: Vec<usize> = batch
            .segment
            .iter()
            .map(|s| match s {
                Segment::Frame => 0,
                Segment::Word => 1,
            })
            .collect();
        let types = g.gather_rows(p.get("fusion.type_emb"), &type_idx)?;
        let mut x = g.add(batch.tokens, types)?;
        let mask = attention_mask(n, Some(&batch.attention_mask), false);
        for l in 0..self.cfg.n_layers_fusion {
            x = block_forward(
                g,
                p,
                &format!("fusion.layer{l}"),
                x,
                self.cfg.n_heads,
                mask.clone(),
                trace.as_deref_mut(),
            )?;
        }
        g.layer_norm(x, p.get("fusion.ln_f.g"), p.get("fusion.ln_f.b"), LN_EPS)
    }

    fn two_layer_head(&self, g: &mut Graph, p: &BoundParams<'_>, prefix: &str, x: Var) -> Result<Var> {
        let h = linear(g, x, p.get(&format!("{prefix}.w1")), Some(p.get(&format!("{prefix}.b1"))))?;
        let h = g.layer_norm(h, p.get(&format!("{prefix}.ln.g")), p.get(&format!("{prefix}.ln.b")), LN_EPS)?;
        linear(g, h, p.get(&format!("{prefix}.w2")), Some(p.get(&format!("{prefix}.b2"))))
    }

    /// Start (column 0) and end (column 1) logits over M fused frame slots.
    pub fn boundary_head(&self, g: &mut Graph, p: &BoundParams<'_>, fused_frames: Var) -> Result<Var> {
        self.two_layer_head(g, p, "head.boundary", fused_frames)
    }

    /// Start/end logits over merged word slots, for word-merged text localization.
    pub fn span_head(&self, g: &mut Graph, p: &BoundParams<'_>, fused_words: Var) -> Result<Var> {
        self.two_layer_head(g, p, "head.span", fused_words)
    }

    /// One logit per candidate CLS slot.
    pub fn match_head(&self, g: &mut Graph, p: &BoundParams<'_>, fused_cls: Var) -> Result<Var> {
        let b = g.value(fused_cls).rows();
        let y = linear(g, fused_cls, p.get("head.match.w"), Some(p.get("head.match.b")))?;
        g.reshape(y, &[b])
    }

    /// Vocabulary logits for each word slot.
    pub fn mlm_head(&self, g: &mut Graph, p: &BoundParams<'_>, fused_words: Var) -> Result<Var> {
        linear(g, fused_words, p.get("head.mlm.w"), Some(p.get("head.mlm.b")))
    }

    /// Mean-pooled, projected, unit-norm embeddings for a list of videos' frame tokens.
    pub fn project_videos(&self, g: &mut Graph, p: &BoundParams<'_>, videos: &[Var]) -> Result<Var> {
        let pooled = videos.iter().map(|&v| g.mean_rows(v)).collect::<Result<Vec<_>>>()?;
        let pooled = g.concat_rows(&pooled)?;
        let z = g.matmul(pooled, p.get("proj.video.w"))?;
        g.l2_normalize_rows(z).map_err(|_| Error::Degenerate("video embedding"))
    }

    /// Projected unit-norm embeddings of CLS features (one row per sentence).
    pub fn project_texts(&self, g: &mut Graph, p: &BoundParams<'_>, cls: Var) -> Result<Var> {
        let z = g.matmul(cls, p.get("proj.text.w"))?;
        g.l2_normalize_rows(z).map_err(|_| Error::Degenerate("text embedding"))
    }

    /// Per-frame embeddings in the contrastive space (frames are not pooled).
    pub fn project_frames(&self, g: &mut Graph, p: &BoundParams<'_>, frames: Var) -> Result<Var> {
        let z = g.matmul(frames, p.get("proj.video.w"))?;
        g.l2_normalize_rows(z).map_err(|_| Error::Degenerate("frame embedding"))
    }

    /// Video side: mean over frames, linear, normalize. Text side: CLS, linear, normalize.
    pub fn project_for_contrastive(
        &self,
        g: &mut Graph,
        p: &BoundParams<'_>,
        video_tokens: Var,
        text_cls: Var,
    ) -> Result<(Var, Var)> {
        let v = self.project_videos(g, p, &[video_tokens])?;
        let cls = if g.shape(text_cls).len() == 1 {
            let c = g.value(text_cls).numel();
            g.reshape(text_cls, &[1, c])?
        } else {
            text_cls
        };
        let t = self.project_texts(g, p, cls)?;
        Ok((v, t))
    }
}

#[cfg(test)]
pub(crate) mod tests;
