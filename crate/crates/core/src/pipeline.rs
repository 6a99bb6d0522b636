//! Forward passes shared by training and evaluation: encode a batch once,
//! then build the contrastive, video-localization and text-localization
//! heads on top of those encodings.

use crate::error::{Error, Result};
use crate::merging::{
    plan_sample, plan_shuffle, video_plan_rows, MergePlan, TextMergePlan, VideoMergeConfig, VideoMergeStrategy,
};
use crate::model::{BoundParams, MultiModalBatch, TemporalModel};
use crate::objectives::Temperature;
use crate::synthdata::SyntheticPair;
use crate::tensor::{Graph, Tensor, Var};

/// Per-pair encoder outputs for one batch; index i is pair i.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub ids: Vec<u64>,
    /// T×C frame tokens per video.
    pub videos: Vec<Var>,
    /// len×C token features per sentence, CLS first.
    pub texts: Vec<Var>,
    /// All frame tokens stacked, B·T×C.
    pub stacked_frames: Var,
}

impl EncodedBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn encode_batch(g: &mut Graph, model: &TemporalModel, p: &BoundParams<'_>, pairs: &[SyntheticPair]) -> Result<EncodedBatch> {
    if pairs.is_empty() {
        return Err(Error::Empty("encode_batch"));
    }
    let mut videos = Vec::with_capacity(pairs.len());
    let mut texts = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let raw = g.constant(pair.raw_frames.clone());
        videos.push(model.encode_video(g, p, raw)?);
        texts.push(model.encode_text(g, p, &pair.text, false)?);
    }
    let stacked_frames = g.concat_rows(&videos)?;
    Ok(EncodedBatch {
        ids: pairs.iter().map(|p| p.text.text_id).collect(),
        videos,
        texts,
        stacked_frames,
    })
}

/// CLS rows of the given sentences, in the given order.
pub fn cls_rows(g: &mut Graph, enc: &EncodedBatch, order: &[usize]) -> Result<Var> {
    let rows = order
        .iter()
        .map(|&i| g.gather_rows(enc.texts[i], &[0]))
        .collect::<Result<Vec<_>>>()?;
    g.concat_rows(&rows)
}

/// Unit-norm video and text embeddings, B×C_p each.
pub fn contrastive_embeddings(g: &mut Graph, model: &TemporalModel, p: &BoundParams<'_>, enc: &EncodedBatch) -> Result<(Var, Var)> {
    let order: Vec<usize> = (0..enc.len()).collect();
    let v = model.project_videos(g, p, &enc.videos)?;
    let cls = cls_rows(g, enc, &order)?;
    let t = model.project_texts(g, p, cls)?;
    Ok((v, t))
}

pub fn temperature(p: &BoundParams<'_>, learnable: bool, fixed: f64) -> Temperature {
    if learnable {
        Temperature::LearnableLogScale(p.get("contrastive.logit_scale"))
    } else {
        Temperature::Fixed(fixed)
    }
}

/// Merged frame tokens for `plan`, with merged-sequence positions added.
pub fn merged_frames(g: &mut Graph, model: &TemporalModel, p: &BoundParams<'_>, enc: &EncodedBatch, plan: &MergePlan) -> Result<Var> {
    let t = model.config().frames_per_video;
    let rows = video_plan_rows(plan, &enc.ids, t)?;
    let frames = g.gather_rows(enc.stacked_frames, &rows)?;
    model.with_merged_positions(g, p, frames)
}

/// Start/end logits (M×2) over the merged frames for the sentence of pair `query`.
pub fn localize_video(g: &mut Graph, model: &TemporalModel, p: &BoundParams<'_>, frames: Var, query_text: Var) -> Result<Var> {
    let m = g.value(frames).rows();
    let batch = MultiModalBatch::new(g, frames, query_text)?;
    let fused = model.fuse(g, p, &batch)?;
    let idx: Vec<usize> = (0..m).collect();
    let fused_frames = g.gather_rows(fused, &idx)?;
    model.boundary_head(g, p, fused_frames)
}

/// One logit per CLS slot (in `order`) for the video of pair `query`.
pub fn match_text(
    g: &mut Graph,
    model: &TemporalModel,
    p: &BoundParams<'_>,
    enc: &EncodedBatch,
    order: &[usize],
    query: usize,
) -> Result<Var> {
    let cls = cls_rows(g, enc, order)?;
    let batch = MultiModalBatch::new(g, enc.videos[query], cls)?;
    let fused = model.fuse(g, p, &batch)?;
    let idx: Vec<usize> = (batch.frame_count..batch.len()).collect();
    let slots = g.gather_rows(fused, &idx)?;
    model.match_head(g, p, slots)
}

/// Start/end logits over merged word slots for the video of pair `query`.
pub fn span_text(
    g: &mut Graph,
    model: &TemporalModel,
    p: &BoundParams<'_>,
    enc: &EncodedBatch,
    plan: &TextMergePlan,
    query: usize,
) -> Result<Var> {
    let parts: Vec<Var> = plan.permutation.iter().map(|&i| enc.texts[i]).collect();
    let words = g.concat_rows(&parts)?;
    let batch = MultiModalBatch::new(g, enc.videos[query], words)?;
    let fused = model.fuse(g, p, &batch)?;
    let idx: Vec<usize> = (batch.frame_count..batch.len()).collect();
    let slots = g.gather_rows(fused, &idx)?;
    model.span_head(g, p, slots)
}

/// Merge plan for query `query` under `cfg`. Shuffling ignores the query
/// and the similarity matrix.
pub fn video_plan(
    cfg: &VideoMergeConfig,
    ids: &[u64],
    frames_per_video: usize,
    query: usize,
    similarity: Option<&Tensor>,
    seed: u64,
) -> Result<MergePlan> {
    match cfg.strategy {
        VideoMergeStrategy::Shuffling => plan_shuffle(ids, frames_per_video, seed),
        VideoMergeStrategy::Sampling => plan_sample(ids, frames_per_video, query, cfg, None, seed),
        VideoMergeStrategy::HardSampling => plan_sample(ids, frames_per_video, query, cfg, similarity, seed),
    }
}
