//! Long-sequence construction from a batch, with the supervision labels
//! that fall out of it.
//!
//! Pairing convention: a text and its paired video carry the same id, so
//! `boundaries[text_id]` locates the slots whose source video is `text_id`.
//! Plans are built from ids alone; [`apply_video_plan`] and
//! [`video_plan_rows`] turn a plan into merged tokens or gather indices.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FrameTokenSequence, TokenizedText};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VideoMergeStrategy {
    Shuffling,
    Sampling,
    HardSampling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TextMergeStrategy {
    MergeWords,
    #[serde(rename = "MergeCLS")]
    MergeCls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoMergeConfig {
    pub strategy: VideoMergeStrategy,
    /// Total slots of a sampled sequence (Sampling/HardSampling only).
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "K_p_min")]
    pub k_p_min: usize,
    #[serde(rename = "K_p_max")]
    pub k_p_max: usize,
    /// Background pool size for HardSampling.
    pub hard_top_m: usize,
    pub seed: u64,
}

impl Default for VideoMergeConfig {
    fn default() -> Self {
        Self {
            strategy: VideoMergeStrategy::Shuffling,
            k: 128,
            k_p_min: 1,
            k_p_max: 32,
            hard_top_m: 10,
            seed: 0,
        }
    }
}

impl VideoMergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.k_p_min && self.k_p_min <= self.k_p_max && self.k_p_max <= self.k) {
            return Err(Error::Config(format!(
                "video_merge requires 1 <= K_p_min ({}) <= K_p_max ({}) <= K ({})",
                self.k_p_min, self.k_p_max, self.k
            )));
        }
        if self.hard_top_m == 0 {
            return Err(Error::Config("video_merge.hard_top_m must be >= 1".into()));
        }
        Ok(())
    }

    /// Length of one merged frame sequence for a batch of `b` videos of `t` frames.
    pub fn merged_len(&self, b: usize, t: usize) -> usize {
        match self.strategy {
            VideoMergeStrategy::Shuffling => b * t,
            _ => self.k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergePlan {
    pub strategy: VideoMergeStrategy,
    pub seed: u64,
    /// `(source_video_id, source_frame_index)` per merged slot.
    pub slots: Vec<(u64, usize)>,
    /// Batch indices in merged order (Shuffling); empty for sampled plans.
    pub permutation: Vec<usize>,
    /// `text_id -> (st, ed)`, inclusive slot indices.
    pub boundaries: BTreeMap<u64, (usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextMergePlan {
    pub strategy: TextMergeStrategy,
    pub seed: u64,
    /// `(source_text_id, source_token_index)` per merged slot.
    pub slots: Vec<(u64, usize)>,
    /// Batch indices in merged order.
    pub permutation: Vec<usize>,
    /// MergeWords: `video_id -> (st, ed)` over merged word slots, inclusive.
    pub spans: BTreeMap<u64, (usize, usize)>,
    /// MergeCLS: `video_id -> m_t`, the slot of the paired sentence's CLS.
    pub matched_index: BTreeMap<u64, usize>,
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

fn check_unique(ids: &[u64]) -> Result<()> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Merge("batch ids must be distinct".into()));
    }
    Ok(())
}

/// Concatenates whole videos in a random order, keeping frame order.
pub fn plan_shuffle(video_ids: &[u64], frames_per_video: usize, seed: u64) -> Result<MergePlan> {
    if video_ids.is_empty() {
        return Err(Error::Empty("merge_videos_shuffle"));
    }
    check_unique(video_ids)?;
    let perm = permutation(video_ids.len(), seed);
    let t = frames_per_video;
    let mut slots = Vec::with_capacity(video_ids.len() * t);
    let mut boundaries = BTreeMap::new();
    for (rank, &b) in perm.iter().enumerate() {
        let id = video_ids[b];
        slots.extend((0..t).map(|f| (id, f)));
        boundaries.insert(id, (rank * t, rank * t + t - 1));
    }
    Ok(MergePlan {
        strategy: VideoMergeStrategy::Shuffling,
        seed,
        slots,
        permutation: perm,
        boundaries,
    })
}

/// Background-pool candidates for the video at batch index `query`.
fn background_pool(
    n: usize,
    query: usize,
    cfg: &VideoMergeConfig,
    similarity: Option<&Tensor>,
) -> Result<Vec<usize>> {
    let mut others: Vec<usize> = (0..n).filter(|&j| j != query).collect();
    if cfg.strategy != VideoMergeStrategy::HardSampling {
        return Ok(others);
    }
    let sim = similarity.ok_or_else(|| Error::Merge("HardSampling requires a similarity matrix".into()))?;
    if sim.shape() != [n, n] {
        return Err(Error::Shape {
            op: "merge_videos_sample similarity",
            lhs: sim.shape().to_vec(),
            rhs: vec![n, n],
        });
    }
    // descending similarity, lower index first on ties
    others.sort_by(|&a, &b| sim.at(query, b).total_cmp(&sim.at(query, a)).then(a.cmp(&b)));
    others.truncate(cfg.hard_top_m);
    Ok(others)
}

/// Samples `k` positive frames of the paired video (as one ordered run at a
/// random offset) among `K - k` background frames from other videos.
pub fn plan_sample(
    video_ids: &[u64],
    frames_per_video: usize,
    query: usize,
    cfg: &VideoMergeConfig,
    similarity: Option<&Tensor>,
    seed: u64,
) -> Result<MergePlan> {
    cfg.validate()?;
    if cfg.strategy == VideoMergeStrategy::Shuffling {
        return Err(Error::Merge("plan_sample called with Shuffling strategy".into()));
    }
    check_unique(video_ids)?;
    if query >= video_ids.len() {
        return Err(Error::Index {
            what: "query video",
            index: query,
            len: video_ids.len(),
        });
    }
    let t = frames_per_video;
    let hi = cfg.k_p_max.min(t);
    if cfg.k_p_min > hi {
        return Err(Error::Merge(format!(
            "K_p_min {} exceeds available positive frames {hi}",
            cfg.k_p_min
        )));
    }
    let pool = background_pool(video_ids.len(), query, cfg, similarity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(cfg.k_p_min..=hi);
    let bg_count = cfg.k - k;
    if bg_count > 0 && pool.is_empty() {
        return Err(Error::Merge("no background source: batch has a single video".into()));
    }

    let mut positives = index::sample(&mut rng, t, k).into_vec();
    positives.sort_unstable();

    let mut remaining: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut background = Vec::with_capacity(bg_count);
    for _ in 0..bg_count {
        let v = pool[rng.random_range(0..pool.len())];
        let frames = remaining.entry(v).or_default();
        if frames.is_empty() {
            frames.extend(0..t);
        }
        let f = frames.swap_remove(rng.random_range(0..frames.len()));
        background.push((video_ids[v], f));
    }

    let offset = rng.random_range(0..=bg_count);
    let qid = video_ids[query];
    let mut slots = Vec::with_capacity(cfg.k);
    slots.extend_from_slice(&background[..offset]);
    slots.extend(positives.iter().map(|&f| (qid, f)));
    slots.extend_from_slice(&background[offset..]);

    let mut boundaries = BTreeMap::new();
    boundaries.insert(qid, (offset, offset + k - 1));
    Ok(MergePlan {
        strategy: cfg.strategy,
        seed,
        slots,
        permutation: Vec::new(),
        boundaries,
    })
}

/// Row indices into the row-concatenation of the batch's frame tokens
/// (`batch_index * T + frame`) realizing `plan`.
pub fn video_plan_rows(plan: &MergePlan, video_ids: &[u64], frames_per_video: usize) -> Result<Vec<usize>> {
    let pos: BTreeMap<u64, usize> = video_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    plan.slots
        .iter()
        .map(|&(id, f)| {
            let b = *pos
                .get(&id)
                .ok_or_else(|| Error::Merge(format!("plan references video {id} not in batch")))?;
            if f >= frames_per_video {
                return Err(Error::Index {
                    what: "frame index",
                    index: f,
                    len: frames_per_video,
                });
            }
            Ok(b * frames_per_video + f)
        })
        .collect()
}

fn batch_frames(batch: &[FrameTokenSequence]) -> Result<(Vec<u64>, usize)> {
    let first = batch.first().ok_or(Error::Empty("video merge"))?;
    let t = first.tokens.rows();
    for s in batch {
        if s.tokens.rows() != t || s.tokens.cols() != first.tokens.cols() {
            return Err(Error::Shape {
                op: "video merge",
                lhs: first.tokens.shape().to_vec(),
                rhs: s.tokens.shape().to_vec(),
            });
        }
    }
    Ok((batch.iter().map(|s| s.video_id).collect(), t))
}

/// Materializes merged frame tokens for `plan`.
pub fn apply_video_plan(batch: &[FrameTokenSequence], plan: &MergePlan) -> Result<Tensor> {
    let (ids, t) = batch_frames(batch)?;
    let rows = video_plan_rows(plan, &ids, t)?;
    let c = batch[0].tokens.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for r in rows {
        data.extend_from_slice(batch[r / t].tokens.row(r % t));
    }
    Tensor::new(vec![plan.slots.len(), c], data)
}

pub fn merge_videos_shuffle(batch: &[FrameTokenSequence], seed: u64) -> Result<(Tensor, MergePlan)> {
    let (ids, t) = batch_frames(batch)?;
    let plan = plan_shuffle(&ids, t, seed)?;
    Ok((apply_video_plan(batch, &plan)?, plan))
}

pub fn merge_videos_sample(
    batch: &[FrameTokenSequence],
    query_text_id: u64,
    cfg: &VideoMergeConfig,
    similarity: Option<&Tensor>,
    seed: u64,
) -> Result<(Tensor, MergePlan)> {
    let (ids, t) = batch_frames(batch)?;
    let query = ids
        .iter()
        .position(|&id| id == query_text_id)
        .ok_or_else(|| Error::Merge(format!("batch lacks the video paired with text {query_text_id}")))?;
    let plan = plan_sample(&ids, t, query, cfg, similarity, seed)?;
    Ok((apply_video_plan(batch, &plan)?, plan))
}

/// Cosine similarity of L2-normalized rows; the diagonal is set to exactly 1.
pub fn compute_video_similarity(embeddings: &Tensor) -> Tensor {
    let b = embeddings.rows();
    let mut out = Tensor::zeros(&[b, b]);
    for i in 0..b {
        for j in 0..b {
            let v = if i == j {
                1.0
            } else {
                embeddings.row(i).iter().zip(embeddings.row(j)).map(|(x, y)| x * y).sum()
            };
            out.data_mut()[i * b + j] = v;
        }
    }
    out
}

/// Concatenates whole sentences (CLS and SEP kept) in a random order.
pub fn merge_texts_words(batch: &[TokenizedText], seed: u64, max_merged_len: usize) -> Result<(Vec<usize>, TextMergePlan)> {
    if batch.is_empty() {
        return Err(Error::Empty("merge_texts_words"));
    }
    let ids: Vec<u64> = batch.iter().map(|t| t.text_id).collect();
    check_unique(&ids)?;
    let total: usize = batch.iter().map(TokenizedText::len).sum();
    if total > max_merged_len {
        return Err(Error::Merge(format!("merged text length {total} exceeds {max_merged_len}")));
    }
    let perm = permutation(batch.len(), seed);
    let mut merged = Vec::with_capacity(total);
    let mut slots = Vec::with_capacity(total);
    let mut spans = BTreeMap::new();
    for &b in &perm {
        let t = &batch[b];
        let st = merged.len();
        merged.extend_from_slice(&t.ids);
        slots.extend((0..t.len()).map(|i| (t.text_id, i)));
        spans.insert(t.text_id, (st, merged.len() - 1));
    }
    Ok((
        merged,
        TextMergePlan {
            strategy: TextMergeStrategy::MergeWords,
            seed,
            slots,
            permutation: perm,
            spans,
            matched_index: BTreeMap::new(),
        },
    ))
}

/// One CLS slot per sentence in a random order. Returns the batch indices
/// in merged order alongside the plan.
pub fn merge_texts_cls(batch: &[TokenizedText], seed: u64) -> Result<(Vec<usize>, TextMergePlan)> {
    if batch.len() < 2 {
        return Err(Error::Merge("CLS merging needs at least two sentences".into()));
    }
    let ids: Vec<u64> = batch.iter().map(|t| t.text_id).collect();
    check_unique(&ids)?;
    let perm = permutation(batch.len(), seed);
    let slots = perm.iter().map(|&b| (batch[b].text_id, 0)).collect();
    let matched_index = perm.iter().enumerate().map(|(rank, &b)| (batch[b].text_id, rank)).collect();
    Ok((
        perm.clone(),
        TextMergePlan {
            strategy: TextMergeStrategy::MergeCls,
            seed,
            slots,
            permutation: perm,
            spans: BTreeMap::new(),
            matched_index,
        },
    ))
}

/// Source `(video_id, frame_index)` of a merged slot.
pub fn invert_plan(plan: &MergePlan, slot_index: usize) -> Result<(u64, usize)> {
    plan.slots.get(slot_index).copied().ok_or(Error::Index {
        what: "merge plan slot",
        index: slot_index,
        len: plan.slots.len(),
    })
}

/// `(min, max)` slot index whose source is `id`, by scanning.
fn scan_range(slots: &[(u64, usize)], id: u64) -> Option<(usize, usize)> {
    let first = slots.iter().position(|s| s.0 == id)?;
    let last = slots.iter().rposition(|s| s.0 == id)?;
    Some((first, last))
}

fn check_run(slots: &[(u64, usize)], id: u64, (st, ed): (usize, usize), what: &str) -> Result<()> {
    if st > ed || ed >= slots.len() {
        return Err(Error::Merge(format!("{what} {id}: bad range ({st}, {ed})")));
    }
    if scan_range(slots, id) != Some((st, ed)) || slots[st..=ed].iter().any(|s| s.0 != id) {
        return Err(Error::Merge(format!("{what} {id}: slots do not form exactly [{st}, {ed}]")));
    }
    if slots[st..=ed].windows(2).any(|w| w[0].1 >= w[1].1) {
        return Err(Error::Merge(format!("{what} {id}: source order not strictly increasing")));
    }
    Ok(())
}

impl MergePlan {
    /// Labels for a query text, read from the plan.
    pub fn boundary(&self, text_id: u64) -> Option<(usize, usize)> {
        self.boundaries.get(&text_id).copied()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Checks every structural invariant of the plan against its own slots.
    pub fn validate(&self) -> Result<()> {
        if self.boundaries.is_empty() {
            return Err(Error::Merge("plan has no boundaries".into()));
        }
        for (&id, &range) in &self.boundaries {
            check_run(&self.slots, id, range, "boundary of text")?;
        }
        match self.strategy {
            VideoMergeStrategy::Shuffling => {
                let mut seen = BTreeMap::new();
                for (i, s) in self.slots.iter().enumerate() {
                    seen.entry(s.0).or_insert(i);
                }
                let b = seen.len();
                if b == 0 || !self.slots.len().is_multiple_of(b) {
                    return Err(Error::Merge("shuffle plan: uneven video lengths".into()));
                }
                let t = self.slots.len() / b;
                for &id in seen.keys() {
                    let (st, ed) = scan_range(&self.slots, id).expect("id seen");
                    if ed + 1 - st != t {
                        return Err(Error::Merge(format!("shuffle plan: video {id} not contiguous")));
                    }
                    if self.slots[st..=ed].iter().enumerate().any(|(f, s)| s.0 != id || s.1 != f) {
                        return Err(Error::Merge(format!("shuffle plan: video {id} frames out of order")));
                    }
                }
                let mut p = self.permutation.clone();
                p.sort_unstable();
                if p != (0..b).collect::<Vec<_>>() {
                    return Err(Error::Merge("shuffle plan: permutation is not a permutation".into()));
                }
                if self.boundaries.len() != b {
                    return Err(Error::Merge("shuffle plan: one boundary per video expected".into()));
                }
            }
            VideoMergeStrategy::Sampling | VideoMergeStrategy::HardSampling => {
                if self.boundaries.len() != 1 {
                    return Err(Error::Merge("sampled plan: exactly one query expected".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Reads and validates a plan.
    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        plan.validate()?;
        Ok(plan)
    }
}

impl TextMergePlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Reads and validates a plan.
    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            TextMergeStrategy::MergeWords => {
                for (&id, &range) in &self.spans {
                    check_run(&self.slots, id, range, "span of video")?;
                    if self.slots[range.0].1 != 0 {
                        return Err(Error::Merge(format!("span of video {id} does not start at CLS")));
                    }
                }
                let ids: std::collections::BTreeSet<u64> = self.slots.iter().map(|s| s.0).collect();
                if ids.len() != self.spans.len() {
                    return Err(Error::Merge("one span per sentence expected".into()));
                }
            }
            TextMergeStrategy::MergeCls => {
                if self.slots.iter().any(|s| s.1 != 0) {
                    return Err(Error::Merge("CLS plan may only contain token 0".into()));
                }
                if self.matched_index.len() != self.slots.len() {
                    return Err(Error::Merge("CLS plan: one slot per sentence expected".into()));
                }
                for (&id, &m) in &self.matched_index {
                    if self.slots.get(m).map(|s| s.0) != Some(id) {
                        return Err(Error::Merge(format!("CLS plan: matched index of {id} is wrong")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
