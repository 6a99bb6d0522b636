//! Evaluation of a parameter snapshot on held-out synthetic data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    boundary_contrast, boundary_metrics, cosine_matrix, decode_boundary, export_similarity_heatmap, recall_at_k,
    LocalizationResult, RetrievalResult,
};
use crate::error::{Error, Result};
use crate::merging::{
    compute_video_similarity, merge_texts_cls, merge_texts_words, MergePlan, TextMergeStrategy, VideoMergeConfig,
};
use crate::model::{ParamStore, TemporalModel, TokenizedText};
use crate::pipeline::{
    contrastive_embeddings, encode_batch, localize_video, match_text, merged_frames, span_text, video_plan, EncodedBatch,
};
use crate::seed::{derive_seed, Stream};
use crate::synthdata::Generator;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Pairs in the retrieval gallery.
    pub gallery_size: usize,
    /// Held-out merged localization queries.
    pub queries: usize,
    pub split_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gallery_size: 32,
            queries: 64,
            split_seed: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gallery_size < 2 || self.queries == 0 {
            return Err(Error::Config(
                "eval.gallery_size must be >= 2 and eval.queries >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Seed of held-out item `index` (0 is the gallery, then one per query).
    pub fn data_seed(&self, index: u64) -> u64 {
        derive_seed(self.split_seed, Stream::HeldOut, index)
    }
}

/// Everything needed to evaluate one snapshot.
#[derive(Clone, Copy, Debug)]
pub struct EvalSetup<'a> {
    pub model: &'a TemporalModel,
    pub params: &'a ParamStore,
    pub generator: &'a Generator,
    pub eval: &'a EvalConfig,
    pub batch_size: usize,
    pub video_merge: &'a VideoMergeConfig,
    pub text_merge: TextMergeStrategy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub label: (usize, usize),
    pub prediction: (usize, usize),
    /// Mean in-boundary minus mean out-of-boundary frame-text cosine.
    pub contrast: Option<f64>,
    pub text_matched: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub retrieval: RetrievalResult,
    pub localization: LocalizationResult,
    /// MergeCLS: matched-index accuracy. MergeWords: exact span accuracy.
    pub cls_match_acc: f64,
    /// Share of queries whose in-boundary cosine exceeds the out-of-boundary cosine.
    pub alignment_fraction: f64,
    #[serde(skip)]
    pub queries: Vec<QueryOutcome>,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.retrieval.recall_at.get(&k).copied().unwrap_or(f64::NAN)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Gallery retrieval: sentences query the gallery of videos.
pub fn retrieval(setup: &EvalSetup<'_>) -> Result<RetrievalResult> {
    let n = setup.eval.gallery_size;
    let disjoint = n <= setup.generator.config().n_concepts;
    let gallery = setup.generator.generate_batch(n, setup.eval.data_seed(0), disjoint)?;
    let mut g = Graph::new();
    let p = setup.params.bind_frozen(&mut g);
    let enc = encode_batch(&mut g, setup.model, &p, &gallery)?;
    let (v, t) = contrastive_embeddings(&mut g, setup.model, &p, &enc)?;
    let sim = g.matmul_nt(t, v)?;
    let mut ks: Vec<usize> = [1, 5, 10].into_iter().filter(|&k| k <= n).collect();
    ks.push(n);
    ks.dedup();
    let gt: Vec<usize> = (0..n).collect();
    recall_at_k(g.value(sim), &gt, &ks)
}

/// Per-query state built on a frozen graph.
struct QueryRun {
    g: Graph,
    texts: Vec<TokenizedText>,
    enc: EncodedBatch,
    plan: MergePlan,
    query: usize,
}

fn build_query(setup: &EvalSetup<'_>, q: usize) -> Result<(QueryRun, Tensor)> {
    let b = setup.batch_size;
    let seed = setup.eval.data_seed(1 + q as u64);
    let pairs = setup.generator.generate_batch(b, seed, b <= setup.generator.config().n_concepts)?;
    let mut g = Graph::new();
    let p = setup.params.bind_frozen(&mut g);
    let enc = encode_batch(&mut g, setup.model, &p, &pairs)?;
    let (v, t) = contrastive_embeddings(&mut g, setup.model, &p, &enc)?;
    let sim = compute_video_similarity(g.value(v));
    let query = q % b;
    let t_emb = g.value(t).clone();
    let plan = video_plan(
        setup.video_merge,
        &enc.ids,
        setup.model.config().frames_per_video,
        query,
        Some(&sim),
        derive_seed(seed, Stream::Merge, 0),
    )?;
    let texts = pairs.into_iter().map(|p| p.text).collect();
    Ok((QueryRun { g, texts, enc, plan, query }, t_emb))
}

/// Projected per-frame embeddings of the merged frames, before fusion.
fn merged_frame_embeddings(setup: &EvalSetup<'_>, run: &mut QueryRun) -> Result<Tensor> {
    let p = setup.params.bind_frozen(&mut run.g);
    let rows = crate::merging::video_plan_rows(&run.plan, &run.enc.ids, setup.model.config().frames_per_video)?;
    let frames = run.g.gather_rows(run.enc.stacked_frames, &rows)?;
    let z = setup.model.project_frames(&mut run.g, &p, frames)?;
    Ok(run.g.value(z).clone())
}

pub fn evaluate(setup: &EvalSetup<'_>) -> Result<EvalReport> {
    setup.eval.validate()?;
    let retrieval = retrieval(setup)?;
    let mut outcomes = Vec::with_capacity(setup.eval.queries);
    for q in 0..setup.eval.queries {
        let (mut run, text_emb) = build_query(setup, q)?;
        let p = setup.params.bind_frozen(&mut run.g);
        let g = &mut run.g;
        let qid = run.enc.ids[run.query];
        let label = run.plan.boundary(qid).ok_or_else(|| Error::Merge(format!("plan has no boundary for {qid}")))?;
        let frames = merged_frames(g, setup.model, &p, &run.enc, &run.plan)?;
        let r = localize_video(g, setup.model, &p, frames, run.enc.texts[run.query])?;
        let prediction = decode_boundary(g.value(r))?;

        let text_seed = derive_seed(setup.eval.data_seed(1 + q as u64), Stream::Merge, 1);
        let text_matched = match setup.text_merge {
            TextMergeStrategy::MergeCls => {
                let (order, plan) = merge_texts_cls(&run.texts, text_seed)?;
                let logits = match_text(g, setup.model, &p, &run.enc, &order, run.query)?;
                argmax(g.value(logits).data()) == plan.matched_index[&qid]
            }
            TextMergeStrategy::MergeWords => {
                let cfg = setup.model.config();
                let (_, plan) = merge_texts_words(&run.texts, text_seed, cfg.max_merged_len - cfg.frames_per_video)?;
                let logits = span_text(g, setup.model, &p, &run.enc, &plan, run.query)?;
                decode_boundary(g.value(logits))? == plan.spans[&qid]
            }
        };

        let frame_emb = merged_frame_embeddings(setup, &mut run)?;
        let query_text = Tensor::new(vec![1, text_emb.cols()], text_emb.row(run.query).to_vec())?;
        let sims = cosine_matrix(&frame_emb, &query_text)?;
        let contrast = boundary_contrast(sims.data(), label.0, label.1);
        outcomes.push(QueryOutcome {
            label,
            prediction,
            contrast,
            text_matched,
        });
    }
    let preds: Vec<_> = outcomes.iter().map(|o| o.prediction).collect();
    let labels: Vec<_> = outcomes.iter().map(|o| o.label).collect();
    let localization = boundary_metrics(&preds, &labels)?;
    let n = outcomes.len() as f64;
    let cls_match_acc = outcomes.iter().filter(|o| o.text_matched).count() as f64 / n;
    let with_contrast: Vec<f64> = outcomes.iter().filter_map(|o| o.contrast).collect();
    let alignment_fraction = if with_contrast.is_empty() {
        f64::NAN
    } else {
        with_contrast.iter().filter(|&&c| c > 0.0).count() as f64 / with_contrast.len() as f64
    };
    Ok(EvalReport {
        retrieval,
        localization,
        cls_match_acc,
        alignment_fraction,
        queries: outcomes,
    })
}

/// Exports the frame-text heatmap of held-out query `q`: rows are merged
/// frames, columns are every sentence of the batch.
pub fn export_heldout_heatmap(setup: &EvalSetup<'_>, q: usize, out_path: &Path) -> Result<Tensor> {
    let (mut run, text_emb) = build_query(setup, q)?;
    let frame_emb = merged_frame_embeddings(setup, &mut run)?;
    export_similarity_heatmap(&frame_emb, &text_emb, &run.plan.boundaries, out_path)
}
