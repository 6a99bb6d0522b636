//! Localization, matching, contrastive and masked-language losses, and
//! their weighted combination.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundParams, MultiModalBatch, TemporalModel, TokenizedText};
use crate::tensor::{Graph, Var};

/// Start/end cross-entropy over the M rows of an M×2 logit matrix.
pub fn moment_loss(g: &mut Graph, r_vl: Var, st: usize, ed: usize) -> Result<Var> {
    boundary_pair_loss(g, r_vl, st, ed, "moment_loss")
}

/// Same contract as [`moment_loss`] over merged word slots.
pub fn text_span_loss(g: &mut Graph, r_tl_span: Var, st: usize, ed: usize) -> Result<Var> {
    boundary_pair_loss(g, r_tl_span, st, ed, "text_span_loss")
}

fn boundary_pair_loss(g: &mut Graph, logits: Var, st: usize, ed: usize, op: &'static str) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(Error::Shape {
            op,
            lhs: shape,
            rhs: vec![0, 2],
        });
    }
    let m = shape[0];
    if ed >= m {
        return Err(Error::Index {
            what: "boundary end",
            index: ed,
            len: m,
        });
    }
    if st > ed {
        return Err(Error::Index {
            what: "boundary start",
            index: st,
            len: ed + 1,
        });
    }
    let cols = g.transpose(logits)?;
    g.cross_entropy_rows(cols, &[st, ed])
}

/// `-log softmax(r_tl)[m_t]` over the B candidate sentences.
pub fn text_cls_loss(g: &mut Graph, r_tl: Var, m_t: usize) -> Result<Var> {
    let b = g.value(r_tl).numel();
    if m_t >= b {
        return Err(Error::Index {
            what: "matched index",
            index: m_t,
            len: b,
        });
    }
    let row = g.reshape(r_tl, &[1, b])?;
    g.cross_entropy(row, m_t)
}

#[derive(Clone, Copy, Debug)]
pub enum Temperature {
    Fixed(f64),
    /// Log of the inverse temperature, as a scalar graph node.
    LearnableLogScale(Var),
}

/// Symmetric InfoNCE over unit-norm rows paired by index.
pub fn contrastive_loss(g: &mut Graph, video_emb: Var, text_emb: Var, temperature: Temperature) -> Result<Var> {
    let (vs, ts) = (g.shape(video_emb).to_vec(), g.shape(text_emb).to_vec());
    if vs != ts || vs.len() != 2 {
        return Err(Error::Shape {
            op: "contrastive_loss",
            lhs: vs,
            rhs: ts,
        });
    }
    let b = vs[0];
    if b < 2 {
        return Err(Error::Empty("contrastive batch needs at least two pairs"));
    }
    let sims = g.matmul_nt(video_emb, text_emb)?;
    let logits = match temperature {
        Temperature::Fixed(t) if t > 0.0 && t.is_finite() => g.scale(sims, 1.0 / t),
        Temperature::Fixed(t) => return Err(Error::Config(format!("temperature must be positive, got {t}"))),
        Temperature::LearnableLogScale(s) => {
            let scale = g.exp(s);
            g.mul_scalar(sims, scale)?
        }
    };
    let targets: Vec<usize> = (0..b).collect();
    let v2t = g.cross_entropy_rows(logits, &targets)?;
    let lt = g.transpose(logits)?;
    let t2v = g.cross_entropy_rows(lt, &targets)?;
    let both = g.add(v2t, t2v)?;
    Ok(g.scale(both, 0.5 / b as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlmConfig {
    pub mask_probability: f64,
    pub mask_token_id: usize,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            mask_probability: 0.15,
            mask_token_id: 3,
            seed: 0,
        }
    }
}

impl MlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_probability > 0.0 && self.mask_probability < 1.0) {
            return Err(Error::Config(format!(
                "mask_probability must lie in (0, 1), got {}",
                self.mask_probability
            )));
        }
        Ok(())
    }
}

/// Result of masking one sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedText {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Replaces each maskable token with `mask_token_id` independently. When
/// no position was drawn, one maskable position is chosen uniformly.
pub fn mask_tokens(ids: &[usize], is_special: impl Fn(usize) -> bool, cfg: &MlmConfig, rng: &mut impl Rng) -> Result<MaskedText> {
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| !is_special(ids[i])).collect();
    if candidates.is_empty() {
        return Err(Error::Empty("text has no maskable token"));
    }
    let mut positions: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < cfg.mask_probability)
        .collect();
    if positions.is_empty() {
        positions.push(candidates[rng.random_range(0..candidates.len())]);
    }
    let mut out = ids.to_vec();
    let targets = positions.iter().map(|&p| ids[p]).collect();
    for &p in &positions {
        out[p] = cfg.mask_token_id;
    }
    Ok(MaskedText {
        ids: out,
        positions,
        targets,
    })
}

/// Mean cross-entropy of vocabulary logits at the masked positions.
pub fn masked_token_loss(g: &mut Graph, vocab_logits: Var, positions: &[usize], targets: &[usize]) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::Empty("no masked positions"));
    }
    let picked = g.gather_rows(vocab_logits, positions)?;
    let ce = g.cross_entropy_rows(picked, targets)?;
    Ok(g.scale(ce, 1.0 / positions.len() as f64))
}

/// Masks `text`, fuses it with one video's frame tokens, and scores the
/// vocabulary head on the masked word slots.
pub fn mlm_loss(
    g: &mut Graph,
    model: &TemporalModel,
    p: &BoundParams<'_>,
    video_tokens: Var,
    text: &TokenizedText,
    cfg: &MlmConfig,
    rng: &mut impl Rng,
) -> Result<(Var, Vec<usize>)> {
    let mc = model.config();
    let masked = mask_tokens(&text.ids, |t| mc.is_special(t), cfg, rng)?;
    let words = model.encode_ids(g, p, &masked.ids, false)?;
    let batch = MultiModalBatch::new(g, video_tokens, words)?;
    let fused = model.fuse(g, p, &batch)?;
    let word_slots = g.gather_rows(fused, &masked.positions.iter().map(|&i| batch.frame_count + i).collect::<Vec<_>>())?;
    let logits = model.mlm_head(g, p, word_slots)?;
    let all: Vec<usize> = (0..masked.positions.len()).collect();
    let loss = masked_token_loss(g, logits, &all, &masked.targets)?;
    Ok((loss, masked.positions))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub vtc: f64,
    pub mlm: f64,
    pub vl: f64,
    pub tl: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,vtc,mlm,vl,tl,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!("{step},{},{},{},{},{}", self.vtc, self.mlm, self.vl, self.tl, self.total)
    }
}

/// `vtc + alpha*mlm + beta*(vl + tl)`.
pub fn total_loss(vtc: f64, mlm: f64, vl: f64, tl: f64, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    for (name, v) in [("vtc", vtc), ("mlm", mlm), ("vl", vl), ("tl", tl), ("alpha", alpha), ("beta", beta)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} is {v}")));
        }
    }
    Ok(LossBreakdown {
        vtc,
        mlm,
        vl,
        tl,
        total: vtc + alpha * mlm + beta * (vl + tl),
        alpha,
        beta,
    })
}
