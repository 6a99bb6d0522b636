//! Finite-difference audit of the autodiff engine: every primitive op in
//! isolation, then every training loss against all parameters of a tiny
//! model. Failing checks are cross-referenced to name the op(s) whose
//! backward rule is suspect.

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::merging::{merge_texts_cls, merge_texts_words, VideoMergeConfig, VideoMergeStrategy};
use crate::model::{ModelConfig, ParamStore, TemporalModel, TokenizedText};
use crate::objectives::{contrastive_loss, mlm_loss, moment_loss, text_cls_loss, text_span_loss, MlmConfig};
use crate::pipeline::{
    contrastive_embeddings, encode_batch, localize_video, match_text, merged_frames, span_text, temperature, video_plan,
};
use crate::synthdata::SyntheticPair;
use crate::tensor::{finite_difference_check, Graph, OpKind, Tensor, Var};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const MAX_LISTED_FAILURES: usize = 8;

/// Model small enough for an exhaustive check (under 500 scalars) that
/// still exercises every head and both merge paths.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 4,
        n_heads: 2,
        d_ff: 2,
        proj_dim: 2,
        text_vocab_size: 7,
        max_text_len: 1,
        frames_per_video: 2,
        raw_frame_dim: 3,
        n_layers_text: 1,
        n_layers_fusion: 1,
        max_merged_len: 8,
        pad_token_id: 0,
        cls_token_id: 1,
        sep_token_id: 2,
        mask_token_id: 3,
        init_std: 0.3,
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub tolerance: f64,
    /// Deliberately corrupt the backward rule of this op.
    pub fault: Option<OpKind>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckFailure {
    pub coordinate: usize,
    /// `name[index]` for loss checks, the flat index for op checks.
    pub location: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub ops: Vec<String>,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub n_failures: usize,
    pub n_kinks: usize,
    pub failures: Vec<CheckFailure>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.n_failures == 0 && self.n_kinks == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub model_parameters: usize,
    pub checks: Vec<CheckResult>,
    /// Ops used by every failing check and by no passing one.
    pub suspect_ops: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

type Case = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// `sum(y * c)` for a fixed random `c` shaped like `y`.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = g.constant(random(&mut rng, g.value(y).shape()));
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

/// `mean(exp(y))`, a reduction that avoids `mul` and `sum`.
fn exp_mean(g: &mut Graph, y: Var) -> Var {
    let e = g.exp(y);
    g.mean(e)
}

fn op_cases(seed: u64) -> Vec<(&'static str, Case)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, &[4, 2]);
    let o = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4]);
    let gain = random(&mut rng, &[4]);
    let k = seed ^ 0x5eed;
    let cst = move |g: &mut Graph, t: &Tensor| g.constant(t.clone());
    vec![
        ("matmul", Box::new(move |g, x| {
            let wv = cst(g, &w);
            let y = g.matmul(x, wv)?;
            weighted_sum(g, y, k)
        })),
        ("matmul_nt", {
            let o = o.clone();
            Box::new(move |g, x| {
                let ov = cst(g, &o);
                let y = g.matmul_nt(x, ov)?;
                Ok(exp_mean(g, y))
            })
        }),
        ("add", {
            let o = o.clone();
            Box::new(move |g, x| {
                let ov = cst(g, &o);
                let y = g.add(x, ov)?;
                weighted_sum(g, y, k)
            })
        }),
        ("sub", {
            let o = o.clone();
            Box::new(move |g, x| {
                let ov = cst(g, &o);
                let y = g.sub(ov, x)?;
                Ok(exp_mean(g, y))
            })
        }),
        ("mul", Box::new(|g, x| {
            let y = g.mul(x, x)?;
            Ok(g.sum(y))
        })),
        ("scale", Box::new(|g, x| {
            let y = g.scale(x, -0.7);
            Ok(exp_mean(g, y))
        })),
        ("add_bias", Box::new(move |g, x| {
            let bv = cst(g, &b);
            let y = g.add_bias(x, bv)?;
            weighted_sum(g, y, k)
        })),
        ("gelu", Box::new(|g, x| {
            let y = g.gelu(x);
            Ok(exp_mean(g, y))
        })),
        ("softmax", Box::new(move |g, x| {
            let y = g.softmax(x, 1)?;
            weighted_sum(g, y, k)
        })),
        ("softmax_masked", Box::new(move |g, x| {
            let mask: Rc<[bool]> = (0..12).map(|i| i % 5 != 1).collect();
            let y = g.softmax_masked(x, Some(mask))?;
            weighted_sum(g, y, k)
        })),
        ("layer_norm", Box::new(move |g, x| {
            let gv = cst(g, &gain);
            let bv = g.constant(Tensor::zeros(&[4]));
            let y = g.layer_norm(x, gv, bv, 1e-5)?;
            weighted_sum(g, y, k)
        })),
        ("cross_entropy", Box::new(|g, x| {
            let a = g.cross_entropy_rows(x, &[3, 0, 1])?;
            let r = g.reshape(x, &[12])?;
            let b = g.cross_entropy(r, 7)?;
            g.add(a, b)
        })),
        ("sum", Box::new(|g, x| {
            let e = g.exp(x);
            Ok(g.sum(e))
        })),
        ("mean", Box::new(|g, x| {
            let y = g.mul(x, x)?;
            Ok(g.mean(y))
        })),
        ("gather_rows", Box::new(|g, x| {
            let y = g.gather_rows(x, &[2, 0, 2])?;
            Ok(exp_mean(g, y))
        })),
        ("concat_rows", Box::new(move |g, x| {
            let y = g.concat_rows(&[x, x])?;
            weighted_sum(g, y, k)
        })),
        ("slice_cols", Box::new(|g, x| {
            let y = g.slice_cols(x, 1, 2)?;
            Ok(exp_mean(g, y))
        })),
        ("concat_cols", Box::new(move |g, x| {
            let y = g.concat_cols(&[x, x])?;
            weighted_sum(g, y, k)
        })),
        ("transpose", Box::new(|g, x| {
            let y = g.transpose(x)?;
            let y = g.slice_cols(y, 0, 2)?;
            Ok(exp_mean(g, y))
        })),
        ("mean_rows", Box::new(move |g, x| {
            let y = g.mean_rows(x)?;
            weighted_sum(g, y, k)
        })),
        ("l2_normalize", Box::new(move |g, x| {
            let y = g.l2_normalize_rows(x)?;
            weighted_sum(g, y, k)
        })),
        ("mul_scalar", Box::new(|g, x| {
            let s = g.slice_flat(x, 5, &[1])?;
            let y = g.mul_scalar(x, s)?;
            Ok(exp_mean(g, y))
        })),
        ("exp", Box::new(|g, x| Ok(exp_mean(g, x)))),
        ("abs", Box::new(move |g, x| {
            let y = g.abs(x);
            weighted_sum(g, y, k)
        })),
        ("reshape", Box::new(|g, x| {
            let y = g.reshape(x, &[2, 6])?;
            Ok(exp_mean(g, y))
        })),
        ("slice_flat", Box::new(move |g, x| {
            let y = g.slice_flat(x, 2, &[2, 3])?;
            weighted_sum(g, y, k)
        })),
    ]
}

/// Inputs for the loss checks: two pairs, distinct words per sentence.
fn loss_batch(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SyntheticPair>> {
    [[4], [6]]
        .iter()
        .enumerate()
        .map(|(i, words)| {
            Ok(SyntheticPair {
                concept_id: i,
                raw_frames: random(rng, &[cfg.frames_per_video, cfg.raw_frame_dim]),
                text: TokenizedText::from_words(i as u64, words, cfg)?,
            })
        })
        .collect()
}

fn loss_cases(model: &TemporalModel, store: &ParamStore, pairs: &[SyntheticPair], seed: u64) -> Vec<(&'static str, Case)> {
    let cfg = model.config().clone();
    let texts: Vec<TokenizedText> = pairs.iter().map(|p| p.text.clone()).collect();
    let mlm_cfg = MlmConfig {
        mask_probability: 0.5,
        mask_token_id: cfg.mask_token_id,
        seed,
    };
    let sampled = VideoMergeConfig {
        strategy: VideoMergeStrategy::Sampling,
        k: 4,
        k_p_min: 1,
        k_p_max: 2,
        hard_top_m: 1,
        seed,
    };
    let shuffled = VideoMergeConfig::default();
    let t = cfg.frames_per_video;
    let max_words = cfg.max_merged_len - t;

    let vtc = {
        let (model, store, pairs) = (model.clone(), store.clone(), pairs.to_vec());
        move |g: &mut Graph, flat: Var| -> Result<Var> {
            let p = store.bind_flat(g, flat)?;
            let enc = encode_batch(g, &model, &p, &pairs)?;
            let (v, tx) = contrastive_embeddings(g, &model, &p, &enc)?;
            contrastive_loss(g, v, tx, temperature(&p, true, 0.07))
        }
    };
    let mlm = {
        let (model, store, pairs) = (model.clone(), store.clone(), pairs.to_vec());
        move |g: &mut Graph, flat: Var| -> Result<Var> {
            let p = store.bind_flat(g, flat)?;
            let enc = encode_batch(g, &model, &p, &pairs)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = mlm_loss(g, &model, &p, enc.videos[0], &pairs[0].text, &mlm_cfg, &mut rng)?.0;
            let b = mlm_loss(g, &model, &p, enc.videos[1], &pairs[1].text, &mlm_cfg, &mut rng)?.0;
            g.add(a, b)
        }
    };
    let moment = |merge: VideoMergeConfig| {
        let (model, store, pairs) = (model.clone(), store.clone(), pairs.to_vec());
        move |g: &mut Graph, flat: Var| -> Result<Var> {
            let p = store.bind_flat(g, flat)?;
            let enc = encode_batch(g, &model, &p, &pairs)?;
            let plan = video_plan(&merge, &enc.ids, t, 0, None, seed)?;
            let frames = merged_frames(g, &model, &p, &enc, &plan)?;
            let r = localize_video(g, &model, &p, frames, enc.texts[0])?;
            let (st, ed) = plan.boundary(enc.ids[0]).ok_or(Error::Empty("boundary"))?;
            moment_loss(g, r, st, ed)
        }
    };
    let span = {
        let (model, store, pairs, texts) = (model.clone(), store.clone(), pairs.to_vec(), texts.clone());
        move |g: &mut Graph, flat: Var| -> Result<Var> {
            let p = store.bind_flat(g, flat)?;
            let enc = encode_batch(g, &model, &p, &pairs)?;
            let (_, plan) = merge_texts_words(&texts, seed, max_words)?;
            let r = span_text(g, &model, &p, &enc, &plan, 1)?;
            let (st, ed) = plan.spans[&enc.ids[1]];
            text_span_loss(g, r, st, ed)
        }
    };
    let cls = {
        let (model, store, pairs, texts) = (model.clone(), store.clone(), pairs.to_vec(), texts);
        move |g: &mut Graph, flat: Var| -> Result<Var> {
            let p = store.bind_flat(g, flat)?;
            let enc = encode_batch(g, &model, &p, &pairs)?;
            let (order, plan) = merge_texts_cls(&texts, seed)?;
            let r = match_text(g, &model, &p, &enc, &order, 0)?;
            text_cls_loss(g, r, plan.matched_index[&enc.ids[0]])
        }
    };
    let parts: Vec<Case> = vec![
        Box::new(vtc.clone()),
        Box::new(mlm.clone()),
        Box::new(moment(shuffled.clone())),
        Box::new(span.clone()),
        Box::new(cls.clone()),
    ];
    let total = move |g: &mut Graph, flat: Var| -> Result<Var> {
        let mut acc = parts[0](g, flat)?;
        for f in &parts[1..] {
            let l = f(g, flat)?;
            acc = g.add(acc, l)?;
        }
        Ok(acc)
    };
    vec![
        ("contrastive_loss", Box::new(vtc)),
        ("mlm_loss", Box::new(mlm)),
        ("moment_loss[shuffled]", Box::new(moment(shuffled))),
        ("moment_loss[sampled]", Box::new(moment(sampled))),
        ("text_span_loss", Box::new(span)),
        ("text_cls_loss", Box::new(cls)),
        ("total_loss", Box::new(total)),
    ]
}

fn check(name: &str, f: &Case, x: &Tensor, opts: &SuiteOptions, locate: &dyn Fn(usize) -> String) -> Result<CheckResult> {
    let fault = opts.fault;
    let wrapped = |g: &mut Graph, v: Var| {
        g.inject_gradient_fault(fault);
        f(g, v)
    };
    let mut g = Graph::new();
    let v = g.param(x.clone());
    f(&mut g, v)?;
    let ops = g.op_kinds().into_iter().map(|k| k.name().to_string()).collect();
    let r = finite_difference_check(wrapped, x, STEP, opts.tolerance)?;
    Ok(CheckResult {
        name: name.to_string(),
        ops,
        coordinates: r.coordinates,
        max_rel_err: r.max_rel_err,
        n_failures: r.failures.len(),
        n_kinks: r.kinks.len(),
        failures: r
            .failures
            .iter()
            .take(MAX_LISTED_FAILURES)
            .map(|c| CheckFailure {
                coordinate: c.index,
                location: locate(c.index),
                analytic: c.analytic,
                numeric: c.numeric,
                rel_err: c.rel_err,
            })
            .collect(),
    })
}

fn suspects(checks: &[CheckResult]) -> Vec<String> {
    let mut failing = checks.iter().filter(|c| !c.passed());
    let Some(first) = failing.next() else {
        return Vec::new();
    };
    let mut common: BTreeSet<&String> = first.ops.iter().collect();
    for c in failing {
        let ops: BTreeSet<&String> = c.ops.iter().collect();
        common = common.intersection(&ops).copied().collect();
    }
    for c in checks.iter().filter(|c| c.passed()) {
        for op in &c.ops {
            common.remove(op);
        }
    }
    common.into_iter().cloned().collect()
}

pub fn run_gradcheck(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let x = random(&mut rng, &[3, 4]);
    for (name, f) in op_cases(opts.seed) {
        checks.push(check(&format!("op:{name}"), &f, &x, opts, &|i| format!("x[{i}]"))?);
    }

    let model = TemporalModel::new(check_model_config())?;
    let store = model.init_params(opts.seed, 0.07);
    let pairs = loss_batch(model.config(), &mut rng)?;
    let mut offsets = Vec::new();
    let mut at = 0;
    for (name, t) in store.iter() {
        offsets.push((at, name.to_string()));
        at += t.numel();
    }
    let locate = |i: usize| {
        let k = offsets.partition_point(|(o, _)| *o <= i) - 1;
        format!("{}[{}]", offsets[k].1, i - offsets[k].0)
    };
    let flat = store.flatten();
    for (name, f) in loss_cases(&model, &store, &pairs, opts.seed) {
        checks.push(check(&format!("loss:{name}"), &f, &flat, opts, &locate)?);
    }
    let suspect_ops = suspects(&checks);
    Ok(SuiteReport {
        tolerance: opts.tolerance,
        model_parameters: store.num_scalars(),
        checks,
        suspect_ops,
    })
}
