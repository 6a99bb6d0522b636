use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, clip_grad_norm, OptimizerState};
use super::MAX_LOGIT_SCALE;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, EvalSetup};
use crate::merging::{compute_video_similarity, merge_texts_cls, merge_texts_words, TextMergeStrategy, VideoMergeStrategy};
use crate::model::{ParamStore, TemporalModel};
use crate::objectives::{contrastive_loss, mlm_loss, moment_loss, text_cls_loss, text_span_loss, total_loss, LossBreakdown, MlmConfig};
use crate::pipeline::{
    contrastive_embeddings, encode_batch, localize_video, match_text, merged_frames, span_text, temperature, video_plan,
};
use crate::seed::{derive_seed, stream_rng, Stream};
use crate::synthdata::{Generator, SeedLedger};
use crate::tensor::{Graph, Tensor, Var};

pub const METRICS_HEADER: &str = "step,lr,vtc,mlm,vl,tl,total,r1,boundary_acc,cls_match_acc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Completed steps.
    pub step: usize,
    pub seed: u64,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn file_name(step: usize) -> String {
        format!("ckpt_{step}.json")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// One completed update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

pub struct Trainer {
    cfg: RunConfig,
    model: TemporalModel,
    generator: Generator,
    params: ParamStore,
    opt: OptimizerState,
    step: usize,
    ledger: SeedLedger,
}

fn mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = *terms.first().ok_or(Error::Empty("loss terms"))?;
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = TemporalModel::new(cfg.model.clone())?;
        let generator = Generator::new(cfg.data.clone(), &cfg.model)?;
        let params = model.init_params(derive_seed(cfg.train.seed, Stream::Init, 0), cfg.train.temperature);
        let opt = OptimizerState::new(&params);
        Ok(Self {
            cfg,
            model,
            generator,
            params,
            opt,
            step: 0,
            ledger: SeedLedger::default(),
        })
    }

    /// Continues from `ckpt`; the result trains exactly as the original run would have.
    pub fn from_checkpoint(cfg: RunConfig, ckpt: Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        if ckpt.seed != t.cfg.train.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint seed {} differs from train.seed {}",
                ckpt.seed, t.cfg.train.seed
            )));
        }
        t.params.check_compatible(&ckpt.params)?;
        ckpt.optimizer.check_matches(&ckpt.params)?;
        t.params = ckpt.params;
        t.opt = ckpt.optimizer;
        t.step = ckpt.step;
        Ok(t)
    }

    /// Fresh optimizer state around existing parameters, e.g. for evaluation.
    pub fn with_params(cfg: RunConfig, params: ParamStore) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        t.params.check_compatible(&params)?;
        t.opt = OptimizerState::new(&params);
        t.params = params;
        Ok(t)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &TemporalModel {
        &self.model
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn ledger(&self) -> &SeedLedger {
        &self.ledger
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            seed: self.cfg.train.seed,
            params: self.params.clone(),
            optimizer: self.opt.clone(),
        }
    }

    pub fn data_seed(&self, step: usize) -> u64 {
        derive_seed(self.cfg.train.seed, Stream::Data, step as u64)
    }

    /// Loss breakdown and parameter gradients (store order) of step `step`
    /// at the current parameters, without updating anything.
    pub fn compute(&self, step: usize) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let t = &self.cfg.train;
        let mc = &self.cfg.model;
        let b = t.batch_size;
        let pairs = self.generator.generate_batch(b, self.data_seed(step), true)?;
        let texts: Vec<_> = pairs.iter().map(|p| p.text.clone()).collect();

        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let model = &self.model;
        let enc = encode_batch(&mut g, model, &p, &pairs)?;

        let (v, te) = contrastive_embeddings(&mut g, model, &p, &enc)?;
        let vtc = contrastive_loss(&mut g, v, te, temperature(&p, t.learnable_temperature, t.temperature))?;

        let mlm_cfg = MlmConfig {
            mask_probability: t.mask_probability,
            mask_token_id: mc.mask_token_id,
            seed: t.seed,
        };
        let mut mask_rng = stream_rng(t.seed, Stream::Mask, step as u64);
        let mut mlm_terms = Vec::with_capacity(b);
        for (i, pair) in pairs.iter().enumerate() {
            mlm_terms.push(mlm_loss(&mut g, model, &p, enc.videos[i], &pair.text, &mlm_cfg, &mut mask_rng)?.0);
        }
        let mlm = mean(&mut g, &mlm_terms)?;

        let mut query_rng = stream_rng(t.seed, Stream::Query, step as u64);
        let mut order: Vec<usize> = (0..b).collect();
        let (picked, _) = order.partial_shuffle(&mut query_rng, t.loc_queries_per_step.min(b));
        let queries = picked.to_vec();
        let merge_seed = derive_seed(t.seed ^ t.video_merge.seed.rotate_left(32), Stream::Merge, step as u64);
        let similarity = (t.video_merge.strategy == VideoMergeStrategy::HardSampling).then(|| compute_video_similarity(g.value(v)));

        let mut shared_frames = None;
        let mut vl_terms = Vec::with_capacity(queries.len());
        for (k, &q) in queries.iter().enumerate() {
            let plan = video_plan(
                &t.video_merge,
                &enc.ids,
                mc.frames_per_video,
                q,
                similarity.as_ref(),
                derive_seed(merge_seed, Stream::Merge, if t.video_merge.strategy == VideoMergeStrategy::Shuffling { 0 } else { k as u64 + 1 }),
            )?;
            let frames = match (t.video_merge.strategy, shared_frames) {
                (VideoMergeStrategy::Shuffling, Some(f)) => f,
                _ => {
                    let f = merged_frames(&mut g, model, &p, &enc, &plan)?;
                    shared_frames = Some(f);
                    f
                }
            };
            let (st, ed) = plan.boundary(enc.ids[q]).ok_or_else(|| Error::Merge(format!("no boundary for {}", enc.ids[q])))?;
            let r = localize_video(&mut g, model, &p, frames, enc.texts[q])?;
            vl_terms.push(moment_loss(&mut g, r, st, ed)?);
        }
        let vl = mean(&mut g, &vl_terms)?;

        let text_seed = derive_seed(merge_seed, Stream::Query, 0);
        let mut tl_terms = Vec::with_capacity(queries.len());
        match t.text_merge {
            TextMergeStrategy::MergeCls => {
                let (order, plan) = merge_texts_cls(&texts, text_seed)?;
                for &q in &queries {
                    let r = match_text(&mut g, model, &p, &enc, &order, q)?;
                    tl_terms.push(text_cls_loss(&mut g, r, plan.matched_index[&enc.ids[q]])?);
                }
            }
            TextMergeStrategy::MergeWords => {
                let (_, plan) = merge_texts_words(&texts, text_seed, mc.max_merged_len - mc.frames_per_video)?;
                for &q in &queries {
                    let r = span_text(&mut g, model, &p, &enc, &plan, q)?;
                    let (st, ed) = plan.spans[&enc.ids[q]];
                    tl_terms.push(text_span_loss(&mut g, r, st, ed)?);
                }
            }
        }
        let tl = mean(&mut g, &tl_terms)?;

        let val = |g: &Graph, x: Var| g.value(x).item();
        let losses = total_loss(val(&g, vtc), val(&g, mlm), val(&g, vl), val(&g, tl), t.alpha, t.beta)?;

        let mut total = vtc;
        if t.alpha != 0.0 {
            let a = g.scale(mlm, t.alpha);
            total = g.add(total, a)?;
        }
        if t.beta != 0.0 {
            let s = g.add(vl, tl)?;
            let s = g.scale(s, t.beta);
            total = g.add(total, s)?;
        }
        g.backward(total)?;
        Ok((losses, p.grads(&g)))
    }

    /// Video-video similarity of the contrastive embeddings for the batch of step `step`.
    pub fn batch_similarity(&self, step: usize) -> Result<Tensor> {
        let pairs = self.generator.generate_batch(self.cfg.train.batch_size, self.data_seed(step), true)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let enc = encode_batch(&mut g, &self.model, &p, &pairs)?;
        let (v, _) = contrastive_embeddings(&mut g, &self.model, &p, &enc)?;
        Ok(compute_video_similarity(g.value(v)))
    }

    /// Runs step `self.step()` and applies the update.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let (losses, mut grads) = self.compute(self.step)?;
        self.ledger.record(Stream::Data, self.data_seed(self.step));
        let t = &self.cfg.train;
        clip_grad_norm(&mut grads, t.grad_clip);
        let lr = t.lr_at(self.step + 1);
        adamw_step(&mut self.params, &grads, &mut self.opt, lr, &t.adamw())?;
        if t.learnable_temperature {
            if let Some(s) = self.params.get_mut("contrastive.logit_scale") {
                s.data_mut().iter_mut().for_each(|x| *x = x.clamp(0.0, MAX_LOGIT_SCALE));
            }
        }
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            lr,
            losses,
        })
    }

    pub fn eval_setup(&self) -> EvalSetup<'_> {
        let t = &self.cfg.train;
        EvalSetup {
            model: &self.model,
            params: &self.params,
            generator: &self.generator,
            eval: &t.eval,
            batch_size: t.batch_size,
            video_merge: &t.video_merge,
            text_merge: t.text_merge,
        }
    }

    /// Held-out evaluation of the current parameters.
    pub fn evaluate(&mut self) -> Result<EvalReport> {
        if !self.params.all_finite() {
            return Err(Error::NonFinite(format!("parameters at step {}", self.step)));
        }
        let e = &self.cfg.train.eval;
        for i in 0..=e.queries as u64 {
            self.ledger.record(Stream::HeldOut, e.data_seed(i));
        }
        evaluate(&self.eval_setup())
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps_completed: usize,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub records: Vec<StepRecord>,
    pub final_eval: Option<EvalReport>,
    pub ledger: SeedLedger,
    pub params: ParamStore,
}

fn metrics_row(r: &StepRecord, eval: Option<&EvalReport>) -> String {
    let l = &r.losses;
    let tail = match eval {
        Some(e) => format!("{},{},{}", e.recall(1), e.localization.both_acc, e.cls_match_acc),
        None => ",,".to_string(),
    };
    format!("{},{},{},{},{},{},{},{tail}", r.step, r.lr, l.vtc, l.mlm, l.vl, l.tl, l.total)
}

/// Trains per `cfg`, writing `config.json`, `metrics.csv` and
/// `ckpt_<step>.json` files under `cfg.output_dir` (overwriting).
pub fn run(cfg: &RunConfig, resume_from: Option<&Path>) -> Result<RunSummary> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.save_json(&dir.join("config.json"))?;
    let mut trainer = match resume_from {
        Some(path) => Trainer::from_checkpoint(cfg.clone(), Checkpoint::load(path)?)?,
        None => Trainer::new(cfg.clone())?,
    };
    let metrics_path = dir.join("metrics.csv");
    let file = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;

    let t = &cfg.train;
    let mut records = Vec::new();
    let mut final_eval = None;
    let mut last_ckpt = None;
    while trainer.step() < t.steps {
        let rec = trainer.train_step()?;
        let done = rec.step == t.steps;
        let eval = if done || (t.eval_every > 0 && rec.step % t.eval_every == 0) {
            Some(trainer.evaluate()?)
        } else {
            None
        };
        writeln!(out, "{}", metrics_row(&rec, eval.as_ref())).map_err(|e| Error::io(&metrics_path, e))?;
        if done || (t.checkpoint_every > 0 && rec.step % t.checkpoint_every == 0) {
            let path = dir.join(Checkpoint::file_name(rec.step));
            trainer.checkpoint().save(&path)?;
            last_ckpt = Some(path);
        }
        if done {
            final_eval = eval;
        }
        records.push(rec);
    }
    out.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_checkpoint = match last_ckpt {
        Some(p) => p,
        None => {
            let path = dir.join(Checkpoint::file_name(trainer.step()));
            trainer.checkpoint().save(&path)?;
            path
        }
    };
    Ok(RunSummary {
        steps_completed: trainer.step(),
        final_checkpoint,
        metrics_path,
        records,
        final_eval,
        ledger: trainer.ledger().clone(),
        params: trainer.params().clone(),
    })
}
