//! Deterministic training: each step draws a fresh synthetic batch, builds
//! the contrastive, masked-language, video-localization and
//! text-localization losses on one graph, and takes one AdamW step.

mod optim;
mod run;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::merging::{TextMergeStrategy, VideoMergeConfig};

pub use optim::{adamw_step, clip_grad_norm, cosine_lr, AdamWConfig, OptimizerState};
pub use run::{run, Checkpoint, RunSummary, StepRecord, Trainer, METRICS_HEADER};

/// Upper clamp on the learnable contrastive logit scale (inverse temperature 100).
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mask_probability: f64,
    /// Initial (or fixed) contrastive temperature.
    pub temperature: f64,
    pub learnable_temperature: bool,
    /// Localization queries per step, each against the step's merged sequence.
    pub loc_queries_per_step: usize,
    /// Evaluate every this many steps (0: only after the last step).
    pub eval_every: usize,
    /// Checkpoint every this many steps (0: only after the last step).
    pub checkpoint_every: usize,
    pub seed: u64,
    pub video_merge: VideoMergeConfig,
    pub text_merge: TextMergeStrategy,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr_peak: 3e-3,
            weight_decay: 0.005,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            warmup_steps: 100,
            grad_clip: 1.0,
            alpha: 1.0,
            beta: 1.0,
            mask_probability: 0.15,
            temperature: 0.07,
            learnable_temperature: true,
            loc_queries_per_step: 2,
            eval_every: 500,
            checkpoint_every: 0,
            seed: 0,
            video_merge: VideoMergeConfig::default(),
            text_merge: TextMergeStrategy::MergeCls,
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("train.batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return bad(format!(
                "train requires 0 < beta1 ({}) < beta2 ({}) < 1",
                self.beta1, self.beta2
            ));
        }
        for (name, v) in [
            ("lr_peak", self.lr_peak),
            ("weight_decay", self.weight_decay),
            ("eps", self.eps),
            ("grad_clip", self.grad_clip),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("train.{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.mask_probability > 0.0 && self.mask_probability < 1.0) {
            return bad(format!("train.mask_probability must lie in (0, 1), got {}", self.mask_probability));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("train.temperature must be positive, got {}", self.temperature));
        }
        if self.loc_queries_per_step == 0 {
            return bad("train.loc_queries_per_step must be >= 1".into());
        }
        self.video_merge.validate()?;
        self.eval.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// `warmup_steps`, or `steps / 10` when the configured warmup would not
    /// end before the last step.
    pub fn effective_warmup(&self) -> usize {
        if self.warmup_steps >= self.steps {
            self.steps / 10
        } else {
            self.warmup_steps
        }
    }

    /// Learning rate used by the update that completes step `completed`.
    pub fn lr_at(&self, completed: usize) -> f64 {
        cosine_lr(completed, self.steps, self.effective_warmup(), self.lr_peak)
    }
}
