//! AdamW with decoupled weight decay, global-norm clipping and the
//! warmup-then-cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 0.005,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            t: 0,
            names: params.names().map(str::to_string).collect(),
            m: params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Errors unless names and moment shapes line up with `params`.
    pub fn check_matches(&self, params: &ParamStore) -> Result<()> {
        if self.names.len() != params.len() || self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state covers {} parameters, model has {}",
                self.names.len(),
                params.len()
            )));
        }
        for (i, (name, p)) in params.iter().enumerate() {
            if self.names[i] != name || self.m[i].shape() != p.shape() || self.v[i].shape() != p.shape() {
                return Err(Error::Checkpoint(format!("optimizer state mismatch at {name}")));
            }
        }
        Ok(())
    }
}

/// One AdamW update. Decay multiplies weights by `1 - lr*wd` before the
/// bias-corrected Adam step.
pub fn adamw_step(params: &mut ParamStore, grads: &[Tensor], state: &mut OptimizerState, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape {
            op: "adamw_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    for ((name, p), gr) in params.iter().zip(grads) {
        if p.shape() != gr.shape() {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: gr.shape().to_vec(),
            });
        }
        if !gr.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.values_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            *w -= lr * cfg.weight_decay * *w;
            *w -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to `lr_peak / 10` at `steps`.
pub fn cosine_lr(step: usize, steps: usize, warmup_steps: usize, lr_peak: f64) -> f64 {
    let floor = lr_peak / 10.0;
    if step < warmup_steps {
        return lr_peak * step as f64 / warmup_steps as f64;
    }
    if steps <= warmup_steps {
        return lr_peak;
    }
    let progress = ((step - warmup_steps) as f64 / (steps - warmup_steps) as f64).min(1.0);
    floor + 0.5 * (lr_peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}
