//! Pre-norm transformer blocks: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{BoundParams, ParamStore};
use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn init_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
        .expect("shape matches data")
}

pub(crate) fn init_block(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, std: f64, rng: &mut impl Rng) {
    store.insert(format!("{prefix}.ln1.g"), Tensor::full(&[d], 1.0));
    store.insert(format!("{prefix}.ln1.b"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.attn.wqkv"), init_normal(rng, &[d, 3 * d], std));
    store.insert(format!("{prefix}.attn.bqkv"), Tensor::zeros(&[3 * d]));
    store.insert(format!("{prefix}.attn.wo"), init_normal(rng, &[d, d], std));
    store.insert(format!("{prefix}.attn.bo"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.ln2.g"), Tensor::full(&[d], 1.0));
    store.insert(format!("{prefix}.ln2.b"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.ffn.w1"), init_normal(rng, &[d, d_ff], std));
    store.insert(format!("{prefix}.ffn.b1"), Tensor::zeros(&[d_ff]));
    store.insert(format!("{prefix}.ffn.w2"), init_normal(rng, &[d_ff, d], std));
    store.insert(format!("{prefix}.ffn.b2"), Tensor::zeros(&[d]));
}

pub(crate) fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_bias(y, b),
        None => Ok(y),
    }
}

/// n×n keep-mask combining padding (`key_mask[j]` false hides key j) and
/// optional causality (key j hidden from query i when j > i).
pub(crate) fn attention_mask(n: usize, key_mask: Option<&[bool]>, causal: bool) -> Option<Rc<[bool]>> {
    let all_keys = key_mask.is_none_or(|m| m.iter().all(|&k| k));
    if all_keys && !causal {
        return None;
    }
    let mut m = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let key_ok = key_mask.is_none_or(|km| km[j]);
            m.push(key_ok && (!causal || j <= i));
        }
    }
    Some(Rc::from(m))
}

/// One block. Returns the new hidden state and, when requested, the
/// per-head attention probability nodes.
pub(crate) fn block_forward(
    g: &mut Graph,
    p: &BoundParams<'_>,
    prefix: &str,
    x: Var,
    n_heads: usize,
    mask: Option<Rc<[bool]>>,
    trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let d = g.value(x).cols();
    let dh = d / n_heads;
    let h = g.layer_norm(x, p.get(&format!("{prefix}.ln1.g")), p.get(&format!("{prefix}.ln1.b")), LN_EPS)?;
    let qkv = linear(
        g,
        h,
        p.get(&format!("{prefix}.attn.wqkv")),
        Some(p.get(&format!("{prefix}.attn.bqkv"))),
    )?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut probs_out = Vec::new();
    for head in 0..n_heads {
        let q = g.slice_cols(qkv, head * dh, dh)?;
        let k = g.slice_cols(qkv, d + head * dh, dh)?;
        let v = g.slice_cols(qkv, 2 * d + head * dh, dh)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, scale);
        let probs = g.softmax_masked(scores, mask.clone())?;
        probs_out.push(probs);
        heads.push(g.matmul(probs, v)?);
    }
    if let Some(t) = trace {
        t.extend(probs_out);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let attn = linear(
        g,
        cat,
        p.get(&format!("{prefix}.attn.wo")),
        Some(p.get(&format!("{prefix}.attn.bo"))),
    )?;
    let x = g.add(x, attn)?;

    let h = g.layer_norm(x, p.get(&format!("{prefix}.ln2.g")), p.get(&format!("{prefix}.ln2.b")), LN_EPS)?;
    let f = linear(
        g,
        h,
        p.get(&format!("{prefix}.ffn.w1")),
        Some(p.get(&format!("{prefix}.ffn.b1"))),
    )?;
    let f = g.gelu(f);
    let f = linear(
        g,
        f,
        p.get(&format!("{prefix}.ffn.w2")),
        Some(p.get(&format!("{prefix}.ffn.b2"))),
    )?;
    g.add(x, f)
}
