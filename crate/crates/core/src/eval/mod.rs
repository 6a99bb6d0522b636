//! Retrieval recall, boundary accuracy and temporal IoU, boundary decoding,
//! and frame-text similarity export.

mod heldout;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use heldout::{evaluate, export_heldout_heatmap, retrieval, EvalConfig, EvalReport, EvalSetup, QueryOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub recall_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
}

/// Rank (0-based) of `target` within `row`, ties going to the lower index.
fn rank_of(row: &[f64], target: usize) -> usize {
    let s = row[target];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

/// Fraction of queries (rows of `sim`) whose ground-truth gallery column ranks in the top k.
pub fn recall_at_k(sim: &Tensor, ground_truth: &[usize], ks: &[usize]) -> Result<RetrievalResult> {
    let (q, gsz) = (sim.rows(), sim.cols());
    if ground_truth.len() != q {
        return Err(Error::Shape {
            op: "recall_at_k",
            lhs: sim.shape().to_vec(),
            rhs: vec![ground_truth.len()],
        });
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > gsz) {
        return Err(Error::Index {
            what: "recall k",
            index: k,
            len: gsz,
        });
    }
    if let Some(&t) = ground_truth.iter().find(|&&t| t >= gsz) {
        return Err(Error::Index {
            what: "ground-truth gallery index",
            index: t,
            len: gsz,
        });
    }
    let ranks: Vec<usize> = (0..q).map(|i| rank_of(sim.row(i), ground_truth[i])).collect();
    let recall_at = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / q as f64))
        .collect();
    Ok(RetrievalResult { recall_at, n_queries: q })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub start_acc: f64,
    pub end_acc: f64,
    pub both_acc: f64,
    pub mean_iou: f64,
}

/// IoU of two inclusive index intervals.
pub fn temporal_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    let inter = if hi >= lo { hi - lo + 1 } else { 0 };
    let union = (a.1 - a.0 + 1) + (b.1 - b.0 + 1) - inter;
    inter as f64 / union as f64
}

pub fn boundary_metrics(predictions: &[(usize, usize)], labels: &[(usize, usize)]) -> Result<LocalizationResult> {
    if predictions.is_empty() {
        return Err(Error::Empty("boundary_metrics"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            op: "boundary_metrics",
            lhs: vec![predictions.len()],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&(s, e)) = predictions.iter().chain(labels).find(|(s, e)| s > e) {
        return Err(Error::Index {
            what: "interval start",
            index: s,
            len: e + 1,
        });
    }
    let n = predictions.len() as f64;
    let (mut st, mut ed, mut both, mut iou) = (0usize, 0usize, 0usize, 0.0);
    for (p, l) in predictions.iter().zip(labels) {
        st += usize::from(p.0 == l.0);
        ed += usize::from(p.1 == l.1);
        both += usize::from(p == l);
        iou += temporal_iou(*p, *l);
    }
    Ok(LocalizationResult {
        start_acc: st as f64 / n,
        end_acc: ed as f64 / n,
        both_acc: both as f64 / n,
        mean_iou: iou / n,
    })
}

/// Best `(st, ed)` with `st <= ed` under `r[st][0] + r[ed][1]`, in one
/// prefix-max pass. Ties prefer the smaller end, then the smaller start.
pub fn decode_boundary(r_vl: &Tensor) -> Result<(usize, usize)> {
    if r_vl.shape().len() != 2 || r_vl.cols() != 2 || r_vl.rows() == 0 {
        return Err(Error::Shape {
            op: "decode_boundary",
            lhs: r_vl.shape().to_vec(),
            rhs: vec![0, 2],
        });
    }
    let mut best_st = 0;
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for ed in 0..r_vl.rows() {
        if r_vl.at(ed, 0) > r_vl.at(best_st, 0) {
            best_st = ed;
        }
        let s = r_vl.at(best_st, 0) + r_vl.at(ed, 1);
        if s > best_score {
            best_score = s;
            best = (best_st, ed);
        }
    }
    Ok(best)
}

/// Cosine similarity of every row of `a` against every row of `b`.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "cosine_matrix",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let an: Vec<f64> = (0..a.rows()).map(|i| norm(a.row(i))).collect();
    let bn: Vec<f64> = (0..b.rows()).map(|j| norm(b.row(j))).collect();
    if an.iter().chain(&bn).any(|&n| n == 0.0) {
        return Err(Error::Degenerate("zero embedding in cosine_matrix"));
    }
    let mut out = Vec::with_capacity(a.rows() * b.rows());
    for (i, ni) in an.iter().enumerate() {
        for (j, nj) in bn.iter().enumerate() {
            let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            out.push(dot / (ni * nj));
        }
    }
    Tensor::new(vec![a.rows(), b.rows()], out)
}

/// Path of the boundary sidecar written next to a heatmap CSV.
pub fn heatmap_sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    boundaries: BTreeMap<String, (usize, usize)>,
}

/// Writes the M×B frame-text cosine matrix as header-less CSV, plus a
/// JSON sidecar `{"boundaries": {text_id: [st, ed]}}`.
pub fn export_similarity_heatmap(
    frame_tokens: &Tensor,
    text_tokens: &Tensor,
    boundaries: &BTreeMap<u64, (usize, usize)>,
    out_path: &Path,
) -> Result<Tensor> {
    let sim = cosine_matrix(frame_tokens, text_tokens)?;
    let mut buf = Vec::new();
    for i in 0..sim.rows() {
        let line: Vec<String> = sim.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(buf, "{}", line.join(",")).expect("write to vec");
    }
    std::fs::write(out_path, buf).map_err(|e| Error::io(out_path, e))?;
    let side = heatmap_sidecar_path(out_path);
    let sidecar = Sidecar {
        boundaries: boundaries.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&side, e))?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok(sim)
}

/// Parses a heatmap CSV back into a matrix.
pub fn read_heatmap(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = line
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

/// Mean cosine inside `[st, ed]` minus mean cosine outside, for one column.
pub fn boundary_contrast(sim_column: &[f64], st: usize, ed: usize) -> Option<f64> {
    let inside: Vec<f64> = sim_column[st..=ed].to_vec();
    let outside: Vec<f64> = sim_column
        .iter()
        .enumerate()
        .filter(|&(i, _)| i < st || i > ed)
        .map(|(_, &v)| v)
        .collect();
    if outside.is_empty() {
        return None;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some(mean(&inside) - mean(&outside))
}

#[cfg(test)]
mod tests;
