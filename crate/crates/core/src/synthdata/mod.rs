//! Synthetic paired video-text data with known alignment.
//!
//! Each concept owns a fixed random unit anchor in frame-feature space and
//! a small set of vocabulary tokens. A video of concept c is T noisy copies
//! of c's anchor; its sentence mixes c's tokens with shared distractors.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TokenizedText};
use crate::seed::Stream;
use crate::tensor::Tensor;

/// Noise is redrawn per coordinate until it lies within this many sigmas.
pub const NOISE_TRUNCATION: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_concepts: usize,
    pub raw_frame_dim: usize,
    pub frames_per_video: usize,
    pub tokens_per_sentence: usize,
    pub noise_sigma: f64,
    /// Concept c owns ids `concept_vocab_start + c*tokens_per_concept ..` (exclusive end).
    pub concept_vocab_start: usize,
    pub tokens_per_concept: usize,
    /// Half-open id range `[start, end)`.
    pub distractor_vocab: (usize, usize),
    /// Share of sentence tokens drawn from the concept vocabulary.
    pub concept_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_concepts: 32,
            raw_frame_dim: 32,
            frames_per_video: 8,
            tokens_per_sentence: 10,
            noise_sigma: 0.1,
            concept_vocab_start: 4,
            tokens_per_concept: 2,
            distractor_vocab: (68, 128),
            concept_fraction: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn concept_vocab(&self, concept: usize) -> Range<usize> {
        let s = self.concept_vocab_start + concept * self.tokens_per_concept;
        s..s + self.tokens_per_concept
    }

    fn concept_vocab_all(&self) -> Range<usize> {
        self.concept_vocab_start..self.concept_vocab_start + self.n_concepts * self.tokens_per_concept
    }

    pub fn concept_of_token(&self, token: usize) -> Option<usize> {
        self.concept_vocab_all()
            .contains(&token)
            .then(|| (token - self.concept_vocab_start) / self.tokens_per_concept)
    }

    fn concept_words(&self) -> usize {
        ((self.tokens_per_sentence as f64 * self.concept_fraction).round() as usize).clamp(1, self.tokens_per_sentence)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_concepts == 0 || self.raw_frame_dim == 0 || self.frames_per_video == 0 {
            return bad("data.n_concepts, data.raw_frame_dim and data.frames_per_video must be positive".into());
        }
        if self.tokens_per_sentence == 0 || self.tokens_per_concept == 0 {
            return bad("data.tokens_per_sentence and data.tokens_per_concept must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("data.noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.concept_fraction) {
            return bad(format!("data.concept_fraction must lie in [0, 1], got {}", self.concept_fraction));
        }
        let (ds, de) = self.distractor_vocab;
        let cv = self.concept_vocab_all();
        if self.concept_words() < self.tokens_per_sentence && ds >= de {
            return bad("data.distractor_vocab is empty".into());
        }
        if ds < cv.end && cv.start < de {
            return bad(format!(
                "data.distractor_vocab [{ds}, {de}) overlaps concept tokens [{}, {})",
                cv.start, cv.end
            ));
        }
        Ok(())
    }

    /// Checks that ids and shapes agree with the model.
    pub fn validate_against(&self, model: &ModelConfig) -> Result<()> {
        self.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.frames_per_video != model.frames_per_video {
            return bad(format!(
                "data.frames_per_video ({}) differs from model.frames_per_video ({})",
                self.frames_per_video, model.frames_per_video
            ));
        }
        if self.raw_frame_dim != model.raw_frame_dim {
            return bad(format!(
                "data.raw_frame_dim ({}) differs from model.raw_frame_dim ({})",
                self.raw_frame_dim, model.raw_frame_dim
            ));
        }
        if self.tokens_per_sentence > model.max_text_len {
            return bad(format!(
                "data.tokens_per_sentence ({}) exceeds model.max_text_len ({})",
                self.tokens_per_sentence, model.max_text_len
            ));
        }
        let cv = self.concept_vocab_all();
        let (ds, de) = self.distractor_vocab;
        if cv.end > model.text_vocab_size || de > model.text_vocab_size {
            return bad(format!(
                "data vocabulary ends at {} but model.text_vocab_size is {}",
                cv.end.max(de),
                model.text_vocab_size
            ));
        }
        for id in model.special_ids() {
            if cv.contains(&id) || (ds..de).contains(&id) {
                return bad(format!("special token id {id} falls inside the data vocabulary"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub concept_id: usize,
    pub raw_frames: Tensor,
    /// `text.text_id` doubles as the paired video id.
    pub text: TokenizedText,
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    specials: (usize, usize),
    anchors: Tensor,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, model: &ModelConfig) -> Result<Self> {
        cfg.validate_against(model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.raw_frame_dim;
        let mut data = Vec::with_capacity(cfg.n_concepts * d);
        for _ in 0..cfg.n_concepts {
            let v: Vec<f64> = loop {
                let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                if v.iter().any(|x: &f64| *x != 0.0) {
                    break v;
                }
            };
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(v.into_iter().map(|x| x / n));
        }
        Ok(Self {
            anchors: Tensor::new(vec![cfg.n_concepts, d], data)?,
            specials: (model.cls_token_id, model.sep_token_id),
            cfg,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// One unit row per concept.
    pub fn anchors(&self) -> &Tensor {
        &self.anchors
    }

    pub fn generate_pair(&self, concept_id: usize, pair_id: u64, seed: u64) -> Result<SyntheticPair> {
        let c = &self.cfg;
        if concept_id >= c.n_concepts {
            return Err(Error::Index {
                what: "concept id",
                index: concept_id,
                len: c.n_concepts,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchor = self.anchors.row(concept_id);
        let mut frames = Vec::with_capacity(c.frames_per_video * c.raw_frame_dim);
        for _ in 0..c.frames_per_video {
            for &a in anchor {
                let z: f64 = loop {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if z.abs() <= NOISE_TRUNCATION {
                        break z;
                    }
                };
                frames.push(a + c.noise_sigma * z);
            }
        }
        let n = c.tokens_per_sentence;
        let k = c.concept_words();
        let mut is_concept: Vec<bool> = (0..n).map(|i| i < k).collect();
        is_concept.shuffle(&mut rng);
        let vocab = c.concept_vocab(concept_id);
        let (ds, de) = c.distractor_vocab;
        let mut ids = Vec::with_capacity(n + 2);
        ids.push(self.specials.0);
        for concept_word in is_concept {
            ids.push(if concept_word {
                rng.random_range(vocab.clone())
            } else {
                rng.random_range(ds..de)
            });
        }
        ids.push(self.specials.1);
        Ok(SyntheticPair {
            concept_id,
            raw_frames: Tensor::new(vec![c.frames_per_video, c.raw_frame_dim], frames)?,
            text: TokenizedText { text_id: pair_id, ids },
        })
    }

    /// Pairs with ids `0..batch_size`. Disjoint batches draw concepts
    /// without replacement.
    pub fn generate_batch(&self, batch_size: usize, seed: u64, disjoint_concepts: bool) -> Result<Vec<SyntheticPair>> {
        let n = self.cfg.n_concepts;
        if disjoint_concepts && batch_size > n {
            return Err(Error::Config(format!(
                "disjoint batch of {batch_size} needs at least that many concepts, have {n}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let concepts: Vec<usize> = if disjoint_concepts {
            let mut all: Vec<usize> = (0..n).collect();
            let (picked, _) = all.partial_shuffle(&mut rng, batch_size);
            picked.to_vec()
        } else {
            (0..batch_size).map(|_| rng.random_range(0..n)).collect()
        };
        concepts
            .into_iter()
            .enumerate()
            .map(|(i, c)| self.generate_pair(c, i as u64, rng.random()))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    concept_id: usize,
    text_id: u64,
    frames_per_video: usize,
    raw_frame_dim: usize,
    frames: Vec<f64>,
    ids: Vec<usize>,
}

/// One JSON object per line.
pub fn save_jsonl(pairs: &[SyntheticPair], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for p in pairs {
        let rec = PairRecord {
            concept_id: p.concept_id,
            text_id: p.text.text_id,
            frames_per_video: p.raw_frames.rows(),
            raw_frame_dim: p.raw_frames.cols(),
            frames: p.raw_frames.data().to_vec(),
            ids: p.text.ids.clone(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::json(path, e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: &Path) -> Result<Vec<SyntheticPair>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PairRecord = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        out.push(SyntheticPair {
            concept_id: r.concept_id,
            raw_frames: Tensor::new(vec![r.frames_per_video, r.raw_frame_dim], r.frames)?,
            text: TokenizedText {
                text_id: r.text_id,
                ids: r.ids,
            },
        });
    }
    Ok(out)
}

/// Every data seed handed out, by stream, for auditing split separation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedLedger {
    pub seeds: BTreeMap<Stream, BTreeSet<u64>>,
}

impl SeedLedger {
    pub fn record(&mut self, stream: Stream, seed: u64) -> u64 {
        self.seeds.entry(stream).or_default().insert(seed);
        seed
    }

    pub fn count(&self, stream: Stream) -> usize {
        self.seeds.get(&stream).map_or(0, |s| s.len())
    }

    /// Seeds present in both streams.
    pub fn shared(&self, a: Stream, b: Stream) -> Vec<u64> {
        match (self.seeds.get(&a), self.seeds.get(&b)) {
            (Some(x), Some(y)) => x.intersection(y).copied().collect(),
            _ => Vec::new(),
        }
    }
}
