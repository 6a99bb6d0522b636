//! Whole-run configuration: model, training and data sections plus the
//! output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merging::{TextMergeStrategy, VideoMergeStrategy};
use crate::model::ModelConfig;
use crate::synthdata::GeneratorConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: GeneratorConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn with_output_dir(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: GeneratorConfig::default(),
            output_dir: output_dir.into(),
        }
    }

    /// Section-level checks plus agreement between sections.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate_against(&self.model)?;
        let m = &self.model;
        let t = &self.train;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.mask_token_id == m.pad_token_id {
            return bad("model.mask_token_id must differ from model.pad_token_id".into());
        }
        if t.batch_size > self.data.n_concepts {
            return bad(format!(
                "train.batch_size ({}) exceeds data.n_concepts ({}); batches use distinct concepts",
                t.batch_size, self.data.n_concepts
            ));
        }
        let text = self.data.tokens_per_sentence + 2;
        let frames = t.video_merge.merged_len(t.batch_size, m.frames_per_video);
        if t.video_merge.strategy != VideoMergeStrategy::Shuffling && t.video_merge.k_p_min > m.frames_per_video {
            return bad(format!(
                "train.video_merge.K_p_min ({}) exceeds model.frames_per_video ({})",
                t.video_merge.k_p_min, m.frames_per_video
            ));
        }
        if frames + text > m.max_merged_len {
            return bad(format!(
                "merged video ({frames} slots) plus a sentence ({text}) exceeds model.max_merged_len ({})",
                m.max_merged_len
            ));
        }
        let words = match t.text_merge {
            TextMergeStrategy::MergeCls => t.batch_size,
            TextMergeStrategy::MergeWords => t.batch_size * text,
        };
        if m.frames_per_video + words > m.max_merged_len {
            return bad(format!(
                "merged text ({words} slots) plus one video ({}) exceeds model.max_merged_len ({})",
                m.frames_per_video, m.max_merged_len
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}
