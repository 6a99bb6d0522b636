//! Text-video localization pre-training at desk scale.
//!
//! Frame features from several videos are merged into one long sequence
//! and the fusion encoder learns to predict where the paired text's video
//! starts and ends; sentences are merged the same way for the dual task.
//! Alongside sit the contrastive and masked-language objectives, a small
//! reverse-mode autodiff engine, synthetic data with known alignments,
//! and the evaluation metrics used to check the mechanism.

pub mod config;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod merging;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod seed;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
