//! The three-stage training pipeline: GE2E pre-training, adversarial
//! fine-tuning, and knowledge distillation, plus the optimizer, batch
//! sampler, and scoring glue they share.

pub mod adam;
pub mod sampler;
pub mod stages;

pub use adam::{lr_at, Adam, OptimConfig};
pub use sampler::sample_ge2e_batch;
pub use stages::{
    distill_student, finetune_adversarial, pretrain_ge2e, score_clips, score_from_logits,
    score_utterance, AegMode, FeaturePipeline, FinetuneOutcome, ScoreMode, StageResult, TrainLog,
};

use crate::attack::AttackError;
use crate::audio::AudioError;
use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::model::checkpoint::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter {name} at step {step}")]
    NonFiniteGradient { name: String, step: u64 },
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
