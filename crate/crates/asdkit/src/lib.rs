//! Adversarial speaker distillation toolkit for anti-spoofing countermeasures.
//!
//! The pipeline mirrors the three training stages: GE2E pre-training of a
//! ResNetSE embedding model over spoofing conditions, adversarial
//! fine-tuning with BIM-generated adversarial-speaker samples injected as
//! an 8th class, and knowledge distillation into a channel-halved student,
//! evaluated with EER and normalized minimum t-DCF.

pub mod attack;
pub mod audio;
pub mod cli;
pub mod config;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
