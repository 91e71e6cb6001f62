//! The ResNetSE backbone: a small residual SE network over log-Mel
//! spectrograms with self-attentive pooling, an embedding projection, and a
//! classification head over spoofing-condition classes.
//!
//! Input layout is [B, 1, n_mels, T] with mel bins as height. Stage strides
//! are (1, 2, 2, 2) after a 3x3 stem convolution; frequency is averaged out
//! after the last stage, so pooling runs over time only. The classifier has
//! 7 classes, or 8 when the adversarial-speaker class is active.

pub mod checkpoint;
pub mod layers;
pub mod profile;

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tensor, TensorError};
use layers::{BatchNorm2d, Conv2d, Linear, ResBlock, SelfAttentivePool};

pub const STAGE_STRIDES: [usize; 4] = [1, 2, 2, 2];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub se_reduction: usize,
    pub embedding_dim: usize,
    pub n_classes: usize,
    pub input_mels: usize,
}

impl ModelConfig {
    /// Full-width teacher layout.
    pub fn teacher() -> ModelConfig {
        ModelConfig {
            channels: [32, 64, 128, 256],
            blocks_per_stage: [2, 2, 2, 2],
            se_reduction: 8,
            embedding_dim: 256,
            n_classes: 7,
            input_mels: 40,
        }
    }

    /// The student copies every field except the halved channel widths.
    pub fn student_of(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels.map(|c| (c / 2).max(1)),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.channels.iter().any(|&c| c == 0)
            || self.blocks_per_stage.iter().any(|&b| b == 0)
            || self.se_reduction == 0
            || self.embedding_dim == 0
            || self.input_mels == 0
        {
            return Err(TensorError::Domain(
                "model config fields must all be positive".into(),
            ));
        }
        if !(self.n_classes == 7 || self.n_classes == 8) {
            return Err(TensorError::Domain(format!(
                "n_classes {} unsupported; 7 normally, 8 with the adversarial class",
                self.n_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct ResNetSE {
    pub config: ModelConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<ResBlock>>,
    pool: SelfAttentivePool,
    embed: Linear,
    classifier: Linear,
    training: Cell<bool>,
}

impl ResNetSE {
    pub fn new(config: ModelConfig, seed: u64) -> Result<ResNetSE, TensorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_conv = Conv2d::new(1, config.channels[0], 3, 1, 1, &mut rng);
        let stem_bn = BatchNorm2d::new(config.channels[0]);
        let mut stages = Vec::with_capacity(4);
        let mut in_c = config.channels[0];
        for (si, (&out_c, &n_blocks)) in config
            .channels
            .iter()
            .zip(&config.blocks_per_stage)
            .enumerate()
        {
            let mut blocks = Vec::with_capacity(n_blocks);
            for bi in 0..n_blocks {
                let stride = if bi == 0 { STAGE_STRIDES[si] } else { 1 };
                blocks.push(ResBlock::new(
                    in_c,
                    out_c,
                    stride,
                    config.se_reduction,
                    &mut rng,
                ));
                in_c = out_c;
            }
            stages.push(blocks);
        }
        let pool = SelfAttentivePool::new(config.channels[3], &mut rng);
        let embed = Linear::new(config.channels[3], config.embedding_dim, true, &mut rng);
        let classifier = Linear::new(config.embedding_dim, config.n_classes, true, &mut rng);
        Ok(ResNetSE {
            config,
            stem_conv,
            stem_bn,
            stages,
            pool,
            embed,
            classifier,
            training: Cell::new(true),
        })
    }

    pub fn set_training(&self, on: bool) {
        self.training.set(on);
    }

    pub fn is_training(&self) -> bool {
        self.training.get()
    }

    /// Smallest accepted frame count. Padding keeps every stride-2 stage
    /// well-defined down to a single frame.
    pub fn min_frames(&self) -> usize {
        1
    }

    /// features: [B, 1, n_mels, T] -> (embedding [B, D], logits [B, K]).
    pub fn forward(&self, features: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
        let s = features.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != self.config.input_mels {
            return Err(TensorError::Dimension(format!(
                "forward expects [B, 1, {}, T], got {s:?}",
                self.config.input_mels
            )));
        }
        if s[3] < self.min_frames() {
            return Err(TensorError::DegenerateInput(format!(
                "input of {} frames, minimum is {}",
                s[3],
                self.min_frames()
            )));
        }
        let training = self.training.get();
        let mut h = self
            .stem_bn
            .forward(&self.stem_conv.forward(features)?, training)?
            .relu();
        for stage in &self.stages {
            for block in stage {
                h = block.forward(&h, training)?;
            }
        }
        // Average the frequency axis; pooling attends over time alone.
        let h = h.reduce_mean(&[2])?;
        let pooled = self.pool.forward(&h)?;
        let embedding = self.embed.forward(&pooled)?;
        let logits = self.classifier.forward(&embedding)?;
        Ok((embedding, logits))
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.stem_conv.params_into("stem.conv", &mut out);
        self.stem_bn.params_into("stem.bn", &mut out);
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                block.params_into(&format!("s{si}.b{bi}"), &mut out);
            }
        }
        self.pool.params_into("pool", &mut out);
        self.embed.params_into("embed", &mut out);
        self.classifier.params_into("cls", &mut out);
        out
    }

    /// Non-trainable state: batch-norm running statistics.
    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        self.stem_bn.buffers_into("stem.bn", &mut out);
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                block.buffers_into(&format!("s{si}.b{bi}"), &mut out);
            }
        }
        out
    }

    fn batch_norms(&self) -> Vec<(String, &BatchNorm2d)> {
        let mut out: Vec<(String, &BatchNorm2d)> = vec![("stem.bn".into(), &self.stem_bn)];
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                out.push((format!("s{si}.b{bi}.bn1"), &block.bn1));
                out.push((format!("s{si}.b{bi}.bn2"), &block.bn2));
                if let Some((_, bn)) = &block.shortcut {
                    out.push((format!("s{si}.b{bi}.sc_bn"), bn));
                }
            }
        }
        out
    }

    pub fn load_buffer(&self, name: &str, data: &[f64]) -> bool {
        for (prefix, bn) in self.batch_norms() {
            if name.starts_with(&prefix) && bn.load_buffer(name, data) {
                return true;
            }
        }
        false
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }

    /// Copies every parameter and buffer whose name and size match from
    /// `source`. Mismatched tensors (a reshaped classifier, say) keep their
    /// fresh initialization. Returns the number of tensors copied.
    pub fn transplant_from(&self, source: &ResNetSE) -> usize {
        let mut copied = 0;
        let theirs: std::collections::HashMap<String, Tensor> =
            source.parameters().into_iter().collect();
        for (name, param) in self.parameters() {
            if let Some(src) = theirs.get(&name) {
                let data = src.to_vec();
                if data.len() == param.to_vec().len() {
                    param.set_data(&data);
                    copied += 1;
                }
            }
        }
        for (name, data) in source.buffers() {
            if self.load_buffer(&name, &data) {
                copied += 1;
            }
        }
        copied
    }
}
