//! Audio ingestion, differentiable log-Mel features, and augmentation.

mod augment;
mod features;
mod wav;

pub use augment::{convolve_reverb, mix_additive, trim_or_pad};
pub use features::{log_mel, log_mel_tensor, mel_filterbank, stft_magnitude, FeatureConfig, FeaturePlan};
pub use wav::{read_wav, write_wav_f32, write_wav_pcm16};

/// Errors surfaced by audio I/O, feature extraction, and augmentation.
#[derive(Debug, thiserror::Error)]
pub enum AudioError {
    #[error("format error: {0}")]
    Format(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// A mono audio signal with samples in [−1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Waveform, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::Format("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(AudioError::Format("non-finite sample".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Root-mean-square amplitude.
    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }
}
