//! Differentiable log-Mel feature extraction.
//!
//! The STFT is framing + Hamming window + multiplication by fixed real and
//! imaginary DFT matrices, so the whole chain sits on the autodiff tape and
//! perturbation gradients can flow back to the waveform. Frame count is
//! floor((L − win)/hop) + 1 with no center padding. When the millisecond
//! window exceeds n_fft samples (25 ms at 22050 Hz is 551 > 512) the window
//! is truncated to n_fft; shorter windows are implicitly zero-padded by
//! using only the first `win` DFT-matrix rows.

use super::{AudioError, Waveform};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub sample_rate: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            n_mels: 40,
            win_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            sample_rate: 22050,
        }
    }
}

impl FeatureConfig {
    pub fn win_samples(&self) -> usize {
        (self.win_ms * self.sample_rate as f64 / 1000.0).floor() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).floor() as usize
    }

    /// Frame length actually used: the millisecond window capped at n_fft.
    pub fn effective_win(&self) -> usize {
        self.win_samples().min(self.n_fft)
    }

    /// One-sided spectrum size.
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn validate(&self) -> Result<(), AudioError> {
        if self.sample_rate == 0 {
            return Err(AudioError::Format("sample_rate must be positive".into()));
        }
        if self.n_fft < 2 || self.n_fft % 2 != 0 {
            return Err(AudioError::Format(format!(
                "n_fft must be even and >= 2, got {}",
                self.n_fft
            )));
        }
        if self.effective_win() < 2 {
            return Err(AudioError::Format(format!(
                "window of {} samples is too short",
                self.effective_win()
            )));
        }
        if self.hop_samples() == 0 {
            return Err(AudioError::Format("hop must be >= 1 sample".into()));
        }
        if self.n_mels == 0 || self.n_mels > self.n_bins() {
            return Err(AudioError::Format(format!(
                "n_mels {} outside 1..={}",
                self.n_mels,
                self.n_bins()
            )));
        }
        Ok(())
    }

    pub fn n_frames(&self, n_samples: usize) -> Option<usize> {
        let win = self.effective_win();
        if n_samples < win {
            return None;
        }
        Some((n_samples - win) / self.hop_samples() + 1)
    }
}

fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// HTK-scale mel value of a frequency in Hz.
fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK mel filterbank spanning 0..sample_rate/2, as [F, n_mels].
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Tensor {
    let n_bins = n_fft / 2 + 1;
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut data = vec![0.0; n_bins * n_mels];
    for k in 0..n_bins {
        let f = k as f64 * sample_rate as f64 / n_fft as f64;
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            };
            data[k * n_mels + m] = w;
        }
    }
    Tensor::from_vec(&[n_bins, n_mels], data).expect("filterbank shape is consistent")
}

/// Precomputed constants (window, DFT matrices, filterbank) for one config.
pub struct FeaturePlan {
    cfg: FeatureConfig,
    window: Tensor,
    dft_re: Tensor,
    dft_im: Tensor,
    mel: Tensor,
}

impl FeaturePlan {
    pub fn new(cfg: &FeatureConfig) -> Result<FeaturePlan, AudioError> {
        cfg.validate()?;
        let win = cfg.effective_win();
        let n_bins = cfg.n_bins();
        let mut re = vec![0.0; win * n_bins];
        let mut im = vec![0.0; win * n_bins];
        for n in 0..win {
            for k in 0..n_bins {
                let angle = 2.0 * std::f64::consts::PI * (k * n) as f64 / cfg.n_fft as f64;
                re[n * n_bins + k] = angle.cos();
                im[n * n_bins + k] = -angle.sin();
            }
        }
        Ok(FeaturePlan {
            cfg: cfg.clone(),
            window: Tensor::from_vec(&[win], hamming(win)).expect("window length"),
            dft_re: Tensor::from_vec(&[win, n_bins], re).expect("dft shape"),
            dft_im: Tensor::from_vec(&[win, n_bins], im).expect("dft shape"),
            mel: mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate),
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }
}

/// Slices a waveform tensor [L] into frames [T, win] (differentiable gather).
fn frame_signal(wave: &Tensor, win: usize, hop: usize) -> Result<Tensor, AudioError> {
    let shape = wave.shape().to_vec();
    if shape.len() != 1 {
        return Err(AudioError::Format(format!(
            "frame_signal expects a rank-1 waveform, got {shape:?}"
        )));
    }
    let l = shape[0];
    if l < win {
        return Err(AudioError::DegenerateInput(format!(
            "clip of {l} samples shorter than one window of {win}"
        )));
    }
    let t = (l - win) / hop + 1;
    let mut out = Vec::with_capacity(t * win);
    wave.with_data(|x| {
        for f in 0..t {
            out.extend_from_slice(&x[f * hop..f * hop + win]);
        }
    });
    Ok(Tensor::from_op(
        vec![t, win],
        out,
        vec![wave.clone()],
        Box::new(move |g, parents| {
            if parents[0].tracks_grad() {
                let mut gx = vec![0.0; l];
                for f in 0..t {
                    for i in 0..win {
                        gx[f * hop + i] += g[f * win + i];
                    }
                }
                parents[0].accumulate_grad(&gx);
            }
        }),
    ))
}

/// Power spectrogram [T, F] of a waveform tensor, on the tape.
fn stft_power_tensor(plan: &FeaturePlan, wave: &Tensor) -> Result<Tensor, AudioError> {
    let cfg = &plan.cfg;
    let frames = frame_signal(wave, cfg.effective_win(), cfg.hop_samples())?;
    let windowed = frames.mul_row_broadcast(&plan.window)?;
    let re = windowed.matmul(&plan.dft_re)?;
    let im = windowed.matmul(&plan.dft_im)?;
    Ok(re.mul(&re)?.add(&im.mul(&im)?)?)
}

/// Magnitude spectrogram [F, T] of a waveform.
pub fn stft_magnitude(w: &Waveform, cfg: &FeatureConfig) -> Result<Tensor, AudioError> {
    let plan = FeaturePlan::new(cfg)?;
    let wave = Tensor::from_vec(&[w.samples.len()], w.samples.clone())?;
    let power = stft_power_tensor(&plan, &wave)?;
    Ok(power.sqrt().transpose2d()?)
}

/// Instance-normalized log-Mel features [n_mels, T]; differentiable w.r.t.
/// the waveform tensor (the BIM gradient path).
pub fn log_mel_tensor(plan: &FeaturePlan, wave: &Tensor) -> Result<Tensor, AudioError> {
    let power = stft_power_tensor(plan, wave)?;
    let mel_energy = power.matmul(&plan.mel)?;
    let log_mel = mel_energy.ln_offset(1e-10).transpose2d()?;
    Ok(log_mel.instance_norm(1e-5)?)
}

/// Convenience wrapper building a fresh plan per call.
pub fn log_mel(w: &Waveform, cfg: &FeatureConfig) -> Result<Tensor, AudioError> {
    let plan = FeaturePlan::new(cfg)?;
    let wave = Tensor::from_vec(&[w.samples.len()], w.samples.clone())?;
    log_mel_tensor(&plan, &wave)
}
