//! On-the-fly waveform augmentation: additive noise at a target SNR and
//! reverberation by RIR convolution. Randomness (trim offsets) comes from a
//! caller-supplied generator so epochs are reproducible under seeding.

use rand::Rng;

use super::{AudioError, Waveform};

/// Fits a waveform to exactly `n_samples`: random contiguous slice when
/// longer, zero padding at the end when shorter.
pub fn trim_or_pad<R: Rng>(w: &Waveform, n_samples: usize, rng: &mut R) -> Waveform {
    let mut samples = if w.samples.len() > n_samples {
        let start = rng.gen_range(0..=w.samples.len() - n_samples);
        w.samples[start..start + n_samples].to_vec()
    } else {
        w.samples.clone()
    };
    samples.resize(n_samples, 0.0);
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

/// Adds `noise` (fitted to the target's length) scaled so the mix has the
/// requested signal-to-noise ratio, then peak-clips to [−1, 1].
pub fn mix_additive<R: Rng>(
    target: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng: &mut R,
) -> Result<Waveform, AudioError> {
    let fitted = trim_or_pad(noise, target.samples.len(), rng);
    let target_rms = target.rms();
    let noise_rms = fitted.rms();
    if target_rms == 0.0 {
        return Err(AudioError::DegenerateInput(
            "silent target: SNR scaling undefined".into(),
        ));
    }
    if noise_rms == 0.0 {
        return Err(AudioError::DegenerateInput(
            "silent noise: SNR scaling undefined".into(),
        ));
    }
    let gain = if snr_db == f64::INFINITY {
        0.0
    } else {
        target_rms / (noise_rms * 10f64.powf(snr_db / 20.0))
    };
    let samples = target
        .samples
        .iter()
        .zip(&fitted.samples)
        .map(|(t, n)| (t + gain * n).clamp(-1.0, 1.0))
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: target.sample_rate,
    })
}

/// Convolves the target with a room impulse response, truncated to the
/// target length and rescaled to the target's original peak.
pub fn convolve_reverb(target: &Waveform, rir: &Waveform) -> Result<Waveform, AudioError> {
    if rir.samples.is_empty() {
        return Err(AudioError::DegenerateInput("empty impulse response".into()));
    }
    let n = target.samples.len();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let m_max = i.min(rir.samples.len() - 1);
        let mut acc = 0.0;
        for m in 0..=m_max {
            acc += rir.samples[m] * target.samples[i - m];
        }
        *o = acc;
    }
    let target_peak = target.peak();
    let out_peak = out.iter().fold(0.0f64, |p, v| p.max(v.abs()));
    if out_peak > 0.0 && target_peak > 0.0 {
        let scale = target_peak / out_peak;
        for v in &mut out {
            *v *= scale;
        }
    }
    Ok(Waveform {
        samples: out,
        sample_rate: target.sample_rate,
    })
}
