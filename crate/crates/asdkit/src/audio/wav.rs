//! Hand-rolled WAV container support: mono PCM16 and IEEE float32.
//!
//! Readers normalize to [−1, 1] (PCM16 divides by 32768); the PCM16 writer
//! scales by 32767 and rounds, so a full-scale write reads back as
//! ±32767/32768. Chunk order beyond fmt-before-data is not assumed.

use std::fs;
use std::path::Path;

use super::{AudioError, Waveform};

fn take<'a>(buf: &'a [u8], at: usize, n: usize, what: &str) -> Result<&'a [u8], AudioError> {
    buf.get(at..at + n)
        .ok_or_else(|| AudioError::Format(format!("truncated file while reading {what}")))
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

struct FmtChunk {
    audio_format: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

/// Reads a mono PCM16 or float32 WAV file, normalizing samples to [−1, 1].
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let buf = fs::read(path.as_ref())?;
    if take(&buf, 0, 4, "RIFF magic")? != b"RIFF" {
        return Err(AudioError::Format(format!(
            "expected RIFF magic, found {:?}",
            &buf[..buf.len().min(4)]
        )));
    }
    if take(&buf, 8, 4, "WAVE magic")? != b"WAVE" {
        return Err(AudioError::Format("missing WAVE form type".into()));
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut at = 12usize;
    while at + 8 <= buf.len() {
        let id = take(&buf, at, 4, "chunk id")?;
        let size = le_u32(take(&buf, at + 4, 4, "chunk size")?) as usize;
        let body = take(&buf, at + 8, size, "chunk body")?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::Format(format!("fmt chunk too small: {size}")));
                }
                fmt = Some(FmtChunk {
                    audio_format: le_u16(&body[0..2]),
                    channels: le_u16(&body[2..4]),
                    sample_rate: le_u32(&body[4..8]),
                    bits_per_sample: le_u16(&body[14..16]),
                });
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned; odd sizes carry a pad byte.
        at += 8 + size + (size & 1);
    }

    let fmt = fmt.ok_or_else(|| AudioError::Format("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::Format("missing data chunk".into()))?;
    if fmt.channels != 1 {
        return Err(AudioError::Format(format!(
            "channels: {} (mono required)",
            fmt.channels
        )));
    }
    if fmt.sample_rate == 0 {
        return Err(AudioError::Format("sample rate: 0".into()));
    }
    let samples = match (fmt.audio_format, fmt.bits_per_sample) {
        (1, 16) => {
            if data.len() % 2 != 0 {
                return Err(AudioError::Format(format!(
                    "data chunk length {} not a multiple of 2",
                    data.len()
                )));
            }
            data.chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                .collect()
        }
        (3, 32) => {
            if data.len() % 4 != 0 {
                return Err(AudioError::Format(format!(
                    "data chunk length {} not a multiple of 4",
                    data.len()
                )));
            }
            data.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        }
        (f, b) => {
            return Err(AudioError::Format(format!(
                "audio format {f} with {b} bits unsupported (PCM 16-bit or float 32-bit required)"
            )));
        }
    };
    Waveform::new(samples, fmt.sample_rate)
}

fn header(audio_format: u16, sample_rate: u32, bits: u16, data_len: usize) -> Vec<u8> {
    let block_align = (bits / 8) as u32;
    let byte_rate = sample_rate * block_align;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&audio_format.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&(block_align as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    out
}

/// Writes 16-bit PCM; samples scaled by 32767 and rounded, clamped to range.
pub fn write_wav_pcm16(path: impl AsRef<Path>, w: &Waveform) -> Result<(), AudioError> {
    let mut out = header(1, w.sample_rate, 16, w.samples.len() * 2);
    for &s in &w.samples {
        let v = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path.as_ref(), out)?;
    Ok(())
}

/// Writes IEEE float32 (lossless for perturbation audit files at this scale).
pub fn write_wav_f32(path: impl AsRef<Path>, w: &Waveform) -> Result<(), AudioError> {
    let mut out = header(3, w.sample_rate, 32, w.samples.len() * 4);
    for &s in &w.samples {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    fs::write(path.as_ref(), out)?;
    Ok(())
}
