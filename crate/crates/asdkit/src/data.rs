//! Protocol files, dataset access, and the synthetic desk-scale corpus.
//!
//! Protocol lines follow the 5-column logical-access convention
//! `speaker_id utt_id - attack_id key`, with attack "-" exactly for
//! bona fide entries. The adversarial-speaker class never appears in
//! protocol files; it exists only as the in-memory 8th training label.
//!
//! The synthetic corpus builds 7 separable condition families per speaker:
//! bona fide is a harmonic stack with a speaker-specific fundamental and a
//! slow syllable-like envelope; each attack family applies a distinct
//! deterministic distortion (tremolo, vibrato, gated band noise, hard
//! clipping, ring modulation, echo comb) with its own modulation rate, so
//! condition classes stay separable in log-Mel space by construction.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{read_wav, write_wav_pcm16, AudioError, Waveform};

pub const N_CONDITIONS: usize = 7;
/// In-memory label index of the injected adversarial-speaker class.
pub const ADV_CLASS: usize = 7;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// One of the 7 spoofing-condition classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    Bonafide,
    Attack(u8),
}

impl Condition {
    pub fn label(self) -> usize {
        match self {
            Condition::Bonafide => 0,
            Condition::Attack(a) => a as usize,
        }
    }

    pub fn from_label(label: usize) -> Option<Condition> {
        match label {
            0 => Some(Condition::Bonafide),
            1..=6 => Some(Condition::Attack(label as u8)),
            _ => None,
        }
    }

    pub fn attack_str(self) -> String {
        match self {
            Condition::Bonafide => "-".into(),
            Condition::Attack(a) => format!("A{a:02}"),
        }
    }

    pub fn from_attack_str(s: &str) -> Option<Condition> {
        if s == "-" {
            return Some(Condition::Bonafide);
        }
        let digits = s.strip_prefix('A')?;
        let a: u8 = digits.parse().ok()?;
        if (1..=6).contains(&a) && digits.len() == 2 {
            Some(Condition::Attack(a))
        } else {
            None
        }
    }

    pub fn is_bonafide(self) -> bool {
        matches!(self, Condition::Bonafide)
    }

    pub fn key_str(self) -> &'static str {
        if self.is_bonafide() {
            "bonafide"
        } else {
            "spoof"
        }
    }

    pub fn all() -> [Condition; N_CONDITIONS] {
        [
            Condition::Bonafide,
            Condition::Attack(1),
            Condition::Attack(2),
            Condition::Attack(3),
            Condition::Attack(4),
            Condition::Attack(5),
            Condition::Attack(6),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolEntry {
    pub speaker_id: String,
    pub utt_id: String,
    pub condition: Condition,
}

pub fn parse_protocol_text(text: &str) -> Result<Vec<ProtocolEntry>, DataError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(DataError::Parse {
                line: lineno,
                msg: format!("expected 5 fields (speaker utt - attack key), got {}", f.len()),
            });
        }
        let condition = Condition::from_attack_str(f[3]).ok_or_else(|| DataError::Parse {
            line: lineno,
            msg: format!("unknown attack id {:?}", f[3]),
        })?;
        match (condition.is_bonafide(), f[4]) {
            (true, "bonafide") | (false, "spoof") => {}
            (_, key @ ("bonafide" | "spoof")) => {
                return Err(DataError::Parse {
                    line: lineno,
                    msg: format!("attack {:?} inconsistent with key {key:?}", f[3]),
                });
            }
            (_, key) => {
                return Err(DataError::Parse {
                    line: lineno,
                    msg: format!("unknown key {key:?} (want bonafide|spoof)"),
                });
            }
        }
        if !seen.insert(f[1].to_string()) {
            return Err(DataError::Parse {
                line: lineno,
                msg: format!("duplicate utterance id {:?}", f[1]),
            });
        }
        out.push(ProtocolEntry {
            speaker_id: f[0].to_string(),
            utt_id: f[1].to_string(),
            condition,
        });
    }
    Ok(out)
}

pub fn parse_protocol(path: impl AsRef<Path>) -> Result<Vec<ProtocolEntry>, DataError> {
    parse_protocol_text(&fs::read_to_string(path.as_ref())?)
}

pub fn protocol_to_text(entries: &[ProtocolEntry]) -> String {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!(
            "{} {} - {} {}\n",
            e.speaker_id,
            e.utt_id,
            e.condition.attack_str(),
            e.condition.key_str()
        ));
    }
    text
}

pub fn write_protocol(path: impl AsRef<Path>, entries: &[ProtocolEntry]) -> Result<(), DataError> {
    fs::write(path.as_ref(), protocol_to_text(entries))?;
    Ok(())
}

/// A protocol plus the directory holding `<utt_id>.wav` files.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub wav_dir: PathBuf,
    pub entries: Vec<ProtocolEntry>,
}

impl Dataset {
    pub fn open(
        wav_dir: impl Into<PathBuf>,
        protocol: impl AsRef<Path>,
    ) -> Result<Dataset, DataError> {
        Ok(Dataset {
            wav_dir: wav_dir.into(),
            entries: parse_protocol(protocol)?,
        })
    }

    pub fn wav_path(&self, utt_id: &str) -> PathBuf {
        self.wav_dir.join(format!("{utt_id}.wav"))
    }

    pub fn load_waveform(&self, utt_id: &str) -> Result<Waveform, DataError> {
        Ok(read_wav(self.wav_path(utt_id))?)
    }

    /// Entries of one condition, in protocol order.
    pub fn by_condition(&self, c: Condition) -> Vec<&ProtocolEntry> {
        self.entries.iter().filter(|e| e.condition == c).collect()
    }

    /// Bona fide entries grouped by speaker (sorted by speaker id).
    pub fn bonafide_by_speaker(&self) -> BTreeMap<&str, Vec<&ProtocolEntry>> {
        let mut map: BTreeMap<&str, Vec<&ProtocolEntry>> = BTreeMap::new();
        for e in &self.entries {
            if e.condition.is_bonafide() {
                map.entry(e.speaker_id.as_str()).or_default().push(e);
            }
        }
        map
    }
}

/// Deterministic per-(speaker, condition, clip) split: the first 60% of
/// clip ordinals train, the next 20% develop, the rest evaluate.
pub fn split_entries(
    entries: &[ProtocolEntry],
) -> (Vec<ProtocolEntry>, Vec<ProtocolEntry>, Vec<ProtocolEntry>) {
    let mut groups: BTreeMap<(String, Condition), Vec<&ProtocolEntry>> = BTreeMap::new();
    for e in entries {
        groups
            .entry((e.speaker_id.clone(), e.condition))
            .or_default()
            .push(e);
    }
    let (mut train, mut dev, mut eval) = (Vec::new(), Vec::new(), Vec::new());
    for (_, mut group) in groups {
        group.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        let n = group.len();
        let n_dev = (n as f64 * 0.2).floor() as usize;
        let n_eval = n_dev;
        let n_train = n - n_dev - n_eval;
        for (i, e) in group.into_iter().enumerate() {
            if i < n_train {
                train.push(e.clone());
            } else if i < n_train + n_dev {
                dev.push(e.clone());
            } else {
                eval.push(e.clone());
            }
        }
    }
    (train, dev, eval)
}

// ── Synthetic corpus ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub clips_per_condition: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_speakers: 3,
            clips_per_condition: 10,
            duration_s: 1.0,
            sample_rate: 8000,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_speakers < 2 {
            return Err(DataError::Configuration(
                "need >= 2 speakers (same-speaker adversarial pairs)".into(),
            ));
        }
        if self.clips_per_condition == 0 || self.duration_s <= 0.0 || self.sample_rate == 0 {
            return Err(DataError::Configuration(
                "clips_per_condition, duration_s, sample_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn clip_rng(seed: u64, speaker: usize, condition: usize, clip: usize) -> ChaCha8Rng {
    let mixed = splitmix64(
        splitmix64(splitmix64(seed ^ 0xA5A5) ^ speaker as u64) ^ (condition as u64) << 8,
    ) ^ splitmix64(clip as u64 ^ 0x5117);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// 1 − depth/2 + (depth/2)·sin(2π·rate·t + phase): an amplitude envelope in
/// [1 − depth, 1].
fn envelope(n: usize, sr: f64, rate: f64, depth: f64, phase: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            1.0 - depth / 2.0
                + depth / 2.0 * (2.0 * std::f64::consts::PI * rate * t + phase).sin()
        })
        .collect()
}

/// Harmonic stack at the given fundamental with optional phase modulation.
fn harmonic_stack(
    n: usize,
    sr: f64,
    f0: f64,
    phases: &[f64],
    fm_rate: f64,
    fm_beta: f64,
) -> Vec<f64> {
    let two_pi = 2.0 * std::f64::consts::PI;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let fm = if fm_beta > 0.0 {
                fm_beta * (two_pi * fm_rate * t).sin()
            } else {
                0.0
            };
            phases
                .iter()
                .enumerate()
                .map(|(h, ph)| {
                    let k = (h + 1) as f64;
                    (two_pi * k * f0 * t + ph + k * fm).sin() / k
                })
                .sum()
        })
        .collect()
}

fn peak_normalize(samples: &mut [f64], peak: f64) {
    let current = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if current > 0.0 {
        let s = peak / current;
        for v in samples.iter_mut() {
            *v *= s;
        }
    }
}

/// Renders one clip of a given speaker/condition deterministically.
fn synth_clip(spec: &SynthSpec, speaker: usize, condition: Condition, clip: usize) -> Waveform {
    let sr = spec.sample_rate as f64;
    let n = (spec.duration_s * sr).round() as usize;
    let mut rng = clip_rng(spec.seed, speaker, condition.label(), clip);
    let f0 = (110.0 + 47.0 * speaker as f64) * (1.0 + rng.gen_range(-0.02..0.02));
    let phases: Vec<f64> = (0..5)
        .map(|_| rng.gen_range(0.0..2.0 * std::f64::consts::PI))
        .collect();
    // The envelope phase is fixed per condition, not per clip: clips of a
    // family share the temporal modulation pattern that identifies it.
    let env_phase = 0.7 * condition.label() as f64;

    // Each family has its own modulation rate, so classes keep distinct
    // temporal signatures even after per-band instance normalization.
    let mut samples = match condition.label() {
        0 => {
            let base = harmonic_stack(n, sr, f0, &phases, 0.0, 0.0);
            let e = envelope(n, sr, 3.0, 0.55, env_phase);
            base.iter().zip(&e).map(|(x, g)| x * g).collect::<Vec<f64>>()
        }
        1 => {
            // Deep amplitude tremolo.
            let base = harmonic_stack(n, sr, f0, &phases, 0.0, 0.0);
            let e = envelope(n, sr, 6.5, 1.0, env_phase);
            base.iter().zip(&e).map(|(x, g)| x * g).collect()
        }
        2 => {
            // Wide vibrato sweeping adjacent mel bands.
            harmonic_stack(n, sr, f0, &phases, 9.0, 4.0)
        }
        3 => {
            // Band-limited noise bursts gated at 12 Hz over the carrier.
            let base = harmonic_stack(n, sr, f0, &phases, 0.0, 0.0);
            let e = envelope(n, sr, 3.0, 0.4, env_phase);
            let mut noise = Vec::with_capacity(n);
            // Two-pole resonator near 1.7 kHz shapes white noise.
            let (r, wc) = (0.96, 2.0 * std::f64::consts::PI * 1700.0 / sr);
            let (a1, a2) = (-2.0 * r * wc.cos(), r * r);
            let (mut y1, mut y2) = (0.0, 0.0);
            for _ in 0..n {
                let x: f64 = rng.gen_range(-1.0..1.0);
                let y = x - a1 * y1 - a2 * y2;
                noise.push(y);
                y2 = y1;
                y1 = y;
            }
            peak_normalize(&mut noise, 1.2);
            let two_pi = 2.0 * std::f64::consts::PI;
            base.iter()
                .zip(&e)
                .zip(&noise)
                .enumerate()
                .map(|(i, ((x, g), nz))| {
                    let t = i as f64 / sr;
                    let gate = (two_pi * 12.0 * t + env_phase).sin().max(0.0);
                    x * g + nz * gate
                })
                .collect()
        }
        4 => {
            // Hard clipping plus a 15 Hz envelope.
            let base = harmonic_stack(n, sr, f0, &phases, 0.0, 0.0);
            let e = envelope(n, sr, 15.0, 0.6, env_phase);
            base.iter()
                .zip(&e)
                .map(|(x, g)| (2.5 * x).clamp(-0.5, 0.5) * g)
                .collect()
        }
        5 => {
            // Ring modulation by a fixed carrier with an 18.5 Hz envelope.
            let base = harmonic_stack(n, sr, f0, &phases, 0.0, 0.0);
            let e = envelope(n, sr, 18.5, 0.7, env_phase);
            let two_pi = 2.0 * std::f64::consts::PI;
            base.iter()
                .zip(&e)
                .enumerate()
                .map(|(i, (x, g))| {
                    let t = i as f64 / sr;
                    x * (two_pi * 430.0 * t).sin() * g
                })
                .collect()
        }
        _ => {
            // Echo comb (three 6 ms taps) with a fast 24 Hz envelope.
            let base = harmonic_stack(n, sr, f0, &phases, 0.0, 0.0);
            let e = envelope(n, sr, 24.0, 0.8, env_phase);
            let d = (0.006 * sr).round() as usize;
            (0..n)
                .map(|i| {
                    let mut v = base[i];
                    if i >= d {
                        v += 0.9 * base[i - d];
                    }
                    if i >= 2 * d {
                        v += 0.7 * base[i - 2 * d];
                    }
                    v * e[i]
                })
                .collect()
        }
    };
    peak_normalize(&mut samples, 0.6);
    Waveform {
        samples,
        sample_rate: spec.sample_rate,
    }
}

/// Builds the full in-memory corpus: 7 conditions × speakers × clips.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<(ProtocolEntry, Waveform)>, DataError> {
    spec.validate()?;
    let mut out = Vec::new();
    for speaker in 0..spec.n_speakers {
        let speaker_id = format!("SPK{speaker:02}");
        for condition in Condition::all() {
            for clip in 0..spec.clips_per_condition {
                let utt_id = format!(
                    "{speaker_id}_{}_{clip:03}",
                    if condition.is_bonafide() {
                        "bona".to_string()
                    } else {
                        condition.attack_str()
                    }
                );
                let w = synth_clip(spec, speaker, condition, clip);
                out.push((
                    ProtocolEntry {
                        speaker_id: speaker_id.clone(),
                        utt_id,
                        condition,
                    },
                    w,
                ));
            }
        }
    }
    Ok(out)
}

/// Writes the corpus under `dir`: wav/<utt>.wav plus protocol.txt and the
/// per-split protocol_{train,dev,eval}.txt files.
pub fn write_corpus(dir: impl AsRef<Path>, spec: &SynthSpec) -> Result<usize, DataError> {
    let dir = dir.as_ref();
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir)?;
    let corpus = synth_dataset(spec)?;
    let entries: Vec<ProtocolEntry> = corpus.iter().map(|(e, _)| e.clone()).collect();
    for (e, w) in &corpus {
        write_wav_pcm16(wav_dir.join(format!("{}.wav", e.utt_id)), w)?;
    }
    write_protocol(dir.join("protocol.txt"), &entries)?;
    let (train, dev, eval) = split_entries(&entries);
    write_protocol(dir.join("protocol_train.txt"), &train)?;
    write_protocol(dir.join("protocol_dev.txt"), &dev)?;
    write_protocol(dir.join("protocol_eval.txt"), &eval)?;
    Ok(entries.len())
}
