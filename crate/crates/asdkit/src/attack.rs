//! Basic Iterative Method adversarial example generation and the
//! static/active dataset-injection policies.
//!
//! A generation run takes two bona fide clips of the same speaker: W1 fixes
//! the target embedding, then a perturbation D over W2 is stepped along
//! sign(grad of cosine similarity) through the differentiable log-Mel
//! frontend and the frozen model. D stays inside the epsilon ball and W2+D
//! inside valid amplitude after every step. A sample is accepted when the
//! final similarity exceeds the threshold (the algorithm-listing predicate;
//! `accept_below_threshold` flips it) and joins training under the injected
//! adversarial-speaker class.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::audio::{log_mel_tensor, write_wav_f32, AudioError, FeaturePlan, Waveform};
use crate::data::{DataError, ProtocolEntry, ADV_CLASS};
use crate::loss::COSINE_EPS;
use crate::model::ResNetSE;
use crate::tensor::{no_grad, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<DataError> for AttackError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(io) => AttackError::Io(io),
            other => AttackError::Configuration(other.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AegConfig {
    pub alpha: f64,
    pub iter: usize,
    pub threshold: f64,
    pub epsilon: f64,
    pub accept_below_threshold: bool,
}

impl Default for AegConfig {
    fn default() -> Self {
        let (alpha, iter) = (3.0, 5);
        AegConfig {
            alpha,
            iter,
            threshold: 0.4,
            epsilon: alpha * iter as f64,
            accept_below_threshold: false,
        }
    }
}

impl AegConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.alpha >= 0.0) {
            return Err(AttackError::Configuration(format!(
                "alpha {} must be >= 0",
                self.alpha
            )));
        }
        if self.iter < 1 {
            return Err(AttackError::Configuration("iter must be >= 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(AttackError::Configuration(format!(
                "threshold {} outside [-1, 1]",
                self.threshold
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(AttackError::Configuration(format!(
                "epsilon {} must be positive",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Stable digest of the generation settings for manifests.
    pub fn content_hash(&self) -> String {
        let text = format!(
            "alpha={:.17e} iter={} threshold={:.17e} epsilon={:.17e} accept_below_threshold={}",
            self.alpha, self.iter, self.threshold, self.epsilon, self.accept_below_threshold
        );
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        format!("{:x}", h.finalize())
    }
}

#[derive(Debug, Clone)]
pub struct AdvSample {
    pub waveform: Waveform,
    pub source_ids: (String, String),
    pub final_similarity: f64,
    pub label: usize,
}

/// One BIM update of the perturbation: step alpha along the gradient sign,
/// then clip to the epsilon ball. sign(0) is 0, so dead coordinates hold.
pub fn bim_step(d: &mut [f64], grad: &[f64], alpha: f64, epsilon: f64) {
    for (di, &gi) in d.iter_mut().zip(grad) {
        let sign = if gi > 0.0 {
            1.0
        } else if gi < 0.0 {
            -1.0
        } else {
            0.0
        };
        *di = (*di + alpha * sign).clamp(-epsilon, epsilon);
    }
}

fn embed_waveform(
    model: &ResNetSE,
    plan: &FeaturePlan,
    wave: &Tensor,
) -> Result<Tensor, AttackError> {
    let feats = log_mel_tensor(plan, wave)?;
    let s = feats.shape().to_vec();
    let batched = feats.reshape(&[1, 1, s[0], s[1]])?;
    let (emb, _) = model.forward(&batched)?;
    Ok(emb.reshape(&[model.config.embedding_dim])?)
}

/// Runs BIM for one same-speaker pair. Returns the accepted sample or None.
pub fn bim_generate(
    model: &ResNetSE,
    plan: &FeaturePlan,
    w1: &Waveform,
    w2: &Waveform,
    source_ids: (&str, &str),
    cfg: &AegConfig,
) -> Result<Option<AdvSample>, AttackError> {
    cfg.validate()?;
    if model.is_training() {
        return Err(AttackError::Contract(
            "bim_generate requires the model in eval mode".into(),
        ));
    }
    let x1 = no_grad(|| embed_waveform(model, plan, &Tensor::from_vec(&[w1.len()], w1.samples.clone())?))?;
    let n = w2.len();
    let w2_t = Tensor::from_vec(&[n], w2.samples.clone())?;
    let d = Tensor::zeros(&[n]).trainable();
    for _ in 0..cfg.iter {
        d.zero_grad();
        let adv = w2_t.add(&d)?.clamp(-1.0, 1.0);
        let x2 = embed_waveform(model, plan, &adv)?;
        let s = x2.cosine_similarity(&x1, COSINE_EPS)?;
        s.backward()?;
        let grad = d.grad().ok_or_else(|| {
            AttackError::Contract("no gradient reached the perturbation".into())
        })?;
        let mut next = d.to_vec();
        bim_step(&mut next, &grad, cfg.alpha, cfg.epsilon);
        d.set_data(&next);
    }
    let (samples, final_similarity) = no_grad(|| -> Result<(Vec<f64>, f64), AttackError> {
        let adv = w2_t.add(&d)?.clamp(-1.0, 1.0);
        let x2 = embed_waveform(model, plan, &adv)?;
        let s = x2.cosine_similarity(&x1, COSINE_EPS)?.item();
        Ok((adv.to_vec(), s))
    })?;
    let accept = if cfg.accept_below_threshold {
        final_similarity < cfg.threshold
    } else {
        final_similarity > cfg.threshold
    };
    if !accept {
        return Ok(None);
    }
    Ok(Some(AdvSample {
        waveform: Waveform {
            samples,
            sample_rate: w2.sample_rate,
        },
        source_ids: (source_ids.0.to_string(), source_ids.1.to_string()),
        final_similarity,
        label: ADV_CLASS,
    }))
}

/// All ordered same-speaker bona fide pairs, shuffled by the seed.
fn candidate_pairs(
    clips: &[(ProtocolEntry, Waveform)],
    seed: u64,
) -> Result<Vec<(usize, usize)>, AttackError> {
    let mut by_speaker: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
    for (i, (e, _)) in clips.iter().enumerate() {
        if e.condition.is_bonafide() {
            by_speaker.entry(e.speaker_id.as_str()).or_default().push(i);
        }
    }
    let mut pairs = Vec::new();
    for idxs in by_speaker.values() {
        for &a in idxs {
            for &b in idxs {
                if a != b {
                    pairs.push((a, b));
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(AttackError::Configuration(
            "no speaker has two bona fide clips to pair".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

fn generate_batch(
    model: &ResNetSE,
    plan: &FeaturePlan,
    clips: &[(ProtocolEntry, Waveform)],
    cfg: &AegConfig,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<AdvSample>, AttackError> {
    let pairs = candidate_pairs(clips, seed)?;
    let mut out = Vec::new();
    for (a, b) in pairs {
        if out.len() >= n_samples {
            break;
        }
        let (e1, w1) = &clips[a];
        let (e2, w2) = &clips[b];
        if let Some(s) = bim_generate(
            model,
            plan,
            w1,
            w2,
            (e1.utt_id.as_str(), e2.utt_id.as_str()),
            cfg,
        )? {
            out.push(s);
        }
    }
    Ok(out)
}

/// One-shot adversarial set built from a fixed pretrained model.
pub fn static_aeg_build(
    model: &ResNetSE,
    plan: &FeaturePlan,
    clips: &[(ProtocolEntry, Waveform)],
    cfg: &AegConfig,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<AdvSample>, AttackError> {
    generate_batch(model, plan, clips, cfg, n_samples, seed)
}

/// Per-epoch regeneration against the current model snapshot. Mechanics are
/// identical to the static build; the caller passes the live model and an
/// epoch-specific seed.
pub fn active_aeg_epoch(
    model: &ResNetSE,
    plan: &FeaturePlan,
    clips: &[(ProtocolEntry, Waveform)],
    cfg: &AegConfig,
    n_samples: usize,
    epoch_seed: u64,
) -> Result<Vec<AdvSample>, AttackError> {
    generate_batch(model, plan, clips, cfg, n_samples, epoch_seed)
}

/// Writes generated WAVs (32-bit float) plus a manifest naming sources,
/// similarities, and the config hash.
pub fn write_adv_sidecar(
    dir: impl AsRef<Path>,
    samples: &[AdvSample],
    cfg: &AegConfig,
) -> Result<(), AttackError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = format!("# aeg config hash {}\n", cfg.content_hash());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("adv_{i:04}.wav");
        write_wav_f32(dir.join(&name), &s.waveform)?;
        manifest.push_str(&format!(
            "{} {} {} {:.16e}\n",
            name, s.source_ids.0, s.source_ids.1, s.final_similarity
        ));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::FeatureConfig;
    use crate::data::Condition;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn tiny_feature_config() -> FeatureConfig {
        FeatureConfig {
            n_mels: 8,
            win_ms: 16.0,
            hop_ms: 8.0,
            n_fft: 32,
            sample_rate: 1000,
        }
    }

    fn tiny_model() -> ResNetSE {
        let cfg = ModelConfig {
            channels: [2, 4, 4, 8],
            blocks_per_stage: [1, 1, 1, 1],
            se_reduction: 2,
            embedding_dim: 8,
            n_classes: 7,
            input_mels: 8,
        };
        let m = ResNetSE::new(cfg, 11).unwrap();
        m.set_training(false);
        m
    }

    fn tone(freq: f64, n: usize, sr: u32, phase: f64) -> Waveform {
        let samples = (0..n)
            .map(|i| {
                0.4 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64 + phase).sin()
            })
            .collect();
        Waveform::new(samples, sr).unwrap()
    }

    fn toy_clips() -> Vec<(ProtocolEntry, Waveform)> {
        let mut out = Vec::new();
        for (spk, base) in [("SPKA", 100.0), ("SPKB", 170.0)] {
            for k in 0..3 {
                out.push((
                    ProtocolEntry {
                        speaker_id: spk.into(),
                        utt_id: format!("{spk}_bona_{k}"),
                        condition: Condition::Bonafide,
                    },
                    tone(base + 7.0 * k as f64, 120, 1000, 0.3 * k as f64),
                ));
            }
        }
        out
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        for bad in [
            AegConfig {
                alpha: -0.1,
                ..AegConfig::default()
            },
            AegConfig {
                iter: 0,
                ..AegConfig::default()
            },
            AegConfig {
                threshold: 1.5,
                ..AegConfig::default()
            },
            AegConfig {
                epsilon: 0.0,
                ..AegConfig::default()
            },
        ] {
            assert!(matches!(
                bad.validate(),
                Err(AttackError::Configuration(_))
            ));
        }
        assert!(AegConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_alpha_leaves_waveform_unchanged() {
        let model = tiny_model();
        let plan = FeaturePlan::new(&tiny_feature_config()).unwrap();
        let w1 = tone(110.0, 120, 1000, 0.0);
        let w2 = tone(150.0, 120, 1000, 0.5);
        let cfg = AegConfig {
            alpha: 0.0,
            iter: 3,
            threshold: -1.0,
            epsilon: 0.1,
            accept_below_threshold: false,
        };
        let sample = bim_generate(&model, &plan, &w1, &w2, ("u1", "u2"), &cfg)
            .unwrap()
            .expect("threshold -1 accepts everything");
        assert_eq!(sample.waveform.samples, w2.samples);
        // Final similarity equals the clean-pair similarity.
        let e1 = no_grad(|| {
            embed_waveform(&model, &plan, &Tensor::from_vec(&[120], w1.samples.clone()).unwrap())
                .unwrap()
        });
        let e2 = no_grad(|| {
            embed_waveform(&model, &plan, &Tensor::from_vec(&[120], w2.samples.clone()).unwrap())
                .unwrap()
        });
        let clean = e1.cosine_similarity(&e2, COSINE_EPS).unwrap().item();
        assert!((sample.final_similarity - clean).abs() < 1e-12);
        assert_eq!(sample.label, ADV_CLASS);
    }

    #[test]
    fn bim_step_matches_linear_toy_closed_form() {
        // Embedding = M (w2 + d); the analytic cosine gradient fixes the
        // expected step signs, and one step must raise the similarity.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (dim, n) = (4, 10);
        let m = Tensor::randn(&[dim, n], &mut rng);
        let x1ated: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x1 = Tensor::from_vec(&[dim], x1ated.clone()).unwrap();
        let w2 = Tensor::randn(&[n], &mut rng);
        let d = Tensor::zeros(&[n]).trainable();

        let sim = |dvals: &Tensor| {
            m.matmul(&w2.add(dvals).unwrap().reshape(&[n, 1]).unwrap())
                .unwrap()
                .reshape(&[dim])
                .unwrap()
                .cosine_similarity(&x1, COSINE_EPS)
                .unwrap()
        };
        let s0t = sim(&d);
        let s0 = s0t.item();
        s0t.backward().unwrap();
        let grad = d.grad().unwrap();

        // Closed form: grad_d s = M^T (x1 / (|e||x1|) - s e / (|e|^2 |e||x1|) ... )
        let e: Vec<f64> = {
            let prod = m
                .matmul(&w2.reshape(&[n, 1]).unwrap())
                .unwrap()
                .to_vec();
            prod
        };
        let ne = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nx = x1ated.iter().map(|v| v * v).sum::<f64>().sqrt();
        let q = ne * nx + COSINE_EPS;
        let ge: Vec<f64> = e
            .iter()
            .zip(&x1ated)
            .map(|(ei, xi)| xi / q - s0 * nx * ei / (q * ne))
            .collect();
        let mv = m.to_vec();
        let analytic: Vec<f64> = (0..n)
            .map(|j| (0..dim).map(|i| mv[i * n + j] * ge[i]).sum())
            .collect();
        for (g, a) in grad.iter().zip(&analytic) {
            assert!((g - a).abs() < 1e-10, "{g} vs {a}");
        }

        let alpha = 1e-3;
        let mut stepped = d.to_vec();
        bim_step(&mut stepped, &grad, alpha, 1.0);
        for (s, g) in stepped.iter().zip(&grad) {
            assert_eq!(*s, alpha * g.signum() * if *g == 0.0 { 0.0 } else { 1.0 });
        }
        d.set_data(&stepped);
        let s1 = sim(&d).item();
        assert!(s1 > s0, "similarity did not increase: {s0} -> {s1}");
    }

    #[test]
    fn perturbation_respects_epsilon_and_step_bounds() {
        let model = tiny_model();
        let plan = FeaturePlan::new(&tiny_feature_config()).unwrap();
        let w1 = tone(120.0, 120, 1000, 0.1);
        let w2 = tone(160.0, 120, 1000, 0.7);
        for (alpha, iter, eps) in [(0.004, 3, 1.0), (0.01, 4, 0.015)] {
            let cfg = AegConfig {
                alpha,
                iter,
                threshold: -1.0,
                epsilon: eps,
                accept_below_threshold: false,
            };
            let sample = bim_generate(&model, &plan, &w1, &w2, ("a", "b"), &cfg)
                .unwrap()
                .unwrap();
            let bound = eps.min(alpha * iter as f64) + 1e-12;
            let max_dev = sample
                .waveform
                .samples
                .iter()
                .zip(&w2.samples)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_dev <= bound, "|D| {max_dev} exceeds {bound}");
            // Sources untouched.
            assert_eq!(w2.samples.len(), 120);
        }
    }

    #[test]
    fn acceptance_predicate_and_flip() {
        let model = tiny_model();
        let plan = FeaturePlan::new(&tiny_feature_config()).unwrap();
        let w1 = tone(120.0, 120, 1000, 0.0);
        let w2 = tone(125.0, 120, 1000, 0.2);
        let strict = AegConfig {
            alpha: 0.002,
            iter: 2,
            threshold: 1.0,
            epsilon: 0.01,
            accept_below_threshold: false,
        };
        assert!(bim_generate(&model, &plan, &w1, &w2, ("a", "b"), &strict)
            .unwrap()
            .is_none());
        let flipped = AegConfig {
            accept_below_threshold: true,
            ..strict
        };
        assert!(bim_generate(&model, &plan, &w1, &w2, ("a", "b"), &flipped)
            .unwrap()
            .is_some());
    }

    #[test]
    fn training_mode_model_rejected() {
        let model = tiny_model();
        model.set_training(true);
        let plan = FeaturePlan::new(&tiny_feature_config()).unwrap();
        let w = tone(100.0, 120, 1000, 0.0);
        match bim_generate(&model, &plan, &w, &w, ("a", "b"), &AegConfig::default()) {
            Err(AttackError::Contract(msg)) => assert!(msg.contains("eval"), "{msg}"),
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn static_build_is_deterministic_and_labeled() {
        let model = tiny_model();
        let plan = FeaturePlan::new(&tiny_feature_config()).unwrap();
        let clips = toy_clips();
        let cfg = AegConfig {
            alpha: 0.003,
            iter: 2,
            threshold: -1.0,
            epsilon: 0.01,
            accept_below_threshold: false,
        };
        let a = static_aeg_build(&model, &plan, &clips, &cfg, 4, 99).unwrap();
        let b = static_aeg_build(&model, &plan, &clips, &cfg, 4, 99).unwrap();
        assert_eq!(a.len(), 4);
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.source_ids, sb.source_ids);
            assert_eq!(sa.final_similarity.to_bits(), sb.final_similarity.to_bits());
            assert!(sa
                .waveform
                .samples
                .iter()
                .zip(&sb.waveform.samples)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        for s in &a {
            assert_eq!(s.label, ADV_CLASS);
            let spk = |utt: &str| {
                clips
                    .iter()
                    .find(|(e, _)| e.utt_id == utt)
                    .unwrap()
                    .0
                    .speaker_id
                    .clone()
            };
            assert_eq!(spk(&s.source_ids.0), spk(&s.source_ids.1));
        }
        // Active generation with the same model and seed is identical.
        let act = active_aeg_epoch(&model, &plan, &clips, &cfg, 4, 99).unwrap();
        assert_eq!(act.len(), 4);
        assert_eq!(act[0].source_ids, a[0].source_ids);
        // Zero requested samples yields an empty set.
        assert!(static_aeg_build(&model, &plan, &clips, &cfg, 0, 99)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn accepted_count_nonincreasing_in_threshold() {
        let model = tiny_model();
        let plan = FeaturePlan::new(&tiny_feature_config()).unwrap();
        let clips = toy_clips();
        let mut last = usize::MAX;
        for threshold in [-1.0, 0.0, 0.9] {
            let cfg = AegConfig {
                alpha: 0.003,
                iter: 1,
                threshold,
                epsilon: 0.01,
                accept_below_threshold: false,
            };
            let got = static_aeg_build(&model, &plan, &clips, &cfg, usize::MAX, 7)
                .unwrap()
                .len();
            assert!(got <= last, "threshold {threshold}: {got} > {last}");
            last = got;
        }
    }

    #[test]
    fn pairless_dataset_is_configuration_error() {
        let model = tiny_model();
        let plan = FeaturePlan::new(&tiny_feature_config()).unwrap();
        let clips = vec![(
            ProtocolEntry {
                speaker_id: "SOLO".into(),
                utt_id: "SOLO_bona_0".into(),
                condition: Condition::Bonafide,
            },
            tone(100.0, 120, 1000, 0.0),
        )];
        assert!(matches!(
            static_aeg_build(&model, &plan, &clips, &AegConfig::default(), 1, 0),
            Err(AttackError::Configuration(_))
        ));
    }

    #[test]
    fn sidecar_writes_wavs_and_manifest() {
        let model = tiny_model();
        let plan = FeaturePlan::new(&tiny_feature_config()).unwrap();
        let clips = toy_clips();
        let cfg = AegConfig {
            alpha: 0.003,
            iter: 1,
            threshold: -1.0,
            epsilon: 0.01,
            accept_below_threshold: false,
        };
        let samples = static_aeg_build(&model, &plan, &clips, &cfg, 2, 5).unwrap();
        let dir = std::env::temp_dir().join("asdkit-attack-tests/sidecar");
        let _ = fs::remove_dir_all(&dir);
        write_adv_sidecar(&dir, &samples, &cfg).unwrap();
        let manifest = fs::read_to_string(dir.join("manifest.txt")).unwrap();
        assert!(manifest.starts_with(&format!("# aeg config hash {}", cfg.content_hash())));
        assert_eq!(manifest.lines().count(), 1 + samples.len());
        let back = crate::audio::read_wav(dir.join("adv_0000.wav")).unwrap();
        assert_eq!(back.samples.len(), samples[0].waveform.samples.len());
        // 32-bit storage reproduces the perturbed samples to float precision.
        for (a, b) in back.samples.iter().zip(&samples[0].waveform.samples) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
