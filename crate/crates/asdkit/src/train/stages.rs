//! Stage drivers for the pipeline: GE2E pre-training, adversarial
//! fine-tuning with optional static/active AEG injection, knowledge
//! distillation, and utterance scoring.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::attack::{active_aeg_epoch, static_aeg_build, AdvSample, AegConfig};
use crate::audio::{log_mel_tensor, mix_additive, trim_or_pad, FeatureConfig, FeaturePlan, Waveform};
use crate::data::ProtocolEntry;
use crate::loss::{ge2e_loss, kd_loss, nll_loss, Ge2eHead};
use crate::metrics::{eer, Key, ScoreRecord};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::{ModelConfig, ResNetSE};
use crate::tensor::{no_grad, Tensor};

use super::{lr_at, sample_ge2e_batch, Adam, OptimConfig, TrainError};

// ── Logging ──────────────────────────────────────────────────────────

/// Append-only training log: one `stage epoch step lr loss` line per
/// optimizer step, plus `#`-prefixed notes for everything else.
#[derive(Debug, Clone)]
pub struct TrainLog {
    path: Option<PathBuf>,
}

impl TrainLog {
    pub fn to_file(path: impl Into<PathBuf>) -> TrainLog {
        TrainLog {
            path: Some(path.into()),
        }
    }

    pub fn disabled() -> TrainLog {
        TrainLog { path: None }
    }

    fn write_line(&self, line: &str) -> Result<(), TrainError> {
        if let Some(path) = &self.path {
            let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    pub fn step(
        &self,
        stage: &str,
        epoch: usize,
        step: usize,
        lr: f64,
        loss: f64,
    ) -> Result<(), TrainError> {
        self.write_line(&format!("{stage} {epoch} {step} {lr:.8e} {loss:.8e}"))
    }

    pub fn note(&self, text: &str) -> Result<(), TrainError> {
        self.write_line(&format!("# {text}"))
    }
}

// ── Feature pipeline ─────────────────────────────────────────────────

/// Shared frontend for all stages: fixed-length training crops with
/// optional white-noise augmentation, full-length eval features, and a
/// per-utterance cache that is only active when augmentation is off (the
/// features are deterministic in that case).
pub struct FeaturePipeline {
    pub feature_config: FeatureConfig,
    pub plan: FeaturePlan,
    pub augment: bool,
    pub snr_db: f64,
    pub clip_samples: usize,
    cache: RefCell<HashMap<String, (Vec<f64>, usize)>>,
}

impl FeaturePipeline {
    pub fn new(
        feature_config: FeatureConfig,
        augment: bool,
        snr_db: f64,
        clip_s: f64,
    ) -> Result<FeaturePipeline, TrainError> {
        feature_config.validate()?;
        if !(clip_s > 0.0) {
            return Err(TrainError::Configuration(format!(
                "training clip length {clip_s} s must be positive"
            )));
        }
        let plan = FeaturePlan::new(&feature_config)?;
        let clip_samples = (clip_s * feature_config.sample_rate as f64).round() as usize;
        Ok(FeaturePipeline {
            feature_config,
            plan,
            augment,
            snr_db,
            clip_samples,
            cache: RefCell::new(HashMap::new()),
        })
    }

    fn compute(&self, w: &Waveform) -> Result<(Vec<f64>, usize), TrainError> {
        if w.sample_rate != self.feature_config.sample_rate {
            return Err(TrainError::Configuration(format!(
                "waveform sample rate {} does not match features.sample_rate {}; \
                 set the feature section to the corpus rate",
                w.sample_rate, self.feature_config.sample_rate
            )));
        }
        let wave = Tensor::from_vec(&[w.len()], w.samples.clone())?;
        let feats = no_grad(|| log_mel_tensor(&self.plan, &wave))?;
        let t = feats.shape()[1];
        Ok((feats.to_vec(), t))
    }

    /// Fixed-length training features. `cache_key` marks reusable source
    /// clips; generated clips pass None.
    pub fn train_features(
        &self,
        cache_key: Option<&str>,
        w: &Waveform,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, usize), TrainError> {
        let cacheable = !self.augment && cache_key.is_some();
        if cacheable {
            if let Some(hit) = self.cache.borrow().get(cache_key.unwrap()) {
                return Ok(hit.clone());
            }
        }
        let wave = if self.augment {
            let cropped = trim_or_pad(w, self.clip_samples, rng);
            let noise = Waveform {
                samples: (0..self.clip_samples)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
                sample_rate: cropped.sample_rate,
            };
            mix_additive(&cropped, &noise, self.snr_db, rng)?
        } else {
            // Deterministic head crop / tail pad keeps the cache honest.
            let mut samples = w.samples.clone();
            samples.resize(self.clip_samples, 0.0);
            Waveform {
                samples,
                sample_rate: w.sample_rate,
            }
        };
        let out = self.compute(&wave)?;
        if cacheable {
            self.cache
                .borrow_mut()
                .insert(cache_key.unwrap().to_string(), out.clone());
        }
        Ok(out)
    }

    /// Full-length features for scoring, shaped [1, 1, n_mels, T].
    pub fn eval_features(&self, w: &Waveform) -> Result<Tensor, TrainError> {
        let (v, t) = self.compute(w)?;
        Ok(Tensor::from_vec(&[1, 1, self.feature_config.n_mels, t], v)?)
    }
}

fn assemble_batch(rows: &[(Vec<f64>, usize)], n_mels: usize) -> Result<Tensor, TrainError> {
    let t = rows
        .first()
        .ok_or_else(|| TrainError::Contract("empty batch".into()))?
        .1;
    if rows.iter().any(|(_, ti)| *ti != t) {
        return Err(TrainError::Contract(
            "training batch mixes frame counts".into(),
        ));
    }
    let mut data = Vec::with_capacity(rows.len() * n_mels * t);
    for (v, _) in rows {
        data.extend_from_slice(v);
    }
    Ok(Tensor::from_vec(&[rows.len(), 1, n_mels, t], data)?)
}

// ── Scoring ──────────────────────────────────────────────────────────

/// How 7/8-class logits collapse into the binary countermeasure score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// log p(bonafide) − logsumexp of all spoof-class log-probabilities.
    LogLikelihoodRatio,
    /// log p(bonafide) alone.
    BonafideLogProb,
}

impl ScoreMode {
    pub fn parse(s: &str) -> Option<ScoreMode> {
        match s {
            "llr" => Some(ScoreMode::LogLikelihoodRatio),
            "bonafide" => Some(ScoreMode::BonafideLogProb),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMode::LogLikelihoodRatio => "llr",
            ScoreMode::BonafideLogProb => "bonafide",
        }
    }
}

/// Higher = more bona fide. Class 0 is bona fide; every other class counts
/// as spoof mass.
pub fn score_from_logits(logits: &[f64], mode: ScoreMode) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    let lp: Vec<f64> = logits.iter().map(|v| v - lse).collect();
    match mode {
        ScoreMode::BonafideLogProb => lp[0],
        ScoreMode::LogLikelihoodRatio => {
            let ms = lp[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let spoof = ms + lp[1..].iter().map(|v| (v - ms).exp()).sum::<f64>().ln();
            lp[0] - spoof
        }
    }
}

pub fn score_utterance(
    model: &ResNetSE,
    pipe: &FeaturePipeline,
    w: &Waveform,
    mode: ScoreMode,
) -> Result<f64, TrainError> {
    if model.is_training() {
        return Err(TrainError::Contract(
            "score_utterance requires the model in eval mode".into(),
        ));
    }
    let x = pipe.eval_features(w)?;
    let (_, logits) = no_grad(|| model.forward(&x))?;
    Ok(score_from_logits(&logits.to_vec(), mode))
}

/// Scores a labeled clip list into metric records, protocol order.
pub fn score_clips(
    model: &ResNetSE,
    pipe: &FeaturePipeline,
    clips: &[(ProtocolEntry, Waveform)],
    mode: ScoreMode,
) -> Result<Vec<ScoreRecord>, TrainError> {
    clips
        .iter()
        .map(|(e, w)| {
            Ok(ScoreRecord {
                utt_id: e.utt_id.clone(),
                key: if e.condition.is_bonafide() {
                    Key::Bonafide
                } else {
                    Key::Spoof
                },
                score: score_utterance(model, pipe, w, mode)?,
            })
        })
        .collect()
}

fn dev_eer(
    model: &ResNetSE,
    pipe: &FeaturePipeline,
    dev: &[(ProtocolEntry, Waveform)],
    mode: ScoreMode,
) -> Result<f64, TrainError> {
    Ok(eer(&score_clips(model, pipe, dev, mode)?)?)
}

// ── Stage results ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StageResult {
    pub checkpoint: PathBuf,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub history: Vec<f64>,
}

// ── GE2E pre-training ────────────────────────────────────────────────

/// Minimizes the GE2E loss over condition classes. The similarity head is
/// a training device and is discarded; the checkpoint with the lowest
/// epoch-mean loss wins.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_ge2e(
    model: &ResNetSE,
    train: &[(ProtocolEntry, Waveform)],
    pipe: &FeaturePipeline,
    optim: &OptimConfig,
    epochs: usize,
    n_conditions: usize,
    m_clips: usize,
    out_dir: &Path,
    log: &TrainLog,
    seed: u64,
) -> Result<StageResult, TrainError> {
    optim.validate()?;
    if epochs == 0 {
        return Err(TrainError::Configuration("epochs must be >= 1".into()));
    }
    fs::create_dir_all(out_dir)?;
    let head = Ge2eHead::new();
    model.set_training(true);
    let mut params = model.parameters();
    params.extend(head.parameters());
    let mut opt = Adam::new(params, optim.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (train.len() / (n_conditions * m_clips)).max(1);
    let checkpoint = out_dir.join("pretrain_best.ckpt");
    let (mut best, mut best_epoch) = (f64::INFINITY, 0);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = lr_at(epoch, optim);
        let mut sum = 0.0;
        for step in 0..steps {
            let idxs = sample_ge2e_batch(train, n_conditions, m_clips, &mut rng)?;
            let rows: Vec<(Vec<f64>, usize)> = idxs
                .iter()
                .map(|&i| {
                    let (e, w) = &train[i];
                    pipe.train_features(Some(&e.utt_id), w, &mut rng)
                })
                .collect::<Result<_, _>>()?;
            let x = assemble_batch(&rows, pipe.feature_config.n_mels)?;
            let (emb, _) = model.forward(&x)?;
            let loss = ge2e_loss(&emb, n_conditions, m_clips, &head.w, &head.b)?;
            let value = loss.item();
            loss.backward()?;
            opt.step(lr)?;
            head.clamp_w();
            log.step("pretrain", epoch, step, lr, value)?;
            sum += value;
        }
        let mean = sum / steps as f64;
        history.push(mean);
        if mean < best {
            (best, best_epoch) = (mean, epoch);
            save_checkpoint(&checkpoint, model)?;
        }
    }
    Ok(StageResult {
        checkpoint,
        best_metric: best,
        best_epoch,
        history,
    })
}

// ── Adversarial fine-tuning ──────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AegMode {
    None,
    Static,
    Active,
}

impl AegMode {
    pub fn parse(s: &str) -> Option<AegMode> {
        match s {
            "none" => Some(AegMode::None),
            "static" => Some(AegMode::Static),
            "active" => Some(AegMode::Active),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AegMode::None => "none",
            AegMode::Static => "static",
            AegMode::Active => "active",
        }
    }
}

pub struct FinetuneOutcome {
    /// Best-validation model, reloaded from its checkpoint, in eval mode.
    pub model: ResNetSE,
    pub result: StageResult,
    pub adv_counts: Vec<usize>,
    pub adv_set_hashes: Vec<String>,
}

fn adv_set_hash(samples: &[AdvSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.source_ids.0.as_bytes());
        h.update(s.source_ids.1.as_bytes());
        for v in &s.waveform.samples {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

/// NLL fine-tuning over condition labels; static mode injects one fixed
/// adversarial set built from the pretrained snapshot, active mode
/// regenerates against the current model each epoch. Lowest dev EER wins.
#[allow(clippy::too_many_arguments)]
pub fn finetune_adversarial(
    pretrained: &ResNetSE,
    train: &[(ProtocolEntry, Waveform)],
    dev: &[(ProtocolEntry, Waveform)],
    pipe: &FeaturePipeline,
    optim: &OptimConfig,
    aeg: &AegConfig,
    mode: AegMode,
    n_adv: usize,
    epochs: usize,
    batch_size: usize,
    score_mode: ScoreMode,
    out_dir: &Path,
    log: &TrainLog,
    seed: u64,
) -> Result<FinetuneOutcome, TrainError> {
    optim.validate()?;
    if epochs == 0 || batch_size < 2 {
        return Err(TrainError::Configuration(
            "epochs must be >= 1 and batch_size >= 2".into(),
        ));
    }
    fs::create_dir_all(out_dir)?;
    let n_classes = if mode == AegMode::None { 7 } else { 8 };
    let cfg = ModelConfig {
        n_classes,
        ..pretrained.config.clone()
    };
    let model = ResNetSE::new(cfg, seed ^ 0x5eed)?;
    let copied = model.transplant_from(pretrained);
    log.note(&format!(
        "finetune mode={} transplanted {copied} tensors",
        mode.as_str()
    ))?;
    if mode != AegMode::None {
        log.note(&format!(
            "aeg acceptance predicate: similarity {} threshold {}",
            if aeg.accept_below_threshold { "<" } else { ">" },
            aeg.threshold
        ))?;
    }

    let aeg_seed = seed ^ 0xAE6;
    let static_set = if mode == AegMode::Static {
        let was_training = pretrained.is_training();
        pretrained.set_training(false);
        let t0 = Instant::now();
        let set = static_aeg_build(pretrained, &pipe.plan, train, aeg, n_adv, aeg_seed)?;
        pretrained.set_training(was_training);
        log.note(&format!(
            "aeg static generated {} samples in {:.3} s",
            set.len(),
            t0.elapsed().as_secs_f64()
        ))?;
        Some(set)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(model.parameters(), optim.clone());
    let checkpoint = out_dir.join("finetune_best.ckpt");
    let (mut best, mut best_epoch) = (f64::INFINITY, 0);
    let mut history = Vec::with_capacity(epochs);
    let mut adv_counts = Vec::new();
    let mut adv_set_hashes = Vec::new();

    for epoch in 0..epochs {
        let adv: Vec<AdvSample> = match mode {
            AegMode::None => Vec::new(),
            AegMode::Static => static_set.clone().unwrap(),
            AegMode::Active => {
                model.set_training(false);
                let t0 = Instant::now();
                let set = active_aeg_epoch(
                    &model,
                    &pipe.plan,
                    train,
                    aeg,
                    n_adv,
                    aeg_seed.wrapping_add(epoch as u64),
                )?;
                log.note(&format!(
                    "aeg epoch {epoch} generated {} samples in {:.3} s",
                    set.len(),
                    t0.elapsed().as_secs_f64()
                ))?;
                set
            }
        };
        adv_counts.push(adv.len());
        adv_set_hashes.push(adv_set_hash(&adv));

        // Roster: (label, cache key for source clips, waveform).
        let mut roster: Vec<(usize, Option<&str>, &Waveform)> = train
            .iter()
            .map(|(e, w)| (e.condition.label(), Some(e.utt_id.as_str()), w))
            .collect();
        for s in &adv {
            roster.push((s.label, None, &s.waveform));
        }
        let mut order: Vec<usize> = (0..roster.len()).collect();
        order.shuffle(&mut rng);

        model.set_training(true);
        let lr = lr_at(epoch, optim);
        for (step, chunk) in order.chunks(batch_size).enumerate() {
            let rows: Vec<(Vec<f64>, usize)> = chunk
                .iter()
                .map(|&i| pipe.train_features(roster[i].1, roster[i].2, &mut rng))
                .collect::<Result<_, _>>()?;
            let labels: Vec<usize> = chunk.iter().map(|&i| roster[i].0).collect();
            let x = assemble_batch(&rows, pipe.feature_config.n_mels)?;
            let (_, logits) = model.forward(&x)?;
            let loss = nll_loss(&logits, &labels)?;
            let value = loss.item();
            loss.backward()?;
            opt.step(lr)?;
            log.step("finetune", epoch, step, lr, value)?;
        }

        model.set_training(false);
        let epoch_eer = dev_eer(&model, pipe, dev, score_mode)?;
        history.push(epoch_eer);
        log.note(&format!("finetune epoch {epoch} dev EER {epoch_eer:.6}"))?;
        if epoch_eer < best {
            (best, best_epoch) = (epoch_eer, epoch);
            save_checkpoint(&checkpoint, &model)?;
        }
    }

    let best_model = load_checkpoint(&checkpoint)?;
    best_model.set_training(false);
    Ok(FinetuneOutcome {
        model: best_model,
        result: StageResult {
            checkpoint,
            best_metric: best,
            best_epoch,
            history,
        },
        adv_counts,
        adv_set_hashes,
    })
}

// ── Knowledge distillation ───────────────────────────────────────────

/// Trains a fresh student against the frozen teacher's soft targets (plus
/// the hard NLL term). No adversarial generation runs here. Lowest dev EER
/// wins; the teacher is never modified.
#[allow(clippy::too_many_arguments)]
pub fn distill_student(
    teacher: &ResNetSE,
    student_cfg: ModelConfig,
    train: &[(ProtocolEntry, Waveform)],
    dev: &[(ProtocolEntry, Waveform)],
    pipe: &FeaturePipeline,
    optim: &OptimConfig,
    temperature: f64,
    gamma: f64,
    epochs: usize,
    batch_size: usize,
    score_mode: ScoreMode,
    out_dir: &Path,
    log: &TrainLog,
    seed: u64,
) -> Result<(ResNetSE, StageResult), TrainError> {
    optim.validate()?;
    if teacher.is_training() {
        return Err(TrainError::Contract(
            "distillation requires the teacher frozen in eval mode".into(),
        ));
    }
    if teacher.config.n_classes != student_cfg.n_classes {
        return Err(TrainError::Contract(format!(
            "teacher has {} classes, student config has {}",
            teacher.config.n_classes, student_cfg.n_classes
        )));
    }
    if epochs == 0 || batch_size < 2 {
        return Err(TrainError::Configuration(
            "epochs must be >= 1 and batch_size >= 2".into(),
        ));
    }
    fs::create_dir_all(out_dir)?;
    let student = ResNetSE::new(student_cfg, seed ^ 0x57D)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(student.parameters(), optim.clone());
    let checkpoint = out_dir.join("distill_best.ckpt");
    let (mut best, mut best_epoch) = (f64::INFINITY, 0);
    let mut history = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        student.set_training(true);
        let lr = lr_at(epoch, optim);
        for (step, chunk) in order.chunks(batch_size).enumerate() {
            let rows: Vec<(Vec<f64>, usize)> = chunk
                .iter()
                .map(|&i| {
                    let (e, w) = &train[i];
                    pipe.train_features(Some(&e.utt_id), w, &mut rng)
                })
                .collect::<Result<_, _>>()?;
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| train[i].0.condition.label())
                .collect();
            let x = assemble_batch(&rows, pipe.feature_config.n_mels)?;
            let (_, student_logits) = student.forward(&x)?;
            // gamma == 0 is independent student training; the teacher is
            // not consulted at all.
            let loss = if gamma == 0.0 {
                nll_loss(&student_logits, &labels)?
            } else {
                let (_, teacher_logits) = no_grad(|| teacher.forward(&x))?;
                kd_loss(&student_logits, &teacher_logits, &labels, temperature, gamma)?
            };
            let value = loss.item();
            loss.backward()?;
            opt.step(lr)?;
            log.step("distill", epoch, step, lr, value)?;
        }
        student.set_training(false);
        let epoch_eer = dev_eer(&student, pipe, dev, score_mode)?;
        history.push(epoch_eer);
        log.note(&format!("distill epoch {epoch} dev EER {epoch_eer:.6}"))?;
        if epoch_eer < best {
            (best, best_epoch) = (epoch_eer, epoch);
            save_checkpoint(&checkpoint, &student)?;
        }
    }

    let best_student = load_checkpoint(&checkpoint)?;
    best_student.set_training(false);
    Ok((
        best_student,
        StageResult {
            checkpoint,
            best_metric: best,
            best_epoch,
            history,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, Condition, SynthSpec};
    use crate::tensor::Tensor;

    fn tiny_corpus() -> Vec<(ProtocolEntry, Waveform)> {
        synth_dataset(&SynthSpec {
            n_speakers: 2,
            clips_per_condition: 3,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    fn tiny_pipe() -> FeaturePipeline {
        FeaturePipeline::new(
            FeatureConfig {
                n_mels: 8,
                win_ms: 25.0,
                hop_ms: 10.0,
                n_fft: 256,
                sample_rate: 8000,
            },
            false,
            30.0,
            1.0,
        )
        .unwrap()
    }

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            channels: [2, 4, 4, 8],
            blocks_per_stage: [1, 1, 1, 1],
            se_reduction: 2,
            embedding_dim: 8,
            n_classes: 7,
            input_mels: 8,
        }
    }

    fn out_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("asdkit-stage-tests").join(name);
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn uniform_logits_score_matches_closed_form() {
        let s = score_from_logits(&[0.0; 8], ScoreMode::LogLikelihoodRatio);
        let expected = (1.0f64 / 8.0).ln() - (7.0f64 / 8.0).ln();
        assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
        assert!((s + 7.0f64.ln()).abs() < 1e-12);
        let b = score_from_logits(&[0.0; 8], ScoreMode::BonafideLogProb);
        assert!((b - (1.0f64 / 8.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn score_is_monotone_in_bonafide_logit() {
        let mut prev = f64::NEG_INFINITY;
        for bona in [-2.0, 0.0, 1.0, 3.0] {
            let s = score_from_logits(
                &[bona, 0.3, -0.1, 0.8, 0.0, 0.2, -0.5],
                ScoreMode::LogLikelihoodRatio,
            );
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn score_utterance_requires_eval_mode_and_is_deterministic() {
        let model = ResNetSE::new(tiny_model_cfg(), 1).unwrap();
        let pipe = tiny_pipe();
        let (_, w) = &tiny_corpus()[0];
        assert!(matches!(
            score_utterance(&model, &pipe, w, ScoreMode::LogLikelihoodRatio),
            Err(TrainError::Contract(_))
        ));
        model.set_training(false);
        let a = score_utterance(&model, &pipe, w, ScoreMode::LogLikelihoodRatio).unwrap();
        let b = score_utterance(&model, &pipe, w, ScoreMode::LogLikelihoodRatio).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn free_embeddings_reach_ge2e_floor() {
        // Embeddings as free parameters: the loss must fall below
        // 0.1·ln(N) within 500 Adam steps.
        let (n, m, d) = (7, 4, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emb = Tensor::randn(&[n * m, d], &mut rng).trainable();
        let head = Ge2eHead::new();
        let mut opt = Adam::new(
            vec![("emb".into(), emb.clone())],
            OptimConfig {
                lr0: 0.05,
                ..OptimConfig::default()
            },
        );
        let mut reached = None;
        for step in 0..500 {
            let loss = ge2e_loss(&emb, n, m, &head.w, &head.b).unwrap();
            let v = loss.item();
            assert!(v >= 0.0, "GE2E loss went negative: {v}");
            if v < 0.1 * (n as f64).ln() {
                reached = Some(step);
                break;
            }
            loss.backward().unwrap();
            opt.step(0.05).unwrap();
        }
        assert!(reached.is_some(), "loss never fell below 0.1 ln N");
    }

    #[test]
    fn pretrain_improves_and_checkpoints() {
        let corpus = tiny_corpus();
        let pipe = tiny_pipe();
        let model = ResNetSE::new(tiny_model_cfg(), 5).unwrap();
        let dir = out_dir("pretrain");
        let optim = OptimConfig {
            lr0: 0.003,
            ..OptimConfig::default()
        };
        let res = pretrain_ge2e(
            &model,
            &corpus,
            &pipe,
            &optim,
            4,
            7,
            2,
            &dir,
            &TrainLog::to_file(dir.join("train.log")),
            11,
        )
        .unwrap();
        assert_eq!(res.history.len(), 4);
        assert!(res.history.iter().all(|v| *v >= 0.0));
        assert!(
            res.history.last().unwrap() < &res.history[0],
            "loss did not improve: {:?}",
            res.history
        );
        assert!(res.checkpoint.exists());
        assert!((res.best_metric - res.history[res.best_epoch]).abs() < 1e-15);
        let log_text = fs::read_to_string(dir.join("train.log")).unwrap();
        let steps: Vec<&str> = log_text
            .lines()
            .filter(|l| l.starts_with("pretrain"))
            .collect();
        assert_eq!(steps.len(), 4 * 3);
        assert!(steps[0].split_whitespace().count() == 5);
    }

    #[test]
    fn pretrain_is_deterministic_across_runs() {
        let corpus = tiny_corpus();
        let optim = OptimConfig::default();
        let mut histories = Vec::new();
        for _ in 0..2 {
            let pipe = tiny_pipe();
            let model = ResNetSE::new(tiny_model_cfg(), 5).unwrap();
            let dir = out_dir("pretrain-det");
            let res = pretrain_ge2e(
                &model,
                &corpus,
                &pipe,
                &optim,
                2,
                7,
                2,
                &dir,
                &TrainLog::disabled(),
                11,
            )
            .unwrap();
            histories.push(res.history);
        }
        let (a, b) = (&histories[0], &histories[1]);
        assert!(a
            .iter()
            .zip(b)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    fn toy_aeg() -> AegConfig {
        AegConfig {
            alpha: 0.002,
            iter: 2,
            threshold: -1.0,
            epsilon: 0.01,
            accept_below_threshold: false,
        }
    }

    #[test]
    fn finetune_none_trains_a_7_class_model() {
        let corpus = tiny_corpus();
        let pipe = tiny_pipe();
        let pretrained = ResNetSE::new(tiny_model_cfg(), 7).unwrap();
        let dir = out_dir("ft-none");
        let out = finetune_adversarial(
            &pretrained,
            &corpus,
            &corpus,
            &pipe,
            &OptimConfig::default(),
            &toy_aeg(),
            AegMode::None,
            0,
            2,
            8,
            ScoreMode::LogLikelihoodRatio,
            &dir,
            &TrainLog::disabled(),
            21,
        )
        .unwrap();
        assert_eq!(out.model.config.n_classes, 7);
        assert_eq!(out.adv_counts, vec![0, 0]);
        assert!(out.result.checkpoint.exists());
        assert_eq!(out.result.history.len(), 2);
        assert!(!out.model.is_training());
    }

    #[test]
    fn finetune_static_reuses_one_adversarial_set() {
        let corpus = tiny_corpus();
        let pipe = tiny_pipe();
        let pretrained = ResNetSE::new(tiny_model_cfg(), 7).unwrap();
        pretrained.set_training(false);
        let dir = out_dir("ft-static");
        let out = finetune_adversarial(
            &pretrained,
            &corpus,
            &corpus,
            &pipe,
            &OptimConfig::default(),
            &toy_aeg(),
            AegMode::Static,
            3,
            2,
            8,
            ScoreMode::LogLikelihoodRatio,
            &dir,
            &TrainLog::to_file(dir.join("train.log")),
            23,
        )
        .unwrap();
        assert_eq!(out.model.config.n_classes, 8);
        assert_eq!(out.adv_counts, vec![3, 3]);
        assert_eq!(out.adv_set_hashes[0], out.adv_set_hashes[1]);
        let log_text = fs::read_to_string(dir.join("train.log")).unwrap();
        assert!(log_text.contains("aeg static generated 3 samples"));
    }

    #[test]
    fn finetune_active_regenerates_each_epoch() {
        let corpus = tiny_corpus();
        let pipe = tiny_pipe();
        let pretrained = ResNetSE::new(tiny_model_cfg(), 7).unwrap();
        let dir = out_dir("ft-active");
        let out = finetune_adversarial(
            &pretrained,
            &corpus,
            &corpus,
            &pipe,
            &OptimConfig {
                lr0: 0.002,
                ..OptimConfig::default()
            },
            &toy_aeg(),
            AegMode::Active,
            3,
            2,
            8,
            ScoreMode::LogLikelihoodRatio,
            &dir,
            &TrainLog::disabled(),
            25,
        )
        .unwrap();
        assert_eq!(out.adv_counts.len(), 2);
        assert!(out.adv_counts.iter().all(|&c| c > 0));
        assert_ne!(
            out.adv_set_hashes[0], out.adv_set_hashes[1],
            "active sets identical across epochs"
        );
    }

    #[test]
    fn distill_contract_checks() {
        let teacher = ResNetSE::new(tiny_model_cfg(), 1).unwrap();
        let pipe = tiny_pipe();
        let corpus = tiny_corpus();
        // Training-mode teacher rejected.
        assert!(matches!(
            distill_student(
                &teacher,
                tiny_model_cfg().student_of(),
                &corpus,
                &corpus,
                &pipe,
                &OptimConfig::default(),
                5.0,
                0.5,
                1,
                8,
                ScoreMode::LogLikelihoodRatio,
                &out_dir("distill-bad1"),
                &TrainLog::disabled(),
                1,
            ),
            Err(TrainError::Contract(_))
        ));
        teacher.set_training(false);
        // Class-count mismatch rejected.
        let mut bad = tiny_model_cfg().student_of();
        bad.n_classes = 8;
        assert!(matches!(
            distill_student(
                &teacher,
                bad,
                &corpus,
                &corpus,
                &pipe,
                &OptimConfig::default(),
                5.0,
                0.5,
                1,
                8,
                ScoreMode::LogLikelihoodRatio,
                &out_dir("distill-bad2"),
                &TrainLog::disabled(),
                1,
            ),
            Err(TrainError::Contract(_))
        ));
    }

    #[test]
    fn distill_leaves_teacher_untouched() {
        let teacher = ResNetSE::new(tiny_model_cfg(), 31).unwrap();
        teacher.set_training(false);
        let before: Vec<u64> = teacher
            .parameters()
            .iter()
            .flat_map(|(_, t)| t.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<u64>>())
            .collect();
        let corpus = tiny_corpus();
        let pipe = tiny_pipe();
        let (student, res) = distill_student(
            &teacher,
            tiny_model_cfg().student_of(),
            &corpus,
            &corpus,
            &pipe,
            &OptimConfig::default(),
            5.0,
            0.5,
            1,
            8,
            ScoreMode::LogLikelihoodRatio,
            &out_dir("distill-run"),
            &TrainLog::disabled(),
            33,
        )
        .unwrap();
        let after: Vec<u64> = teacher
            .parameters()
            .iter()
            .flat_map(|(_, t)| t.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<u64>>())
            .collect();
        assert_eq!(before, after);
        assert_eq!(student.config.channels, [1, 2, 2, 4]);
        assert!(res.checkpoint.exists());
    }

    #[test]
    fn identical_models_give_zero_pure_kd_loss() {
        let a = ResNetSE::new(tiny_model_cfg(), 77).unwrap();
        let b = ResNetSE::new(tiny_model_cfg(), 77).unwrap();
        a.set_training(false);
        b.set_training(false);
        let pipe = tiny_pipe();
        let corpus = tiny_corpus();
        let rows: Vec<(Vec<f64>, usize)> = corpus[..4]
            .iter()
            .map(|(e, w)| {
                pipe.train_features(Some(&e.utt_id), w, &mut ChaCha8Rng::seed_from_u64(0))
                    .unwrap()
            })
            .collect();
        let x = assemble_batch(&rows, 8).unwrap();
        let (_, la) = a.forward(&x).unwrap();
        let (_, lb) = b.forward(&x).unwrap();
        assert_eq!(la.to_vec(), lb.to_vec());
        let loss = kd_loss(&la, &lb, &[0, 1, 2, 3], 5.0, 1.0).unwrap().item();
        assert!(loss.abs() < 1e-12, "{loss}");
    }

    #[test]
    fn adversarial_labels_feed_the_eighth_class() {
        // The roster path tags generated clips with the adversarial label
        // and nll_loss accepts it only because finetune builds an 8-way
        // classifier.
        let corpus: Vec<(ProtocolEntry, Waveform)> = tiny_corpus()
            .into_iter()
            .filter(|(e, _)| e.condition == Condition::Bonafide)
            .collect();
        assert!(corpus.len() >= 4);
        let pipe = tiny_pipe();
        let pretrained = ResNetSE::new(tiny_model_cfg(), 41).unwrap();
        let dir = out_dir("ft-labels");
        // Bona fide only corpora still fine-tune; the adversarial class
        // supplies the only spoof-side labels. Dev needs both keys, so
        // reuse the full corpus there.
        let dev = tiny_corpus();
        let out = finetune_adversarial(
            &pretrained,
            &corpus,
            &dev,
            &pipe,
            &OptimConfig::default(),
            &toy_aeg(),
            AegMode::Static,
            2,
            1,
            4,
            ScoreMode::LogLikelihoodRatio,
            &dir,
            &TrainLog::disabled(),
            43,
        )
        .unwrap();
        assert_eq!(out.adv_counts, vec![2]);
    }
}
