//! Flat key=value configuration with one [section] per pipeline stage.
//! Every hyperparameter of the pipeline is overridable here; unset keys
//! keep their defaults. `resolved_text` is the canonical dump whose SHA-256
//! digest identifies a run.

use std::fmt::Write as FmtWrite;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::attack::AegConfig;
use crate::audio::FeatureConfig;
use crate::data::{SynthSpec, N_CONDITIONS};
use crate::model::ModelConfig;
use crate::train::{OptimConfig, ScoreMode, TrainError};

/// Stage lengths, batching, and loss blending.
#[derive(Debug, Clone)]
pub struct TrainSection {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub distill_epochs: usize,
    pub batch_size: usize,
    pub ge2e_conditions: usize,
    pub ge2e_clips: usize,
    /// Adversarial samples injected per epoch. 0 means automatic: one tenth
    /// of the training set, at least 1.
    pub n_adv: usize,
    pub gamma: f64,
    pub temperature: f64,
    pub augment: bool,
    pub snr_db: f64,
    pub clip_s: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            pretrain_epochs: 20,
            finetune_epochs: 20,
            distill_epochs: 20,
            batch_size: 32,
            ge2e_conditions: N_CONDITIONS,
            ge2e_clips: 4,
            n_adv: 0,
            gamma: 0.5,
            temperature: 5.0,
            augment: false,
            snr_db: 15.0,
            clip_s: 1.0,
        }
    }
}

impl TrainSection {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positives = [
            ("pretrain_epochs", self.pretrain_epochs),
            ("finetune_epochs", self.finetune_epochs),
            ("distill_epochs", self.distill_epochs),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(TrainError::Configuration(format!("{name} must be >= 1")));
            }
        }
        if self.batch_size < 2 {
            return Err(TrainError::Configuration("batch_size must be >= 2".into()));
        }
        if self.ge2e_conditions < 2 || self.ge2e_clips < 2 {
            return Err(TrainError::Configuration(
                "ge2e_conditions and ge2e_clips must be >= 2".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(TrainError::Configuration(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(TrainError::Configuration(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !self.snr_db.is_finite() {
            return Err(TrainError::Configuration("snr_db must be finite".into()));
        }
        if !(self.clip_s > 0.0) {
            return Err(TrainError::Configuration(format!(
                "clip_s {} must be positive",
                self.clip_s
            )));
        }
        Ok(())
    }
}

/// Run-wide bookkeeping: seed, artifact directory, log file name.
#[derive(Debug, Clone)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: String,
    pub log_file: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 17,
            out_dir: "runs".into(),
            log_file: "train.log".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub aeg: AegConfig,
    pub train: TrainSection,
    pub score_mode: ScoreMode,
    pub synth: SynthSpec,
    pub run: RunSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let features = FeatureConfig::default();
        let model = ModelConfig {
            input_mels: features.n_mels,
            ..ModelConfig::teacher()
        };
        PipelineConfig {
            features,
            model,
            optim: OptimConfig::default(),
            aeg: AegConfig::default(),
            train: TrainSection::default(),
            score_mode: ScoreMode::LogLikelihoodRatio,
            synth: SynthSpec::default(),
            run: RunSection::default(),
        }
    }
}

fn bad(line_no: usize, msg: impl std::fmt::Display) -> TrainError {
    TrainError::Configuration(format!("config line {line_no}: {msg}"))
}

fn parse_value<T: std::str::FromStr>(line_no: usize, key: &str, raw: &str) -> Result<T, TrainError>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| bad(line_no, format!("{key}={raw}: {e}")))
}

fn parse_list4(line_no: usize, key: &str, raw: &str) -> Result<[usize; 4], TrainError> {
    let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(bad(
            line_no,
            format!("{key}={raw}: expected 4 comma-separated values"),
        ));
    }
    let mut out = [0usize; 4];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = parse_value(line_no, key, part)?;
    }
    Ok(out)
}

impl PipelineConfig {
    /// Parses override text on top of the defaults. Lines are `key=value`
    /// under a `[section]` header; `#` starts a comment. Unknown sections,
    /// unknown keys, and unparseable values all fail with the line number.
    pub fn parse(text: &str) -> Result<PipelineConfig, TrainError> {
        let mut cfg = PipelineConfig::default();
        // Epsilon tracks alpha·iter until an explicit [aeg] epsilon appears.
        let mut epsilon_set = false;
        let mut section = String::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| bad(line_no, "unterminated [section] header"))?
                    .trim();
                const SECTIONS: [&str; 8] = [
                    "features", "model", "optim", "aeg", "train", "score", "synth", "run",
                ];
                if !SECTIONS.contains(&name) {
                    return Err(bad(line_no, format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(line_no, format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            match (section.as_str(), key) {
                ("features", "n_mels") => cfg.features.n_mels = parse_value(line_no, key, value)?,
                ("features", "win_ms") => cfg.features.win_ms = parse_value(line_no, key, value)?,
                ("features", "hop_ms") => cfg.features.hop_ms = parse_value(line_no, key, value)?,
                ("features", "n_fft") => cfg.features.n_fft = parse_value(line_no, key, value)?,
                ("features", "sample_rate") => {
                    cfg.features.sample_rate = parse_value(line_no, key, value)?
                }
                ("model", "channels") => cfg.model.channels = parse_list4(line_no, key, value)?,
                ("model", "blocks") => {
                    cfg.model.blocks_per_stage = parse_list4(line_no, key, value)?
                }
                ("model", "se_reduction") => {
                    cfg.model.se_reduction = parse_value(line_no, key, value)?
                }
                ("model", "embedding_dim") => {
                    cfg.model.embedding_dim = parse_value(line_no, key, value)?
                }
                ("optim", "lr0") => cfg.optim.lr0 = parse_value(line_no, key, value)?,
                ("optim", "decay") => cfg.optim.decay = parse_value(line_no, key, value)?,
                ("optim", "decay_every") => {
                    cfg.optim.decay_every = parse_value(line_no, key, value)?
                }
                ("optim", "beta1") => cfg.optim.beta1 = parse_value(line_no, key, value)?,
                ("optim", "beta2") => cfg.optim.beta2 = parse_value(line_no, key, value)?,
                ("optim", "eps") => cfg.optim.eps = parse_value(line_no, key, value)?,
                ("aeg", "alpha") => cfg.aeg.alpha = parse_value(line_no, key, value)?,
                ("aeg", "iter") => cfg.aeg.iter = parse_value(line_no, key, value)?,
                ("aeg", "threshold") => cfg.aeg.threshold = parse_value(line_no, key, value)?,
                ("aeg", "epsilon") => {
                    cfg.aeg.epsilon = parse_value(line_no, key, value)?;
                    epsilon_set = true;
                }
                ("aeg", "accept_below_threshold") => {
                    cfg.aeg.accept_below_threshold = parse_value(line_no, key, value)?
                }
                ("train", "pretrain_epochs") => {
                    cfg.train.pretrain_epochs = parse_value(line_no, key, value)?
                }
                ("train", "finetune_epochs") => {
                    cfg.train.finetune_epochs = parse_value(line_no, key, value)?
                }
                ("train", "distill_epochs") => {
                    cfg.train.distill_epochs = parse_value(line_no, key, value)?
                }
                ("train", "batch_size") => {
                    cfg.train.batch_size = parse_value(line_no, key, value)?
                }
                ("train", "ge2e_conditions") => {
                    cfg.train.ge2e_conditions = parse_value(line_no, key, value)?
                }
                ("train", "ge2e_clips") => {
                    cfg.train.ge2e_clips = parse_value(line_no, key, value)?
                }
                ("train", "n_adv") => cfg.train.n_adv = parse_value(line_no, key, value)?,
                ("train", "gamma") => cfg.train.gamma = parse_value(line_no, key, value)?,
                ("train", "temperature") => {
                    cfg.train.temperature = parse_value(line_no, key, value)?
                }
                ("train", "augment") => cfg.train.augment = parse_value(line_no, key, value)?,
                ("train", "snr_db") => cfg.train.snr_db = parse_value(line_no, key, value)?,
                ("train", "clip_s") => cfg.train.clip_s = parse_value(line_no, key, value)?,
                ("score", "mode") => {
                    cfg.score_mode = ScoreMode::parse(value).ok_or_else(|| {
                        bad(line_no, format!("mode={value}: expected llr or bonafide"))
                    })?
                }
                ("synth", "n_speakers") => {
                    cfg.synth.n_speakers = parse_value(line_no, key, value)?
                }
                ("synth", "clips_per_condition") => {
                    cfg.synth.clips_per_condition = parse_value(line_no, key, value)?
                }
                ("synth", "duration_s") => {
                    cfg.synth.duration_s = parse_value(line_no, key, value)?
                }
                ("synth", "sample_rate") => {
                    cfg.synth.sample_rate = parse_value(line_no, key, value)?
                }
                ("synth", "seed") => cfg.synth.seed = parse_value(line_no, key, value)?,
                ("run", "seed") => cfg.run.seed = parse_value(line_no, key, value)?,
                ("run", "out_dir") => cfg.run.out_dir = value.to_string(),
                ("run", "log_file") => cfg.run.log_file = value.to_string(),
                ("", _) => {
                    return Err(bad(line_no, format!("key {key} before any [section]")))
                }
                _ => return Err(bad(line_no, format!("unknown key {section}.{key}"))),
            }
        }
        if !epsilon_set {
            cfg.aeg.epsilon = cfg.aeg.alpha * cfg.aeg.iter as f64;
        }
        // The model always ingests exactly the configured mel bins, and the
        // class count is stage-determined, not a config knob.
        cfg.model.input_mels = cfg.features.n_mels;
        cfg.model.n_classes = N_CONDITIONS;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            TrainError::Configuration(format!("cannot read config {}: {e}", path.display()))
        })?;
        PipelineConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.features.validate()?;
        self.model.validate()?;
        self.optim.validate()?;
        self.aeg.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    /// Canonical dump: every key in a fixed order, `Display`-formatted so
    /// that parsing it back reproduces this config exactly.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[features]");
        let _ = writeln!(s, "n_mels={}", self.features.n_mels);
        let _ = writeln!(s, "win_ms={}", self.features.win_ms);
        let _ = writeln!(s, "hop_ms={}", self.features.hop_ms);
        let _ = writeln!(s, "n_fft={}", self.features.n_fft);
        let _ = writeln!(s, "sample_rate={}", self.features.sample_rate);
        let _ = writeln!(s, "[model]");
        let c = self.model.channels;
        let _ = writeln!(s, "channels={},{},{},{}", c[0], c[1], c[2], c[3]);
        let b = self.model.blocks_per_stage;
        let _ = writeln!(s, "blocks={},{},{},{}", b[0], b[1], b[2], b[3]);
        let _ = writeln!(s, "se_reduction={}", self.model.se_reduction);
        let _ = writeln!(s, "embedding_dim={}", self.model.embedding_dim);
        let _ = writeln!(s, "[optim]");
        let _ = writeln!(s, "lr0={}", self.optim.lr0);
        let _ = writeln!(s, "decay={}", self.optim.decay);
        let _ = writeln!(s, "decay_every={}", self.optim.decay_every);
        let _ = writeln!(s, "beta1={}", self.optim.beta1);
        let _ = writeln!(s, "beta2={}", self.optim.beta2);
        let _ = writeln!(s, "eps={}", self.optim.eps);
        let _ = writeln!(s, "[aeg]");
        let _ = writeln!(s, "alpha={}", self.aeg.alpha);
        let _ = writeln!(s, "iter={}", self.aeg.iter);
        let _ = writeln!(s, "threshold={}", self.aeg.threshold);
        let _ = writeln!(s, "epsilon={}", self.aeg.epsilon);
        let _ = writeln!(
            s,
            "accept_below_threshold={}",
            self.aeg.accept_below_threshold
        );
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "pretrain_epochs={}", self.train.pretrain_epochs);
        let _ = writeln!(s, "finetune_epochs={}", self.train.finetune_epochs);
        let _ = writeln!(s, "distill_epochs={}", self.train.distill_epochs);
        let _ = writeln!(s, "batch_size={}", self.train.batch_size);
        let _ = writeln!(s, "ge2e_conditions={}", self.train.ge2e_conditions);
        let _ = writeln!(s, "ge2e_clips={}", self.train.ge2e_clips);
        let _ = writeln!(s, "n_adv={}", self.train.n_adv);
        let _ = writeln!(s, "gamma={}", self.train.gamma);
        let _ = writeln!(s, "temperature={}", self.train.temperature);
        let _ = writeln!(s, "augment={}", self.train.augment);
        let _ = writeln!(s, "snr_db={}", self.train.snr_db);
        let _ = writeln!(s, "clip_s={}", self.train.clip_s);
        let _ = writeln!(s, "[score]");
        let _ = writeln!(s, "mode={}", self.score_mode.as_str());
        let _ = writeln!(s, "[synth]");
        let _ = writeln!(s, "n_speakers={}", self.synth.n_speakers);
        let _ = writeln!(s, "clips_per_condition={}", self.synth.clips_per_condition);
        let _ = writeln!(s, "duration_s={}", self.synth.duration_s);
        let _ = writeln!(s, "sample_rate={}", self.synth.sample_rate);
        let _ = writeln!(s, "seed={}", self.synth.seed);
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "seed={}", self.run.seed);
        let _ = writeln!(s, "out_dir={}", self.run.out_dir);
        let _ = writeln!(s, "log_file={}", self.run.log_file);
        s
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.resolved_text().as_bytes());
        format!("{:x}", h.finalize())
    }

    /// Effective adversarial-set size for a training split of `n_train`
    /// clips: explicit n_adv, or a tenth of the split when left at 0.
    pub fn resolved_n_adv(&self, n_train: usize) -> usize {
        if self.train.n_adv > 0 {
            self.train.n_adv
        } else {
            (n_train / 10).max(1)
        }
    }
}
