//! Command-line surface driving the pipeline: corpus synthesis, the three
//! training stages, standalone attack generation, scoring, evaluation, and
//! the size-accounting table.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::attack::bim_generate;
use crate::config::PipelineConfig;
use crate::data::{write_corpus, Dataset, ProtocolEntry};
use crate::metrics::{det_points, eer, min_tdcf, read_scores, write_scores, Key, TdcfCosts};
use crate::model::checkpoint::load_checkpoint;
use crate::model::profile::count_params_macs;
use crate::model::ResNetSE;
use crate::train::{
    distill_student, finetune_adversarial, pretrain_ge2e, score_clips, AegMode, FeaturePipeline,
    TrainError, TrainLog,
};
use crate::audio::Waveform;

#[derive(Parser)]
#[command(
    name = "asdkit",
    about = "Anti-spoofing pipeline: GE2E pre-training, adversarial fine-tuning, distillation",
    version
)]
struct Cli {
    /// Key=value config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus with protocol and split files.
    Synth,
    /// GE2E pre-training of the teacher over spoofing conditions.
    Pretrain,
    /// Adversarial fine-tuning from the pretrained checkpoint.
    Finetune {
        /// Adversarial example generation mode.
        #[arg(long, value_parser = ["none", "static", "active"], default_value = "static")]
        aeg: String,
    },
    /// Distill the fine-tuned teacher into the channel-halved student.
    Distill,
    /// Standalone BIM generation over a pair list (target source per line).
    Attack {
        /// File of `utt_id1 utt_id2` pairs, same speaker.
        #[arg(long)]
        pairs: PathBuf,
        /// Checkpoint to attack (default: the pretrained teacher).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output directory for WAVs and the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score one protocol split with a trained model into a score file.
    Score {
        /// Checkpoint to score with.
        #[arg(long)]
        model: PathBuf,
        /// Protocol split: train, dev, or eval.
        #[arg(long, default_value = "eval")]
        split: String,
        /// Score file destination (default: scores_<split>.txt in out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report EER and min t-DCF for a score file.
    Evaluate {
        /// Score file to evaluate.
        #[arg(long)]
        scores: PathBuf,
    },
    /// Print the parameter and MAC table for teacher vs student.
    Info,
}

/// Parses and executes `argv`. Exit codes: 0 success, 1 runtime or
/// stage-order failure (one-line diagnostic on stderr), 2 usage error.
pub fn run_cli<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("asdkit: {e}");
            1
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth => "synth",
        Command::Pretrain => "pretrain",
        Command::Finetune { .. } => "finetune",
        Command::Distill => "distill",
        Command::Attack { .. } => "attack",
        Command::Score { .. } => "score",
        Command::Evaluate { .. } => "evaluate",
        Command::Info => "info",
    }
}

fn corpus_dir(cfg: &PipelineConfig) -> PathBuf {
    Path::new(&cfg.run.out_dir).join("corpus")
}

fn load_split(
    cfg: &PipelineConfig,
    split: &str,
) -> Result<Vec<(ProtocolEntry, Waveform)>, TrainError> {
    if !["train", "dev", "eval"].contains(&split) {
        return Err(TrainError::Configuration(format!(
            "unknown split {split:?}; expected train, dev, or eval"
        )));
    }
    let dir = corpus_dir(cfg);
    let protocol = dir.join(format!("protocol_{split}.txt"));
    if !protocol.exists() {
        return Err(TrainError::Contract(format!(
            "missing {}; run `asdkit synth` first",
            protocol.display()
        )));
    }
    let ds = Dataset::open(dir.join("wav"), &protocol)?;
    ds.entries
        .iter()
        .map(|e| Ok((e.clone(), ds.load_waveform(&e.utt_id)?)))
        .collect()
}

fn load_model(path: &Path, produced_by: &str) -> Result<ResNetSE, TrainError> {
    if !path.exists() {
        return Err(TrainError::Contract(format!(
            "missing checkpoint {}; run `asdkit {produced_by}` first",
            path.display()
        )));
    }
    Ok(load_checkpoint(path)?)
}

fn pipeline(cfg: &PipelineConfig) -> Result<FeaturePipeline, TrainError> {
    FeaturePipeline::new(
        cfg.features.clone(),
        cfg.train.augment,
        cfg.train.snr_db,
        cfg.train.clip_s,
    )
}

fn execute(cli: Cli) -> Result<(), TrainError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    let out = PathBuf::from(&cfg.run.out_dir);
    fs::create_dir_all(&out)?;
    let log = TrainLog::to_file(out.join(&cfg.run.log_file));
    // Every run is reconstructible from the log alone.
    log.note(&format!(
        "run {} seed {} config sha256 {}",
        command_name(&cli.command),
        cfg.run.seed,
        cfg.content_hash()
    ))?;
    for line in cfg.resolved_text().lines() {
        log.note(line)?;
    }

    match cli.command {
        Command::Synth => {
            let dir = corpus_dir(&cfg);
            let n = write_corpus(&dir, &cfg.synth)?;
            println!("synth: wrote {n} clips to {}", dir.display());
        }
        Command::Pretrain => {
            let train = load_split(&cfg, "train")?;
            let pipe = pipeline(&cfg)?;
            let model = ResNetSE::new(cfg.model.clone(), cfg.run.seed)?;
            let res = pretrain_ge2e(
                &model,
                &train,
                &pipe,
                &cfg.optim,
                cfg.train.pretrain_epochs,
                cfg.train.ge2e_conditions,
                cfg.train.ge2e_clips,
                &out,
                &log,
                cfg.run.seed,
            )?;
            println!(
                "pretrain: best epoch {} mean GE2E loss {:.6} -> {}",
                res.best_epoch,
                res.best_metric,
                res.checkpoint.display()
            );
        }
        Command::Finetune { aeg } => {
            let mode = AegMode::parse(&aeg).expect("clap restricts the mode values");
            let pretrained = load_model(&out.join("pretrain_best.ckpt"), "pretrain")?;
            let train = load_split(&cfg, "train")?;
            let dev = load_split(&cfg, "dev")?;
            let pipe = pipeline(&cfg)?;
            let n_adv = if mode == AegMode::None {
                0
            } else {
                cfg.resolved_n_adv(train.len())
            };
            let outcome = finetune_adversarial(
                &pretrained,
                &train,
                &dev,
                &pipe,
                &cfg.optim,
                &cfg.aeg,
                mode,
                n_adv,
                cfg.train.finetune_epochs,
                cfg.train.batch_size,
                cfg.score_mode,
                &out,
                &log,
                cfg.run.seed,
            )?;
            println!(
                "finetune[{}]: best epoch {} dev EER {:.2}% -> {}",
                mode.as_str(),
                outcome.result.best_epoch,
                outcome.result.best_metric * 100.0,
                outcome.result.checkpoint.display()
            );
        }
        Command::Distill => {
            let teacher = load_model(&out.join("finetune_best.ckpt"), "finetune")?;
            teacher.set_training(false);
            let train = load_split(&cfg, "train")?;
            let dev = load_split(&cfg, "dev")?;
            let pipe = pipeline(&cfg)?;
            let (student, res) = distill_student(
                &teacher,
                teacher.config.student_of(),
                &train,
                &dev,
                &pipe,
                &cfg.optim,
                cfg.train.temperature,
                cfg.train.gamma,
                cfg.train.distill_epochs,
                cfg.train.batch_size,
                cfg.score_mode,
                &out,
                &log,
                cfg.run.seed,
            )?;
            println!(
                "distill: student channels {:?}, best epoch {} dev EER {:.2}% -> {}",
                student.config.channels,
                res.best_epoch,
                res.best_metric * 100.0,
                res.checkpoint.display()
            );
        }
        Command::Attack { pairs, model, out: attack_out } => {
            let model_path = model.unwrap_or_else(|| out.join("pretrain_best.ckpt"));
            let net = load_model(&model_path, "pretrain")?;
            net.set_training(false);
            let pipe = pipeline(&cfg)?;
            let dir = corpus_dir(&cfg);
            let protocol = dir.join("protocol.txt");
            if !protocol.exists() {
                return Err(TrainError::Contract(format!(
                    "missing {}; run `asdkit synth` first",
                    protocol.display()
                )));
            }
            let ds = Dataset::open(dir.join("wav"), &protocol)?;
            let text = fs::read_to_string(&pairs)?;
            let mut accepted = Vec::new();
            let mut attempted = 0usize;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let mut it = line.split_whitespace();
                let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
                    return Err(TrainError::Configuration(format!(
                        "pair list line {}: expected two utterance ids, got {line:?}",
                        i + 1
                    )));
                };
                let w1 = ds.load_waveform(a)?;
                let w2 = ds.load_waveform(b)?;
                for w in [&w1, &w2] {
                    if w.sample_rate != cfg.features.sample_rate {
                        return Err(TrainError::Configuration(format!(
                            "corpus rate {} does not match features.sample_rate {}",
                            w.sample_rate, cfg.features.sample_rate
                        )));
                    }
                }
                attempted += 1;
                if let Some(s) = bim_generate(&net, &pipe.plan, &w1, &w2, (a, b), &cfg.aeg)? {
                    accepted.push(s);
                }
            }
            let dest = attack_out.unwrap_or_else(|| out.join("adv"));
            crate::attack::write_adv_sidecar(&dest, &accepted, &cfg.aeg)?;
            println!(
                "attack: accepted {} of {attempted} pairs -> {}",
                accepted.len(),
                dest.display()
            );
        }
        Command::Score { model, split, out: score_out } => {
            let net = load_model(&model, "pretrain")?;
            net.set_training(false);
            let clips = load_split(&cfg, &split)?;
            let pipe = pipeline(&cfg)?;
            let records = score_clips(&net, &pipe, &clips, cfg.score_mode)?;
            let dest = score_out.unwrap_or_else(|| out.join(format!("scores_{split}.txt")));
            write_scores(&dest, &records)?;
            println!("score: wrote {} records to {}", records.len(), dest.display());
        }
        Command::Evaluate { scores } => {
            let records = read_scores(&scores)?;
            let n_bona = records.iter().filter(|r| r.key == Key::Bonafide).count();
            let n_spoof = records.len() - n_bona;
            let sweep = det_points(&records)?.len();
            let eer_value = eer(&records)?;
            let tdcf = min_tdcf(&records, &TdcfCosts::default())?;
            println!("records: {} ({n_bona} bonafide, {n_spoof} spoof)", records.len());
            println!("sweep size: {sweep} thresholds");
            println!("EER: {:.2}%", eer_value * 100.0);
            println!("min t-DCF: {tdcf:.4}");
        }
        Command::Info => {
            let teacher = cfg.model.clone();
            let student = teacher.student_of();
            let clip = (cfg.synth.duration_s * cfg.features.sample_rate as f64).round() as usize;
            let t = cfg.features.n_frames(clip).unwrap_or(1).max(1);
            let tp = count_params_macs(&teacher, t);
            let sp = count_params_macs(&student, t);
            println!("{:<10} {:>12} {:>16}", "config", "params", format!("macs(T={t})"));
            println!("{:<10} {:>12} {:>16}", "teacher", tp.params, tp.macs);
            println!("{:<10} {:>12} {:>16}", "student", sp.params, sp.macs);
            println!(
                "{:<10} {:>12.3} {:>16.3}",
                "ratio",
                sp.params as f64 / tp.params as f64,
                sp.macs as f64 / tp.macs as f64
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> u8 {
        run_cli(std::iter::once("asdkit").chain(args.iter().copied()))
    }

    fn write_cfg(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("test.cfg");
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run(&["frobnicate"]), 2);
        assert_eq!(run(&["--bogus-flag"]), 2);
        assert_eq!(run(&[]), 2);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(&["--help"]), 0);
        assert_eq!(run(&["finetune", "--help"]), 0);
    }

    #[test]
    fn finetune_rejects_unknown_aeg_mode() {
        assert_eq!(run(&["finetune", "--aeg", "sometimes"]), 2);
    }

    #[test]
    fn stage_order_violation_exits_one() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_cfg(
            dir.path(),
            &format!("[run]\nout_dir={}\n", dir.path().join("runs").display()),
        );
        let cfg = cfg.to_str().unwrap();
        // No corpus yet: pretrain must fail with a stage-order diagnostic.
        assert_eq!(run(&["pretrain", "--config", cfg]), 1);
        // No pretrained checkpoint: finetune and distill must fail too.
        assert_eq!(run(&["finetune", "--config", cfg]), 1);
        assert_eq!(run(&["distill", "--config", cfg]), 1);
    }

    #[test]
    fn bad_config_file_exits_one() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_cfg(dir.path(), "[features]\nn_mels=zero\n");
        assert_eq!(run(&["info", "--config", cfg.to_str().unwrap()]), 1);
        assert_eq!(run(&["synth", "--config", dir.path().join("nope.cfg").to_str().unwrap()]), 1);
    }

    #[test]
    fn evaluate_reports_zero_eer_on_separated_scores() {
        let dir = tempfile::tempdir().unwrap();
        let scores = dir.path().join("scores.txt");
        let records = vec![
            crate::metrics::ScoreRecord {
                utt_id: "b1".into(),
                key: Key::Bonafide,
                score: 3.0,
            },
            crate::metrics::ScoreRecord {
                utt_id: "b2".into(),
                key: Key::Bonafide,
                score: 2.5,
            },
            crate::metrics::ScoreRecord {
                utt_id: "s1".into(),
                key: Key::Spoof,
                score: -1.0,
            },
            crate::metrics::ScoreRecord {
                utt_id: "s2".into(),
                key: Key::Spoof,
                score: -2.0,
            },
        ];
        write_scores(&scores, &records).unwrap();
        let cfg = write_cfg(
            dir.path(),
            &format!("[run]\nout_dir={}\n", dir.path().join("runs").display()),
        );
        assert_eq!(
            run(&[
                "evaluate",
                "--config",
                cfg.to_str().unwrap(),
                "--scores",
                scores.to_str().unwrap()
            ]),
            0
        );
    }

    #[test]
    fn synth_writes_corpus_and_logs_config() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("runs");
        let cfg = write_cfg(
            dir.path(),
            &format!(
                "[synth]\nn_speakers=2\nclips_per_condition=2\n[run]\nout_dir={}\n",
                out.display()
            ),
        );
        assert_eq!(run(&["synth", "--config", cfg.to_str().unwrap()]), 0);
        assert!(out.join("corpus/protocol.txt").exists());
        assert!(out.join("corpus/protocol_train.txt").exists());
        assert!(out.join("corpus/wav").read_dir().unwrap().count() == 28);
        let log = fs::read_to_string(out.join("train.log")).unwrap();
        assert!(log.contains("run synth"));
        assert!(log.contains("config sha256"));
        assert!(log.contains("# clips_per_condition=2"));
    }

    #[test]
    fn info_prints_ratio_table() {
        // Exit code only; the printed ratio itself is pinned by the size
        // accounting tests in the model module.
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_cfg(
            dir.path(),
            &format!("[run]\nout_dir={}\n", dir.path().join("runs").display()),
        );
        assert_eq!(run(&["info", "--config", cfg.to_str().unwrap()]), 0);
    }

    #[test]
    fn seed_flag_overrides_config() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("runs");
        let cfg = write_cfg(
            dir.path(),
            &format!(
                "[synth]\nn_speakers=2\nclips_per_condition=2\n[run]\nseed=5\nout_dir={}\n",
                out.display()
            ),
        );
        assert_eq!(run(&["synth", "--config", cfg.to_str().unwrap(), "--seed", "99"]), 0);
        let log = fs::read_to_string(out.join("train.log")).unwrap();
        assert!(log.contains("run synth seed 99"));
    }
}
