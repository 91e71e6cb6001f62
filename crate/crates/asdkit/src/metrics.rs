//! Countermeasure scoring metrics: DET threshold sweep, EER, and the
//! normalized minimum t-DCF, plus the score-file format.
//!
//! Conventions pinned for oracle tests: a score ≥ τ is accepted as bona
//! fide; Pmiss(τ) is the bona fide fraction below τ, Pfa(τ) the spoof
//! fraction at or above τ; the sweep covers every distinct score plus ±∞
//! sentinels, with consecutive duplicate (Pmiss, Pfa) points collapsed;
//! EER interpolates linearly between the points bracketing the sign change
//! of Pmiss − Pfa.

use std::fmt;
use std::fs;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    /// Inputs outside the metric's domain (e.g. single-class score sets).
    #[error("domain error: {0}")]
    Domain(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// Invalid cost configuration.
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Key {
    Bonafide,
    Spoof,
}

impl Key {
    pub fn as_str(self) -> &'static str {
        match self {
            Key::Bonafide => "bonafide",
            Key::Spoof => "spoof",
        }
    }

    pub fn parse(s: &str) -> Option<Key> {
        match s {
            "bonafide" => Some(Key::Bonafide),
            "spoof" => Some(Key::Spoof),
            _ => None,
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct ScoreRecord {
    pub utt_id: String,
    pub key: Key,
    pub score: f64,
}

/// Precomputed tandem cost constants. Deriving them from ASV operating
/// points is out of scope; the defaults are placeholders (pure miss/false-
/// alarm sum), not the official challenge constants.
#[derive(Debug, Clone, Copy)]
pub struct TdcfCosts {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for TdcfCosts {
    fn default() -> Self {
        TdcfCosts {
            c0: 0.0,
            c1: 1.0,
            c2: 1.0,
        }
    }
}

impl TdcfCosts {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.c0 < 0.0 || self.c1 < 0.0 || self.c2 < 0.0 {
            return Err(MetricsError::Configuration(format!(
                "t-DCF costs must be nonnegative: ({}, {}, {})",
                self.c0, self.c1, self.c2
            )));
        }
        if self.c1 == 0.0 && self.c2 == 0.0 {
            return Err(MetricsError::Configuration(
                "at least one of C1, C2 must be positive".into(),
            ));
        }
        if self.c0 + self.c1.min(self.c2) == 0.0 {
            return Err(MetricsError::Configuration(
                "t-DCF normalization denominator is zero".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Sweeps every distinct score plus ±∞ sentinels.
pub fn det_points(scores: &[ScoreRecord]) -> Result<Vec<DetPoint>, MetricsError> {
    let mut bona: Vec<f64> = Vec::new();
    let mut spoof: Vec<f64> = Vec::new();
    for r in scores {
        if !r.score.is_finite() {
            return Err(MetricsError::Domain(format!(
                "non-finite score for {}",
                r.utt_id
            )));
        }
        match r.key {
            Key::Bonafide => bona.push(r.score),
            Key::Spoof => spoof.push(r.score),
        }
    }
    if bona.is_empty() || spoof.is_empty() {
        return Err(MetricsError::Domain(format!(
            "need both classes: {} bonafide, {} spoof",
            bona.len(),
            spoof.len()
        )));
    }
    bona.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);

    let mut thresholds: Vec<f64> = bona.iter().chain(spoof.iter()).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut sweep = Vec::with_capacity(thresholds.len() + 2);
    sweep.push(f64::NEG_INFINITY);
    sweep.extend(thresholds);
    sweep.push(f64::INFINITY);

    let count_below = |sorted: &[f64], tau: f64| sorted.partition_point(|s| *s < tau);
    let mut points: Vec<DetPoint> = Vec::with_capacity(sweep.len());
    for tau in sweep {
        let p_miss = count_below(&bona, tau) as f64 / bona.len() as f64;
        let p_fa = (spoof.len() - count_below(&spoof, tau)) as f64 / spoof.len() as f64;
        if let Some(last) = points.last() {
            if last.p_miss == p_miss && last.p_fa == p_fa {
                continue;
            }
        }
        points.push(DetPoint {
            threshold: tau,
            p_miss,
            p_fa,
        });
    }
    Ok(points)
}

/// Equal error rate by linear interpolation at the Pmiss/Pfa crossing.
pub fn eer(scores: &[ScoreRecord]) -> Result<f64, MetricsError> {
    let points = det_points(scores)?;
    // Pmiss − Pfa is nondecreasing from −1 to +1 along the sweep.
    let mut prev = points[0];
    for p in &points {
        let diff = p.p_miss - p.p_fa;
        if diff == 0.0 {
            return Ok(p.p_miss);
        }
        if diff > 0.0 {
            let d_prev = prev.p_miss - prev.p_fa;
            let t = -d_prev / (diff - d_prev);
            return Ok(prev.p_miss + t * (p.p_miss - prev.p_miss));
        }
        prev = *p;
    }
    unreachable!("sweep always reaches Pmiss=1, Pfa=0");
}

/// Normalized minimum t-DCF over the same threshold sweep.
pub fn min_tdcf(scores: &[ScoreRecord], costs: &TdcfCosts) -> Result<f64, MetricsError> {
    costs.validate()?;
    let denom = costs.c0 + costs.c1.min(costs.c2);
    let points = det_points(scores)?;
    let best = points
        .iter()
        .map(|p| (costs.c0 + costs.c1 * p.p_miss + costs.c2 * p.p_fa) / denom)
        .fold(f64::INFINITY, f64::min);
    Ok(best)
}

/// Reads "utt_id key score" lines; blank lines are skipped.
pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>, MetricsError> {
    let text = fs::read_to_string(path.as_ref())?;
    parse_scores(&text)
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreRecord>, MetricsError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(MetricsError::Parse {
                line: lineno,
                msg: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let key = Key::parse(fields[1]).ok_or_else(|| MetricsError::Parse {
            line: lineno,
            msg: format!("unknown key {:?} (want bonafide|spoof)", fields[1]),
        })?;
        let score: f64 = fields[2].parse().map_err(|_| MetricsError::Parse {
            line: lineno,
            msg: format!("bad score {:?}", fields[2]),
        })?;
        if !score.is_finite() {
            return Err(MetricsError::Parse {
                line: lineno,
                msg: format!("non-finite score {score}"),
            });
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(MetricsError::Parse {
                line: lineno,
                msg: format!("duplicate utterance id {:?}", fields[0]),
            });
        }
        out.push(ScoreRecord {
            utt_id: fields[0].to_string(),
            key,
            score,
        });
    }
    Ok(out)
}

/// Writes records with 17 significant digits so the round-trip is lossless.
pub fn write_scores(
    path: impl AsRef<Path>,
    records: &[ScoreRecord],
) -> Result<(), MetricsError> {
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if !seen.insert(r.utt_id.as_str()) {
            return Err(MetricsError::Domain(format!(
                "duplicate utterance id {:?}",
                r.utt_id
            )));
        }
    }
    let mut text = String::new();
    for r in records {
        text.push_str(&format!("{} {} {:.16e}\n", r.utt_id, r.key, r.score));
    }
    fs::write(path.as_ref(), text)?;
    Ok(())
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    fn score_set() -> impl Strategy<Value = Vec<ScoreRecord>> {
        // Coarse grid scores force ties within and across classes.
        (1usize..40, 1usize..40).prop_flat_map(|(nb, ns)| {
            (
                proptest::collection::vec(-50i64..=50, nb),
                proptest::collection::vec(-50i64..=50, ns),
            )
                .prop_map(|(b, s)| {
                    let mut out = Vec::new();
                    for (i, v) in b.iter().enumerate() {
                        out.push(ScoreRecord {
                            utt_id: format!("b{i}"),
                            key: Key::Bonafide,
                            score: *v as f64 / 10.0,
                        });
                    }
                    for (i, v) in s.iter().enumerate() {
                        out.push(ScoreRecord {
                            utt_id: format!("s{i}"),
                            key: Key::Spoof,
                            score: *v as f64 / 10.0,
                        });
                    }
                    out
                })
        })
    }

    proptest! {
        #[test]
        fn eer_is_a_rate_and_rank_invariant(records in score_set(),
                                            a in 0.1f64..4.0, b in -3.0f64..3.0) {
            let e = eer(&records).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            let mapped: Vec<ScoreRecord> = records
                .iter()
                .map(|r| ScoreRecord {
                    utt_id: r.utt_id.clone(),
                    key: r.key,
                    score: a * r.score + b,
                })
                .collect();
            prop_assert_eq!(eer(&mapped).unwrap(), e);
        }

        #[test]
        fn min_tdcf_is_bounded_and_rank_invariant(records in score_set(),
                                                  c0 in 0.0f64..2.0,
                                                  c1 in 0.1f64..3.0,
                                                  c2 in 0.1f64..3.0) {
            let costs = TdcfCosts { c0, c1, c2 };
            let t = min_tdcf(&records, &costs).unwrap();
            // Accepting or rejecting everything bounds the minimum above.
            let all_accept = (c0 + c2) / (c0 + c1.min(c2));
            let all_reject = (c0 + c1) / (c0 + c1.min(c2));
            prop_assert!(t >= 0.0);
            prop_assert!(t <= all_accept.min(all_reject) + 1e-12);
            let mapped: Vec<ScoreRecord> = records
                .iter()
                .map(|r| ScoreRecord {
                    utt_id: r.utt_id.clone(),
                    key: r.key,
                    score: (r.score / 3.0).tanh(),
                })
                .collect();
            prop_assert_eq!(min_tdcf(&mapped, &costs).unwrap(), t);
        }

        #[test]
        fn perfect_separation_gives_zero_eer(gap in 0.1f64..5.0, n in 1usize..20) {
            let mut records = Vec::new();
            for i in 0..n {
                records.push(ScoreRecord {
                    utt_id: format!("b{i}"),
                    key: Key::Bonafide,
                    score: gap + i as f64,
                });
                records.push(ScoreRecord {
                    utt_id: format!("s{i}"),
                    key: Key::Spoof,
                    score: -(gap + i as f64),
                });
            }
            prop_assert_eq!(eer(&records).unwrap(), 0.0);
        }
    }
}
