//! GE2E batch sampling: N condition classes, M clips each, without
//! replacement inside a batch. Conditions stand in for GE2E's "speakers".

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::data::{Condition, ProtocolEntry};

use super::TrainError;

/// Returns indices into `clips`, grouped class-major: the first M rows are
/// one condition, the next M another, matching the GE2E loss layout.
pub fn sample_ge2e_batch(
    clips: &[(ProtocolEntry, Waveform)],
    n_conditions: usize,
    m_clips: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, TrainError> {
    if n_conditions < 2 || m_clips < 2 {
        return Err(TrainError::Configuration(format!(
            "ge2e batch needs N >= 2 and M >= 2, got N={n_conditions}, M={m_clips}"
        )));
    }
    let mut by_condition: std::collections::BTreeMap<Condition, Vec<usize>> = Default::default();
    for (i, (e, _)) in clips.iter().enumerate() {
        by_condition.entry(e.condition).or_default().push(i);
    }
    if by_condition.len() < n_conditions {
        return Err(TrainError::Configuration(format!(
            "dataset has {} condition classes, ge2e batch wants {n_conditions}",
            by_condition.len()
        )));
    }
    for (c, idxs) in &by_condition {
        if idxs.len() < m_clips {
            return Err(TrainError::Configuration(format!(
                "condition {} has {} clips, ge2e batch wants {m_clips}",
                c.attack_str(),
                idxs.len()
            )));
        }
    }
    let mut conditions: Vec<&Condition> = by_condition.keys().collect();
    if conditions.len() > n_conditions {
        conditions.shuffle(rng);
        conditions.truncate(n_conditions);
        conditions.sort();
    }
    let mut batch = Vec::with_capacity(n_conditions * m_clips);
    for c in conditions {
        let mut idxs = by_condition[c].clone();
        idxs.shuffle(rng);
        batch.extend_from_slice(&idxs[..m_clips]);
    }
    Ok(batch)
}
