//! Training objectives: the generalized end-to-end (GE2E) speaker loss,
//! classification negative log-likelihood, and the distillation loss.
//!
//! GE2E batches are speaker-major: embeddings arrive as [N·M, D] where rows
//! j·M..(j+1)·M belong to speaker j. The positive similarity of an utterance
//! uses the leave-one-out centroid of its own speaker; similarities to other
//! speakers use full centroids. Scaled similarities w·cos + b feed a softmax
//! over speakers and the loss is the mean negative log-likelihood.

use crate::tensor::{Tensor, TensorError};

/// Stabilizer added to the norm product in every cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Learnable scale and offset applied to GE2E cosine similarities.
#[derive(Debug, Clone)]
pub struct Ge2eHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl Ge2eHead {
    pub fn new() -> Ge2eHead {
        Ge2eHead {
            w: Tensor::from_vec(&[1], vec![10.0]).unwrap().trainable(),
            b: Tensor::from_vec(&[1], vec![-5.0]).unwrap().trainable(),
        }
    }

    /// Keeps the similarity scale positive; call after each optimizer step.
    pub fn clamp_w(&self) {
        let v = self.w.item();
        if v < 1e-6 {
            self.w.set_data(&[1e-6]);
        }
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        vec![
            ("ge2e.w".into(), self.w.clone()),
            ("ge2e.b".into(), self.b.clone()),
        ]
    }
}

impl Default for Ge2eHead {
    fn default() -> Self {
        Ge2eHead::new()
    }
}

fn check_ge2e_shape(
    embeddings: &Tensor,
    n_speakers: usize,
    m_utts: usize,
) -> Result<usize, TensorError> {
    if n_speakers < 2 || m_utts < 2 {
        return Err(TensorError::Domain(format!(
            "ge2e needs >= 2 speakers and >= 2 utterances each, got N={n_speakers}, M={m_utts}"
        )));
    }
    let s = embeddings.shape();
    if s.len() != 2 || s[0] != n_speakers * m_utts {
        return Err(TensorError::Dimension(format!(
            "ge2e embeddings shape {s:?}, want [{} , D]",
            n_speakers * m_utts
        )));
    }
    Ok(s[1])
}

/// Scaled similarity matrix [N·M, N]: entry (j·M+i, k) compares utterance i
/// of speaker j against centroid k, leave-one-out when k == j.
pub fn ge2e_similarity(
    embeddings: &Tensor,
    n_speakers: usize,
    m_utts: usize,
    w: &Tensor,
    b: &Tensor,
) -> Result<Tensor, TensorError> {
    let d = check_ge2e_shape(embeddings, n_speakers, m_utts)?;
    let sums = embeddings
        .reshape(&[n_speakers, m_utts, d])?
        .reduce_sum(&[1])?;
    let centroids = sums.scale(1.0 / m_utts as f64);
    let cos_all = embeddings.cosine_cross(&centroids, COSINE_EPS)?;
    let loo = sums
        .repeat_rows(m_utts)?
        .sub(embeddings)?
        .scale(1.0 / (m_utts - 1) as f64);
    let cos_own = embeddings.cosine_paired(&loo, COSINE_EPS)?;
    let own_col: Vec<usize> = (0..n_speakers * m_utts).map(|r| r / m_utts).collect();
    let cos = cos_all.replace_per_row(&own_col, &cos_own)?;
    cos.mul_scalar_tensor(w)?.add_scalar_tensor(b)
}

/// Mean GE2E loss over the batch.
pub fn ge2e_loss(
    embeddings: &Tensor,
    n_speakers: usize,
    m_utts: usize,
    w: &Tensor,
    b: &Tensor,
) -> Result<Tensor, TensorError> {
    let sim = ge2e_similarity(embeddings, n_speakers, m_utts, w, b)?;
    let targets: Vec<usize> = (0..n_speakers * m_utts).map(|r| r / m_utts).collect();
    nll_loss(&sim, &targets)
}

/// Mean negative log-likelihood of logits [B,K] against integer targets.
pub fn nll_loss(logits: &Tensor, targets: &[usize]) -> Result<Tensor, TensorError> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(TensorError::Dimension(format!(
            "nll_loss expects logits [B,K], got {s:?}"
        )));
    }
    let (b, k) = (s[0], s[1]);
    if targets.len() != b {
        return Err(TensorError::Dimension(format!(
            "nll_loss got {} targets for batch of {b}",
            targets.len()
        )));
    }
    for (i, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(TensorError::Contract(format!(
                "label {t} out of range for {k} classes (row {i})"
            )));
        }
    }
    Ok(logits
        .log_softmax(1)?
        .take_per_row(targets)?
        .reduce_mean(&[0])?
        .neg())
}

/// Distillation objective: gamma·T²·KL(teacher ‖ student) + (1−gamma)·NLL,
/// with both distributions softened by the temperature and the teacher
/// detached from the graph. gamma == 0 returns the plain NLL unchanged.
pub fn kd_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    targets: &[usize],
    temperature: f64,
    gamma: f64,
) -> Result<Tensor, TensorError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(TensorError::Domain(format!(
            "distillation weight gamma {gamma} outside [0, 1]"
        )));
    }
    if !(temperature > 0.0) {
        return Err(TensorError::Domain(format!(
            "distillation temperature {temperature} must be positive"
        )));
    }
    if student_logits.shape() != teacher_logits.shape() {
        return Err(TensorError::Dimension(format!(
            "student logits {:?} and teacher logits {:?} differ",
            student_logits.shape(),
            teacher_logits.shape()
        )));
    }
    let hard = nll_loss(student_logits, targets)?;
    if gamma == 0.0 {
        return Ok(hard);
    }
    let lpt = teacher_logits
        .detach()
        .scale(1.0 / temperature)
        .log_softmax(1)?;
    let lps = student_logits.scale(1.0 / temperature).log_softmax(1)?;
    let kl = lpt
        .exp()
        .mul(&lpt.sub(&lps)?)?
        .reduce_sum(&[1])?
        .reduce_mean(&[0])?;
    kl.scale(temperature * temperature * gamma)
        .add(&hard.scale(1.0 - gamma))
}
