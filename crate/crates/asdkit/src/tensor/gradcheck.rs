//! Central-difference gradient verification.
//!
//! The checker evaluates a scalar-valued tensor function at `x ± h` one
//! coordinate at a time and compares the quotient against the tape
//! gradient. The relative-error denominator is floored at 1e-6 so
//! near-zero gradients compare absolutely instead of blowing up.

use super::{no_grad, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// max over coordinates of |g_tape − g_fd| / max(1e-6, |g_tape|, |g_fd|)
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
}

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// `f` must be deterministic and scalar-valued; it is re-evaluated 2·numel
/// times with recording disabled.
pub fn grad_check(
    f: impl Fn(&Tensor) -> Tensor,
    x: &Tensor,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError> {
    let probe = x.detach();
    probe.set_requires_grad(true);
    let y = f(&probe);
    y.backward()?;
    let analytic = probe.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let shape = x.shape().to_vec();
    let base = x.to_vec();
    let mut max_rel_err: f64 = 0.0;
    for i in 0..base.len() {
        let eval = |delta: f64| -> Result<f64, TensorError> {
            let mut d = base.clone();
            d[i] += delta;
            let t = Tensor::from_vec(&shape, d)?;
            Ok(no_grad(|| f(&t)).item())
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        let g = analytic[i];
        let rel = (g - fd).abs() / (1e-6f64).max(g.abs()).max(fd.abs());
        max_rel_err = max_rel_err.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_err,
        pass: max_rel_err <= tol,
        checked: base.len(),
    })
}
