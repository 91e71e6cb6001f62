//! Adam with bias correction and the stepped learning-rate schedule.

use crate::tensor::Tensor;

use super::TrainError;

#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: 0.0003,
            decay: 0.95,
            decay_every: 2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr0 > 0.0) {
            return Err(TrainError::Configuration(format!(
                "lr0 {} must be positive",
                self.lr0
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(TrainError::Configuration(format!(
                "decay {} outside (0, 1]",
                self.decay
            )));
        }
        if self.decay_every == 0 {
            return Err(TrainError::Configuration("decay_every must be >= 1".into()));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(TrainError::Configuration(format!(
                    "{name} {v} outside [0, 1)"
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(TrainError::Configuration("eps must be positive".into()));
        }
        Ok(())
    }
}

/// lr0 · decay^floor(epoch / decay_every); nonincreasing in epoch.
pub fn lr_at(epoch: usize, cfg: &OptimConfig) -> f64 {
    cfg.lr0 * cfg.decay.powi((epoch / cfg.decay_every) as i32)
}

struct Slot {
    name: String,
    param: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Owns first/second moment state for a fixed parameter list. A missing
/// gradient is treated as zero (the parameter still sees moment decay).
pub struct Adam {
    cfg: OptimConfig,
    slots: Vec<Slot>,
    t: u64,
}

impl Adam {
    pub fn new(params: Vec<(String, Tensor)>, cfg: OptimConfig) -> Adam {
        let slots = params
            .into_iter()
            .map(|(name, param)| {
                let n = param.numel();
                Slot {
                    name,
                    param,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Adam { cfg, slots, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all parameters, then gradients are cleared.
    pub fn step(&mut self, lr: f64) -> Result<(), TrainError> {
        self.t += 1;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for slot in &mut self.slots {
            let grad = slot.param.grad();
            let g = match &grad {
                Some(g) => g.as_slice(),
                None => continue,
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    name: slot.name.clone(),
                    step: self.t,
                });
            }
            let mut data = slot.param.to_vec();
            for i in 0..data.len() {
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g[i];
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            slot.param.set_data(&data);
            slot.param.zero_grad();
        }
        Ok(())
    }
}
