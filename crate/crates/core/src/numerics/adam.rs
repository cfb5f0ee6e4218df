use serde::{Deserialize, Serialize};

use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with a constant learning rate over a fixed list of parameter slots.
///
/// Slots are addressed by index; the caller keeps the order stable for the
/// optimizer's lifetime.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; sizes.len()],
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// One update of slot `slot`. Bias correction uses the slot's own step
    /// count, so slots that sit out some steps are corrected consistently.
    pub fn step(&mut self, slot: usize, param: &mut [f64], grad: &[f64]) -> Result<(), NumericsError> {
        if slot >= self.m.len() {
            return Err(NumericsError::IndexOutOfRange { index: slot, len: self.m.len() });
        }
        if param.len() != self.m[slot].len() || grad.len() != param.len() {
            return Err(NumericsError::Dimension(format!(
                "adam slot {slot} holds {} values; got param {} / grad {}",
                self.m[slot].len(),
                param.len(),
                grad.len()
            )));
        }
        self.steps[slot] += 1;
        let t = self.steps[slot] as i32;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..param.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}
