//! Adaptive-moment optimizer over named parameter sets.

use std::collections::BTreeMap;

/// Adam with bias-corrected first and second moments, one slot per named
/// parameter. Slots are created lazily on first update.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    slots: BTreeMap<String, Slot>,
}

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Adam {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Advances the shared step counter; call once per batch, before the
    /// per-parameter updates of that batch.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one update to `data` in place.
    pub fn update(&mut self, name: &str, data: &mut [f64], grad: &[f64]) {
        assert_eq!(data.len(), grad.len(), "gradient size mismatch for {name}");
        assert!(self.step > 0, "begin_step must run before update");
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![0.0; data.len()],
            v: vec![0.0; data.len()],
        });
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..data.len() {
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * grad[i];
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
