//! Adam optimizer over plain parameter tensors.

use crate::tensor::Tensor;

/// Adam with bias correction. State rows are keyed by registration order,
/// so callers must pass parameters in a fixed order every step.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update. `sign` is +1 for descent, -1 for ascent
    /// (used by the adversarial probe's max player).
    pub fn step_signed(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], sign: f32) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            for p in params.iter() {
                self.m.push(vec![0.0; p.numel()]);
                self.v.push(vec![0.0; p.numel()]);
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((pd, &gd), (ms, vs)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *ms = self.beta1 * *ms + (1.0 - self.beta1) * gd;
                *vs = self.beta2 * *vs + (1.0 - self.beta2) * gd * gd;
                let mhat = *ms / bc1;
                let vhat = *vs / bc2;
                *pd -= sign * self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        self.step_signed(params, grads, 1.0);
    }
}
