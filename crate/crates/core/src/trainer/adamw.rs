use crate::numerics::{Grads, ParamStore};

/// Adam with decoupled weight decay.
///
/// One step on parameter `p` with gradient `g`:
///
/// ```text
/// p ← p − lr·wd·p            (only where the store marks decay)
/// m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²
/// p ← p − lr · (m/(1−β₁ᵗ)) / (√(v/(1−β₂ᵗ)) + ε)
/// ```
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Grads,
    v: Grads,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore, lr: f64, weight_decay: f64, betas: (f64, f64), eps: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            m: Grads::zeros_like(params),
            v: Grads::zeros_like(params),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powf(self.t as f64);
        let bc2 = 1.0 - self.beta2.powf(self.t as f64);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let decay = if params.decays(id) {
                self.lr * self.weight_decay
            } else {
                0.0
            };
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            let v = self.v.get_mut(id);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] -= decay * p[i];
                p[i] -= self.lr * update;
            }
        }
    }
}

/// Rescale `grads` so its global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
