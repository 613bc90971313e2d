//! Adam with global gradient-norm clipping.

use crate::numerics::params::ParamStore;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, clip_norm: f64) -> Self {
        let m = store
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        let v = store
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            m,
            v,
        }
    }

    /// One update. `grads` is aligned with the store's tensor slots; an
    /// aliased tensor has a single slot, so its accumulated gradient and
    /// moment state are shared by construction.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &mut [Vec<f64>]) {
        self.step += 1;
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            // A blown-up step must not poison the parameters (0 · NaN = NaN
            // would leak through the clip scale); drop it instead.
            eprintln!(
                "warning: skipping optimizer step {} with non-finite gradient norm",
                self.step
            );
            return;
        }
        if self.clip_norm > 0.0 && norm > self.clip_norm {
            let s = self.clip_norm / norm;
            for g in grads.iter_mut() {
                for e in g.iter_mut() {
                    *e *= s;
                }
            }
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, g) in grads.iter().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let w = &mut store.get_mut(crate::numerics::params::ParamId(idx)).data;
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
