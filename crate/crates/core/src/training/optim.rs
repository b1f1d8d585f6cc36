//! Adaptive-moment optimizer and the cosine learning-rate schedule.

use std::collections::HashMap;

use ndarray::Array4;

use crate::tensor::{Gradients, ParamId, ParamStore, Real, Tape};

/// Cosine annealing: lr = 0.5·lr₀·(1 + cos(π·epoch/max_epochs)).
/// Endpoints are exact: lr₀ at epoch 0, lr₀/2 at the midpoint, 0 at the
/// end.
pub fn cosine_lr(epoch: usize, max_epochs: usize, base_lr: f64) -> f64 {
    assert!(max_epochs > 0 && epoch <= max_epochs, "epoch out of schedule range");
    if epoch == max_epochs {
        return 0.0;
    }
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * epoch as f64 / max_epochs as f64).cos())
}

/// Adam with bias correction; first/second moments are kept per parameter
/// in the training dtype. Update order follows parameter creation order,
/// so steps are deterministic.
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: HashMap<ParamId, Array4<T>>,
    v: HashMap<ParamId, Array4<T>>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Adam::new()
    }
}

impl<T: Real> Adam<T> {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: HashMap::new(), v: HashMap::new() }
    }

    /// Apply one update to every trainable parameter using the gradients
    /// from one backward pass.
    pub fn step(&mut self, tape: &Tape<T>, ps: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.t += 1;
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t));
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let eps = T::from_f64(self.eps);
        let lr_t = T::from_f64(lr);
        for id in ps.ids().collect::<Vec<_>>() {
            if !ps.entry(id).trainable {
                continue;
            }
            let g = grads.for_param(tape, ps, id);
            let m = self
                .m
                .entry(id)
                .or_insert_with(|| Array4::zeros(g.raw_dim()));
            m.zip_mut_with(&g, |m, &gv| *m = b1 * *m + (one - b1) * gv);
            let v = self
                .v
                .entry(id)
                .or_insert_with(|| Array4::zeros(g.raw_dim()));
            v.zip_mut_with(&g, |v, &gv| *v = b2 * *v + (one - b2) * gv * gv);
            let m = &self.m[&id];
            let v = &self.v[&id];
            let value = ps.value_mut(id);
            ndarray::Zip::from(value).and(m).and(v).for_each(|p, &m, &v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}
