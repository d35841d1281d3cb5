use super::graph::Gradients;
use super::matrix::Matrix;
use super::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Matrix,
    pub v: Matrix,
    pub t: u64,
}

/// Adam with per-parameter moment estimates and step counts. Groups updated
/// on different schedules each keep their own bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let slots = store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                AdamSlot {
                    m: Matrix::zeros(r, c),
                    v: Matrix::zeros(r, c),
                    t: 0,
                }
            })
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots,
        }
    }

    /// Updates exactly the parameters that have a gradient entry.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        for (id, g) in grads.iter() {
            let slot = &mut self.slots[id.index()];
            slot.t += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
            let p = store.get_mut(id);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(slot.m.data_mut())
                .zip(slot.v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
