//! Adam with decoupled weight decay.

use alloc::collections::BTreeMap;

use crate::autodiff::{Gradients, ParamId};
use crate::model::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    moments: BTreeMap<ParamId, (Matrix, Matrix)>,
    t: u64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, moments: BTreeMap::new(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates exactly the tensors present in `grads`; everything else is
    /// left untouched, bit for bit. Weight decay applies to matrices with
    /// more than one row (weights and embeddings, not biases or gains).
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (id, g) in grads.iter() {
            let p = params.get_mut(*id);
            let (m, v) = self.moments.entry(*id).or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            let decay = if p.rows() > 1 { self.weight_decay } else { 0.0 };
            for (((pv, mv), vv), gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = (*mv / bc1) / (libm::sqrt(*vv / bc2) + self.eps);
                *pv -= lr * (update + decay * *pv);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let n = grads.global_norm();
    if n > max_norm {
        grads.scale(max_norm / n);
    }
}
