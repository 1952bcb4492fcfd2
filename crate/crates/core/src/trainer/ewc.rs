//! Online elastic weight consolidation.
//!
//! Penalty `(λ/2) Σ_i F_i (θ_i − θ*_i)²` with gradient `λ F_i (θ_i − θ*_i)`.
//! The diagonal Fisher is a decayed running mean of squared MLM gradients,
//! `F ← γF + (1−γ)ĝ²`, updated once per sampled batch.

use alloc::collections::BTreeMap;

use crate::autodiff::{Gradients, ParamId};
use crate::corpus::MaskedBatch;
use crate::model::ModelState;
use crate::tensor::Matrix;
use crate::{Error, Result};

use super::objective::objective;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EwcConfig {
    pub lambda: f64,
    pub gamma: f64,
    /// Batches sampled at each domain boundary to update the Fisher estimate.
    pub fisher_batches: usize,
}

impl Default for EwcConfig {
    fn default() -> Self {
        Self { lambda: 100.0, gamma: 0.99, fisher_batches: 32 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FisherState {
    pub lambda: f64,
    pub gamma: f64,
    fisher: BTreeMap<ParamId, Matrix>,
    anchor: Option<BTreeMap<ParamId, Matrix>>,
}

impl FisherState {
    pub fn new(cfg: &EwcConfig) -> Self {
        Self { lambda: cfg.lambda, gamma: cfg.gamma, fisher: BTreeMap::new(), anchor: None }
    }

    pub fn fisher(&self) -> &BTreeMap<ParamId, Matrix> {
        &self.fisher
    }

    pub fn has_anchor(&self) -> bool {
        self.anchor.is_some()
    }

    /// Folds squared gradients into the running estimate.
    pub fn accumulate(&mut self, grads: &Gradients) {
        let g = self.gamma;
        for (id, gr) in grads.iter() {
            let f = self.fisher.entry(*id).or_insert_with(|| Matrix::zeros(gr.rows(), gr.cols()));
            for (fv, gv) in f.data_mut().iter_mut().zip(gr.data()) {
                *fv = g * *fv + (1.0 - g) * gv * gv;
            }
        }
    }

    /// MLM gradient of `model` on `batch` (dropout off), folded in.
    pub fn accumulate_batch(&mut self, model: &ModelState, batch: &MaskedBatch, seed: u64) -> Result<()> {
        let obj = objective(model, batch, None, None, false, seed)?;
        let g = obj.tape.backward(obj.loss);
        self.accumulate(&g);
        Ok(())
    }

    /// Snapshots the parameters the Fisher estimate covers as `θ*`.
    pub fn set_anchor(&mut self, model: &ModelState) {
        let p = model.params();
        self.anchor = Some(self.fisher.keys().map(|id| (*id, p.get(*id).clone())).collect());
    }

    pub fn penalty(&self, model: &ModelState) -> Result<f64> {
        let anchor = self.anchor.as_ref().ok_or(Error::NoAnchor)?;
        let p = model.params();
        let mut total = 0.0;
        for (id, star) in anchor {
            let f = &self.fisher[id];
            for ((fv, sv), tv) in f.data().iter().zip(star.data()).zip(p.get(*id).data()) {
                total += fv * (tv - sv) * (tv - sv);
            }
        }
        Ok(0.5 * self.lambda * total)
    }

    /// Penalty gradient for the parameters `trainable` marks.
    pub fn penalty_gradient(&self, model: &ModelState, trainable: &[bool]) -> Result<Gradients> {
        let anchor = self.anchor.as_ref().ok_or(Error::NoAnchor)?;
        let p = model.params();
        let mut g = Gradients::default();
        for (id, star) in anchor {
            if !trainable[id.0] {
                continue;
            }
            let f = &self.fisher[id];
            let cur = p.get(*id);
            let data = f.data().iter().zip(star.data()).zip(cur.data()).map(|((fv, sv), tv)| self.lambda * fv * (tv - sv)).collect();
            g.accumulate(*id, &Matrix::from_vec(cur.rows(), cur.cols(), data));
        }
        Ok(g)
    }
}
