//! In-memory checkpoints. The `lifelong` crate persists them to disk.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use sha2::{Digest, Sha256};

use super::{Branch, ModelConfig, ModelState};
use crate::corpus::DomainId;
use crate::tensor::Matrix;
use crate::{Error, Result};

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in d.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// A saved model `f_t`: every named parameter tensor plus the structure
/// needed to rebuild it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub time_step: usize,
    pub algorithm: String,
    pub config: ModelConfig,
    pub config_digest: String,
    pub init_seed: u64,
    pub adapters: Vec<DomainId>,
    pub expansions: Vec<DomainId>,
    pub active: Branch,
    pub step_counter: u64,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    /// SHA-256 over the config digest, tensor names, shapes and raw bits.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config_digest.as_bytes());
        for (name, m) in &self.tensors {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let d = h.finalize();
        let mut s = String::with_capacity(64);
        for b in d.iter() {
            let _ = write!(s, "{b:02x}");
        }
        s
    }
}

pub fn save_checkpoint(model: &ModelState, time_step: usize, algorithm: &str) -> Checkpoint {
    Checkpoint {
        time_step,
        algorithm: algorithm.into(),
        config: model.config.clone(),
        config_digest: model.config.digest(),
        init_seed: model.init_seed,
        adapters: model.adapter_order.clone(),
        expansions: model.expansion_order.clone(),
        active: model.active.clone(),
        step_counter: model.step_counter,
        tensors: model.params.iter().map(|(_, n, t)| (String::from(n), t.clone())).collect(),
    }
}

/// Rebuilds the model. Fails when the stored config digest does not match
/// the stored config, or when tensor names or shapes disagree with the
/// structure the config implies.
pub fn load_checkpoint(ckpt: &Checkpoint) -> Result<ModelState> {
    let digest = ckpt.config.digest();
    if digest != ckpt.config_digest {
        return Err(Error::Checkpoint(format!("config digest mismatch: stored {}, computed {digest}", ckpt.config_digest)));
    }
    let mut model = ModelState::init(ckpt.config.clone(), ckpt.init_seed)?;
    for d in &ckpt.adapters {
        model.add_adapter(d)?;
    }
    for d in &ckpt.expansions {
        model.expand_layers(d)?;
    }
    if model.params.len() != ckpt.tensors.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {}", model.params.len(), ckpt.tensors.len())));
    }
    for (name, value) in &ckpt.tensors {
        let id = model.params.find(name).ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        let slot = model.params.get_mut(id);
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}, expected {:?}", value.shape(), slot.shape())));
        }
        *slot = value.clone();
    }
    model.set_active(ckpt.active.clone()).map_err(|e| Error::Checkpoint(format!("{e}")))?;
    model.step_counter = ckpt.step_counter;
    Ok(model)
}
