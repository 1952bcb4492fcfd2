//! Exact forward/backward pass accounting.
//!
//! One count is one model pass over one logical batch, regardless of how many
//! micro-batches it was split into. With `b` stream steps, `r = ⌊b/k⌋` replay
//! events and `d = ⌊b/k′⌋` stream distillation events:
//!
//! | algorithm                                 | forward            | backward     |
//! |-------------------------------------------|--------------------|--------------|
//! | sequential, task-specific, MTL, adapter, layer expansion, EWC | `b` | `b` |
//! | ER                                        | `b + r`            | `b + r`      |
//! | logit / rep KD, any KD with `k′ > 1`      | `b + 2r + d`       | `b + r`      |
//! | contrastive, SEED, SEED-logit (`k′ = 1`)  | `3b + 3r`          | `2b + 2r`    |
//!
//! The last row carries the extra SimCSE view on every batch. EWC's Fisher
//! passes are tracked separately in [`CostLedger::aux`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::Algorithm;
use crate::corpus::DomainId;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PassCounts {
    pub forward: u64,
    pub backward: u64,
}

impl PassCounts {
    pub fn total(&self) -> u64 {
        self.forward + self.backward
    }

    pub fn add(&mut self, other: PassCounts) {
        self.forward += other.forward;
        self.backward += other.backward;
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostLedger {
    /// Training passes per domain, in stream order.
    pub per_domain: Vec<(DomainId, PassCounts)>,
    /// Passes outside the training loop (Fisher estimation), per domain.
    pub aux: Vec<(DomainId, PassCounts)>,
}

impl CostLedger {
    pub fn total(&self) -> PassCounts {
        let mut t = PassCounts::default();
        for (_, c) in &self.per_domain {
            t.add(*c);
        }
        t
    }

    /// Sum over every domain after the first, the quantity the closed form
    /// describes.
    pub fn after_first(&self) -> PassCounts {
        let mut t = PassCounts::default();
        for (_, c) in self.per_domain.iter().skip(1) {
            t.add(*c);
        }
        t
    }
}

/// Pass counts the schedule implies for `b` stream steps.
pub fn cost_closed_form(algorithm: Algorithm, replay_every: usize, distill_every: usize, b: u64) -> Result<PassCounts> {
    if b == 0 {
        return Err(Error::Config("closed form needs b > 0".into()));
    }
    if replay_every == 0 || distill_every == 0 {
        return Err(Error::Config("replay and distillation intervals must be >= 1".into()));
    }
    let r = b / replay_every as u64;
    let d = b / distill_every as u64;
    use Algorithm::*;
    Ok(match algorithm {
        Sequential | TaskSpecific | Mtl | Adapter | LayerExpand | Ewc => PassCounts { forward: b, backward: b },
        Er => PassCounts { forward: b + r, backward: b + r },
        LogitKd | RepKd => PassCounts { forward: b + 2 * r + d, backward: b + r },
        ContrastKd | SeedKd | SeedLogitKd if distill_every == 1 => PassCounts { forward: 3 * b + 3 * r, backward: 2 * b + 2 * r },
        ContrastKd | SeedKd | SeedLogitKd => PassCounts { forward: b + 2 * r + d, backward: b + r },
    })
}

/// Checks instrumented counts against the closed form; the error lists every
/// differing field.
pub fn verify_ledger(observed: PassCounts, expected: PassCounts) -> core::result::Result<(), String> {
    let mut diffs = Vec::new();
    if observed.forward != expected.forward {
        diffs.push(format!("forward: counted {} expected {}", observed.forward, expected.forward));
    }
    if observed.backward != expected.backward {
        diffs.push(format!("backward: counted {} expected {}", observed.backward, expected.backward));
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(diffs.join("; "))
    }
}
