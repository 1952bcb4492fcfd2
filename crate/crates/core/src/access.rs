//! Corpus access logging.
//!
//! Lifelong pretraining may read only the current domain's corpus; earlier
//! domains are reachable only through the replay memory, and fine-tuning may
//! read no pretraining corpus at all. Every corpus read in the trainer and the
//! evaluation harness goes through an [`AccessLog`], and
//! [`AccessLog::violations`] checks the recorded reads against those rules.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::corpus::{DomainCorpus, DomainId, TokenSequence};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Phase {
    Idle,
    /// Training on the named domain.
    Pretrain(DomainId),
    /// End-of-domain bookkeeping (memory population, Fisher estimation).
    Boundary(DomainId),
    /// Offline multi-task baseline; may read every domain.
    Offline,
    Finetune,
    /// Held-out perplexity evaluation.
    Evaluate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccessRecord {
    pub phase: Phase,
    pub domain: DomainId,
    pub split: Split,
    pub indices: Range<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccessLog {
    phase: Option<Phase>,
    records: Vec<AccessRecord>,
}

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn phase(&self) -> Phase {
        self.phase.clone().unwrap_or(Phase::Idle)
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = Some(phase);
    }

    pub fn records(&self) -> &[AccessRecord] {
        &self.records
    }

    pub fn record(&mut self, domain: &DomainId, split: Split, indices: Range<usize>) {
        self.records.push(AccessRecord { phase: self.phase(), domain: domain.clone(), split, indices });
    }

    /// Reads one training sequence.
    pub fn train<'c>(&mut self, corpus: &'c DomainCorpus, index: usize) -> &'c TokenSequence {
        self.record(&corpus.domain_id, Split::Train, index..index + 1);
        &corpus.train[index]
    }

    /// Reads a whole split.
    pub fn split<'c>(&mut self, corpus: &'c DomainCorpus, split: Split) -> &'c [TokenSequence] {
        let seqs = match split {
            Split::Train => &corpus.train,
            Split::Heldout => &corpus.heldout,
        };
        self.record(&corpus.domain_id, split, 0..seqs.len());
        seqs
    }

    /// Human-readable descriptions of every read that breaks the protocol.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.records {
            let bad = match &r.phase {
                Phase::Pretrain(d) | Phase::Boundary(d) => *d != r.domain,
                Phase::Offline => false,
                Phase::Evaluate => r.split != Split::Heldout,
                Phase::Finetune | Phase::Idle => true,
            };
            if bad {
                out.push(format!("{:?} read {:?} split of `{}` at {:?}", r.phase, r.split, r.domain, r.indices));
            }
        }
        out
    }

    /// Training indices read more than once while pretraining, per domain.
    pub fn repeated_train_reads(&self) -> BTreeMap<DomainId, usize> {
        let mut seen: BTreeMap<DomainId, BTreeMap<usize, usize>> = BTreeMap::new();
        for r in &self.records {
            if let (Phase::Pretrain(_), Split::Train) = (&r.phase, r.split) {
                let m = seen.entry(r.domain.clone()).or_default();
                for i in r.indices.clone() {
                    *m.entry(i).or_insert(0) += 1;
                }
            }
        }
        seen.into_iter()
            .filter_map(|(d, m)| {
                let repeats = m.values().filter(|c| **c > 1).count();
                (repeats > 0).then_some((d, repeats))
            })
            .collect()
    }

    pub fn merge(&mut self, other: &AccessLog) {
        self.records.extend(other.records.iter().cloned());
    }
}
