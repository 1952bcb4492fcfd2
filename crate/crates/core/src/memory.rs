//! Domain-balanced replay memory and the teacher-representation queue.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::corpus::{DomainCorpus, DomainId, TokenSequence};
use crate::rng::{derive_seed, sample_without_replacement, seeded};
use crate::tensor::{l2_norm, Matrix};
use crate::{Error, Result};

/// Tolerance on `‖v‖ = 1` for queue entries.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Fixed-capacity store of raw training sequences, rebalanced at every domain
/// boundary so each seen domain holds `⌊|M|/t⌋` or `⌈|M|/t⌉` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayMemory {
    capacity: usize,
    entries: Vec<(DomainId, TokenSequence)>,
    seen: Vec<DomainId>,
}

/// What a rebalance did.
#[derive(Clone, Debug, PartialEq)]
pub struct RebalanceReport {
    pub quotas: Vec<(DomainId, usize)>,
    /// Set when the finished domain had fewer training sequences than its quota.
    pub shortfall: Option<usize>,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay memory capacity must be >= 1".into()));
        }
        Ok(Self { capacity, entries: Vec::new(), seen: Vec::new() })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(DomainId, TokenSequence)] {
        &self.entries
    }

    pub fn seen_domains(&self) -> &[DomainId] {
        &self.seen
    }

    /// Entry count per seen domain, in first-seen order.
    pub fn counts(&self) -> Vec<(DomainId, usize)> {
        let mut m: BTreeMap<&DomainId, usize> = BTreeMap::new();
        for (d, _) in &self.entries {
            *m.entry(d).or_insert(0) += 1;
        }
        self.seen.iter().map(|d| (d.clone(), m.get(d).copied().unwrap_or(0))).collect()
    }

    /// Quota of the `i`-th of `t` seen domains: the first `|M| mod t` domains
    /// get one extra slot.
    fn quota(&self, i: usize, t: usize) -> usize {
        self.capacity / t + usize::from(i < self.capacity % t)
    }

    /// Adds `finished` as a newly seen domain and rebalances: earlier domains
    /// keep a seeded uniform subsample of their entries, the new domain gets a
    /// uniform sample of its train split.
    pub fn rebalance_after_domain(&mut self, finished: &DomainCorpus, seed: u64) -> Result<RebalanceReport> {
        if self.seen.contains(&finished.domain_id) {
            return Err(Error::DuplicateDomain(finished.domain_id.0.clone()));
        }
        self.seen.push(finished.domain_id.clone());
        let t = self.seen.len();
        let mut by_domain: BTreeMap<DomainId, Vec<TokenSequence>> = BTreeMap::new();
        for (d, s) in self.entries.drain(..) {
            by_domain.entry(d).or_default().push(s);
        }
        let mut quotas = Vec::with_capacity(t);
        let mut shortfall = None;
        for (i, d) in self.seen.clone().iter().enumerate() {
            let q = self.quota(i, t);
            quotas.push((d.clone(), q));
            let mut rng = seeded(derive_seed(seed, i as u64));
            if i + 1 == t {
                let n = finished.train.len();
                if n < q {
                    shortfall = Some(q - n);
                }
                for j in sample_without_replacement(&mut rng, n, q) {
                    self.entries.push((d.clone(), finished.train[j].clone()));
                }
            } else {
                let old = by_domain.remove(d).unwrap_or_default();
                let mut keep = sample_without_replacement(&mut rng, old.len(), q);
                keep.sort_unstable();
                for j in keep {
                    self.entries.push((d.clone(), old[j].clone()));
                }
            }
        }
        Ok(RebalanceReport { quotas, shortfall })
    }

    /// `batch_size` entries drawn uniformly with replacement.
    pub fn sample(&self, batch_size: usize, seed: u64) -> Result<Vec<TokenSequence>> {
        if self.entries.is_empty() {
            return Err(Error::Empty("replay memory is empty".into()));
        }
        let mut rng = seeded(seed);
        Ok((0..batch_size).map(|_| self.entries[rng.gen_range(0..self.entries.len())].1.clone()).collect())
    }
}

/// FIFO queue of unit-norm teacher sentence representations.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationQueue {
    capacity: usize,
    dim: Option<usize>,
    entries: VecDeque<alloc::vec::Vec<f64>>,
}

impl RepresentationQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("queue capacity must be >= 1".into()));
        }
        Ok(Self { capacity, dim: None, entries: VecDeque::new() })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Appends every row of `reps`, evicting the oldest entries beyond
    /// capacity. Rejects the whole push if any row is not unit-norm.
    pub fn push(&mut self, reps: &Matrix) -> Result<()> {
        if let Some(d) = self.dim {
            if d != reps.cols() {
                return Err(Error::Shape(format!("queue holds {d}-dim vectors, got {}", reps.cols())));
            }
        }
        for r in 0..reps.rows() {
            let n = l2_norm(reps.row(r));
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NotNormalized(n));
            }
        }
        self.dim = Some(reps.cols());
        for r in 0..reps.rows() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(reps.row(r).to_vec());
        }
        Ok(())
    }

    /// Copy of the current contents, oldest first, `[len, dim]`.
    pub fn snapshot(&self) -> Matrix {
        let dim = self.dim.unwrap_or(0);
        let mut data = Vec::with_capacity(self.entries.len() * dim);
        for e in &self.entries {
            data.extend_from_slice(e);
        }
        Matrix::from_vec(self.entries.len(), dim, data)
    }
}
