//! Synthetic downstream tasks drawn from a domain's generator.
//!
//! Single-label tasks predict the latent topic of a sequence. Multi-label
//! tasks mimic hashtags: label `j` owns marker token `m_j` (the `j`-th most
//! emitted token of the generator), every example of label `j` is a topic
//! `j mod n_topics` sequence with `m_j` written at one random position, and
//! an example's label set is every marker it contains.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::corpus::{DomainCorpus, DomainId, GeneratorSpec, TokenSequence};
use crate::model::sha256_hex;
use crate::rng::{derive_seed, seeded};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TaskKind {
    SingleLabel,
    MultiLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Metric {
    MacroF1,
    MicroF1,
    Lrap,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::MacroF1 => "macro_f1",
            Metric::MicroF1 => "micro_f1",
            Metric::Lrap => "lrap",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub sequence: TokenSequence,
    /// Sorted, duplicate-free.
    pub labels: Vec<usize>,
}

/// Shape of a synthetic task.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Must equal the generator's topic count for single-label tasks.
    pub n_labels: usize,
    /// Examples per label in each split.
    pub n_per_label: usize,
    pub max_len: usize,
    /// Defaults to macro-F1 (single-label) or LRAP (multi-label).
    pub metric: Option<Metric>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self { kind: TaskKind::SingleLabel, n_labels: 4, n_per_label: 500, max_len: 32, metric: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamTask {
    pub task_id: String,
    pub domain_id: DomainId,
    pub kind: TaskKind,
    pub n_labels: usize,
    pub metric: Metric,
    /// Tasks with equal tags assign the same meaning to each label index.
    pub label_space: String,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl DownstreamTask {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Empty(format!("task `{}` has an empty train split", self.task_id)));
        }
        if self.val.is_empty() || self.test.is_empty() {
            return Err(Error::Empty(format!("task `{}` needs nonempty val and test splits", self.task_id)));
        }
        for e in self.train.iter().chain(&self.val).chain(&self.test) {
            if e.labels.iter().any(|&l| l >= self.n_labels) {
                return Err(Error::Config(format!("task `{}`: label outside 0..{}", self.task_id, self.n_labels)));
            }
            if self.kind == TaskKind::SingleLabel && e.labels.len() != 1 {
                return Err(Error::Config(format!("task `{}`: single-label example with {} labels", self.task_id, e.labels.len())));
            }
        }
        Ok(())
    }
}

/// Marker tokens of a multi-label task: the generator's most emitted tokens,
/// ranked by their largest per-topic emission probability.
pub fn marker_tokens(spec: &GeneratorSpec, n: usize) -> Vec<u32> {
    let mut scored: Vec<(f64, u32)> = spec
        .vocab_subset
        .iter()
        .enumerate()
        .map(|(i, t)| (spec.topic_emissions.iter().map(|e| e[i]).fold(0.0, f64::max), *t))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(n).map(|(_, t)| t).collect()
}

/// Redraw budget when a sample repeats an earlier one.
const MAX_REDRAWS: u64 = 1000;

/// Draws a balanced task from `domain`'s generator (never from its corpus):
/// each split holds `n_per_label` examples per label, and no sequence occurs
/// twice across the three splits.
pub fn synth_downstream_task(domain: &DomainCorpus, spec: &TaskSpec, seed: u64) -> Result<DownstreamTask> {
    let gen = domain
        .generator()
        .ok_or_else(|| Error::Config(format!("domain `{}` has no generator, so its sequences carry no labels", domain.domain_id)))?;
    if spec.n_labels == 0 || spec.n_per_label == 0 {
        return Err(Error::Config("tasks need n_labels >= 1 and n_per_label >= 1".into()));
    }
    if spec.max_len < 2 {
        return Err(Error::Config("task max_len must be >= 2".into()));
    }
    let markers = match spec.kind {
        TaskKind::SingleLabel => {
            if spec.n_labels != gen.n_topics() {
                return Err(Error::Config(format!(
                    "single-label task needs one label per topic: {} labels, {} topics",
                    spec.n_labels,
                    gen.n_topics()
                )));
            }
            Vec::new()
        }
        TaskKind::MultiLabel => {
            if spec.n_labels > gen.vocab_subset.len() {
                return Err(Error::Config(format!("{} markers requested from {} tokens", spec.n_labels, gen.vocab_subset.len())));
            }
            marker_tokens(gen, spec.n_labels)
        }
    };

    let base = derive_seed(gen.seed, derive_seed(seed, 0x7a5c));
    let mut seen: BTreeSet<Vec<u32>> = BTreeSet::new();
    let mut splits: [Vec<Example>; 3] = Default::default();
    for (s, out) in splits.iter_mut().enumerate() {
        let split_seed = derive_seed(base, s as u64);
        for i in 0..spec.n_per_label {
            for j in 0..spec.n_labels {
                let slot = derive_seed(derive_seed(split_seed, j as u64), i as u64);
                let mut attempt = 0;
                let example = loop {
                    if attempt == MAX_REDRAWS {
                        return Err(Error::CorpusTooSmall(format!(
                            "cannot draw {} distinct sequences for task on `{}`; raise max_len",
                            3 * spec.n_per_label * spec.n_labels,
                            domain.domain_id
                        )));
                    }
                    let mut rng = seeded(derive_seed(slot, attempt));
                    attempt += 1;
                    let ex = match spec.kind {
                        TaskKind::SingleLabel => {
                            let (seq, topic) = gen.sample_sequence(&mut rng, spec.max_len, Some(j));
                            Example { sequence: seq, labels: alloc::vec![topic] }
                        }
                        TaskKind::MultiLabel => {
                            let (mut seq, _) = gen.sample_sequence(&mut rng, spec.max_len, Some(j % gen.n_topics()));
                            let pos = rng.gen_range(0..seq.len());
                            seq.tokens[pos] = markers[j];
                            let labels = markers.iter().enumerate().filter(|(_, m)| seq.tokens.contains(m)).map(|(k, _)| k).collect();
                            Example { sequence: seq, labels }
                        }
                    };
                    if seen.insert(ex.sequence.tokens.clone()) {
                        break ex;
                    }
                };
                out.push(example);
            }
        }
    }
    let [train, val, test] = splits;

    let kind_tag = match spec.kind {
        TaskKind::SingleLabel => "single",
        TaskKind::MultiLabel => "multi",
    };
    let label_space = sha256_hex(format!("{kind_tag};{};{:?};{:?}", spec.n_labels, gen.vocab_subset, markers).as_bytes());
    let metric = spec.metric.unwrap_or(match spec.kind {
        TaskKind::SingleLabel => Metric::MacroF1,
        TaskKind::MultiLabel => Metric::Lrap,
    });
    Ok(DownstreamTask {
        task_id: format!("{}-{kind_tag}", domain.domain_id),
        domain_id: domain.domain_id.clone(),
        kind: spec.kind,
        n_labels: spec.n_labels,
        metric,
        label_space: String::from(&label_space[..16]),
        train,
        val,
        test,
    })
}
