//! Domain corpora and streams.
//!
//! Corpora are drawn from topic-mixture generators: every sequence picks one
//! latent topic from `topic_mixture`, then draws its tokens independently from
//! that topic's emission distribution over the domain's vocabulary subset.
//! The latent topic is what downstream classification tasks predict.
//!
//! Token ids `0..FIRST_REGULAR` are reserved for special tokens. Corpus
//! sequences hold content tokens only; [`TokenBatch`] prepends the
//! start-of-sequence token and pads when sequences are batched.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng as _;

use crate::rng::{self, categorical, derive_seed, seeded};
use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const MASK: u32 = 2;
pub const FIRST_REGULAR: u32 = 3;
/// Target value at positions that carry no MLM target.
pub const IGNORE: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct DomainId(pub String);

impl DomainId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DomainId {
    fn from(s: &str) -> Self {
        DomainId(s.into())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks `1 <= len <= max_len` and every id `< vocab_size`.
    pub fn validate(&self, vocab_size: usize, max_len: usize) -> Result<()> {
        if self.tokens.is_empty() || self.tokens.len() > max_len {
            return Err(Error::Config(format!("sequence length {} outside 1..={max_len}", self.tokens.len())));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Config(format!("token id {t} >= vocab size {vocab_size}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GeneratorSpec {
    pub domain_id: DomainId,
    pub vocab_subset: Vec<u32>,
    pub topic_mixture: Vec<f64>,
    /// One distribution per topic, aligned with `vocab_subset`.
    pub topic_emissions: Vec<Vec<f64>>,
    pub overlap_fraction: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn n_topics(&self) -> usize {
        self.topic_mixture.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_subset.is_empty() {
            return Err(Error::Config(format!("domain `{}`: empty vocab_subset", self.domain_id)));
        }
        if self.topic_mixture.is_empty() || self.topic_emissions.len() != self.topic_mixture.len() {
            return Err(Error::Config(format!("domain `{}`: need one emission row per topic", self.domain_id)));
        }
        let mix: f64 = self.topic_mixture.iter().sum();
        if (mix - 1.0).abs() > 1e-9 || self.topic_mixture.iter().any(|p| *p < 0.0) {
            return Err(Error::Config(format!("domain `{}`: topic_mixture sums to {mix}", self.domain_id)));
        }
        for (k, e) in self.topic_emissions.iter().enumerate() {
            if e.len() != self.vocab_subset.len() {
                return Err(Error::Config(format!("domain `{}`: topic {k} emission length mismatch", self.domain_id)));
            }
            let s: f64 = e.iter().sum();
            if (s - 1.0).abs() > 1e-9 || e.iter().any(|p| *p < 0.0) {
                return Err(Error::Config(format!("domain `{}`: topic {k} emissions sum to {s}", self.domain_id)));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(Error::Config(format!("domain `{}`: overlap_fraction outside [0, 1]", self.domain_id)));
        }
        Ok(())
    }

    /// Draws one sequence. With `topic = None` the topic is drawn from the
    /// mixture. Returns the sequence and its latent topic.
    pub fn sample_sequence(&self, rng: &mut rng::Rng, max_len: usize, topic: Option<usize>) -> (TokenSequence, usize) {
        let topic = topic.unwrap_or_else(|| categorical(rng, &self.topic_mixture));
        let min_len = (max_len / 2).max(1);
        let len = rng.gen_range(min_len..=max_len);
        let emissions = &self.topic_emissions[topic];
        let tokens = (0..len).map(|_| self.vocab_subset[categorical(rng, emissions)]).collect();
        (TokenSequence::new(tokens), topic)
    }

    /// Log-likelihood of `seq` under topic `k` (tokens outside the subset get -inf).
    pub fn log_likelihood(&self, seq: &TokenSequence, k: usize) -> f64 {
        let index: BTreeMap<u32, usize> = self.vocab_subset.iter().enumerate().map(|(i, t)| (*t, i)).collect();
        seq.tokens
            .iter()
            .map(|t| match index.get(t) {
                Some(&i) if self.topic_emissions[k][i] > 0.0 => libm::log(self.topic_emissions[k][i]),
                _ => f64::NEG_INFINITY,
            })
            .sum()
    }

    /// Marginal unigram distribution implied by the mixture, keyed by token.
    pub fn marginal(&self) -> BTreeMap<u32, f64> {
        let mut out = BTreeMap::new();
        for (w, e) in self.topic_mixture.iter().zip(&self.topic_emissions) {
            for (t, p) in self.vocab_subset.iter().zip(e) {
                *out.entry(*t).or_insert(0.0) += w * p;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CorpusSource {
    Generator(GeneratorSpec),
    /// Corpus loaded from elsewhere; carries no latent labels.
    External(String),
    /// Shuffled union of several domains.
    Union(Vec<DomainId>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainCorpus {
    pub domain_id: DomainId,
    pub train: Vec<TokenSequence>,
    pub heldout: Vec<TokenSequence>,
    pub source: CorpusSource,
}

impl DomainCorpus {
    pub fn generator(&self) -> Option<&GeneratorSpec> {
        match &self.source {
            CorpusSource::Generator(g) => Some(g),
            _ => None,
        }
    }
}

/// Default held-out size: 1/50 of the training size, at least one.
pub fn default_heldout(n_train: usize) -> usize {
    (n_train / 50).max(1)
}

/// Draws a corpus from `spec`. Sequence `i` uses its own child stream of
/// `spec.seed`; train takes indices `0..n_train`, held-out the next
/// `n_heldout`, so the two splits never share a draw.
pub fn synth_domain_corpus(spec: &GeneratorSpec, n_train: usize, n_heldout: usize, max_len: usize) -> Result<DomainCorpus> {
    spec.validate()?;
    if n_train == 0 || n_heldout == 0 {
        return Err(Error::Config("corpus split sizes must be >= 1".into()));
    }
    if max_len < 2 {
        return Err(Error::Config("max_len must be >= 2".into()));
    }
    let draw = |i: usize| {
        let mut rng = seeded(derive_seed(spec.seed, i as u64));
        spec.sample_sequence(&mut rng, max_len, None).0
    };
    Ok(DomainCorpus {
        domain_id: spec.domain_id.clone(),
        train: (0..n_train).map(draw).collect(),
        heldout: (n_train..n_train + n_heldout).map(draw).collect(),
        source: CorpusSource::Generator(spec.clone()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OrderingKind {
    DomainIncremental,
    Chronological,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainStream {
    pub domains: Vec<DomainCorpus>,
    pub ordering: OrderingKind,
}

impl DomainStream {
    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn domain_ids(&self) -> Vec<DomainId> {
        self.domains.iter().map(|d| d.domain_id.clone()).collect()
    }
}

pub fn build_stream(corpora: Vec<DomainCorpus>, ordering: OrderingKind) -> Result<DomainStream> {
    if corpora.len() < 2 {
        return Err(Error::Config(format!("a stream needs at least 2 domains, got {}", corpora.len())));
    }
    let mut seen = BTreeSet::new();
    for c in &corpora {
        if !seen.insert(c.domain_id.clone()) {
            return Err(Error::DuplicateDomain(c.domain_id.0.clone()));
        }
    }
    Ok(DomainStream { domains: corpora, ordering })
}

/// Padded batch of model inputs. Row `b` is `[BOS, seq_b..., PAD...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
    /// Valid length of each row including the start token.
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a TokenSequence>) -> Self {
        let seqs: Vec<&TokenSequence> = seqs.into_iter().collect();
        let seq_len = seqs.iter().map(|s| s.len() + 1).max().unwrap_or(1);
        Self::from_sequences_padded(seqs, seq_len)
    }

    /// Like [`TokenBatch::from_sequences`] with an explicit padded width.
    pub fn from_sequences_padded<'a>(seqs: impl IntoIterator<Item = &'a TokenSequence>, seq_len: usize) -> Self {
        let seqs: Vec<&TokenSequence> = seqs.into_iter().collect();
        let mut tokens = alloc::vec![PAD; seqs.len() * seq_len];
        let mut lengths = Vec::with_capacity(seqs.len());
        for (b, s) in seqs.iter().enumerate() {
            assert!(s.len() < seq_len, "sequence longer than padded width");
            let row = &mut tokens[b * seq_len..(b + 1) * seq_len];
            row[0] = BOS;
            row[1..=s.len()].copy_from_slice(&s.tokens);
            lengths.push(s.len() + 1);
        }
        Self { tokens, batch: seqs.len(), seq_len, lengths }
    }

    pub fn key_valid(&self) -> Vec<bool> {
        let mut v = alloc::vec![false; self.batch * self.seq_len];
        for (b, &len) in self.lengths.iter().enumerate() {
            v[b * self.seq_len..b * self.seq_len + len].fill(true);
        }
        v
    }

    pub fn get(&self, b: usize, i: usize) -> u32 {
        self.tokens[b * self.seq_len + i]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub input: TokenBatch,
    /// Original token where `mask` is set, [`IGNORE`] elsewhere.
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
}

impl MaskedBatch {
    /// An uncorrupted batch with no MLM targets.
    pub fn unmasked(input: TokenBatch) -> Self {
        let n = input.tokens.len();
        Self { input, targets: alloc::vec![IGNORE; n], mask: alloc::vec![false; n] }
    }

    pub fn n_masked(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Flat row indices (`b * seq_len + i`) of masked positions.
    pub fn masked_rows(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect()
    }
}

/// MLM corruption. Exactly `round(mask_prob * n)` of the `n` content
/// positions are selected uniformly (the start token and padding are never
/// selected); each selected position becomes [`MASK`] with probability 0.8, a
/// random regular token with probability 0.1, and stays unchanged otherwise.
pub fn mask_batch(batch: &[TokenSequence], mask_prob: f64, vocab_size: usize, seed: u64) -> Result<MaskedBatch> {
    if !(mask_prob > 0.0 && mask_prob < 1.0) {
        return Err(Error::Config(format!("mask_prob {mask_prob} outside (0, 1)")));
    }
    if vocab_size as u32 <= FIRST_REGULAR {
        return Err(Error::Config("vocab too small for special tokens".into()));
    }
    let input = TokenBatch::from_sequences(batch);
    let mut rng = seeded(seed);
    let content: Vec<usize> = (0..input.batch)
        .flat_map(|b| (1..input.lengths[b]).map(move |i| b * input.seq_len + i))
        .collect();
    let n_select = libm::round(mask_prob * content.len() as f64) as usize;
    let picked = rng::sample_without_replacement(&mut rng, content.len(), n_select);
    let mut out = MaskedBatch::unmasked(input);
    for p in picked {
        let pos = content[p];
        out.targets[pos] = out.input.tokens[pos];
        out.mask[pos] = true;
        let u: f64 = rng.gen();
        if u < 0.8 {
            out.input.tokens[pos] = MASK;
        } else if u < 0.9 {
            out.input.tokens[pos] = rng.gen_range(FIRST_REGULAR..vocab_size as u32);
        }
    }
    Ok(out)
}

/// Union of all train splits in a seeded random order; held-out splits are
/// concatenated in stream order.
pub fn shuffle_union(stream: &DomainStream, seed: u64) -> DomainCorpus {
    let all: Vec<&TokenSequence> = stream.domains.iter().flat_map(|d| d.train.iter()).collect();
    let mut rng = seeded(seed);
    let perm = rng::permutation(&mut rng, all.len());
    DomainCorpus {
        domain_id: DomainId("union".into()),
        train: perm.into_iter().map(|i| all[i].clone()).collect(),
        heldout: stream.domains.iter().flat_map(|d| d.heldout.iter().cloned()).collect(),
        source: CorpusSource::Union(stream.domain_ids()),
    }
}

/// Unigram counts over a corpus's train and held-out splits.
pub fn unigram_counts(corpus: &DomainCorpus) -> BTreeMap<u32, f64> {
    let mut counts = BTreeMap::new();
    for s in corpus.train.iter().chain(&corpus.heldout) {
        for t in &s.tokens {
            *counts.entry(*t).or_insert(0.0) += 1.0;
        }
    }
    counts
}

/// Cosine distance `1 - cos(u_a, u_b)` between unigram frequency vectors.
pub fn vocab_distance(a: &DomainCorpus, b: &DomainCorpus) -> Result<f64> {
    let ca = unigram_counts(a);
    let cb = unigram_counts(b);
    if ca.is_empty() || cb.is_empty() {
        return Err(Error::Empty("vocab_distance needs nonempty corpora".into()));
    }
    Ok(cosine_distance(&ca, &cb))
}

/// `1 - cos` between two sparse nonnegative vectors, clamped to `[0, 1]`.
pub fn cosine_distance(a: &BTreeMap<u32, f64>, b: &BTreeMap<u32, f64>) -> f64 {
    let na = libm::sqrt(a.values().map(|v| v * v).sum::<f64>());
    let nb = libm::sqrt(b.values().map(|v| v * v).sum::<f64>());
    let dot: f64 = a.iter().filter_map(|(k, v)| b.get(k).map(|w| v * w)).sum();
    (1.0 - dot / (na * nb)).clamp(0.0, 1.0)
}

/// Knobs for the built-in synthetic stream families.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SynthStreamConfig {
    pub n_domains: usize,
    pub vocab_size: usize,
    pub n_topics: usize,
    /// Tokens each domain owns exclusively (domain-incremental) or the whole
    /// topical vocabulary (chronological).
    pub tokens_per_domain: usize,
    /// Tokens in the pool shared by every domain.
    pub shared_tokens: usize,
    /// Probability mass each topic puts on its own keyword block.
    pub keyword_mass: f64,
    /// Emission drift between consecutive time steps (chronological only).
    pub drift: f64,
    pub seed: u64,
}

impl Default for SynthStreamConfig {
    fn default() -> Self {
        Self {
            n_domains: 4,
            vocab_size: 1024,
            n_topics: 4,
            tokens_per_domain: 160,
            shared_tokens: 16,
            keyword_mass: 0.8,
            drift: 0.5,
            seed: 0,
        }
    }
}

fn zipf_weights(n: usize, offset: usize) -> Vec<f64> {
    (0..n).map(|i| 1.0 / ((i + offset + 1) as f64)).collect()
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Builds one topic's emission row: `keyword_mass` on the topic's keyword
/// block (Zipf-weighted, rotated by `rotation`) and the rest uniform over
/// `shared` positions.
fn topic_row(n: usize, block: core::ops::Range<usize>, shared: &[usize], keyword_mass: f64, rotation: usize) -> Vec<f64> {
    let mut row = alloc::vec![0.0; n];
    let width = block.len();
    let mut kw = zipf_weights(width, 2);
    kw.rotate_right(rotation % width.max(1));
    normalize(&mut kw);
    let shared_mass = if shared.is_empty() { 0.0 } else { 1.0 - keyword_mass };
    let kw_mass = 1.0 - shared_mass;
    for (i, w) in block.zip(kw) {
        row[i] += kw_mass * w;
    }
    for &s in shared {
        row[s] += shared_mass / shared.len() as f64;
    }
    normalize(&mut row);
    row
}

fn check_synth(cfg: &SynthStreamConfig, needed: usize) -> Result<()> {
    if cfg.n_domains < 2 || cfg.n_topics == 0 || cfg.tokens_per_domain < cfg.n_topics {
        return Err(Error::Config("synthetic stream needs >= 2 domains and >= 1 token per topic".into()));
    }
    if !(0.0..=1.0).contains(&cfg.keyword_mass) {
        return Err(Error::Config("keyword_mass outside [0, 1]".into()));
    }
    if FIRST_REGULAR as usize + needed > cfg.vocab_size {
        return Err(Error::Config(format!("synthetic stream needs {needed} regular tokens, vocab has {}", cfg.vocab_size - FIRST_REGULAR as usize)));
    }
    Ok(())
}

/// Domain-incremental family: each domain owns a disjoint block of
/// `tokens_per_domain` ids split evenly among its topics, plus a small pool of
/// `shared_tokens` common to all domains.
pub fn domain_incremental_specs(cfg: &SynthStreamConfig) -> Result<Vec<GeneratorSpec>> {
    check_synth(cfg, cfg.shared_tokens + cfg.n_domains * cfg.tokens_per_domain)?;
    let shared_ids: Vec<u32> = (0..cfg.shared_tokens as u32).map(|i| FIRST_REGULAR + i).collect();
    let per_topic = cfg.tokens_per_domain / cfg.n_topics;
    let mut specs = Vec::new();
    for d in 0..cfg.n_domains {
        let start = FIRST_REGULAR + (cfg.shared_tokens + d * cfg.tokens_per_domain) as u32;
        let private: Vec<u32> = (0..cfg.tokens_per_domain as u32).map(|i| start + i).collect();
        let mut vocab = shared_ids.clone();
        vocab.extend(&private);
        let shared_pos: Vec<usize> = (0..shared_ids.len()).collect();
        let emissions = (0..cfg.n_topics)
            .map(|k| {
                let lo = shared_ids.len() + k * per_topic;
                topic_row(vocab.len(), lo..lo + per_topic, &shared_pos, cfg.keyword_mass, 0)
            })
            .collect();
        specs.push(GeneratorSpec {
            domain_id: DomainId(format!("domain{}", d + 1)),
            vocab_subset: vocab,
            topic_mixture: alloc::vec![1.0 / cfg.n_topics as f64; cfg.n_topics],
            topic_emissions: emissions,
            overlap_fraction: cfg.shared_tokens as f64 / (cfg.shared_tokens + cfg.tokens_per_domain) as f64,
            seed: derive_seed(cfg.seed, d as u64),
        });
    }
    Ok(specs)
}

/// Chronological family: all time steps share one vocabulary and the same
/// topic-to-keyword-block assignment, so labels stay aligned. Within each
/// block, the preferred keywords shift over time: step `t` mixes the base
/// emissions with a rotated copy at weight `drift * t / (T - 1)`.
pub fn chronological_specs(cfg: &SynthStreamConfig) -> Result<Vec<GeneratorSpec>> {
    check_synth(cfg, cfg.shared_tokens + cfg.tokens_per_domain)?;
    let vocab: Vec<u32> = (0..(cfg.shared_tokens + cfg.tokens_per_domain) as u32).map(|i| FIRST_REGULAR + i).collect();
    let shared_pos: Vec<usize> = (0..cfg.shared_tokens).collect();
    let per_topic = cfg.tokens_per_domain / cfg.n_topics;
    let t_max = (cfg.n_domains - 1) as f64;
    let mut specs = Vec::new();
    for d in 0..cfg.n_domains {
        let lambda = cfg.drift * d as f64 / t_max;
        let emissions = (0..cfg.n_topics)
            .map(|k| {
                let lo = cfg.shared_tokens + k * per_topic;
                let base = topic_row(vocab.len(), lo..lo + per_topic, &shared_pos, cfg.keyword_mass, 0);
                let moved = topic_row(vocab.len(), lo..lo + per_topic, &shared_pos, cfg.keyword_mass, per_topic / 2);
                let mut row: Vec<f64> = base.iter().zip(&moved).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
                normalize(&mut row);
                row
            })
            .collect();
        specs.push(GeneratorSpec {
            domain_id: DomainId(format!("year{}", d + 1)),
            vocab_subset: vocab.clone(),
            topic_mixture: alloc::vec![1.0 / cfg.n_topics as f64; cfg.n_topics],
            topic_emissions: emissions,
            overlap_fraction: 1.0,
            seed: derive_seed(cfg.seed, d as u64),
        });
    }
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn single_token_spec(token: u32) -> GeneratorSpec {
        GeneratorSpec {
            domain_id: "d".into(),
            vocab_subset: vec![token],
            topic_mixture: vec![1.0],
            topic_emissions: vec![vec![1.0]],
            overlap_fraction: 0.0,
            seed: 1,
        }
    }

    fn corpus_of(id: &str, seqs: Vec<Vec<u32>>) -> DomainCorpus {
        DomainCorpus {
            domain_id: id.into(),
            train: seqs.into_iter().map(TokenSequence::new).collect(),
            heldout: vec![],
            source: CorpusSource::External("test".into()),
        }
    }

    #[test]
    fn degenerate_generator_repeats_one_token() {
        let c = synth_domain_corpus(&single_token_spec(7), 20, 3, 8).unwrap();
        assert!(c.train.iter().chain(&c.heldout).all(|s| s.tokens.iter().all(|&t| t == 7)));
        assert_eq!(c.heldout.len(), 3);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let cfg = SynthStreamConfig { vocab_size: 256, tokens_per_domain: 40, ..Default::default() };
        let spec = &domain_incremental_specs(&cfg).unwrap()[0];
        assert_eq!(synth_domain_corpus(spec, 50, 5, 10).unwrap(), synth_domain_corpus(spec, 50, 5, 10).unwrap());
    }

    #[test]
    fn two_equiprobable_tokens_have_balanced_frequency() {
        let spec = GeneratorSpec {
            domain_id: "d".into(),
            vocab_subset: vec![10, 11],
            topic_mixture: vec![1.0],
            topic_emissions: vec![vec![0.5, 0.5]],
            overlap_fraction: 0.0,
            seed: 9,
        };
        let c = synth_domain_corpus(&spec, 10_000, 1, 8).unwrap();
        let (mut n10, mut n) = (0usize, 0usize);
        for s in &c.train {
            n += s.len();
            n10 += s.tokens.iter().filter(|&&t| t == 10).count();
        }
        let f = n10 as f64 / n as f64;
        assert!((0.48..=0.52).contains(&f), "frequency {f}");
        assert!((0.48..=0.52).contains(&(1.0 - f)));
    }

    #[test]
    fn empty_vocab_is_a_configuration_error() {
        let mut spec = single_token_spec(7);
        spec.vocab_subset.clear();
        spec.topic_emissions = vec![vec![]];
        assert!(matches!(synth_domain_corpus(&spec, 1, 1, 4), Err(Error::Config(_))));
    }

    #[test]
    fn build_stream_checks_and_preserves_order() {
        let cs: Vec<DomainCorpus> = (0..4).map(|i| corpus_of(&format!("d{i}"), vec![vec![3]])).collect();
        let s = build_stream(cs.clone(), OrderingKind::DomainIncremental).unwrap();
        assert_eq!(s.len(), 4);
        let mut rev = cs.clone();
        rev.reverse();
        let r = build_stream(rev, OrderingKind::DomainIncremental).unwrap();
        let ids: Vec<_> = r.domain_ids().into_iter().map(|d| d.0).collect();
        assert_eq!(ids, ["d3", "d2", "d1", "d0"]);
        assert!(build_stream(cs[..1].to_vec(), OrderingKind::Chronological).is_err());
        let dup = vec![cs[0].clone(), cs[0].clone()];
        assert!(matches!(build_stream(dup, OrderingKind::Chronological), Err(Error::DuplicateDomain(_))));
    }

    #[test]
    fn masking_fraction_and_determinism() {
        let seqs: Vec<TokenSequence> = (0..100).map(|i| TokenSequence::new((0..100).map(|j| 3 + ((i + j) % 50) as u32).collect())).collect();
        let m = mask_batch(&seqs, 0.15, 64, 42).unwrap();
        let frac = m.n_masked() as f64 / 10_000.0;
        assert!((0.13..=0.17).contains(&frac), "{frac}");
        assert_eq!(m, mask_batch(&seqs, 0.15, 64, 42).unwrap());
        for (i, &is) in m.mask.iter().enumerate() {
            assert_eq!(is, m.targets[i] != IGNORE);
        }
        // start tokens never masked
        for b in 0..m.input.batch {
            assert_eq!(m.input.get(b, 0), BOS);
        }
    }

    #[test]
    fn masking_split_between_mask_random_keep() {
        let seqs: Vec<TokenSequence> = (0..200).map(|_| TokenSequence::new(vec![5; 50])).collect();
        let m = mask_batch(&seqs, 0.5, 1000, 1).unwrap();
        let rows = m.masked_rows();
        let n = rows.len() as f64;
        let masked = rows.iter().filter(|&&r| m.input.tokens[r] == MASK).count() as f64 / n;
        let kept = rows.iter().filter(|&&r| m.input.tokens[r] == 5).count() as f64 / n;
        assert!((masked - 0.8).abs() < 0.02, "{masked}");
        assert!((kept - 0.1).abs() < 0.02, "{kept}");
        // all-same-token corpus: every target is that token
        assert!(rows.iter().all(|&r| m.targets[r] == 5));
    }

    #[test]
    fn masking_rejects_bad_probability() {
        let seqs = vec![TokenSequence::new(vec![3, 4])];
        assert!(mask_batch(&seqs, 0.0, 10, 1).is_err());
        assert!(mask_batch(&seqs, 1.0, 10, 1).is_err());
    }

    #[test]
    fn shuffle_union_conserves_multiset() {
        let a = corpus_of("a", (0..100).map(|i| vec![3 + i]).collect());
        let b = corpus_of("b", (0..100).map(|i| vec![200 + i]).collect());
        let s = build_stream(vec![a, b], OrderingKind::DomainIncremental).unwrap();
        let u = shuffle_union(&s, 5);
        assert_eq!(u.train.len(), 200);
        let mut got: Vec<u32> = u.train.iter().map(|t| t.tokens[0]).collect();
        got.sort_unstable();
        let mut want: Vec<u32> = s.domains.iter().flat_map(|d| d.train.iter().map(|t| t.tokens[0])).collect();
        want.sort_unstable();
        assert_eq!(got, want);
        assert_eq!(u, shuffle_union(&s, 5));
        assert_ne!(u.train, shuffle_union(&s, 6).train);
    }

    #[test]
    fn vocab_distance_cases() {
        let a = corpus_of("a", vec![vec![3, 4, 5]]);
        assert!(vocab_distance(&a, &a).unwrap().abs() < 1e-12);
        let b = corpus_of("b", vec![vec![6, 7]]);
        assert!((vocab_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let one = corpus_of("x", vec![vec![3, 3]]);
        let half = corpus_of("y", vec![vec![3, 4]]);
        let d = vocab_distance(&one, &half).unwrap();
        assert!((d - (1.0 - 0.5 / libm::sqrt(0.5))).abs() < 1e-12);
        assert!((d - vocab_distance(&half, &one).unwrap()).abs() < 1e-15);
        let empty = corpus_of("e", vec![]);
        assert!(vocab_distance(&a, &empty).is_err());
    }

    #[test]
    fn chronological_streams_are_closer_than_domain_incremental() {
        let cfg = SynthStreamConfig { vocab_size: 512, tokens_per_domain: 80, ..Default::default() };
        let di = domain_incremental_specs(&cfg).unwrap();
        let ch = chronological_specs(&cfg).unwrap();
        let corp = |s: &GeneratorSpec| synth_domain_corpus(s, 400, 8, 12).unwrap();
        let d_di = vocab_distance(&corp(&di[0]), &corp(&di[1])).unwrap();
        let d_ch = vocab_distance(&corp(&ch[0]), &corp(&ch[1])).unwrap();
        assert!(d_ch < d_di, "chronological {d_ch} vs domain-incremental {d_di}");
        for s in di.iter().chain(&ch) {
            s.validate().unwrap();
        }
    }
}
