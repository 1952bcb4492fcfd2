//! Experiment configuration files (TOML).
//!
//! A config names a stream (synthetic generator family or token-id corpus
//! files), the model, the pretraining algorithm and the evaluation suite.
//! [`Prepared::load`] parses, validates and materializes everything before
//! any training starts, so a bad file fails fast and writes nothing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lifelong_core::corpus::{
    build_stream, chronological_specs, default_heldout, domain_incremental_specs, synth_domain_corpus, CorpusSource, DomainCorpus, DomainId,
    DomainStream, OrderingKind, SynthStreamConfig, TokenSequence,
};
use lifelong_core::distill::DistillConfig;
use lifelong_core::eval::{synth_downstream_task, DownstreamTask, FinetuneConfig, TaskSpec, MIN_SEEDS};
use lifelong_core::model::ModelConfig;
use lifelong_core::trainer::TrainConfig;

use crate::error::{CliError, CliResult};
use crate::fsutil::{read_string, sha256_hex};

fn default_n_train() -> usize {
    2000
}

fn default_max_len() -> usize {
    32
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_shots() -> Vec<usize> {
    vec![8, 32, 128]
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusFiles {
    pub id: String,
    /// One sequence per line, whitespace-separated token ids.
    pub train: PathBuf,
    pub heldout: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub ordering: OrderingKind,
    /// Built-in generator family; exclusive with `corpora`.
    #[serde(default)]
    pub synthetic: Option<SynthStreamConfig>,
    #[serde(default)]
    pub corpora: Vec<CorpusFiles>,
    /// Synthetic training sequences per domain.
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default)]
    pub n_heldout: Option<usize>,
    /// Longest synthetic sequence, start token excluded.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSuite {
    /// Downstream task family instantiated once per domain. Needs a
    /// synthetic stream, since only generators carry labels.
    #[serde(default)]
    pub task: Option<TaskSpec>,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// k-shot grid on the latest task; the full train split is appended.
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    #[serde(default = "yes")]
    pub perplexity: bool,
    /// Temporal generalization; chronological streams only.
    #[serde(default = "yes")]
    pub temporal: bool,
    /// Also fine-tune the untrained `f_0` on every task.
    #[serde(default = "yes")]
    pub baseline: bool,
    #[serde(default)]
    pub mask_seed: u64,
}

impl Default for EvalSuite {
    fn default() -> Self {
        Self {
            task: None,
            finetune: FinetuneConfig::default(),
            seeds: default_seeds(),
            shots: default_shots(),
            perplexity: true,
            temporal: true,
            baseline: true,
            mask_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Training seed; overrides `train.seed`.
    #[serde(default)]
    pub seed: u64,
    /// Not part of the digest.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub stream: StreamConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Replaces `train.distill` when present.
    #[serde(default)]
    pub distill: Option<DistillConfig>,
    #[serde(default)]
    pub eval: EvalSuite,
}

fn invalid(section: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("[{section}] {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Validation(e.to_string()))
    }

    /// The effective training config: global seed and distill table folded in.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        if let Some(d) = &self.distill {
            t.distill = d.clone();
        }
        t
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> CliResult<()> {
        self.model.validate().map_err(|e| invalid("model", e))?;
        self.train_config().validate().map_err(|e| invalid("train", e))?;
        let s = &self.stream;
        match (&s.synthetic, s.corpora.is_empty()) {
            (Some(_), false) => return Err(invalid("stream", "set either `synthetic` or `corpora`, not both")),
            (None, true) => return Err(invalid("stream", "set one of `synthetic` or `corpora`")),
            _ => {}
        }
        if let Some(syn) = &s.synthetic {
            if syn.vocab_size > self.model.vocab_size {
                return Err(invalid("stream.synthetic", format!("vocab_size {} exceeds model.vocab_size {}", syn.vocab_size, self.model.vocab_size)));
            }
            if s.max_len + 1 > self.model.max_seq_len {
                return Err(invalid("stream", format!("max_len {} plus the start token exceeds model.max_seq_len {}", s.max_len, self.model.max_seq_len)));
            }
            if s.n_train == 0 || s.n_heldout == Some(0) {
                return Err(invalid("stream", "n_train and n_heldout must be >= 1"));
            }
        }
        let ev = &self.eval;
        ev.finetune.validate().map_err(|e| invalid("eval.finetune", e))?;
        if let Some(task) = &ev.task {
            if s.synthetic.is_none() {
                return Err(invalid("eval.task", "downstream tasks need a synthetic stream (corpus files carry no labels)"));
            }
            if task.max_len + 1 > self.model.max_seq_len {
                return Err(invalid("eval.task", format!("max_len {} plus the start token exceeds model.max_seq_len {}", task.max_len, self.model.max_seq_len)));
            }
            if ev.seeds.len() < MIN_SEEDS {
                return Err(invalid("eval", format!("seeds needs at least {MIN_SEEDS} entries, got {}", ev.seeds.len())));
            }
            let mut uniq = ev.seeds.clone();
            uniq.sort_unstable();
            uniq.dedup();
            if uniq.len() != ev.seeds.len() {
                return Err(invalid("eval", "seeds must be distinct"));
            }
            if ev.shots.windows(2).any(|w| w[0] >= w[1]) || ev.shots.first() == Some(&0) {
                return Err(invalid("eval", "shots must be positive and strictly increasing"));
            }
            let train_size = task.n_per_label * task.n_labels;
            if let Some(&k) = ev.shots.iter().find(|&&k| k >= train_size) {
                return Err(invalid("eval", format!("shot count {k} must be below the task's {train_size} training examples")));
            }
        }
        Ok(())
    }

    /// Canonical JSON of everything that affects results.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        serde_json::to_string(&c).expect("config serializes")
    }
}

/// A validated config with its stream and tasks materialized.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub stream: DomainStream,
    /// One task per domain, in stream order; empty without `eval.task`.
    pub tasks: Vec<DownstreamTask>,
    /// SHA-256 over the canonical config and any corpus file contents.
    pub digest: String,
}

impl Prepared {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = read_string(path).map_err(|e| CliError::Validation(e.to_string()))?;
        let config = ExperimentConfig::from_toml(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_config(config, base)
    }

    /// `base` resolves relative corpus paths.
    pub fn from_config(config: ExperimentConfig, base: &Path) -> CliResult<Self> {
        config.validate()?;
        let mut digest_input = config.canonical_json();
        let s = &config.stream;
        let corpora = if let Some(syn) = &s.synthetic {
            let specs = match s.ordering {
                OrderingKind::DomainIncremental => domain_incremental_specs(syn),
                OrderingKind::Chronological => chronological_specs(syn),
            }
            .map_err(|e| invalid("stream.synthetic", e))?;
            let n_heldout = s.n_heldout.unwrap_or_else(|| default_heldout(s.n_train));
            specs
                .iter()
                .map(|g| synth_domain_corpus(g, s.n_train, n_heldout, s.max_len).map_err(|e| invalid("stream.synthetic", e)))
                .collect::<CliResult<Vec<_>>>()?
        } else {
            let mut out = Vec::new();
            for (i, files) in s.corpora.iter().enumerate() {
                let section = format!("stream.corpora[{i}]");
                let (train, h1) = read_sequences(&base.join(&files.train), &config.model, &section)?;
                let (heldout, h2) = read_sequences(&base.join(&files.heldout), &config.model, &section)?;
                if train.is_empty() || heldout.is_empty() {
                    return Err(invalid(&section, "train and heldout files need at least one sequence"));
                }
                digest_input.push_str(&format!(";{}:{h1}:{h2}", files.id));
                out.push(DomainCorpus { domain_id: DomainId(files.id.clone()), train, heldout, source: CorpusSource::External(files.train.display().to_string()) });
            }
            out
        };
        let stream = build_stream(corpora, s.ordering).map_err(|e| invalid("stream", e))?;
        let tasks = match &config.eval.task {
            Some(spec) => stream
                .domains
                .iter()
                .map(|d| synth_downstream_task(d, spec, config.stream.synthetic.as_ref().map_or(0, |x| x.seed)).map_err(|e| invalid("eval.task", e)))
                .collect::<CliResult<Vec<_>>>()?,
            None => Vec::new(),
        };
        Ok(Self { digest: sha256_hex(digest_input.as_bytes()), config, stream, tasks })
    }

    pub fn short_digest(&self) -> &str {
        &self.digest[..16]
    }
}

/// Parses a token-id file; returns the sequences and the file's SHA-256.
fn read_sequences(path: &Path, model: &ModelConfig, section: &str) -> CliResult<(Vec<TokenSequence>, String)> {
    let text = read_string(path).map_err(|e| invalid(section, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = Vec::new();
        for tok in line.split_whitespace() {
            let id: u32 = tok.parse().map_err(|_| invalid(section, format!("{}:{}: `{tok}` is not a token id", path.display(), n + 1)))?;
            if id as usize >= model.vocab_size || id < lifelong_core::corpus::FIRST_REGULAR {
                return Err(invalid(section, format!("{}:{}: token {id} outside the regular range of vocab_size {}", path.display(), n + 1, model.vocab_size)));
            }
            tokens.push(id);
        }
        if tokens.len() + 1 > model.max_seq_len {
            return Err(invalid(section, format!("{}:{}: {} tokens exceed model.max_seq_len - 1", path.display(), n + 1, tokens.len())));
        }
        out.push(TokenSequence { tokens });
    }
    Ok((out, sha256_hex(text.as_bytes())))
}
