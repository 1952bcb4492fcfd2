//! Downstream evaluation: synthetic tasks, fine-tuning, the retention matrix,
//! temporal generalization, held-out MLM perplexity and k-shot curves.
//!
//! Every protocol here is a sequence of independent fine-tuning jobs. The
//! sequential drivers ([`retention_matrix`] and friends) run them in order;
//! callers that want parallelism enumerate the jobs with [`retention_jobs`],
//! run them however they like, and reduce with [`assemble_retention`].

mod finetune;
pub mod metrics;
mod task;

pub use finetune::{finetune, finetune_on, model_for_domain, score, FinetuneConfig, FinetuneMode, FinetuneResult, Splits, TaskModel};
pub use task::{marker_tokens, synth_downstream_task, DownstreamTask, Example, Metric, TaskKind, TaskSpec};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::access::{AccessLog, Phase, Split};
use crate::corpus::{mask_batch, DomainCorpus, TokenSequence};
use crate::model::{save_checkpoint, ModelState};
use crate::rng::{derive_seed, sample_without_replacement, seeded};
use crate::{Error, Result};

/// Fewest fine-tuning seeds a reported cell may carry.
pub const MIN_SEEDS: usize = 3;

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}

/// Scores of one evaluation repeated over fine-tuning seeds.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SeedScores {
    pub scores: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

impl SeedScores {
    pub fn new(scores: Vec<(u64, f64)>) -> Self {
        let v: Vec<f64> = scores.iter().map(|s| s.1).collect();
        let (mean, std) = mean_std(&v);
        Self { scores, mean, std }
    }
}

/// Content digest identifying a checkpoint in reports.
pub fn model_digest(model: &ModelState) -> String {
    String::from(&save_checkpoint(model, 0, "").content_digest()[..16])
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.len() < MIN_SEEDS {
        return Err(Error::Config(format!("need at least {MIN_SEEDS} fine-tuning seeds, got {}", seeds.len())));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RetentionCell {
    /// Checkpoint step `i` (1-based).
    pub step: usize,
    /// Domain index `t` of the task (1-based), `t <= i`.
    pub task_domain: usize,
    pub task_id: String,
    pub checkpoint_digest: String,
    pub result: SeedScores,
}

/// Scores of `f_i` fine-tuned on the task of domain `t`, for every `t <= i`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RetentionMatrix {
    pub n_steps: usize,
    pub metric: String,
    /// Row-major over `(i, t)`.
    pub cells: Vec<RetentionCell>,
}

impl RetentionMatrix {
    pub fn get(&self, step: usize, task_domain: usize) -> Option<&RetentionCell> {
        self.cells.iter().find(|c| c.step == step && c.task_domain == task_domain)
    }

    /// `score(f_t on S_t) − score(f_T on S_t)`.
    pub fn forgetting(&self, task_domain: usize) -> Option<f64> {
        let own = self.get(task_domain, task_domain)?;
        let last = self.get(self.n_steps, task_domain)?;
        Some(own.result.mean - last.result.mean)
    }

    /// Mean score of the last checkpoint on the latest domain's task.
    pub fn latest(&self) -> Option<f64> {
        self.get(self.n_steps, self.n_steps).map(|c| c.result.mean)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetentionJob {
    pub step: usize,
    pub task_domain: usize,
    pub seed: u64,
}

/// Every `(i, t <= i, seed)` fine-tuning job of a `T`-step retention matrix.
pub fn retention_jobs(n_steps: usize, seeds: &[u64]) -> Vec<RetentionJob> {
    let mut out = Vec::new();
    for step in 1..=n_steps {
        for task_domain in 1..=step {
            for &seed in seeds {
                out.push(RetentionJob { step, task_domain, seed });
            }
        }
    }
    out
}

/// Reduces finished jobs into a matrix. Every job of
/// [`retention_jobs`]`(digests.len(), seeds)` must be present exactly once.
pub fn assemble_retention(tasks: &[DownstreamTask], digests: &[String], seeds: &[u64], results: &[(RetentionJob, f64)]) -> Result<RetentionMatrix> {
    check_seeds(seeds)?;
    let n = digests.len();
    if tasks.len() != n {
        return Err(Error::Config(format!("{} tasks for {n} checkpoints", tasks.len())));
    }
    let metric = tasks.first().ok_or_else(|| Error::Empty("no tasks".into()))?.metric.name().into();
    let mut cells = Vec::new();
    for step in 1..=n {
        for t in 1..=step {
            let mut scores = Vec::new();
            for &seed in seeds {
                let hits: Vec<f64> = results.iter().filter(|(j, _)| j.step == step && j.task_domain == t && j.seed == seed).map(|r| r.1).collect();
                match hits.as_slice() {
                    [v] => scores.push((seed, *v)),
                    [] => return Err(Error::Empty(format!("missing result for checkpoint {step}, task {t}, seed {seed}"))),
                    _ => return Err(Error::Config(format!("duplicate result for checkpoint {step}, task {t}, seed {seed}"))),
                }
            }
            cells.push(RetentionCell {
                step,
                task_domain: t,
                task_id: tasks[t - 1].task_id.clone(),
                checkpoint_digest: digests[step - 1].clone(),
                result: SeedScores::new(scores),
            });
        }
    }
    Ok(RetentionMatrix { n_steps: n, metric, cells })
}

/// Runs one retention job.
pub fn run_retention_job(checkpoints: &[ModelState], tasks: &[DownstreamTask], job: RetentionJob, cfg: &FinetuneConfig, access: &mut AccessLog) -> Result<f64> {
    let model = checkpoints.get(job.step - 1).ok_or_else(|| Error::Checkpoint(format!("missing checkpoint f_{}", job.step)))?;
    let task = tasks.get(job.task_domain - 1).ok_or_else(|| Error::Config(format!("missing task for domain {}", job.task_domain)))?;
    Ok(finetune(model, task, cfg, job.seed, access)?.1.test_score)
}

/// `checkpoints[i-1]` is `f_i`; `tasks[t-1]` is the task of domain `t`.
pub fn retention_matrix(checkpoints: &[ModelState], tasks: &[DownstreamTask], cfg: &FinetuneConfig, seeds: &[u64], access: &mut AccessLog) -> Result<RetentionMatrix> {
    check_seeds(seeds)?;
    if checkpoints.len() != tasks.len() {
        return Err(Error::Checkpoint(format!("{} checkpoints for {} domain tasks", checkpoints.len(), tasks.len())));
    }
    let mut results = Vec::new();
    for job in retention_jobs(checkpoints.len(), seeds) {
        results.push((job, run_retention_job(checkpoints, tasks, job, cfg, access)?));
    }
    let digests: Vec<String> = checkpoints.iter().map(model_digest).collect();
    assemble_retention(tasks, &digests, seeds, &results)
}

/// Fine-tunes on `train_task` (train and val splits) and tests on
/// `test_task`'s test split.
pub fn temporal_generalization(
    model: &ModelState,
    train_task: &DownstreamTask,
    test_task: &DownstreamTask,
    cfg: &FinetuneConfig,
    seeds: &[u64],
    access: &mut AccessLog,
) -> Result<SeedScores> {
    if train_task.label_space != test_task.label_space || train_task.n_labels != test_task.n_labels || train_task.kind != test_task.kind {
        return Err(Error::LabelSpace(format!("`{}` and `{}` do not share labels", train_task.task_id, test_task.task_id)));
    }
    train_task.validate()?;
    test_task.validate()?;
    let mut scores = Vec::new();
    for &seed in seeds {
        let splits = Splits { train: &train_task.train, val: &train_task.val, test: &test_task.test };
        let (_, r) = finetune_on(model, train_task, splits, cfg, seed, access)?;
        scores.push((seed, r.test_score));
    }
    Ok(SeedScores::new(scores))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KShotPoint {
    pub shots: usize,
    pub result: SeedScores,
}

/// The `shots`-example training subset for `seed`; the full split when
/// `shots` equals its size.
pub fn kshot_subset(train: &[Example], shots: usize, seed: u64) -> Result<Vec<Example>> {
    if shots == 0 || shots > train.len() {
        return Err(Error::Config(format!("shots must lie in 1..={}, got {shots}", train.len())));
    }
    if shots == train.len() {
        return Ok(train.to_vec());
    }
    let mut idx = sample_without_replacement(&mut seeded(derive_seed(seed, shots as u64)), train.len(), shots);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| train[i].clone()).collect())
}

/// Scores over a strictly increasing shot grid.
pub fn kshot_curve(model: &ModelState, task: &DownstreamTask, shots: &[usize], cfg: &FinetuneConfig, seeds: &[u64], access: &mut AccessLog) -> Result<Vec<KShotPoint>> {
    task.validate()?;
    if shots.is_empty() || shots.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("shot grid must be nonempty and strictly increasing".into()));
    }
    let mut out = Vec::new();
    for &k in shots {
        let mut scores = Vec::new();
        for &seed in seeds {
            let sub = kshot_subset(&task.train, k, seed)?;
            let (_, r) = finetune_on(model, task, Splits { train: &sub, val: &task.val, test: &task.test }, cfg, seed, access)?;
            scores.push((seed, r.test_score));
        }
        out.push(KShotPoint { shots: k, result: SeedScores::new(scores) });
    }
    Ok(out)
}

const PERPLEXITY_BATCH: usize = 32;

/// Mean masked-position cross-entropy in nats over `heldout`. Batch `j` is
/// masked with seed `derive_seed(mask_seed, j)`, so the score is a pure
/// function of the model and the arguments.
pub fn mlm_log_perplexity(model: &ModelState, heldout: &[TokenSequence], mask_prob: f64, mask_seed: u64) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::Empty("held-out set is empty".into()));
    }
    let v = model.config().vocab_size;
    let (mut total, mut n) = (0.0, 0usize);
    for (j, chunk) in heldout.chunks(PERPLEXITY_BATCH).enumerate() {
        let batch = mask_batch(chunk, mask_prob, v, derive_seed(mask_seed, j as u64))?;
        let out = model.forward_mlm(&batch)?;
        total += out.loss * batch.n_masked() as f64;
        n += batch.n_masked();
    }
    if n == 0 {
        return Err(Error::Empty("no masked positions in the held-out set".into()));
    }
    Ok(total / n as f64)
}

/// [`mlm_log_perplexity`] on a corpus's held-out split, read through the
/// access log under the evaluation phase, with the domain's branch active.
pub fn heldout_log_perplexity(model: &ModelState, corpus: &DomainCorpus, mask_prob: f64, mask_seed: u64, access: &mut AccessLog) -> Result<f64> {
    let prev = access.phase();
    access.set_phase(Phase::Evaluate);
    let m = model_for_domain(model, &corpus.domain_id)?;
    let heldout = access.split(corpus, Split::Heldout);
    let r = mlm_log_perplexity(&m, heldout, mask_prob, mask_seed);
    access.set_phase(prev);
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RecordKind {
    Retention,
    Temporal,
    KShot,
    Perplexity,
}

/// One reported number with everything needed to reproduce it.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScoreRecord {
    pub kind: RecordKind,
    pub checkpoint_digest: String,
    pub checkpoint_step: usize,
    /// Task id, or the held-out domain for perplexity records.
    pub task_id: String,
    /// Fine-tuning seed, or the mask seed for perplexity records.
    pub seed: u64,
    pub metric: String,
    pub value: f64,
    pub shots: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TemporalResult {
    pub train_task: String,
    pub test_task: String,
    pub checkpoint_digest: String,
    pub checkpoint_step: usize,
    pub metric: String,
    pub result: SeedScores,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PerplexityResult {
    pub checkpoint_step: usize,
    pub checkpoint_digest: String,
    pub domain: String,
    pub mask_seed: u64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KShotCurve {
    pub task_id: String,
    pub checkpoint_digest: String,
    pub checkpoint_step: usize,
    pub metric: String,
    pub points: Vec<KShotPoint>,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub retention: Option<RetentionMatrix>,
    pub temporal: Vec<TemporalResult>,
    pub perplexity: Vec<PerplexityResult>,
    pub kshot: Vec<KShotCurve>,
}

impl EvalReport {
    /// Latest-domain score: the last checkpoint on the last domain's task.
    pub fn latest(&self) -> Option<f64> {
        self.retention.as_ref().and_then(RetentionMatrix::latest)
    }

    /// Flat per-seed records of everything in the report.
    pub fn records(&self) -> Vec<ScoreRecord> {
        let mut out = Vec::new();
        if let Some(r) = &self.retention {
            for c in &r.cells {
                for (seed, v) in &c.result.scores {
                    out.push(ScoreRecord {
                        kind: RecordKind::Retention,
                        checkpoint_digest: c.checkpoint_digest.clone(),
                        checkpoint_step: c.step,
                        task_id: c.task_id.clone(),
                        seed: *seed,
                        metric: r.metric.clone(),
                        value: *v,
                        shots: None,
                    });
                }
            }
        }
        for t in &self.temporal {
            for (seed, v) in &t.result.scores {
                out.push(ScoreRecord {
                    kind: RecordKind::Temporal,
                    checkpoint_digest: t.checkpoint_digest.clone(),
                    checkpoint_step: t.checkpoint_step,
                    task_id: format!("{}->{}", t.train_task, t.test_task),
                    seed: *seed,
                    metric: t.metric.clone(),
                    value: *v,
                    shots: None,
                });
            }
        }
        for p in &self.perplexity {
            out.push(ScoreRecord {
                kind: RecordKind::Perplexity,
                checkpoint_digest: p.checkpoint_digest.clone(),
                checkpoint_step: p.checkpoint_step,
                task_id: p.domain.clone(),
                seed: p.mask_seed,
                metric: "mlm_log_perplexity".into(),
                value: p.value,
                shots: None,
            });
        }
        for k in &self.kshot {
            for pt in &k.points {
                for (seed, v) in &pt.result.scores {
                    out.push(ScoreRecord {
                        kind: RecordKind::KShot,
                        checkpoint_digest: k.checkpoint_digest.clone(),
                        checkpoint_step: k.checkpoint_step,
                        task_id: k.task_id.clone(),
                        seed: *seed,
                        metric: k.metric.clone(),
                        value: *v,
                        shots: Some(pt.shots),
                    });
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
