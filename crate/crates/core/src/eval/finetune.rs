//! Fine-tuning a pretrained checkpoint on a downstream task.
//!
//! The classifier is one linear layer on the sentence representation. The
//! encoder parameters the task domain's branch trains (the whole shared model,
//! or that domain's adapter and head) are updated along with it in
//! [`FinetuneMode::Full`]; [`FinetuneMode::Probe`] keeps the encoder frozen and
//! trains the linear layer on precomputed features, standardized per dimension
//! with train-split statistics (an affine map, so the head stays linear).

use alloc::format;
use alloc::vec::Vec;

use crate::access::{AccessLog, Phase};
use crate::autodiff::{ParamId, Tape, Var};
use crate::corpus::{DomainId, TokenBatch};
use crate::model::{Dropout, ModelState};
use crate::optim::{clip_global_norm, AdamW};
use crate::rng::{derive_seed, normal, permutation, seeded};
use crate::tensor::Matrix;
use crate::{Error, Result};

use super::metrics::{argmax_labels, lrap, macro_f1, micro_f1, threshold_labels};
use super::task::{DownstreamTask, Example, Metric, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FinetuneMode {
    Full,
    Probe,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FinetuneConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without a strict validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub mode: FinetuneMode,
    /// Multi-label decision threshold on the sigmoid output.
    pub threshold: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { lr: 1e-4, max_epochs: 20, patience: 3, batch_size: 32, weight_decay: 0.0, clip_norm: 1.0, mode: FinetuneMode::Full, threshold: 0.5 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Config("fine-tuning needs lr > 0 and positive epochs, patience and batch size".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FinetuneResult {
    pub seed: u64,
    pub val_score: f64,
    pub test_score: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

/// A fine-tuned classifier: the encoder plus the linear head stored in its
/// parameter set.
#[derive(Clone, Debug)]
pub struct TaskModel {
    pub model: ModelState,
    head_w: ParamId,
    head_b: ParamId,
    /// Per-dimension `(mean, 1/std)` applied before the head in probe mode.
    standardize: Option<(Vec<f64>, Vec<f64>)>,
    pub kind: TaskKind,
    pub n_labels: usize,
}

const EVAL_CHUNK: usize = 64;

impl TaskModel {
    /// Eval-mode logits `[n, n_labels]`.
    pub fn logits(&self, seqs: &[&crate::corpus::TokenSequence]) -> Result<Matrix> {
        let mut out = Vec::with_capacity(seqs.len() * self.n_labels);
        for chunk in seqs.chunks(EVAL_CHUNK) {
            let input = TokenBatch::from_sequences(chunk.iter().copied());
            let z = self.model.sentence_representation(&input, &mut Dropout::Off)?;
            out.extend_from_slice(self.head_value(&z).data());
        }
        Ok(Matrix::from_vec(seqs.len(), self.n_labels, out))
    }

    fn head_value(&self, z: &Matrix) -> Matrix {
        let p = self.model.params();
        let mut y = self.standardized(z.clone()).matmul(p.get(self.head_w));
        let b = p.get(self.head_b);
        for r in 0..y.rows() {
            for (v, bb) in y.row_mut(r).iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        y
    }

    fn standardized(&self, mut z: Matrix) -> Matrix {
        if let Some((mean, inv)) = &self.standardize {
            for r in 0..z.rows() {
                for ((v, m), s) in z.row_mut(r).iter_mut().zip(mean).zip(inv) {
                    *v = (*v - m) * s;
                }
            }
        }
        z
    }

    pub fn predict(&self, seqs: &[&crate::corpus::TokenSequence], threshold: f64) -> Result<Vec<Vec<usize>>> {
        let l = self.logits(seqs)?;
        Ok(decide(&l, self.kind, threshold))
    }
}

fn logit_of(p: f64) -> f64 {
    libm::log(p / (1.0 - p))
}

fn decide(logits: &Matrix, kind: TaskKind, threshold: f64) -> Vec<Vec<usize>> {
    match kind {
        TaskKind::SingleLabel => argmax_labels(logits),
        TaskKind::MultiLabel => threshold_labels(logits, logit_of(threshold)),
    }
}

/// The task metric on `logits` against `examples`' gold labels.
pub fn score(metric: Metric, kind: TaskKind, logits: &Matrix, examples: &[Example], threshold: f64) -> Result<f64> {
    let golds: Vec<Vec<usize>> = examples.iter().map(|e| e.labels.clone()).collect();
    match metric {
        Metric::Lrap => lrap(logits, &golds),
        Metric::MacroF1 => macro_f1(&decide(logits, kind, threshold), &golds),
        Metric::MicroF1 => micro_f1(&decide(logits, kind, threshold), &golds),
    }
}

/// `model` with the branch that serves `domain` made active.
pub fn model_for_domain(model: &ModelState, domain: &DomainId) -> Result<ModelState> {
    let mut m = model.clone();
    m.set_active(m.branch_for(domain))?;
    Ok(m)
}

/// Training, validation and test examples of one fine-tuning run.
pub struct Splits<'a> {
    pub train: &'a [Example],
    pub val: &'a [Example],
    pub test: &'a [Example],
}

/// Fine-tunes on the task's own splits.
pub fn finetune(model: &ModelState, task: &DownstreamTask, cfg: &FinetuneConfig, seed: u64, access: &mut AccessLog) -> Result<(TaskModel, FinetuneResult)> {
    task.validate()?;
    let splits = Splits { train: &task.train, val: &task.val, test: &task.test };
    finetune_on(model, task, splits, cfg, seed, access)
}

/// Fine-tunes with explicit splits; `task` supplies the label space, metric
/// and the domain whose branch is used.
///
/// Only task data is read. The access log is switched to the fine-tuning
/// phase so any pretraining-corpus read made meanwhile counts as a violation.
pub fn finetune_on(
    model: &ModelState,
    task: &DownstreamTask,
    splits: Splits<'_>,
    cfg: &FinetuneConfig,
    seed: u64,
    access: &mut AccessLog,
) -> Result<(TaskModel, FinetuneResult)> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(Error::Empty(format!("task `{}`: empty train split", task.task_id)));
    }
    if splits.val.is_empty() || splits.test.is_empty() {
        return Err(Error::Empty(format!("task `{}`: empty val or test split", task.task_id)));
    }
    let prev_phase = access.phase();
    access.set_phase(Phase::Finetune);

    let mut m = model_for_domain(model, &task.domain_id)?;
    let h = m.config().hidden_dim;
    let mut init = seeded(derive_seed(seed, 0x4ead));
    let std = m.config().init_std;
    let w0 = Matrix::from_vec(h, task.n_labels, (0..h * task.n_labels).map(|_| normal(&mut init) * std).collect());
    let head_w = m.params_mut().add("task.head.w".into(), w0);
    let head_b = m.params_mut().add("task.head.b".into(), Matrix::zeros(1, task.n_labels));
    let mut tm = TaskModel { model: m, head_w, head_b, standardize: None, kind: task.kind, n_labels: task.n_labels };

    let probe_features = match cfg.mode {
        FinetuneMode::Probe => {
            let f = features(&tm.model, splits.train)?;
            tm.standardize = Some(column_stats(&f));
            Some(tm.standardized(f))
        }
        FinetuneMode::Full => None,
    };
    let val_seqs: Vec<_> = splits.val.iter().map(|e| &e.sequence).collect();

    let mut opt = AdamW::new(cfg.weight_decay);
    let mut best: Option<(f64, usize, crate::model::ParamStore)> = None;
    let mut epochs_run = 0;
    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        let epoch_seed = derive_seed(seed, 1 + epoch as u64);
        let order = permutation(&mut seeded(epoch_seed), splits.train.len());
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let step_seed = derive_seed(epoch_seed, bi as u64);
            let batch: Vec<&Example> = idx.iter().map(|&i| &splits.train[i]).collect();
            let mut tape = Tape::new();
            let z = match &probe_features {
                Some(f) => tape.constant(f.select_rows(idx)),
                None => {
                    let input = TokenBatch::from_sequences(batch.iter().map(|e| &e.sequence));
                    let mut rng = seeded(step_seed);
                    let hidden = tm.model.encode(&mut tape, &input, &mut Dropout::On(&mut rng), true)?;
                    ModelState::sentence_rows(&mut tape, hidden, &input)
                }
            };
            let loss = head_loss(&mut tape, &tm, z, &batch);
            let mut grads = tape.backward(loss);
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(tm.model.params_mut(), &grads, cfg.lr);
        }
        let val = score(task.metric, task.kind, &tm.logits(&val_seqs)?, splits.val, cfg.threshold)?;
        let improved = best.as_ref().is_none_or(|(b, _, _)| val > *b);
        if improved {
            best = Some((val, epoch + 1, tm.model.params().clone()));
        } else if epoch + 1 - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
            break;
        }
    }
    let (val_score, best_epoch, params) = best.expect("at least one epoch ran");
    *tm.model.params_mut() = params;
    let test_seqs: Vec<_> = splits.test.iter().map(|e| &e.sequence).collect();
    let test_score = score(task.metric, task.kind, &tm.logits(&test_seqs)?, splits.test, cfg.threshold)?;
    access.set_phase(prev_phase);
    Ok((tm, FinetuneResult { seed, val_score, test_score, epochs_run, best_epoch }))
}

fn features(model: &ModelState, examples: &[Example]) -> Result<Matrix> {
    let h = model.config().hidden_dim;
    let mut out = Vec::with_capacity(examples.len() * h);
    for chunk in examples.chunks(EVAL_CHUNK) {
        let input = TokenBatch::from_sequences(chunk.iter().map(|e| &e.sequence));
        out.extend_from_slice(model.sentence_representation(&input, &mut Dropout::Off)?.data());
    }
    Ok(Matrix::from_vec(examples.len(), h, out))
}

/// Column means and reciprocal standard deviations (1 for constant columns).
fn column_stats(f: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = f.rows() as f64;
    let mut mean = alloc::vec![0.0; f.cols()];
    for r in 0..f.rows() {
        for (m, v) in mean.iter_mut().zip(f.row(r)) {
            *m += v / n;
        }
    }
    let mut var = alloc::vec![0.0; f.cols()];
    for r in 0..f.rows() {
        for ((s, v), m) in var.iter_mut().zip(f.row(r)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let inv = var.iter().map(|v| if *v > 1e-24 { 1.0 / libm::sqrt(*v) } else { 1.0 }).collect();
    (mean, inv)
}

fn head_loss(tape: &mut Tape, tm: &TaskModel, z: Var, batch: &[&Example]) -> Var {
    let p = tm.model.params();
    let w = tape.param(tm.head_w, p.get(tm.head_w), true);
    let b = tape.param(tm.head_b, p.get(tm.head_b), true);
    let logits = tape.linear(z, w, b);
    match tm.kind {
        TaskKind::SingleLabel => tape.hard_cross_entropy(logits, batch.iter().enumerate().map(|(i, e)| (i, e.labels[0])).collect()),
        TaskKind::MultiLabel => {
            let mut t = Matrix::zeros(batch.len(), tm.n_labels);
            for (i, e) in batch.iter().enumerate() {
                for &l in &e.labels {
                    t.set(i, l, 1.0);
                }
            }
            tape.bce_with_logits(logits, t)
        }
    }
}
