//! Lifelong pretraining over a domain stream.
//!
//! [`train_domain`] runs one domain's schedule: single-epoch stream batches,
//! linear learning-rate decay to zero, a replay batch every `k` steps once
//! the memory holds earlier domains, and distillation against the frozen
//! previous checkpoint on every `k′`-th stream batch and on every replay
//! batch. Replay and distillation gradients join the stream gradient in one
//! optimizer step. [`run_stream`] strings domains together and handles the
//! per-algorithm bookkeeping at each boundary.

pub mod cost;
pub mod ewc;
pub mod objective;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::access::{AccessLog, Phase, Split};
use crate::autodiff::Gradients;
use crate::corpus::{mask_batch, shuffle_union, DomainCorpus, DomainStream, TokenSequence};
use crate::distill::{DistillConfig, KdKind};
use crate::memory::{RebalanceReport, ReplayMemory, RepresentationQueue};
use crate::model::{save_checkpoint, Checkpoint};
use crate::model::{Branch, ModelConfig, ModelState};
use crate::optim::{clip_global_norm, AdamW};
use crate::rng::{derive_seed, permutation, seeded};
use crate::{Error, Result};

pub use cost::{cost_closed_form, verify_ledger, CostLedger, PassCounts};
pub use ewc::{EwcConfig, FisherState};
use objective::{objective, teacher_outputs, KdTerms, TeacherOutputs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Algorithm {
    #[default]
    Sequential,
    TaskSpecific,
    Mtl,
    Er,
    Ewc,
    Adapter,
    LayerExpand,
    LogitKd,
    RepKd,
    ContrastKd,
    SeedKd,
    SeedLogitKd,
}

impl Algorithm {
    pub const ALL: [Algorithm; 12] = [
        Algorithm::Sequential,
        Algorithm::TaskSpecific,
        Algorithm::Mtl,
        Algorithm::Er,
        Algorithm::Ewc,
        Algorithm::Adapter,
        Algorithm::LayerExpand,
        Algorithm::LogitKd,
        Algorithm::RepKd,
        Algorithm::ContrastKd,
        Algorithm::SeedKd,
        Algorithm::SeedLogitKd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sequential => "sequential",
            Algorithm::TaskSpecific => "task_specific",
            Algorithm::Mtl => "mtl",
            Algorithm::Er => "er",
            Algorithm::Ewc => "ewc",
            Algorithm::Adapter => "adapter",
            Algorithm::LayerExpand => "layer_expand",
            Algorithm::LogitKd => "logit_kd",
            Algorithm::RepKd => "rep_kd",
            Algorithm::ContrastKd => "contrast_kd",
            Algorithm::SeedKd => "seed_kd",
            Algorithm::SeedLogitKd => "seed_logit_kd",
        }
    }

    pub fn kd_kind(self) -> Option<KdKind> {
        match self {
            Algorithm::LogitKd => Some(KdKind::Logit),
            Algorithm::RepKd => Some(KdKind::Rep),
            Algorithm::ContrastKd => Some(KdKind::Contrastive),
            Algorithm::SeedKd => Some(KdKind::Seed),
            Algorithm::SeedLogitKd => Some(KdKind::SeedLogit),
            _ => None,
        }
    }

    /// ER and every distillation algorithm replay from the memory.
    pub fn uses_replay(self) -> bool {
        self == Algorithm::Er || self.kd_kind().is_some()
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| Error::UnknownAlgorithm(s.into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub steps_first_domain: usize,
    pub steps_later_domain: usize,
    /// Scales every domain's step count (the `b′ = 1.2b` control).
    pub steps_multiplier: f64,
    pub effective_batch_size: usize,
    pub micro_batch_size: usize,
    pub lr_init: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub mask_prob: f64,
    /// Replay interval `k`.
    pub replay_every: usize,
    /// Stream distillation interval `k′`.
    pub distill_every: usize,
    pub memory_capacity: usize,
    pub queue_capacity: usize,
    pub ewc: EwcConfig,
    pub distill: DistillConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Sequential,
            steps_first_domain: 800,
            steps_later_domain: 400,
            steps_multiplier: 1.0,
            effective_batch_size: 64,
            micro_batch_size: 16,
            lr_init: 5e-4,
            weight_decay: 0.01,
            grad_clip: 1.0,
            mask_prob: 0.15,
            replay_every: 10,
            distill_every: 1,
            memory_capacity: 2048,
            queue_capacity: 1024,
            ewc: EwcConfig::default(),
            distill: DistillConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.replay_every == 0 || self.distill_every == 0 {
            return bad("replay_every and distill_every must be >= 1".into());
        }
        if self.micro_batch_size == 0 || self.effective_batch_size % self.micro_batch_size != 0 {
            return bad(format!(
                "effective_batch_size {} must be a positive multiple of micro_batch_size {}",
                self.effective_batch_size, self.micro_batch_size
            ));
        }
        if self.steps_first_domain == 0 || self.steps_later_domain == 0 || !(self.steps_multiplier > 0.0) {
            return bad("step counts and steps_multiplier must be positive".into());
        }
        if !(self.lr_init > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("lr_init must be > 0; weight_decay and grad_clip >= 0".into());
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return bad("mask_prob must be in (0, 1)".into());
        }
        if self.memory_capacity == 0 || self.queue_capacity == 0 {
            return bad("memory_capacity and queue_capacity must be >= 1".into());
        }
        if self.uses_simcse() && self.micro_batch_size < 2 {
            return bad("contrastive objectives need micro_batch_size >= 2".into());
        }
        if !(0.0..1.0).contains(&self.ewc.gamma) || self.ewc.lambda < 0.0 {
            return bad("ewc.gamma must be in [0, 1) and ewc.lambda >= 0".into());
        }
        self.distill.validate()
    }

    /// SimCSE accompanies the contrastive kinds in their dense form only.
    pub fn uses_simcse(&self) -> bool {
        self.algorithm.kd_kind().is_some_and(KdKind::is_contrastive) && self.distill_every == 1
    }

    /// Step count of the `index`-th domain (0-based).
    pub fn steps_for(&self, index: usize) -> usize {
        let base = if index == 0 { self.steps_first_domain } else { self.steps_later_domain };
        libm::round(base as f64 * self.steps_multiplier) as usize
    }

    /// Linear decay from `lr_init` at step 0 towards zero at `steps`.
    pub fn lr_at(&self, step: usize, steps: usize) -> f64 {
        self.lr_init * (1.0 - step as f64 / steps as f64)
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepLog {
    pub domain: usize,
    pub step: usize,
    pub lr: f64,
    /// Stream-batch MLM loss.
    pub mlm: f64,
    /// Weighted distillation term on the stream batch.
    pub kd: f64,
    pub simcse: f64,
    /// MLM loss on the replay batch, when one was drawn.
    pub replay_mlm: Option<f64>,
    pub ewc_penalty: f64,
    pub distilled: bool,
    /// Passes so far in this domain.
    pub forward: u64,
    pub backward: u64,
}

/// What one domain's training may touch besides the model and the corpus.
pub struct DomainContext<'a> {
    /// 0-based position in the stream.
    pub index: usize,
    pub steps: usize,
    pub memory: Option<&'a ReplayMemory>,
    pub teacher: Option<&'a ModelState>,
    pub fisher: Option<&'a FisherState>,
    pub queue: Option<&'a mut RepresentationQueue>,
    pub access: &'a mut AccessLog,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DomainOutput {
    pub logs: Vec<StepLog>,
    pub cost: PassCounts,
}

struct BatchResult {
    grads: Gradients,
    mlm: f64,
    kd: f64,
    simcse: f64,
}

fn micro_chunks(seqs: &[TokenSequence], micro: usize) -> impl Iterator<Item = &[TokenSequence]> {
    seqs.chunks(micro)
}

/// Gradient of the mean objective over the micro-batches of one logical batch.
fn batch_gradient(
    model: &ModelState,
    seqs: &[TokenSequence],
    cfg: &TrainConfig,
    distill: Option<(&ModelState, KdKind)>,
    queue: &mut Option<&mut RepresentationQueue>,
    push_queue: bool,
    simcse: bool,
    seed: u64,
) -> Result<BatchResult> {
    let n_micro = seqs.len().div_ceil(cfg.micro_batch_size);
    let w = 1.0 / n_micro as f64;
    let mut out = BatchResult { grads: Gradients::default(), mlm: 0.0, kd: 0.0, simcse: 0.0 };
    let vocab = model.config().vocab_size;
    for (m, chunk) in micro_chunks(seqs, cfg.micro_batch_size).enumerate() {
        let m = m as u64;
        let batch = mask_batch(chunk, cfg.mask_prob, vocab, derive_seed(seed, 10 + m))?;
        let teacher: Option<(TeacherOutputs, KdKind)> = match distill {
            Some((t, kind)) => Some((teacher_outputs(t, &batch, kind, &cfg.distill)?, kind)),
            None => None,
        };
        let mut snapshot = None;
        if let Some((tout, kind)) = &teacher {
            if kind.uses_queue() {
                let q = queue.as_deref_mut().ok_or_else(|| Error::Config("SEED distillation without a queue".into()))?;
                if push_queue {
                    q.push(tout.sentence.as_ref().expect("teacher sentence states"))?;
                }
                snapshot = Some(q.snapshot());
            }
        }
        let terms = teacher.as_ref().map(|(tout, kind)| KdTerms { kind: *kind, cfg: &cfg.distill, teacher: tout, queue: snapshot.as_ref() });
        let tau = simcse.then_some(cfg.distill.tau_simcse);
        let obj = objective(model, &batch, terms.as_ref(), tau, true, derive_seed(seed, 100 + m))?;
        let mut g = obj.tape.backward(obj.loss);
        g.scale(w);
        out.grads.merge(&g);
        out.mlm += w * obj.parts.mlm;
        out.kd += w * obj.parts.kd;
        out.simcse += w * obj.parts.simcse;
    }
    Ok(out)
}

/// Trains `model` on one domain. Errors before any update if the train split
/// cannot supply `steps × effective_batch_size` distinct sequences, or if a
/// replay or distillation algorithm is missing its memory or teacher.
pub fn train_domain(model: &mut ModelState, domain: &DomainCorpus, cfg: &TrainConfig, ctx: DomainContext<'_>) -> Result<DomainOutput> {
    cfg.validate()?;
    let DomainContext { index, steps, memory, teacher, fisher, mut queue, access } = ctx;
    let need = steps * cfg.effective_batch_size;
    if need > domain.train.len() {
        return Err(Error::CorpusTooSmall(format!(
            "`{}` has {} training sequences; {steps} steps x batch {} need {need}",
            domain.domain_id,
            domain.train.len(),
            cfg.effective_batch_size
        )));
    }
    let later = index > 0;
    let replay = cfg.algorithm.uses_replay() && later;
    let kd = cfg.algorithm.kd_kind().filter(|_| later);
    if replay && memory.is_none_or(ReplayMemory::is_empty) {
        return Err(Error::Config(format!("{} needs a non-empty replay memory after the first domain", cfg.algorithm)));
    }
    if kd.is_some() && teacher.is_none() {
        return Err(Error::Config(format!("{} needs a teacher after the first domain", cfg.algorithm)));
    }
    let simcse = kd.is_some() && cfg.uses_simcse();
    let ewc = fisher.filter(|f| f.has_anchor());

    let domain_seed = derive_seed(cfg.seed, 1000 + index as u64);
    let order = permutation(&mut seeded(derive_seed(domain_seed, 0)), domain.train.len());
    let b = cfg.effective_batch_size;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut out = DomainOutput::default();
    let mut counts = PassCounts::default();

    for step in 0..steps {
        let step_seed = derive_seed(domain_seed, 1 + step as u64);
        let seqs: Vec<TokenSequence> = order[step * b..(step + 1) * b].iter().map(|&i| access.train(domain, i).clone()).collect();
        let distilled = kd.is_some() && (step + 1) % cfg.distill_every == 0;
        let stream_kd = kd.filter(|_| distilled).map(|k| (teacher.expect("checked above"), k));
        let mut res = batch_gradient(model, &seqs, cfg, stream_kd, &mut queue, true, simcse, derive_seed(step_seed, 1))?;
        counts.add(passes(simcse, distilled));

        let mut replay_mlm = None;
        if replay && (step + 1) % cfg.replay_every == 0 {
            let mem = memory.expect("checked above");
            let rseqs = mem.sample(b, derive_seed(step_seed, 2))?;
            let replay_kd = kd.map(|k| (teacher.expect("checked above"), k));
            let r = batch_gradient(model, &rseqs, cfg, replay_kd, &mut queue, false, simcse, derive_seed(step_seed, 3))?;
            res.grads.merge(&r.grads);
            replay_mlm = Some(r.mlm);
            counts.add(passes(simcse, kd.is_some()));
        }

        let mut penalty = 0.0;
        if let Some(f) = ewc {
            penalty = f.penalty(model)?;
            res.grads.merge(&f.penalty_gradient(model, &model.trainable_mask())?);
        }

        clip_global_norm(&mut res.grads, cfg.grad_clip);
        let lr = cfg.lr_at(step, steps);
        opt.step(model.params_mut(), &res.grads, lr);
        model.step_counter += 1;
        out.logs.push(StepLog {
            domain: index,
            step,
            lr,
            mlm: res.mlm,
            kd: res.kd,
            simcse: res.simcse,
            replay_mlm,
            ewc_penalty: penalty,
            distilled,
            forward: counts.forward,
            backward: counts.backward,
        });
    }
    out.cost = counts;
    Ok(out)
}

/// Passes spent on one logical batch.
fn passes(simcse: bool, teacher: bool) -> PassCounts {
    let views = 1 + u64::from(simcse);
    PassCounts { forward: views + u64::from(teacher), backward: views }
}

/// Everything a stream run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub algorithm: Algorithm,
    /// `f_0`, the shared initialization.
    pub initial: Checkpoint,
    /// `f_1 … f_T`; a single checkpoint for the multi-task baseline.
    pub checkpoints: Vec<Checkpoint>,
    pub logs: Vec<StepLog>,
    pub ledger: CostLedger,
    pub access: AccessLog,
    pub memory_reports: Vec<RebalanceReport>,
}

/// Seed of `f_0` for a training seed.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, 0x0f0)
}

/// Pretrains over the whole stream with the configured algorithm.
pub fn run_stream(stream: &DomainStream, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(Error::Empty("stream has no domains".into()));
    }
    let f0 = ModelState::init(model_cfg.clone(), init_seed(cfg.seed))?;
    let mut out = RunOutput {
        algorithm: cfg.algorithm,
        initial: save_checkpoint(&f0, 0, cfg.algorithm.name()),
        checkpoints: Vec::new(),
        logs: Vec::new(),
        ledger: CostLedger::default(),
        access: AccessLog::new(),
        memory_reports: Vec::new(),
    };
    match cfg.algorithm {
        Algorithm::TaskSpecific => {
            for (t, domain) in stream.domains.iter().enumerate() {
                let mut model = f0.clone();
                out.access.set_phase(Phase::Pretrain(domain.domain_id.clone()));
                let ctx = DomainContext { index: t, steps: cfg.steps_for(t), memory: None, teacher: None, fisher: None, queue: None, access: &mut out.access };
                let d = train_domain(&mut model, domain, cfg, ctx)?;
                finish_domain(&mut out, domain, d, &model, t, cfg);
            }
        }
        Algorithm::Mtl => {
            let union = shuffle_union(stream, derive_seed(cfg.seed, 0x3a1));
            let steps: usize = (0..stream.len()).map(|t| cfg.steps_for(t)).sum();
            let mut model = f0.clone();
            out.access.set_phase(Phase::Offline);
            let ctx = DomainContext { index: 0, steps, memory: None, teacher: None, fisher: None, queue: None, access: &mut out.access };
            let d = train_domain(&mut model, &union, cfg, ctx)?;
            finish_domain(&mut out, &union, d, &model, stream.len() - 1, cfg);
        }
        _ => run_lifelong(stream, f0, cfg, &mut out)?,
    }
    out.access.set_phase(Phase::Idle);
    Ok(out)
}

fn finish_domain(out: &mut RunOutput, domain: &DomainCorpus, d: DomainOutput, model: &ModelState, t: usize, cfg: &TrainConfig) {
    out.logs.extend(d.logs);
    out.ledger.per_domain.push((domain.domain_id.clone(), d.cost));
    out.checkpoints.push(save_checkpoint(model, t + 1, cfg.algorithm.name()));
}

fn run_lifelong(stream: &DomainStream, f0: ModelState, cfg: &TrainConfig, out: &mut RunOutput) -> Result<()> {
    let mut model = f0;
    let mut memory = cfg.algorithm.uses_replay().then(|| ReplayMemory::new(cfg.memory_capacity)).transpose()?;
    let mut queue = cfg
        .algorithm
        .kd_kind()
        .filter(|k| k.uses_queue())
        .map(|_| RepresentationQueue::new(cfg.queue_capacity))
        .transpose()?;
    let mut fisher = (cfg.algorithm == Algorithm::Ewc).then(|| FisherState::new(&cfg.ewc));

    for (t, domain) in stream.domains.iter().enumerate() {
        let id = &domain.domain_id;
        if t > 0 {
            match cfg.algorithm {
                Algorithm::Adapter => {
                    model.add_adapter(id)?;
                    model.set_active(Branch::Adapter(id.clone()))?;
                }
                Algorithm::LayerExpand => {
                    model.expand_layers(id)?;
                    model.set_active(Branch::Expansion(id.clone()))?;
                }
                _ => {}
            }
        }
        let teacher = (t > 0 && cfg.algorithm.kd_kind().is_some()).then(|| model.clone());
        if let Some(q) = queue.as_mut() {
            q.clear();
        }
        out.access.set_phase(Phase::Pretrain(id.clone()));
        let ctx = DomainContext {
            index: t,
            steps: cfg.steps_for(t),
            memory: memory.as_ref(),
            teacher: teacher.as_ref(),
            fisher: fisher.as_ref(),
            queue: queue.as_mut(),
            access: &mut out.access,
        };
        let d = train_domain(&mut model, domain, cfg, ctx)?;
        finish_domain(out, domain, d, &model, t, cfg);

        out.access.set_phase(Phase::Boundary(id.clone()));
        if let Some(m) = memory.as_mut() {
            out.access.split(domain, Split::Train);
            out.memory_reports.push(m.rebalance_after_domain(domain, derive_seed(cfg.seed, 2000 + t as u64))?);
        }
        if let Some(f) = fisher.as_mut() {
            let aux = estimate_fisher(f, &model, domain, cfg, t, &mut out.access)?;
            out.ledger.aux.push((id.clone(), aux));
            f.set_anchor(&model);
        }
    }
    Ok(())
}

/// Updates the Fisher estimate on `fisher_batches` seeded batches of the
/// finished domain.
fn estimate_fisher(f: &mut FisherState, model: &ModelState, domain: &DomainCorpus, cfg: &TrainConfig, t: usize, access: &mut AccessLog) -> Result<PassCounts> {
    let seed = derive_seed(cfg.seed, 3000 + t as u64);
    let mut rng = seeded(seed);
    let n = domain.train.len();
    let mut counts = PassCounts::default();
    for i in 0..cfg.ewc.fisher_batches {
        let idx = crate::rng::sample_without_replacement(&mut rng, n, cfg.micro_batch_size.min(n));
        let seqs: Vec<TokenSequence> = idx.iter().map(|&j| access.train(domain, j).clone()).collect();
        let batch = mask_batch(&seqs, cfg.mask_prob, model.config().vocab_size, derive_seed(seed, 1 + i as u64))?;
        f.accumulate_batch(model, &batch, derive_seed(seed, 10_000 + i as u64))?;
        counts.add(PassCounts { forward: 1, backward: 1 });
    }
    Ok(counts)
}
