//! The per-batch training objective: MLM plus the configured distillation
//! and SimCSE terms, recorded on one tape.
//!
//! Dropout draws come from `seeded(derive_seed(seed, 1))` for the main pass and
//! `seeded(derive_seed(seed, 2))` for the second SimCSE view, so rebuilding the
//! objective with the same seed replays the same masks. Finite-difference
//! checks rely on this.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::corpus::MaskedBatch;
use crate::distill::{
    contrastive_on_tape, cross_similarity_matrix, seed_on_tape, similarity_matrix, simcse_on_tape, teacher_log_probs,
    weighted_sum, DistillConfig, KdKind, LogitPositions,
};
use crate::model::{check_start_tokens, Dropout, ModelState};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Matrix;
use crate::Result;

/// Frozen-teacher quantities for one batch. Only the fields the distillation
/// kind needs are filled.
#[derive(Clone, Debug, Default)]
pub struct TeacherOutputs {
    /// Rows of the flattened batch the logit term covers.
    pub logit_rows: Vec<usize>,
    /// Teacher log-probabilities at `logit_rows`.
    pub log_probs: Option<Matrix>,
    /// Final-layer states at non-padding positions.
    pub hidden: Option<Matrix>,
    /// Unit-norm start-token representations.
    pub sentence: Option<Matrix>,
}

/// Non-padding rows of the flattened batch.
pub fn valid_rows(batch: &MaskedBatch) -> Vec<usize> {
    batch.input.key_valid().iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i).collect()
}

fn logit_rows(batch: &MaskedBatch, cfg: &DistillConfig) -> Vec<usize> {
    match cfg.logit_positions {
        LogitPositions::Masked => batch.masked_rows(),
        LogitPositions::All => valid_rows(batch),
    }
}

/// One eval-mode teacher forward pass.
pub fn teacher_outputs(teacher: &ModelState, batch: &MaskedBatch, kind: KdKind, cfg: &DistillConfig) -> Result<TeacherOutputs> {
    let mut tape = Tape::new();
    let hidden = teacher.encode(&mut tape, &batch.input, &mut Dropout::Off, false)?;
    let mut out = TeacherOutputs::default();
    if kind.uses_logits() {
        let rows = logit_rows(batch, cfg);
        if !rows.is_empty() {
            let logits = teacher.head_logits(&mut tape, hidden, Some(rows.clone()), false);
            let idx: Vec<usize> = (0..rows.len()).collect();
            out.log_probs = Some(teacher_log_probs(tape.value(logits), &idx));
        }
        out.logit_rows = rows;
    }
    if kind == KdKind::Rep {
        out.hidden = Some(tape.value(hidden).select_rows(&valid_rows(batch)));
    }
    if kind.is_contrastive() {
        check_start_tokens(&batch.input)?;
        let s = ModelState::sentence_rows(&mut tape, hidden, &batch.input);
        out.sentence = Some(tape.value(s).clone());
    }
    Ok(out)
}

/// Distillation inputs for [`objective`].
pub struct KdTerms<'a> {
    pub kind: KdKind,
    pub cfg: &'a DistillConfig,
    pub teacher: &'a TeacherOutputs,
    /// Queue snapshot for the SEED kinds.
    pub queue: Option<&'a Matrix>,
}

/// Scalar parts of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub mlm: f64,
    /// Weighted distillation contribution.
    pub kd: f64,
    pub simcse: f64,
    pub total: f64,
}

pub struct Objective {
    pub tape: Tape,
    pub loss: Var,
    pub parts: LossParts,
}

/// Records `ℓ_MLM + α·ℓ_KD (+ ℓ_SimCSE)` for the student on a fresh tape.
/// Gradients flow only to parameters the student's active branch trains.
///
/// With `dropout` off the main pass is deterministic; SimCSE always draws its
/// second view with dropout.
pub fn objective(
    student: &ModelState,
    batch: &MaskedBatch,
    kd: Option<&KdTerms<'_>>,
    simcse_tau: Option<f64>,
    dropout: bool,
    seed: u64,
) -> Result<Objective> {
    let mut tape = Tape::new();
    let mut r1 = seeded(derive_seed(seed, 1));
    let mut d1 = if dropout { Dropout::On(&mut r1) } else { Dropout::Off };
    let hidden = student.encode(&mut tape, &batch.input, &mut d1, true)?;

    let masked = batch.masked_rows();
    let mut head_rows = masked.clone();
    if let Some(k) = kd {
        if k.kind.uses_logits() && k.teacher.log_probs.is_some() {
            head_rows = k.teacher.logit_rows.clone();
        }
    }
    let index: BTreeMap<usize, usize> = head_rows.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let logits = student.head_logits(&mut tape, hidden, Some(head_rows.clone()), true);
    let targets = masked.iter().map(|&r| (index[&r], batch.targets[r] as usize)).collect();
    let mlm = tape.hard_cross_entropy(logits, targets);
    let mut terms = alloc::vec![(mlm, 1.0)];
    let mut kd_terms: Vec<(Var, f64)> = Vec::new();

    let needs_sentence = kd.is_some_and(|k| k.kind.is_contrastive()) || simcse_tau.is_some();
    let z = if needs_sentence {
        check_start_tokens(&batch.input)?;
        Some(ModelState::sentence_rows(&mut tape, hidden, &batch.input))
    } else {
        None
    };

    if let Some(k) = kd {
        let c = k.cfg;
        if k.kind.uses_logits() {
            if let Some(lp) = &k.teacher.log_probs {
                let idx = (0..head_rows.len()).collect();
                let v = tape.kl_div(logits, lp.clone(), idx, c.kl_direction);
                kd_terms.push((v, c.alpha_logit));
            }
        }
        match k.kind {
            KdKind::Rep => {
                let th = k.teacher.hidden.as_ref().expect("teacher hidden states");
                let h = tape.gather(hidden, valid_rows(batch));
                let v = tape.mse_mean(h, th.clone());
                kd_terms.push((v, c.alpha_other));
            }
            KdKind::Contrastive => {
                let ts = k.teacher.sentence.as_ref().expect("teacher sentence states");
                let bt = similarity_matrix(ts, c.tau_teacher)?;
                let v = contrastive_on_tape(&mut tape, z.expect("student sentence states"), bt, c.tau_student);
                kd_terms.push((v, c.alpha_other));
            }
            KdKind::Seed | KdKind::SeedLogit => {
                let ts = k.teacher.sentence.as_ref().expect("teacher sentence states");
                let q = k.queue.ok_or_else(|| crate::Error::Empty("SEED queue snapshot missing".into()))?;
                let bt = cross_similarity_matrix(ts, q, c.tau_teacher)?;
                let v = seed_on_tape(&mut tape, z.expect("student sentence states"), q, bt, c.tau_student);
                kd_terms.push((v, c.alpha_other));
            }
            KdKind::Logit => {}
        }
    }
    let kd_var = weighted_sum(&mut tape, &kd_terms);
    if let Some(v) = kd_var {
        terms.push((v, 1.0));
    }

    let mut simcse_var = None;
    if let Some(tau) = simcse_tau {
        let mut r2 = seeded(derive_seed(seed, 2));
        let h2 = student.encode(&mut tape, &batch.input, &mut Dropout::On(&mut r2), true)?;
        let z2 = ModelState::sentence_rows(&mut tape, h2, &batch.input);
        let v = simcse_on_tape(&mut tape, z.expect("student sentence states"), z2, tau);
        simcse_var = Some(v);
        terms.push((v, 1.0));
    }

    let loss = weighted_sum(&mut tape, &terms).expect("at least the MLM term");
    let parts = LossParts {
        mlm: tape.value(mlm).item(),
        kd: kd_var.map_or(0.0, |v| tape.value(v).item()),
        simcse: simcse_var.map_or(0.0, |v| tape.value(v).item()),
        total: tape.value(loss).item(),
    };
    Ok(Objective { tape, loss, parts })
}
