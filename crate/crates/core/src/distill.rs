//! Teacher-student distillation losses and the SimCSE objective.
//!
//! Every loss exists twice: a value-level function over plain matrices, used
//! for evaluation and as the reference in tests, and a `*_on_tape` builder
//! that records the same quantity on a [`Tape`] so the student can be trained
//! through it. Teacher quantities always enter as constants.
//!
//! Similarity matrices follow `B_ij = exp(h_i·h_j/τ) / Σ_k exp(h_i·h_k/τ)`
//! with the diagonal term included, and the contrastive loss is
//! `-(1/N) Σ_i Σ_j B^teacher_ij · ln B^student_ij`.

use alloc::format;

use crate::autodiff::{KlDirection, Tape, Var};
use crate::corpus::TokenBatch;
use crate::model::{check_start_tokens, Dropout, ModelState};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{dot, l2_norm, log_sum_exp, softmax_rows, Matrix};
use crate::{Error, Result};

/// Floor applied to student probabilities inside `ln`.
pub const LOG_EPS: f64 = 1e-12;

const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum KdKind {
    Logit,
    Rep,
    Contrastive,
    Seed,
    SeedLogit,
}

impl KdKind {
    /// Kinds trained together with the SimCSE objective.
    pub fn is_contrastive(self) -> bool {
        matches!(self, KdKind::Contrastive | KdKind::Seed | KdKind::SeedLogit)
    }

    pub fn uses_logits(self) -> bool {
        matches!(self, KdKind::Logit | KdKind::SeedLogit)
    }

    pub fn uses_queue(self) -> bool {
        matches!(self, KdKind::Seed | KdKind::SeedLogit)
    }
}

/// Which positions enter the logit KL term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LogitPositions {
    #[default]
    Masked,
    All,
}

/// Weights and temperatures of the distillation objective.
///
/// `alpha_logit` weights the logit KL term and `alpha_other` weights the
/// representation, contrastive and SEED terms; `SeedLogit` uses both.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DistillConfig {
    pub alpha_logit: f64,
    pub alpha_other: f64,
    pub tau_teacher: f64,
    pub tau_student: f64,
    pub tau_simcse: f64,
    pub logit_positions: LogitPositions,
    pub kl_direction: KlDirection,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha_logit: 1.0,
            alpha_other: 0.1,
            tau_teacher: 0.05,
            tau_student: 0.01,
            tau_simcse: 0.05,
            logit_positions: LogitPositions::Masked,
            kl_direction: KlDirection::TeacherToStudent,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_logit >= 0.0 && self.alpha_other >= 0.0) {
            return Err(Error::Config("distillation weights must be >= 0".into()));
        }
        if !(self.tau_teacher > 0.0 && self.tau_student > 0.0 && self.tau_simcse > 0.0) {
            return Err(Error::Config("temperatures must be > 0".into()));
        }
        Ok(())
    }
}

fn same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_unit_rows(m: &Matrix) -> Result<()> {
    for r in 0..m.rows() {
        let n = l2_norm(m.row(r));
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::NotNormalized(n));
        }
    }
    Ok(())
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let lse = log_sum_exp(m.row(r));
        for v in out.row_mut(r) {
            *v -= lse;
        }
    }
    out
}

/// Mean KL divergence over `positions` (row indices) between the teacher and
/// student output distributions.
pub fn logit_kd_loss(student: &Matrix, teacher: &Matrix, positions: &[usize], direction: KlDirection) -> Result<f64> {
    same_shape(student, teacher, "logit distillation")?;
    if positions.is_empty() {
        return Err(Error::Empty("no positions selected for logit distillation".into()));
    }
    let mut total = 0.0;
    for &r in positions {
        let (s, t) = (student.row(r), teacher.row(r));
        let (ls, lt) = (log_sum_exp(s), log_sum_exp(t));
        let (p, q) = match direction {
            KlDirection::TeacherToStudent => ((t, lt), (s, ls)),
            KlDirection::StudentToTeacher => ((s, ls), (t, lt)),
        };
        total += p.0.iter().zip(q.0).map(|(&a, &b)| libm::exp(a - p.1) * ((a - p.1) - (b - q.1))).sum::<f64>();
    }
    Ok(total / positions.len() as f64)
}

/// Mean squared difference over every position and hidden unit.
pub fn rep_kd_loss(student: &Matrix, teacher: &Matrix) -> Result<f64> {
    same_shape(student, teacher, "representation distillation")?;
    let n = student.len().max(1) as f64;
    Ok(student.data().iter().zip(teacher.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Intra-batch similarity matrix `[N, N]` of unit-norm rows.
pub fn similarity_matrix(reps: &Matrix, tau: f64) -> Result<Matrix> {
    cross_similarity_matrix(reps, reps, tau)
}

/// Batch-versus-bank similarity matrix `[N, M]`, each row normalized over the
/// bank columns.
pub fn cross_similarity_matrix(reps: &Matrix, bank: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau > 0.0) {
        return Err(Error::Config("temperature must be > 0".into()));
    }
    if reps.cols() != bank.cols() {
        return Err(Error::Shape(format!("representation width {} vs {}", reps.cols(), bank.cols())));
    }
    if bank.rows() == 0 {
        return Err(Error::Empty("similarity against an empty bank".into()));
    }
    check_unit_rows(reps)?;
    check_unit_rows(bank)?;
    Ok(softmax_rows(&reps.matmul_bt(bank).scaled(1.0 / tau)))
}

/// A cross-entropy value and whether any student entry had to be floored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    pub clamped: bool,
}

/// `-(1/N) Σ_ij teacher_ij ln student_ij` over row-stochastic matrices.
pub fn contrastive_kd_loss(teacher: &Matrix, student: &Matrix) -> Result<CrossEntropy> {
    same_shape(teacher, student, "contrastive distillation")?;
    if teacher.rows() == 0 {
        return Err(Error::Empty("empty similarity matrix".into()));
    }
    let mut clamped = false;
    let mut total = 0.0;
    for (&t, &s) in teacher.data().iter().zip(student.data()) {
        let s = if s < LOG_EPS {
            clamped = true;
            LOG_EPS
        } else {
            s
        };
        total -= t * libm::log(s);
    }
    Ok(CrossEntropy { value: total / teacher.rows() as f64, clamped })
}

/// SEED loss: cross-entropy between teacher and student batch-versus-queue
/// similarity rows, averaged over the batch.
pub fn seed_kd_loss(student: &Matrix, teacher: &Matrix, queue: &Matrix, tau_teacher: f64, tau_student: f64) -> Result<f64> {
    if queue.rows() == 0 {
        return Err(Error::Empty("SEED queue is empty".into()));
    }
    same_shape(student, teacher, "SEED distillation")?;
    let bt = cross_similarity_matrix(teacher, queue, tau_teacher)?;
    cross_similarity_matrix(student, queue, tau_student)?;
    // log-softmax directly: at small τ the student probabilities underflow the
    // clamp long before their logarithms lose precision
    let ls = log_softmax_rows(&student.matmul_bt(queue).scaled(1.0 / tau_student));
    let total: f64 = bt.data().iter().zip(ls.data()).map(|(t, l)| -t * l).sum();
    Ok(total / student.rows() as f64)
}

/// In-batch contrastive loss between two views: row `i` of `first` must pick
/// out row `i` of `second` among all rows of `second`.
pub fn simcse_loss_from_views(first: &Matrix, second: &Matrix, tau: f64) -> Result<f64> {
    same_shape(first, second, "SimCSE views")?;
    if first.rows() < 2 {
        return Err(Error::Config("SimCSE needs a batch of at least 2".into()));
    }
    check_unit_rows(first)?;
    check_unit_rows(second)?;
    let s = first.matmul_bt(second).scaled(1.0 / tau);
    let n = s.rows();
    Ok((0..n).map(|i| log_sum_exp(s.row(i)) - s.get(i, i)).sum::<f64>() / n as f64)
}

/// SimCSE on `input`: two forward passes under independent dropout draws
/// derived from `seed`.
pub fn simcse_loss(model: &ModelState, input: &TokenBatch, tau: f64, seed: u64) -> Result<f64> {
    check_start_tokens(input)?;
    if input.batch < 2 {
        return Err(Error::Config("SimCSE needs a batch of at least 2".into()));
    }
    let mut r1 = seeded(derive_seed(seed, 1));
    let mut r2 = seeded(derive_seed(seed, 2));
    let z1 = model.sentence_representation(input, &mut Dropout::On(&mut r1))?;
    let z2 = model.sentence_representation(input, &mut Dropout::On(&mut r2))?;
    simcse_loss_from_views(&z1, &z2, tau)
}

/// `ℓ_MLM + α·ℓ_KD`, plus `ℓ_SimCSE` when given.
pub fn combine_losses(mlm: f64, kd: f64, alpha: f64, simcse: Option<f64>) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(mlm + alpha * kd + simcse.unwrap_or(0.0))
}

/// Contrastive term on the tape: `student` holds unit-norm rows, `teacher_sim`
/// is the constant teacher similarity matrix.
pub fn contrastive_on_tape(tape: &mut Tape, student: Var, teacher_sim: Matrix, tau_student: f64) -> Var {
    let n = teacher_sim.rows();
    let s = tape.matmul_bt(student, student);
    let s = tape.scale(s, 1.0 / tau_student);
    tape.soft_cross_entropy(s, teacher_sim, (0..n).collect())
}

/// SEED term on the tape against a constant queue snapshot.
pub fn seed_on_tape(tape: &mut Tape, student: Var, queue: &Matrix, teacher_sim: Matrix, tau_student: f64) -> Var {
    let n = teacher_sim.rows();
    let q = tape.constant(queue.clone());
    let s = tape.matmul_bt(student, q);
    let s = tape.scale(s, 1.0 / tau_student);
    tape.soft_cross_entropy(s, teacher_sim, (0..n).collect())
}

/// SimCSE term on the tape from two views of the same batch.
pub fn simcse_on_tape(tape: &mut Tape, first: Var, second: Var, tau: f64) -> Var {
    let n = tape.value(first).rows();
    let s = tape.matmul_bt(first, second);
    let s = tape.scale(s, 1.0 / tau);
    tape.hard_cross_entropy(s, (0..n).map(|i| (i, i)).collect())
}

/// Sum of scalar nodes with weights.
pub fn weighted_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Option<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let t = if w == 1.0 { v } else { tape.scale(v, w) };
        acc = Some(match acc {
            Some(a) => tape.add(a, t),
            None => t,
        });
    }
    acc
}

/// Teacher log-probabilities at `rows` of full logits, the constant side of
/// the logit KL term.
pub fn teacher_log_probs(teacher_logits: &Matrix, rows: &[usize]) -> Matrix {
    log_softmax_rows(&teacher_logits.select_rows(rows))
}

/// Raw dot products, used to check that similarity rows keep their argmax.
pub fn dot_matrix(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out.set(i, j, dot(a.row(i), b.row(j)));
        }
    }
    out
}
