//! Classification metrics over label sets.
//!
//! Predictions and golds are label sets; a single-label example is a set of
//! size one. Duplicates inside a set are ignored.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use crate::tensor::Matrix;
use crate::{Error, Result};

fn check_lengths(preds: usize, golds: usize) -> Result<()> {
    if preds != golds {
        return Err(Error::Shape(format!("{preds} predictions for {golds} gold labels")));
    }
    if golds == 0 {
        return Err(Error::Empty("no examples to score".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Counts {
    tp: u64,
    fp: u64,
    fn_: u64,
}

impl Counts {
    fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

fn per_label(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Vec<(usize, Counts)> {
    let labels: BTreeSet<usize> = preds.iter().chain(golds).flatten().copied().collect();
    let sets: Vec<(BTreeSet<usize>, BTreeSet<usize>)> =
        preds.iter().zip(golds).map(|(p, g)| (p.iter().copied().collect(), g.iter().copied().collect())).collect();
    labels
        .into_iter()
        .map(|l| {
            let mut c = Counts::default();
            for (p, g) in &sets {
                match (p.contains(&l), g.contains(&l)) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => {}
                }
            }
            (l, c)
        })
        .collect()
}

/// Unweighted mean of per-label F1 over every label that appears in either
/// the predictions or the golds.
pub fn macro_f1(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let per = per_label(preds, golds);
    if per.is_empty() {
        // nothing predicted, nothing to find
        return Ok(1.0);
    }
    Ok(per.iter().map(|(_, c)| c.f1()).sum::<f64>() / per.len() as f64)
}

/// F1 of the pooled true-positive, false-positive and false-negative counts.
pub fn micro_f1(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let per = per_label(preds, golds);
    if per.is_empty() {
        return Ok(1.0);
    }
    let mut t = Counts::default();
    for (_, c) in per {
        t.tp += c.tp;
        t.fp += c.fp;
        t.fn_ += c.fn_;
    }
    Ok(t.f1())
}

/// Label ranking average precision. Row `i` of `scores` ranks the labels of
/// example `i`; a label's rank counts every label scored at or above it, so
/// ties are pessimistic.
pub fn lrap(scores: &Matrix, golds: &[Vec<usize>]) -> Result<f64> {
    check_lengths(scores.rows(), golds.len())?;
    let mut total = 0.0;
    for (i, g) in golds.iter().enumerate() {
        let gold: BTreeSet<usize> = g.iter().copied().collect();
        if gold.is_empty() {
            return Err(Error::Empty(format!("example {i} has no true labels")));
        }
        let row = scores.row(i);
        if let Some(&l) = gold.iter().find(|&&l| l >= row.len()) {
            return Err(Error::Shape(format!("example {i}: label {l} outside {} scores", row.len())));
        }
        let mut ex = 0.0;
        for &j in &gold {
            let s = row[j];
            let rank = row.iter().filter(|&&x| x >= s).count();
            let above = gold.iter().filter(|&&k| row[k] >= s).count();
            ex += above as f64 / rank as f64;
        }
        total += ex / gold.len() as f64;
    }
    Ok(total / golds.len() as f64)
}

/// Top-scoring label of each row (lowest index on ties).
pub fn argmax_labels(scores: &Matrix) -> Vec<Vec<usize>> {
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            alloc::vec![best]
        })
        .collect()
}

/// Labels whose logit is at least `logit_threshold`, per row.
pub fn threshold_labels(scores: &Matrix, logit_threshold: f64) -> Vec<Vec<usize>> {
    (0..scores.rows()).map(|r| scores.row(r).iter().enumerate().filter(|(_, v)| **v >= logit_threshold).map(|(j, _)| j).collect()).collect()
}
