//! Evaluation suite over a run's checkpoints.
//!
//! Every fine-tuning job is independent: it reads one checkpoint and one
//! task, and logs corpus access into its own [`AccessLog`]. Jobs fan out over
//! at most `jobs` threads; results are reduced in job order, so the report
//! does not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use lifelong_core::access::AccessLog;
use lifelong_core::corpus::{DomainStream, OrderingKind};
use lifelong_core::eval::{
    assemble_retention, finetune, finetune_on, heldout_log_perplexity, kshot_subset, model_digest, retention_jobs, DownstreamTask, EvalReport,
    KShotCurve, KShotPoint, PerplexityResult, RecordKind, RetentionCell, RetentionJob, ScoreRecord, SeedScores, Splits, TemporalResult,
};
use lifelong_core::model::ModelState;
use lifelong_core::trainer::CostLedger;

use crate::config::EvalSuite;
use crate::error::{CliError, CliResult};

/// Models under evaluation. `steps[j]` is the pretraining step of
/// `models[j]`; step 0 is `f_0`.
pub struct Checkpoints {
    pub steps: Vec<usize>,
    pub models: Vec<ModelState>,
}

impl Checkpoints {
    fn at(&self, step: usize) -> CliResult<&ModelState> {
        self.steps.iter().position(|&s| s == step).map(|j| &self.models[j]).ok_or_else(|| CliError::Runtime(format!("no checkpoint for step {step}")))
    }
}

/// Everything the evaluation stage reports for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub algorithm: String,
    pub eval: EvalReport,
    /// Scores outside the lower-triangular matrix: `f_0` on every task
    /// (step 0), and the multi-task model on every task (step `T`).
    pub extra_cells: Vec<RetentionCell>,
    pub ledger: CostLedger,
    /// Protocol violations seen in pretraining and evaluation; empty when the
    /// run respected every access rule.
    pub access_violations: Vec<String>,
}

impl RunReport {
    /// Mean score of the checkpoint at `step` on the task of domain `t`.
    pub fn cell(&self, step: usize, t: usize) -> Option<&RetentionCell> {
        self.eval.retention.as_ref().and_then(|r| r.get(step, t)).or_else(|| self.extra_cells.iter().find(|c| c.step == step && c.task_domain == t))
    }

    pub fn records(&self) -> Vec<ScoreRecord> {
        let metric = self.eval.retention.as_ref().map(|r| r.metric.clone());
        let mut out = self.eval.records();
        for c in &self.extra_cells {
            for (seed, v) in &c.result.scores {
                out.push(ScoreRecord {
                    kind: RecordKind::Retention,
                    checkpoint_digest: c.checkpoint_digest.clone(),
                    checkpoint_step: c.step,
                    task_id: c.task_id.clone(),
                    seed: *seed,
                    metric: metric.clone().unwrap_or_default(),
                    value: *v,
                    shots: None,
                });
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Job {
    /// Checkpoint at `step` fine-tuned and tested on the task of domain `t`.
    Cell { step: usize, t: usize, seed: u64 },
    /// Latest checkpoint trained on task `t`, tested on the latest task.
    Temporal { t: usize, seed: u64 },
    KShot { shots: usize, seed: u64 },
}

fn run_job(job: Job, ck: &Checkpoints, tasks: &[DownstreamTask], suite: &EvalSuite, last: usize) -> CliResult<(f64, AccessLog)> {
    let mut access = AccessLog::new();
    let cfg = &suite.finetune;
    let latest = &tasks[tasks.len() - 1];
    let score = match job {
        Job::Cell { step, t, seed } => finetune(ck.at(step)?, &tasks[t - 1], cfg, seed, &mut access)?.1.test_score,
        Job::Temporal { t, seed } => {
            let train = &tasks[t - 1];
            if train.label_space != latest.label_space {
                return Err(CliError::Runtime(format!("`{}` and `{}` do not share labels", train.task_id, latest.task_id)));
            }
            let splits = Splits { train: &train.train, val: &train.val, test: &latest.test };
            finetune_on(ck.at(last)?, train, splits, cfg, seed, &mut access)?.1.test_score
        }
        Job::KShot { shots, seed } => {
            let sub = kshot_subset(&latest.train, shots, seed)?;
            finetune_on(ck.at(last)?, latest, Splits { train: &sub, val: &latest.val, test: &latest.test }, cfg, seed, &mut access)?.1.test_score
        }
    };
    Ok((score, access))
}

fn seed_scores(results: &[(Job, f64)], pick: impl Fn(&Job) -> Option<u64>) -> SeedScores {
    SeedScores::new(results.iter().filter_map(|(j, v)| pick(j).map(|s| (s, *v))).collect())
}

/// Runs the configured suite. `ck` holds `f_0` plus either `f_1..f_T` or, for
/// the multi-task baseline, the single model at step `T`.
pub fn evaluate(
    stream: &DomainStream,
    tasks: &[DownstreamTask],
    suite: &EvalSuite,
    mask_prob: f64,
    ck: &Checkpoints,
    jobs: usize,
    access: &mut AccessLog,
) -> CliResult<(EvalReport, Vec<RetentionCell>)> {
    let n = stream.len();
    let full_matrix = (1..=n).all(|s| ck.steps.contains(&s));
    let mut report = EvalReport::default();
    let mut extra = Vec::new();

    if !tasks.is_empty() {
        let seeds = &suite.seeds;
        let mut list = Vec::new();
        if full_matrix {
            list.extend(retention_jobs(n, seeds).into_iter().map(|j| Job::Cell { step: j.step, t: j.task_domain, seed: j.seed }));
        } else {
            for t in 1..=n {
                list.extend(seeds.iter().map(|&seed| Job::Cell { step: n, t, seed }));
            }
        }
        if suite.baseline {
            for t in 1..=n {
                list.extend(seeds.iter().map(|&seed| Job::Cell { step: 0, t, seed }));
            }
        }
        let temporal = suite.temporal && stream.ordering == OrderingKind::Chronological;
        if temporal {
            for t in 1..n {
                list.extend(seeds.iter().map(|&seed| Job::Temporal { t, seed }));
            }
        }
        let mut grid = suite.shots.clone();
        grid.push(tasks[n - 1].train.len());
        for &shots in &grid {
            list.extend(seeds.iter().map(|&seed| Job::KShot { shots, seed }));
        }

        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(|e| CliError::Runtime(e.to_string()))?;
        let outcomes: Vec<CliResult<(f64, AccessLog)>> = pool.install(|| list.par_iter().map(|&j| run_job(j, ck, tasks, suite, n)).collect());
        let mut results = Vec::with_capacity(list.len());
        for (job, outcome) in list.iter().zip(outcomes) {
            let (v, log) = outcome?;
            access.merge(&log);
            results.push((*job, v));
        }

        let digest_at = |step: usize| ck.at(step).map(model_digest);
        if full_matrix {
            let cells: Vec<(RetentionJob, f64)> = results
                .iter()
                .filter_map(|(j, v)| match *j {
                    Job::Cell { step, t, seed } if step > 0 => Some((RetentionJob { step, task_domain: t, seed }, *v)),
                    _ => None,
                })
                .collect();
            let digests = (1..=n).map(digest_at).collect::<CliResult<Vec<_>>>()?;
            report.retention = Some(assemble_retention(tasks, &digests, seeds, &cells)?);
        }
        let mut extra_steps = Vec::new();
        if suite.baseline {
            extra_steps.push(0);
        }
        if !full_matrix {
            extra_steps.push(n);
        }
        for step in extra_steps {
            for t in 1..=n {
                extra.push(RetentionCell {
                    step,
                    task_domain: t,
                    task_id: tasks[t - 1].task_id.clone(),
                    checkpoint_digest: digest_at(step)?,
                    result: seed_scores(&results, |j| match *j {
                        Job::Cell { step: s, t: tt, seed } if s == step && tt == t => Some(seed),
                        _ => None,
                    }),
                });
            }
        }
        let latest = &tasks[n - 1];
        if temporal {
            for t in 1..n {
                report.temporal.push(TemporalResult {
                    train_task: tasks[t - 1].task_id.clone(),
                    test_task: latest.task_id.clone(),
                    checkpoint_digest: digest_at(n)?,
                    checkpoint_step: n,
                    metric: latest.metric.name().into(),
                    result: seed_scores(&results, |j| match *j {
                        Job::Temporal { t: tt, seed } if tt == t => Some(seed),
                        _ => None,
                    }),
                });
            }
        }
        report.kshot.push(KShotCurve {
            task_id: latest.task_id.clone(),
            checkpoint_digest: digest_at(n)?,
            checkpoint_step: n,
            metric: latest.metric.name().into(),
            points: grid
                .iter()
                .map(|&k| KShotPoint {
                    shots: k,
                    result: seed_scores(&results, |j| match *j {
                        Job::KShot { shots, seed } if shots == k => Some(seed),
                        _ => None,
                    }),
                })
                .collect(),
        });
    }

    if suite.perplexity {
        for (step, model) in ck.steps.iter().zip(&ck.models) {
            let digest = model_digest(model);
            for corpus in &stream.domains {
                let value = heldout_log_perplexity(model, corpus, mask_prob, suite.mask_seed, access)?;
                report.perplexity.push(PerplexityResult {
                    checkpoint_step: *step,
                    checkpoint_digest: digest.clone(),
                    domain: corpus.domain_id.to_string(),
                    mask_seed: suite.mask_seed,
                    value,
                });
            }
        }
    }
    Ok((report, extra))
}

/// Markdown summary: retention grid, forgetting, perplexity and cost.
pub fn summary_table(report: &RunReport, n: usize, config_digest: &str) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(s, "<!-- config_digest: {config_digest} -->");
    let _ = writeln!(s, "# {}\n", report.algorithm);
    if report.eval.retention.is_some() || !report.extra_cells.is_empty() {
        let metric = report.eval.retention.as_ref().map_or("score", |r| r.metric.as_str());
        let _ = writeln!(s, "## Downstream {metric} (mean ± std over seeds)\n");
        let _ = write!(s, "| checkpoint |");
        for t in 1..=n {
            let _ = write!(s, " task {t} |");
        }
        let _ = writeln!(s, "\n|---|{}", "---|".repeat(n));
        for step in 0..=n {
            if (1..=n).all(|t| report.cell(step, t).is_none()) {
                continue;
            }
            let _ = write!(s, "| f_{step} |");
            for t in 1..=n {
                match report.cell(step, t) {
                    Some(c) => {
                        let _ = write!(s, " {:.4} ± {:.4} |", c.result.mean, c.result.std);
                    }
                    None => s.push_str(" |"),
                }
            }
            s.push('\n');
        }
        if let Some(r) = &report.eval.retention {
            let _ = writeln!(s, "\nForgetting (own-step score minus final score):");
            for t in 1..n {
                if let Some(f) = r.forgetting(t) {
                    let _ = writeln!(s, "- task {t}: {f:.4}");
                }
            }
        }
    }
    if !report.eval.temporal.is_empty() {
        let _ = writeln!(s, "\n## Temporal generalization\n\n| train task | test task | mean | std |\n|---|---|---|---|");
        for t in &report.eval.temporal {
            let _ = writeln!(s, "| {} | {} | {:.4} | {:.4} |", t.train_task, t.test_task, t.result.mean, t.result.std);
        }
    }
    for k in &report.eval.kshot {
        let _ = writeln!(s, "\n## k-shot on {}\n\n| shots | mean | std |\n|---|---|---|", k.task_id);
        for p in &k.points {
            let _ = writeln!(s, "| {} | {:.4} | {:.4} |", p.shots, p.result.mean, p.result.std);
        }
    }
    if !report.eval.perplexity.is_empty() {
        let _ = writeln!(s, "\n## Held-out MLM log-perplexity\n\n| checkpoint | domain | nats |\n|---|---|---|");
        for p in &report.eval.perplexity {
            let _ = writeln!(s, "| f_{} | {} | {:.4} |", p.checkpoint_step, p.domain, p.value);
        }
    }
    let total = report.ledger.total();
    let _ = writeln!(s, "\n## Cost\n\nforward {} / backward {} / total {}", total.forward, total.backward, total.total());
    let _ = writeln!(s, "\nAccess violations: {}", report.access_violations.len());
    s
}
