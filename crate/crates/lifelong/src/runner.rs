//! The `run`, `eval` and `compare` commands.
//!
//! A run directory holds:
//!
//! ```text
//! config.json            effective config
//! run.json               algorithm, domains, task suite
//! checkpoints/step_<t>.ckpt
//! logs/train.jsonl       one StepLog per optimizer step
//! ledger.json            pass counts per domain
//! access.json            protocol violations and repeated reads
//! report.jsonl           one score per line
//! report.json            full evaluation report
//! summary.md
//! plots/*.svg
//! stages/<stage>.json    manifests
//! ```
//!
//! Every file carries the config digest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lifelong_core::access::AccessLog;
use lifelong_core::corpus::OrderingKind;
use lifelong_core::eval::{model_digest, ScoreRecord};
use lifelong_core::model::load_checkpoint;
use lifelong_core::trainer::{run_stream, Algorithm, CostLedger, StepLog};

use crate::ckpt;
use crate::config::{ExperimentConfig, Prepared};
use crate::error::{CliError, CliResult};
use crate::evaluate::{evaluate, summary_table, Checkpoints, RunReport};
use crate::fsutil::{atomic_write, read_string, sha256_hex};
use crate::plot::{write_svg, Series};
use crate::records::{from_document, from_jsonl, to_document, to_jsonl};
use crate::stages;

/// Overrides the output directory when `--out` is absent.
pub const OUT_ENV: &str = "LIFELONG_OUT";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: usize,
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Cached,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub digest: String,
    pub stages: Vec<(String, StageStatus)>,
}

/// Task identity used to decide whether two runs can be compared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub task_id: String,
    pub label_space: String,
    pub metric: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub algorithm: Algorithm,
    pub ordering: OrderingKind,
    pub domains: Vec<String>,
    pub tasks: Vec<TaskInfo>,
    /// Checkpoint steps written, `f_0` included.
    pub steps: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AccessSummary {
    violations: Vec<String>,
    repeated_train_reads: BTreeMap<String, usize>,
}

fn out_dir(cli: Option<&Path>, configured: Option<&Path>, fallback: String) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| configured.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn ckpt_path(step: usize) -> PathBuf {
    PathBuf::from("checkpoints").join(format!("step_{step}.ckpt"))
}

fn say(log: &mut dyn Write, msg: std::fmt::Arguments<'_>) {
    let _ = writeln!(log, "{msg}");
}

/// Loads and validates a config, applying a `--seed` override first.
pub fn prepare(config_path: &Path, seed: Option<u64>) -> CliResult<Prepared> {
    let text = read_string(config_path).map_err(|e| CliError::Validation(e.to_string()))?;
    let mut config = ExperimentConfig::from_toml(&text).map_err(|e| CliError::Validation(format!("{}: {e}", config_path.display())))?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Prepared::from_config(config, config_path.parent().unwrap_or(Path::new(".")))
}

pub fn run(config_path: &Path, opts: &RunOptions, log: &mut dyn Write) -> CliResult<RunSummary> {
    let prep = prepare(config_path, opts.seed)?;
    let cfg = &prep.config;
    let train = cfg.train_config();
    let digest = prep.digest.clone();
    let run_dir = out_dir(opts.out.as_deref(), cfg.out_dir.as_deref(), format!("runs/{}-{}", train.algorithm.name(), prep.short_digest()));
    say(log, format_args!("run {} (config {}) -> {}", train.algorithm, prep.short_digest(), run_dir.display()));

    let n = prep.stream.len();
    let steps: Vec<usize> = if train.algorithm == Algorithm::Mtl { vec![0, n] } else { (0..=n).collect() };
    let meta = RunMeta {
        algorithm: train.algorithm,
        ordering: prep.stream.ordering,
        domains: prep.stream.domain_ids().iter().map(ToString::to_string).collect(),
        tasks: prep.tasks.iter().map(|t| TaskInfo { task_id: t.task_id.clone(), label_space: t.label_space.clone(), metric: t.metric.name().into() }).collect(),
        steps: steps.clone(),
    };
    atomic_write(&run_dir.join("config.json"), to_document(&digest, cfg).as_bytes())?;
    atomic_write(&run_dir.join("run.json"), to_document(&digest, &meta).as_bytes())?;
    let mut status = Vec::new();

    // pretraining
    let key = stages::stage_key("pretrain", &[&digest]);
    let pre = match stages::completed(&run_dir, "pretrain", &key).filter(|_| !opts.force) {
        Some(m) => {
            say(log, format_args!("stage pretrain: skipped (cached)"));
            status.push(("pretrain".to_string(), StageStatus::Cached));
            m
        }
        None => {
            say(log, format_args!("stage pretrain: running {} steps over {n} domains", (0..n).map(|t| train.steps_for(t)).sum::<usize>()));
            let out = run_stream(&prep.stream, &cfg.model, &train)?;
            let mut files = Vec::new();
            for c in std::iter::once(&out.initial).chain(&out.checkpoints) {
                let p = ckpt_path(c.time_step);
                ckpt::write(&run_dir.join(&p), c, &digest)?;
                files.push(p);
            }
            let logs = PathBuf::from("logs/train.jsonl");
            atomic_write(&run_dir.join(&logs), to_jsonl(&digest, &out.logs).as_bytes())?;
            let ledger = PathBuf::from("ledger.json");
            atomic_write(&run_dir.join(&ledger), to_document(&digest, &out.ledger).as_bytes())?;
            let access = PathBuf::from("access.json");
            let summary = AccessSummary {
                violations: out.access.violations(),
                repeated_train_reads: out.access.repeated_train_reads().into_iter().map(|(d, c)| (d.to_string(), c)).collect(),
            };
            atomic_write(&run_dir.join(&access), to_document(&digest, &summary).as_bytes())?;
            files.extend([logs, ledger, access]);
            status.push(("pretrain".to_string(), StageStatus::Ran));
            stages::record(&run_dir, "pretrain", &key, &files, &digest)?
        }
    };

    // evaluation
    let ckpt_hashes: Vec<&str> = pre.outputs.iter().map(|o| o.sha256.as_str()).collect();
    let mut inputs = vec![digest.as_str()];
    inputs.extend(&ckpt_hashes);
    let eval_key = stages::stage_key("eval", &inputs);
    let eval_cached = stages::completed(&run_dir, "eval", &eval_key).filter(|_| !opts.force).is_some();
    if eval_cached {
        say(log, format_args!("stage eval: skipped (cached)"));
        status.push(("eval".to_string(), StageStatus::Cached));
    } else {
        say(log, format_args!("stage eval: running with {} job(s)", opts.jobs.max(1)));
        let mut models = Vec::new();
        for &s in &steps {
            let stored = ckpt::read_file(&run_dir.join(ckpt_path(s)))?;
            if stored.config_digest != digest {
                return Err(CliError::Runtime(format!("checkpoint step {s} belongs to config {}, not {digest}", stored.config_digest)));
            }
            models.push(load_checkpoint(&stored.checkpoint)?);
        }
        let ck = Checkpoints { steps: steps.clone(), models };
        let ledger: CostLedger = from_document(&read_string(&run_dir.join("ledger.json"))?)?.body;
        let pre_access: AccessSummary = from_document(&read_string(&run_dir.join("access.json"))?)?.body;
        let mut access = AccessLog::new();
        let (eval, extra_cells) = evaluate(&prep.stream, &prep.tasks, &cfg.eval, train.mask_prob, &ck, opts.jobs, &mut access)?;
        let mut violations = pre_access.violations;
        violations.extend(access.violations());
        let report = RunReport { algorithm: train.algorithm.name().into(), eval, extra_cells, ledger, access_violations: violations };
        let files = [PathBuf::from("report.jsonl"), PathBuf::from("report.json"), PathBuf::from("summary.md")];
        atomic_write(&run_dir.join(&files[0]), to_jsonl(&digest, &report.records()).as_bytes())?;
        atomic_write(&run_dir.join(&files[1]), to_document(&digest, &report).as_bytes())?;
        atomic_write(&run_dir.join(&files[2]), summary_table(&report, n, &digest).as_bytes())?;
        stages::record(&run_dir, "eval", &eval_key, &files, &digest)?;
        status.push(("eval".to_string(), StageStatus::Ran));
    }

    // plots
    let plot_key = stages::stage_key("plots", &[&eval_key]);
    if stages::completed(&run_dir, "plots", &plot_key).filter(|_| !opts.force).is_some() {
        say(log, format_args!("stage plots: skipped (cached)"));
        status.push(("plots".to_string(), StageStatus::Cached));
    } else {
        let report: RunReport = from_document(&read_string(&run_dir.join("report.json"))?)?.body;
        let files = run_plots(&run_dir, &report, &meta, &digest)?;
        stages::record(&run_dir, "plots", &plot_key, &files, &digest)?;
        status.push(("plots".to_string(), StageStatus::Ran));
        say(log, format_args!("stage plots: wrote {} file(s)", files.len()));
    }
    Ok(RunSummary { run_dir, digest, stages: status })
}

/// Score of every checkpoint on one task, in step order.
fn task_curve(report: &RunReport, steps: &[usize], t: usize) -> Vec<(f64, f64)> {
    steps.iter().filter_map(|&s| report.cell(s, t).map(|c| (s as f64, c.result.mean))).collect()
}

fn run_plots(run_dir: &Path, report: &RunReport, meta: &RunMeta, digest: &str) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    if !meta.tasks.is_empty() {
        let series: Vec<Series> = meta.tasks.iter().enumerate().map(|(i, task)| Series { label: task.task_id.clone(), points: task_curve(report, &meta.steps, i + 1) }).collect();
        let p = PathBuf::from("plots/retention.svg");
        write_svg(&run_dir.join(&p), &format!("{}: downstream score by checkpoint", meta.algorithm), "pretraining step", &meta.tasks[0].metric, &series, digest)?;
        files.push(p);
    }
    if !report.eval.perplexity.is_empty() {
        let series: Vec<Series> = meta
            .domains
            .iter()
            .map(|d| Series {
                label: d.clone(),
                points: report.eval.perplexity.iter().filter(|p| &p.domain == d).map(|p| (p.checkpoint_step as f64, p.value)).collect(),
            })
            .collect();
        let p = PathBuf::from("plots/perplexity.svg");
        write_svg(&run_dir.join(&p), &format!("{}: held-out MLM log-perplexity", meta.algorithm), "pretraining step", "nats", &series, digest)?;
        files.push(p);
    }
    Ok(files)
}

/// `eval <checkpoint> <task-suite>`: scores one checkpoint file on every task
/// (and held-out corpus) of a suite config.
pub fn eval_checkpoint(ckpt_file: &Path, suite_path: &Path, opts: &RunOptions, log: &mut dyn Write) -> CliResult<PathBuf> {
    let prep = prepare(suite_path, opts.seed)?;
    if prep.tasks.is_empty() && !prep.config.eval.perplexity {
        return Err(CliError::Validation(format!("{}: suite defines neither [eval.task] nor perplexity", suite_path.display())));
    }
    let stored = ckpt::read_file(ckpt_file)?;
    let model = load_checkpoint(&stored.checkpoint)?;
    if model.config().vocab_size != prep.config.model.vocab_size || model.config().max_seq_len < prep.config.model.max_seq_len {
        return Err(CliError::Validation("checkpoint model is incompatible with the suite's vocabulary or sequence length".into()));
    }
    let step = stored.checkpoint.time_step;
    let digest = sha256_hex(format!("{};{}", prep.digest, stored.checkpoint.content_digest()).as_bytes());
    let dir = out_dir(opts.out.as_deref(), None, format!("evals/{}", &digest[..16]));
    say(log, format_args!("eval checkpoint step {step} ({}) -> {}", model_digest(&model), dir.display()));

    let mut records: Vec<ScoreRecord> = Vec::new();
    let mut access = AccessLog::new();
    let suite = &prep.config.eval;
    let n = prep.stream.len();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.jobs.max(1)).build().map_err(|e| CliError::Runtime(e.to_string()))?;
    let jobs: Vec<(usize, u64)> = (0..prep.tasks.len()).flat_map(|t| suite.seeds.iter().map(move |&s| (t, s))).collect();
    let outcomes: Vec<CliResult<(f64, AccessLog)>> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|&(t, seed)| {
                let mut a = AccessLog::new();
                let r = lifelong_core::eval::finetune(&model, &prep.tasks[t], &suite.finetune, seed, &mut a)?;
                Ok((r.1.test_score, a))
            })
            .collect()
    });
    for (&(t, seed), outcome) in jobs.iter().zip(outcomes) {
        let (value, a) = outcome?;
        access.merge(&a);
        let task = &prep.tasks[t];
        records.push(ScoreRecord {
            kind: lifelong_core::eval::RecordKind::Retention,
            checkpoint_digest: model_digest(&model),
            checkpoint_step: step,
            task_id: task.task_id.clone(),
            seed,
            metric: task.metric.name().into(),
            value,
            shots: None,
        });
    }
    if suite.perplexity {
        for corpus in &prep.stream.domains {
            let value = lifelong_core::eval::heldout_log_perplexity(&model, corpus, prep.config.train.mask_prob, suite.mask_seed, &mut access)?;
            records.push(ScoreRecord {
                kind: lifelong_core::eval::RecordKind::Perplexity,
                checkpoint_digest: model_digest(&model),
                checkpoint_step: step,
                task_id: corpus.domain_id.to_string(),
                seed: suite.mask_seed,
                metric: "mlm_log_perplexity".into(),
                value,
                shots: None,
            });
        }
    }
    let violations = access.violations();
    if !violations.is_empty() {
        return Err(CliError::Runtime(format!("evaluation broke the access protocol: {}", violations.join("; "))));
    }
    atomic_write(&dir.join("eval.jsonl"), to_jsonl(&digest, &records).as_bytes())?;
    say(log, format_args!("wrote {} record(s) over {n} domain(s)", records.len()));
    Ok(dir)
}

/// One compared run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run_dir: String,
    pub run_digest: String,
    pub algorithm: Algorithm,
    /// Mean final-checkpoint score per task.
    pub final_scores: Vec<f64>,
    /// Own-step minus final score per task; `None` where undefined.
    pub forgetting: Vec<Option<f64>>,
    pub forward: u64,
    pub backward: u64,
    pub total_passes: u64,
}

struct LoadedRun {
    dir: PathBuf,
    digest: String,
    meta: RunMeta,
    report: RunReport,
}

fn load_run(dir: &Path) -> CliResult<LoadedRun> {
    let bad = |file: &str, e: CliError| CliError::Validation(format!("{}/{file}: {e}", dir.display()));
    let meta = from_document::<RunMeta>(&read_string(&dir.join("run.json")).map_err(|e| bad("run.json", e))?).map_err(|e| bad("run.json", e))?;
    let report = from_document::<RunReport>(&read_string(&dir.join("report.json")).map_err(|e| bad("report.json", e))?).map_err(|e| bad("report.json", e))?;
    if meta.config_digest.is_empty() || meta.config_digest != report.config_digest {
        return Err(CliError::Validation(format!("{}: run.json and report.json carry different config digests", dir.display())));
    }
    let (d, _) = from_jsonl::<ScoreRecord>(&read_string(&dir.join("report.jsonl")).map_err(|e| bad("report.jsonl", e))?).map_err(|e| bad("report.jsonl", e))?;
    if d.as_deref() != Some(meta.config_digest.as_str()) {
        return Err(CliError::Validation(format!("{}: report.jsonl digest disagrees with run.json", dir.display())));
    }
    Ok(LoadedRun { dir: dir.to_path_buf(), digest: meta.config_digest, meta: meta.body, report: report.body })
}

/// `compare <dirs...>`: per-task curves, forgetting and cost for each run.
pub fn compare(dirs: &[PathBuf], out: Option<&Path>, log: &mut dyn Write) -> CliResult<(PathBuf, Vec<ComparisonRow>)> {
    if dirs.len() < 2 {
        return Err(CliError::Validation(format!("compare needs at least 2 run directories, got {}", dirs.len())));
    }
    let runs = dirs.iter().map(|d| load_run(d)).collect::<CliResult<Vec<_>>>()?;
    let base = &runs[0];
    let mut mismatches = Vec::new();
    for r in &runs[1..] {
        if r.meta.tasks != base.meta.tasks {
            mismatches.push(format!("{}: tasks {:?} vs {:?}", r.dir.display(), ids(&r.meta), ids(&base.meta)));
        }
        if r.meta.domains != base.meta.domains {
            mismatches.push(format!("{}: domains {:?} vs {:?}", r.dir.display(), r.meta.domains, base.meta.domains));
        }
    }
    if !mismatches.is_empty() {
        return Err(CliError::Validation(format!("incompatible task suites:\n  {}", mismatches.join("\n  "))));
    }
    let mut digests: Vec<&str> = runs.iter().map(|r| r.digest.as_str()).collect();
    digests.sort_unstable();
    let digest = sha256_hex(digests.join(";").as_bytes());
    let dir = out_dir(out, None, format!("comparisons/{}", &digest[..16]));
    say(log, format_args!("compare {} runs -> {}", runs.len(), dir.display()));

    let n = base.meta.domains.len();
    let rows: Vec<ComparisonRow> = runs
        .iter()
        .map(|r| {
            let total = r.report.ledger.total();
            ComparisonRow {
                run_dir: r.dir.display().to_string(),
                run_digest: r.digest.clone(),
                algorithm: r.meta.algorithm,
                final_scores: (1..=r.meta.tasks.len()).map(|t| r.report.cell(n, t).map_or(f64::NAN, |c| c.result.mean)).collect(),
                forgetting: (1..=r.meta.tasks.len()).map(|t| r.report.eval.retention.as_ref().and_then(|m| m.forgetting(t))).collect(),
                forward: total.forward,
                backward: total.backward,
                total_passes: total.total(),
            }
        })
        .collect();

    let mut files = Vec::new();
    for (i, task) in base.meta.tasks.iter().enumerate() {
        let series: Vec<Series> = runs.iter().map(|r| Series { label: r.meta.algorithm.name().into(), points: task_curve(&r.report, &r.meta.steps, i + 1) }).collect();
        let p = dir.join(format!("plots/{}.svg", task.task_id));
        write_svg(&p, &format!("{}: score by pretraining step", task.task_id), "pretraining step", &task.metric, &series, &digest)?;
        files.push(p);
    }
    atomic_write(&dir.join("comparison.jsonl"), to_jsonl(&digest, &rows).as_bytes())?;
    atomic_write(&dir.join("comparison.md"), comparison_table(&rows, &base.meta, &digest).as_bytes())?;
    say(log, format_args!("wrote comparison table and {} plot(s)", files.len()));
    Ok((dir, rows))
}

fn ids(m: &RunMeta) -> Vec<&str> {
    m.tasks.iter().map(|t| t.task_id.as_str()).collect()
}

fn comparison_table(rows: &[ComparisonRow], meta: &RunMeta, digest: &str) -> String {
    use std::fmt::Write as _;
    let mut s = format!("<!-- config_digest: {digest} -->\n| algorithm |");
    for t in &meta.tasks {
        let _ = write!(s, " final {} | forgetting {} |", t.task_id, t.task_id);
    }
    let _ = writeln!(s, " forward | backward | total |");
    let _ = writeln!(s, "|---|{}---|---|---|", "---|---|".repeat(meta.tasks.len()));
    for r in rows {
        let _ = write!(s, "| {} |", r.algorithm);
        for (f, g) in r.final_scores.iter().zip(&r.forgetting) {
            let _ = write!(s, " {f:.4} | {} |", g.map_or("n/a".to_string(), |g| format!("{g:.4}")));
        }
        let _ = writeln!(s, " {} | {} | {} |", r.forward, r.backward, r.total_passes);
    }
    s
}

/// Loss logs of a finished run.
pub fn read_train_log(run_dir: &Path) -> CliResult<Vec<StepLog>> {
    Ok(from_jsonl(&read_string(&run_dir.join("logs/train.jsonl"))?)?.1)
}
