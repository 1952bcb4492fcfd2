use super::metrics::*;
use super::*;
use crate::corpus::{chronological_specs, domain_incremental_specs, synth_domain_corpus, CorpusSource, SynthStreamConfig};
use crate::model::ModelConfig;
use crate::tensor::Matrix;
use alloc::collections::BTreeSet;
use alloc::vec;
use proptest::prelude::*;

// ---- naive metric oracles -------------------------------------------------

fn oracle_prf(tp: f64, fp: f64, fn_: f64) -> f64 {
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn oracle_counts(preds: &[Vec<usize>], golds: &[Vec<usize>], l: usize) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for i in 0..preds.len() {
        let p = preds[i].contains(&l);
        let g = golds[i].contains(&l);
        if p && g {
            tp += 1.0;
        }
        if p && !g {
            fp += 1.0;
        }
        if !p && g {
            fn_ += 1.0;
        }
    }
    (tp, fp, fn_)
}

fn oracle_labels(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Vec<usize> {
    let mut ls: Vec<usize> = preds.iter().chain(golds).flatten().copied().collect();
    ls.sort_unstable();
    ls.dedup();
    ls
}

fn oracle_macro(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> f64 {
    let ls = oracle_labels(preds, golds);
    let mut s = 0.0;
    for &l in &ls {
        let (tp, fp, fn_) = oracle_counts(preds, golds, l);
        s += oracle_prf(tp, fp, fn_);
    }
    s / ls.len() as f64
}

fn oracle_micro(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> f64 {
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for l in oracle_labels(preds, golds) {
        let (tp, fp, fn_) = oracle_counts(preds, golds, l);
        a += tp;
        b += fp;
        c += fn_;
    }
    oracle_prf(a, b, c)
}

fn oracle_lrap(scores: &[Vec<f64>], golds: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    for (row, gold) in scores.iter().zip(golds) {
        let mut acc = 0.0;
        for &j in gold {
            let mut rank = 1.0;
            let mut hits = 1.0;
            for (l, &s) in row.iter().enumerate() {
                if l != j && s >= row[j] {
                    rank += 1.0;
                    if gold.contains(&l) {
                        hits += 1.0;
                    }
                }
            }
            acc += hits / rank;
        }
        total += acc / gold.len() as f64;
    }
    total / golds.len() as f64
}

fn label_sets(n_labels: usize, min: usize) -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::btree_set(0..n_labels, min..=n_labels).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn f1_matches_oracle(rows in proptest::collection::vec((label_sets(5, 0), label_sets(5, 0)), 1..20)) {
        let (p, g): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        if oracle_labels(&p, &g).is_empty() {
            return Ok(());
        }
        prop_assert!((macro_f1(&p, &g).unwrap() - oracle_macro(&p, &g)).abs() < 1e-9);
        prop_assert!((micro_f1(&p, &g).unwrap() - oracle_micro(&p, &g)).abs() < 1e-9);
    }

    #[test]
    fn lrap_matches_oracle(rows in proptest::collection::vec((proptest::collection::vec(0u8..6, 6), label_sets(6, 1)), 1..20)) {
        // small integer scores force ties
        let scores: Vec<Vec<f64>> = rows.iter().map(|r| r.0.iter().map(|&x| x as f64).collect()).collect();
        let golds: Vec<Vec<usize>> = rows.iter().map(|r| r.1.clone()).collect();
        let m = Matrix::from_rows(&scores);
        let v = lrap(&m, &golds).unwrap();
        prop_assert!((v - oracle_lrap(&scores, &golds)).abs() < 1e-9);
        prop_assert!(v > 0.0 && v <= 1.0);
    }

    #[test]
    fn micro_f1_is_accuracy_for_single_label(rows in proptest::collection::vec((0usize..4, 0usize..4), 1..40)) {
        let p: Vec<Vec<usize>> = rows.iter().map(|r| vec![r.0]).collect();
        let g: Vec<Vec<usize>> = rows.iter().map(|r| vec![r.1]).collect();
        let acc = rows.iter().filter(|r| r.0 == r.1).count() as f64 / rows.len() as f64;
        prop_assert!((micro_f1(&p, &g).unwrap() - acc).abs() < 1e-12);
    }
}

#[test]
fn hand_computed_lrap() {
    let m = Matrix::from_rows(&[vec![0.9, 0.8, 0.7]]);
    let v = lrap(&m, &[vec![0, 2]]).unwrap();
    // exact against the hand computation; 5/6 itself rounds one ulp higher
    assert_eq!(v, (1.0 + 2.0 / 3.0) / 2.0);
    assert!((v - 5.0 / 6.0).abs() <= f64::EPSILON);
}

#[test]
fn perfect_predictions_score_one() {
    let g = vec![vec![0], vec![2], vec![1, 2]];
    assert_eq!(macro_f1(&g, &g).unwrap(), 1.0);
    assert_eq!(micro_f1(&g, &g).unwrap(), 1.0);
    let s = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]]);
    assert_eq!(lrap(&s, &g).unwrap(), 1.0);
}

#[test]
fn metric_errors() {
    let s = Matrix::from_rows(&[vec![0.1, 0.2]]);
    assert!(matches!(lrap(&s, &[vec![]]), Err(Error::Empty(_))));
    assert!(matches!(lrap(&s, &[vec![0], vec![1]]), Err(Error::Shape(_))));
    assert!(matches!(macro_f1(&[vec![0]], &[]), Err(Error::Shape(_))));
}

// ---- tasks -----------------------------------------------------------------

fn stream_cfg() -> SynthStreamConfig {
    SynthStreamConfig { n_domains: 2, vocab_size: 64, n_topics: 4, tokens_per_domain: 24, shared_tokens: 4, ..Default::default() }
}

fn domain(i: usize) -> DomainCorpus {
    let spec = &domain_incremental_specs(&stream_cfg()).unwrap()[i];
    synth_domain_corpus(spec, 20, 4, 8).unwrap()
}

/// Bayes rule on the known emissions.
fn bayes_accuracy(task: &DownstreamTask, corpus: &DomainCorpus) -> f64 {
    let g = corpus.generator().unwrap();
    let hits = task
        .test
        .iter()
        .filter(|e| {
            let post: Vec<f64> = (0..g.n_topics()).map(|k| libm::log(g.topic_mixture[k]) + g.log_likelihood(&e.sequence, k)).collect();
            let best = (0..post.len()).fold(0, |b, k| if post[k] > post[b] { k } else { b });
            best == e.labels[0]
        })
        .count();
    hits as f64 / task.test.len() as f64
}

#[test]
fn single_label_task_is_balanced_disjoint_and_learnable() {
    let c = domain(0);
    let spec = TaskSpec { n_per_label: 500, max_len: 12, ..TaskSpec::default() };
    let t = synth_downstream_task(&c, &spec, 1).unwrap();
    t.validate().unwrap();
    for split in [&t.train, &t.val, &t.test] {
        assert_eq!(split.len(), 2000);
        for l in 0..4 {
            assert_eq!(split.iter().filter(|e| e.labels == vec![l]).count(), 500);
        }
    }
    let mut all = BTreeSet::new();
    for e in t.train.iter().chain(&t.val).chain(&t.test) {
        assert!(all.insert(e.sequence.tokens.clone()));
    }
    let acc = bayes_accuracy(&t, &c);
    assert!(acc > 0.95, "Bayes accuracy {acc}");
    assert_eq!(t.metric, Metric::MacroF1);
}

#[test]
fn different_seeds_draw_different_examples() {
    let c = domain(0);
    let spec = TaskSpec { n_per_label: 100, max_len: 12, ..TaskSpec::default() };
    let a = synth_downstream_task(&c, &spec, 1).unwrap();
    let b = synth_downstream_task(&c, &spec, 2).unwrap();
    let sa: BTreeSet<_> = a.test.iter().map(|e| e.sequence.tokens.clone()).collect();
    let overlap = b.test.iter().filter(|e| sa.contains(&e.sequence.tokens)).count();
    assert!((overlap as f64) < 0.05 * b.test.len() as f64, "{overlap}");
    assert_eq!(a, synth_downstream_task(&c, &spec, 1).unwrap());
}

#[test]
fn multi_label_sets_are_the_markers_present() {
    let c = domain(1);
    let spec = TaskSpec { kind: TaskKind::MultiLabel, n_labels: 6, n_per_label: 30, max_len: 10, metric: None };
    let t = synth_downstream_task(&c, &spec, 3).unwrap();
    let markers = marker_tokens(c.generator().unwrap(), 6);
    assert_eq!(markers.iter().collect::<BTreeSet<_>>().len(), 6);
    for (i, e) in t.train.iter().enumerate() {
        assert!(e.labels.contains(&(i % 6)));
        let present: Vec<usize> = (0..6).filter(|&k| e.sequence.tokens.contains(&markers[k])).collect();
        assert_eq!(e.labels, present);
    }
    assert_eq!(t.metric, Metric::Lrap);
}

#[test]
fn task_errors() {
    let mut c = domain(0);
    assert!(synth_downstream_task(&c, &TaskSpec { n_labels: 3, ..TaskSpec::default() }, 0).is_err());
    c.source = CorpusSource::External("file".into());
    assert!(matches!(synth_downstream_task(&c, &TaskSpec::default(), 0), Err(Error::Config(_))));
    // length-1 sequences over few tokens cannot fill 3 x 500 x 4 distinct slots
    let c = domain(0);
    let spec = TaskSpec { n_per_label: 500, max_len: 2, ..TaskSpec::default() };
    assert!(matches!(synth_downstream_task(&c, &spec, 0), Err(Error::CorpusTooSmall(_))));
}

#[test]
fn label_spaces_align_only_across_time() {
    let cfg = SynthStreamConfig { n_domains: 3, vocab_size: 64, n_topics: 4, tokens_per_domain: 24, shared_tokens: 4, ..Default::default() };
    let spec = TaskSpec { n_per_label: 5, max_len: 8, ..TaskSpec::default() };
    let chrono: Vec<_> = chronological_specs(&cfg).unwrap().iter().map(|s| synth_domain_corpus(s, 5, 1, 8).unwrap()).collect();
    let a = synth_downstream_task(&chrono[0], &spec, 0).unwrap();
    let b = synth_downstream_task(&chrono[2], &spec, 0).unwrap();
    assert_eq!(a.label_space, b.label_space);
    let x = synth_downstream_task(&domain(0), &spec, 0).unwrap();
    let y = synth_downstream_task(&domain(1), &spec, 0).unwrap();
    assert_ne!(x.label_space, y.label_space);
}

// ---- fine-tuning and protocols ---------------------------------------------

fn tiny_model(seed: u64) -> ModelState {
    let cfg = ModelConfig { vocab_size: 64, max_seq_len: 9, n_layers: 2, hidden_dim: 16, n_heads: 2, ffn_dim: 32, ..ModelConfig::default() };
    ModelState::init(cfg, seed).unwrap()
}

fn tiny_task(i: usize) -> DownstreamTask {
    synth_downstream_task(&domain(i), &TaskSpec { n_per_label: 8, max_len: 8, ..TaskSpec::default() }, 5).unwrap()
}

fn fast() -> FinetuneConfig {
    FinetuneConfig { lr: 1e-2, max_epochs: 4, patience: 2, batch_size: 8, ..FinetuneConfig::default() }
}

#[test]
fn finetune_is_deterministic_and_reads_no_corpus() {
    let m = tiny_model(1);
    let t = tiny_task(0);
    let mut log = AccessLog::new();
    let (_, a) = finetune(&m, &t, &fast(), 7, &mut log).unwrap();
    let (tm, b) = finetune(&m, &t, &fast(), 7, &mut log).unwrap();
    assert_eq!(a, b);
    assert!(log.records().is_empty() && log.violations().is_empty());
    assert!(a.epochs_run >= a.best_epoch && a.best_epoch >= 1);
    assert!((0.0..=1.0).contains(&a.test_score));
    // the encoder was trained, the input checkpoint was not
    assert_ne!(tm.model.params().get(crate::autodiff::ParamId(0)), m.params().get(crate::autodiff::ParamId(0)));
    assert_eq!(m, tiny_model(1));
}

#[test]
fn probe_mode_leaves_encoder_untouched() {
    let m = tiny_model(1);
    let t = tiny_task(0);
    let cfg = FinetuneConfig { mode: FinetuneMode::Probe, ..fast() };
    let (tm, _) = finetune(&m, &t, &cfg, 3, &mut AccessLog::new()).unwrap();
    for (id, name, v) in m.params().iter() {
        assert_eq!(tm.model.params().get(id), v, "{name}");
    }
    assert_eq!(tm.model.params().len(), m.params().len() + 2);
}

#[test]
fn finetune_errors() {
    let m = tiny_model(1);
    let mut t = tiny_task(0);
    t.train.clear();
    assert!(matches!(finetune(&m, &t, &fast(), 0, &mut AccessLog::new()), Err(Error::Empty(_))));
    let bad = FinetuneConfig { patience: 0, ..fast() };
    assert!(finetune(&m, &tiny_task(0), &bad, 0, &mut AccessLog::new()).is_err());
}

#[test]
fn full_shot_count_reproduces_full_data_score() {
    let m = tiny_model(2);
    let t = tiny_task(0);
    let n = t.train.len();
    let curve = kshot_curve(&m, &t, &[8, n], &fast(), &[4], &mut AccessLog::new()).unwrap();
    let (_, full) = finetune(&m, &t, &fast(), 4, &mut AccessLog::new()).unwrap();
    assert_eq!(curve[1].result.scores[0].1, full.test_score);
    assert_eq!(curve.len(), 2);
    assert!(kshot_curve(&m, &t, &[n + 1], &fast(), &[4], &mut AccessLog::new()).is_err());
    assert!(kshot_curve(&m, &t, &[16, 8], &fast(), &[4], &mut AccessLog::new()).is_err());
    let sub = kshot_subset(&t.train, 5, 1).unwrap();
    assert_eq!(sub.len(), 5);
    assert_eq!(sub, kshot_subset(&t.train, 5, 1).unwrap());
}

#[test]
fn retention_support_is_lower_triangular() {
    let jobs = retention_jobs(4, &[1, 2, 3]);
    assert_eq!(jobs.len(), 30);
    assert!(jobs.iter().all(|j| j.task_domain <= j.step));

    let tasks = vec![tiny_task(0), tiny_task(1)];
    let ckpts = vec![tiny_model(1), tiny_model(2)];
    let mut log = AccessLog::new();
    let r = retention_matrix(&ckpts, &tasks, &fast(), &[1, 2, 3], &mut log).unwrap();
    let support: Vec<(usize, usize)> = r.cells.iter().map(|c| (c.step, c.task_domain)).collect();
    assert_eq!(support, vec![(1, 1), (2, 1), (2, 2)]);
    assert!(r.cells.iter().all(|c| c.result.scores.len() == 3));
    assert!(r.forgetting(1).is_some() && r.get(1, 2).is_none());
    assert!(log.violations().is_empty());
    let report = EvalReport { retention: Some(r), ..EvalReport::default() };
    assert_eq!(report.records().len(), 9);
    assert!(report.records().iter().all(|rec| rec.checkpoint_digest.len() == 16));

    assert!(retention_matrix(&ckpts, &tasks, &fast(), &[1, 2], &mut log).is_err());
    assert!(matches!(retention_matrix(&ckpts[..1], &tasks, &fast(), &[1, 2, 3], &mut log), Err(Error::Checkpoint(_))));
    let partial = [(RetentionJob { step: 1, task_domain: 1, seed: 1 }, 0.5)];
    assert!(assemble_retention(&tasks, &["a".into(), "b".into()], &[1, 2, 3], &partial).is_err());
}

#[test]
fn temporal_generalization_checks_label_space() {
    let m = tiny_model(3);
    let a = tiny_task(0);
    let b = tiny_task(1);
    assert!(matches!(temporal_generalization(&m, &a, &b, &fast(), &[1], &mut AccessLog::new()), Err(Error::LabelSpace(_))));
    // t = T reduces to ordinary fine-tuning
    let s = temporal_generalization(&m, &a, &a, &fast(), &[9], &mut AccessLog::new()).unwrap();
    let (_, r) = finetune(&m, &a, &fast(), 9, &mut AccessLog::new()).unwrap();
    assert_eq!(s.scores[0].1, r.test_score);
}

#[test]
fn log_perplexity_is_reproducible_and_uniform_gives_log_vocab() {
    let mut m = tiny_model(4);
    let c = domain(0);
    let a = mlm_log_perplexity(&m, &c.train, 0.15, 11).unwrap();
    assert_eq!(a.to_bits(), mlm_log_perplexity(&m, &c.train, 0.15, 11).unwrap().to_bits());
    for name in ["head.decoder.w", "head.decoder.b"] {
        let id = m.params().find(name).unwrap();
        m.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    assert!((mlm_log_perplexity(&m, &c.train, 0.15, 11).unwrap() - libm::log(64.0)).abs() < 1e-12);
    assert!(mlm_log_perplexity(&m, &[], 0.15, 11).is_err());

    let mut log = AccessLog::new();
    heldout_log_perplexity(&m, &c, 0.15, 1, &mut log).unwrap();
    assert_eq!(log.records().len(), 1);
    assert!(log.violations().is_empty());
}

#[test]
fn mean_std_uses_sample_deviation() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
    assert_eq!(m, 2.0);
    assert!((s - 1.0).abs() < 1e-15);
    assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
}
