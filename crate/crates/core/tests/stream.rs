//! End-to-end runs through the public API on a tiny three-domain stream.

use lifelong_core::access::AccessLog;
use lifelong_core::corpus::{build_stream, domain_incremental_specs, synth_domain_corpus, DomainStream, OrderingKind, SynthStreamConfig};
use lifelong_core::eval::{retention_matrix, synth_downstream_task, FinetuneConfig, FinetuneMode, TaskSpec};
use lifelong_core::model::{load_checkpoint, save_checkpoint, ModelConfig};
use lifelong_core::trainer::{cost_closed_form, run_stream, verify_ledger, Algorithm, EwcConfig, TrainConfig};

fn stream() -> DomainStream {
    let cfg = SynthStreamConfig { n_domains: 3, vocab_size: 64, n_topics: 2, tokens_per_domain: 12, shared_tokens: 4, ..Default::default() };
    let corpora = domain_incremental_specs(&cfg).unwrap().iter().map(|s| synth_domain_corpus(s, 80, 8, 8).unwrap()).collect();
    build_stream(corpora, OrderingKind::DomainIncremental).unwrap()
}

fn model() -> ModelConfig {
    ModelConfig { vocab_size: 64, max_seq_len: 9, n_layers: 2, hidden_dim: 8, n_heads: 2, ffn_dim: 16, ..ModelConfig::default() }
}

fn train(algorithm: Algorithm) -> TrainConfig {
    TrainConfig {
        algorithm,
        steps_first_domain: 4,
        steps_later_domain: 6,
        effective_batch_size: 4,
        micro_batch_size: 2,
        lr_init: 1e-3,
        replay_every: 2,
        memory_capacity: 12,
        queue_capacity: 8,
        ewc: EwcConfig { fisher_batches: 2, ..EwcConfig::default() },
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn every_algorithm_runs_within_protocol_and_budget() {
    let stream = stream();
    for a in Algorithm::ALL {
        let run = run_stream(&stream, &model(), &train(a)).unwrap();
        assert!(run.access.violations().is_empty(), "{a}: {:?}", run.access.violations());
        let expected_ckpts = if a == Algorithm::Mtl { 1 } else { 3 };
        assert_eq!(run.checkpoints.len(), expected_ckpts, "{a}");
        for c in &run.checkpoints {
            let m = load_checkpoint(c).unwrap();
            assert_eq!(&save_checkpoint(&m, c.time_step, &c.algorithm), c, "{a}");
        }
        let (observed, b) = if a == Algorithm::Mtl { (run.ledger.total(), 16) } else { (run.ledger.after_first(), 12) };
        verify_ledger(observed, cost_closed_form(a, 2, 1, b).unwrap()).unwrap_or_else(|e| panic!("{a}: {e}"));
        assert!(run.logs.iter().all(|l| l.mlm.is_finite() && l.kd.is_finite()), "{a}");
    }
}

#[test]
fn retention_matrix_is_lower_triangular_and_reads_no_corpus() {
    let stream = stream();
    let run = run_stream(&stream, &model(), &train(Algorithm::Er)).unwrap();
    let models: Vec<_> = run.checkpoints.iter().map(|c| load_checkpoint(c).unwrap()).collect();
    let spec = TaskSpec { n_labels: 2, n_per_label: 4, max_len: 6, ..TaskSpec::default() };
    let tasks: Vec<_> = stream.domains.iter().map(|d| synth_downstream_task(d, &spec, 1).unwrap()).collect();
    let ft = FinetuneConfig { mode: FinetuneMode::Probe, lr: 1e-2, max_epochs: 2, batch_size: 4, ..FinetuneConfig::default() };
    let mut access = AccessLog::new();
    let m = retention_matrix(&models, &tasks, &ft, &[0, 1, 2], &mut access).unwrap();
    for step in 1..=3 {
        for t in 1..=3 {
            assert_eq!(m.get(step, t).is_some(), t <= step, "cell ({step}, {t})");
        }
    }
    assert!(access.records().is_empty());
}
