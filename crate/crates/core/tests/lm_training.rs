use lsattn_core::lm::{train_lm, AttentionKind, ByteCorpus, ModelConfig, TrainConfig, TrainStatus};

#[test]
fn desk_run_beats_uniform_by_one_nat() {
    let corpus = ByteCorpus::synthetic(1_100_000, 0, 0.1).unwrap();
    let model = ModelConfig::desk(AttentionKind::Vanilla);
    let out = train_lm(&model, &corpus, &TrainConfig::default()).unwrap();
    assert_eq!(out.status, TrainStatus::Completed);
    assert_eq!(out.telemetry.len(), 2000);
    let smoothed = out.smoothed_final_loss(50);
    assert!(
        smoothed < 257f64.ln() - 1.0,
        "smoothed final loss {smoothed}"
    );
    assert!(out.divergence_flags.is_empty());
}

#[test]
#[ignore = "several GB of attention traces; run with --ignored"]
fn paper_shape_runs_ten_steps() {
    let corpus = ByteCorpus::synthetic(50_000, 1, 0.1).unwrap();
    let model = ModelConfig::paper_shape(2048, AttentionKind::Vanilla);
    let cfg = TrainConfig {
        steps: 10,
        tokens_per_batch: 2048,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let out = train_lm(&model, &corpus, &cfg).unwrap();
    assert_eq!(out.telemetry.len(), 10);
    assert!(out.telemetry.iter().all(|r| r.train_loss.is_finite()));
    assert_eq!(out.telemetry[0].max_abs_logit.len(), 36);
}
