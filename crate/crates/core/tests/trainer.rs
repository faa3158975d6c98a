mod common;

use common::{batch_for, tiny_config, tiny_corpus};
use gersp::model::init_encoder;
use gersp::objective::ema_update;
use gersp::rng::RngStream;
use gersp::tensor::Tensor;
use gersp::trainer::{
    compute_gradients, load_checkpoint, pretrain, train_step, LossWeights, PretrainOptions, TeacherRunningStats,
    TrainState, TrainingConfig,
};

fn prefill(state: &mut TrainState) {
    let (cap, dim) = (state.queue.capacity(), state.queue.dim());
    let mut rng = RngStream::new(99);
    let mut rows: Vec<f32> = (0..cap * dim).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
    for r in rows.chunks_mut(dim) {
        let n = r.iter().map(|v| v * v).sum::<f32>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    state.queue.push(&Tensor::from_vec(&[cap, dim], rows).unwrap()).unwrap();
}

fn all_zero(p: &gersp::tensor::ParamSet<f32>) -> bool {
    p.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0))
}

#[test]
fn alpha_zero_total_equals_contrastive_and_predictor_is_idle() {
    let mut cfg = tiny_config();
    cfg.alpha = 0.0;
    let mut state = TrainState::new(&cfg).unwrap();
    prefill(&mut state);
    let batch = batch_for(&cfg, 1);
    let out = compute_gradients(
        &state.backbone,
        &mut state.bundle,
        &state.queue,
        &batch,
        LossWeights::from_config(&cfg),
        &mut RngStream::new(0),
    )
    .unwrap();
    assert_eq!(out.breakdown.l_total, out.breakdown.l_ct);
    assert!(out.breakdown.l_ce > 0.0);
    assert!(all_zero(&out.grads.predictor));
    assert!(!all_zero(&out.grads.projector));

    let before = state.bundle.student_predictor.fingerprint();
    let bd = train_step(&mut state, &batch, 0.05).unwrap();
    assert_eq!(bd.l_total, bd.l_ct);
    // Weight decay still acts on the predictor; with zero gradient and zero
    // decay it must not move.
    let mut cfg0 = cfg.clone();
    cfg0.optimizer.weight_decay = 0.0;
    let mut s0 = TrainState::new(&cfg0).unwrap();
    let fp = s0.bundle.student_predictor.fingerprint();
    train_step(&mut s0, &batch, 0.05).unwrap();
    assert_eq!(s0.bundle.student_predictor.fingerprint(), fp);
    assert_ne!(state.bundle.student_predictor.fingerprint(), before);
}

#[test]
fn zero_contrastive_weight_leaves_projector_without_gradient() {
    let cfg = tiny_config();
    let mut state = TrainState::new(&cfg).unwrap();
    let batch = batch_for(&cfg, 2);
    let out = compute_gradients(
        &state.backbone,
        &mut state.bundle,
        &state.queue,
        &batch,
        LossWeights { ct: 0.0, ..LossWeights::from_config(&cfg) },
        &mut RngStream::new(0),
    )
    .unwrap();
    assert!(all_zero(&out.grads.projector));
    assert!(!all_zero(&out.grads.predictor));
    assert!(!all_zero(&out.grads.backbone));
}

#[test]
fn alpha_one_total_is_exact_sum() {
    let cfg = tiny_config();
    let mut state = TrainState::new(&cfg).unwrap();
    let bd = train_step(&mut state, &batch_for(&cfg, 3), 0.05).unwrap();
    assert_eq!(bd.l_total, bd.l_ct + bd.l_ce);
}

#[test]
fn teacher_moves_only_by_ema() {
    let cfg = tiny_config();
    let mut state = TrainState::new(&cfg).unwrap();
    let batch = batch_for(&cfg, 4);
    // First step: teacher == student before the update, so the expected
    // teacher is m * W_s(old) + (1 - m) * W_s(new).
    let old_student = state.bundle.student_backbone.clone();
    train_step(&mut state, &batch, 0.05).unwrap();
    let mut expected = old_student;
    ema_update(&mut expected, &state.bundle.student_backbone, cfg.ema_m).unwrap();
    assert_eq!(expected.fingerprint(), state.bundle.teacher_backbone.fingerprint());
    assert_ne!(state.bundle.teacher_backbone.fingerprint(), state.bundle.student_backbone.fingerprint());
}

#[test]
fn teacher_gap_decays_by_m_with_frozen_student() {
    let cfg = tiny_config();
    let mut bundle = init_encoder::<f64>(&cfg.encoder, 1).unwrap();
    let other = init_encoder::<f64>(&cfg.encoder, 2).unwrap();
    bundle.teacher_backbone = other.student_backbone;
    let gap0 = bundle.teacher_backbone.distance(&bundle.student_backbone);
    ema_update(&mut bundle.teacher_backbone, &bundle.student_backbone, cfg.ema_m).unwrap();
    let gap1 = bundle.teacher_backbone.distance(&bundle.student_backbone);
    assert!((gap1 / gap0 - cfg.ema_m).abs() < 1e-12);
}

#[test]
fn queue_fills_by_batch_size_until_capacity() {
    let cfg = tiny_config();
    let mut state = TrainState::new(&cfg).unwrap();
    let batch = batch_for(&cfg, 5);
    let mut expected = 0;
    for _ in 0..6 {
        train_step(&mut state, &batch, 0.01).unwrap();
        expected = (expected + cfg.batch_size).min(cfg.queue_capacity);
        assert_eq!(state.queue.filled(), expected);
    }
    assert_eq!(state.iteration, 6);
    assert_eq!(state.history.len(), 6);
}

#[test]
fn rejects_wrong_batch_size() {
    let mut cfg = tiny_config();
    let batch = batch_for(&cfg, 6);
    cfg.batch_size = 4;
    let mut state = TrainState::new(&cfg).unwrap();
    assert!(train_step(&mut state, &batch, 0.01).is_err());
}

#[test]
fn divergence_aborts_with_iteration() {
    let mut cfg = tiny_config();
    cfg.tau = 1e-300;
    let mut state = TrainState::new(&cfg).unwrap();
    let err = train_step(&mut state, &batch_for(&cfg, 7), 0.01);
    assert!(err.is_err());
    assert!(state.history.is_empty());
}

#[test]
fn one_epoch_logs_every_step_and_replays() {
    let cfg = tiny_config();
    let (nat, rs) = tiny_corpus(64);
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        pretrain(&cfg, &nat, &rs, &out, &PretrainOptions::default()).unwrap()
    };
    let a = run("a.gersp");
    let b = run("b.gersp");
    let lines = std::fs::read_to_string(&a.metrics_path).unwrap();
    assert_eq!(lines.lines().count(), 64 / cfg.batch_size);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    for key in ["iteration", "epoch", "lr", "l_ct", "l_ce", "l_total"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert_eq!(a.manifest.content_checksum, b.manifest.content_checksum);
    assert_eq!(a.state.history, b.state.history);
    let ca = load_checkpoint(&dir.path().join("a.gersp")).unwrap();
    assert_eq!(ca.manifest.metadata.epochs_completed, 1);
    assert_eq!(ca.manifest.metadata.iterations, 8);
}

#[test]
fn recorded_lr_follows_schedule() {
    let mut cfg = tiny_config();
    cfg.epochs = 3;
    cfg.cosine.t_max = 2;
    let (nat, rs) = tiny_corpus(16);
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(&cfg, &nat, &rs, &dir.path().join("c.gersp"), &PretrainOptions::default()).unwrap();
    for r in &out.state.history {
        let expected = cfg.cosine.lr_at_epoch(f64::from(r.epoch));
        assert_eq!(r.lr, expected);
    }
    assert_eq!(out.state.history[0].lr, cfg.cosine.lr_max);
    assert!((out.state.history[2].lr - 0.5 * (cfg.cosine.lr_min + cfg.cosine.lr_max)).abs() < 1e-15);
    assert_eq!(out.state.history[4].lr, cfg.cosine.lr_max);
}

#[test]
fn class_count_mismatch_is_config_error() {
    let mut cfg = tiny_config();
    cfg.encoder.n_classes = 5;
    let (nat, rs) = tiny_corpus(16);
    let dir = tempfile::tempdir().unwrap();
    let err = pretrain(&cfg, &nat, &rs, &dir.path().join("x"), &PretrainOptions::default()).unwrap_err();
    assert_eq!(err.code(), "config");
}

#[test]
fn teacher_running_stats_follow_configured_source() {
    let cfg = tiny_config();
    let batch = batch_for(&cfg, 6);
    let mut copied = TrainState::new(&cfg).unwrap();
    train_step(&mut copied, &batch, 0.05).unwrap();
    assert_eq!(copied.bundle.teacher_running, copied.bundle.student_running);

    let own = TrainingConfig {
        teacher_running_stats: TeacherRunningStats::OwnForward,
        ..cfg
    };
    let mut state = TrainState::new(&own).unwrap();
    let initial = state.bundle.teacher_running.clone();
    train_step(&mut state, &batch, 0.05).unwrap();
    assert_ne!(state.bundle.teacher_running, state.bundle.student_running);
    assert_ne!(state.bundle.teacher_running, initial);
}
