mod common;

use common::tiny_encoder;
use gersp::data::{generate_rs_scenes, generate_synthetic_corpus, SyntheticCorpusSpec};
use gersp::eval::{finetune_classifier, linear_probe, stagewise_probe, EvalMode, EvalProtocol, FrozenEncoder};

fn two_class_set(n: usize) -> gersp::data::LabeledDataset {
    generate_synthetic_corpus(&SyntheticCorpusSpec {
        n_natural: n,
        n_rs: 1,
        k_classes: 2,
        image_size: 16,
        seed: 2,
    })
    .unwrap()
    .0
}

#[test]
fn finetune_separates_two_classes() {
    let ds = two_class_set(60);
    let enc = FrozenEncoder::random(&tiny_encoder(), 3).unwrap();
    let protocol = EvalProtocol {
        trials: 1,
        batch_size: 8,
        train_fraction: 0.4,
        ..EvalProtocol::desk(EvalMode::Finetune, 16)
    };
    let r = finetune_classifier(&enc, &ds, &protocol).unwrap();
    assert_eq!(r.accuracies, vec![1.0]);
    assert_eq!(r.n_train + r.n_test, 60);
}

#[test]
fn report_has_one_accuracy_per_trial_and_exact_mean() {
    let ds = two_class_set(40);
    let enc = FrozenEncoder::random(&tiny_encoder(), 3).unwrap();
    let protocol = EvalProtocol {
        epochs: 5,
        ..EvalProtocol::desk(EvalMode::Probe, 16)
    };
    let r = linear_probe(&enc, &ds, &protocol).unwrap();
    assert_eq!(r.accuracies.len(), 5);
    let mean = r.accuracies.iter().sum::<f64>() / 5.0;
    assert!((r.mean - mean).abs() < 1e-12);
    let var = r.accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 5.0;
    assert!((r.std - var.sqrt()).abs() < 1e-12);
    assert_eq!(r.std_kind, "population");
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"accuracies\""));
}

#[test]
fn probe_leaves_encoder_untouched() {
    let ds = two_class_set(40);
    let enc = FrozenEncoder::random(&tiny_encoder(), 4).unwrap();
    let (p, r) = (enc.params.fingerprint(), enc.running.fingerprint());
    let protocol = EvalProtocol {
        trials: 2,
        epochs: 3,
        ..EvalProtocol::desk(EvalMode::Probe, 16)
    };
    linear_probe(&enc, &ds, &protocol).unwrap();
    stagewise_probe(&enc, &ds, &protocol).unwrap();
    assert_eq!(enc.params.fingerprint(), p);
    assert_eq!(enc.running.fingerprint(), r);
}

#[test]
fn stage_probe_reports_every_stage_and_matches_probe_at_grid_one() {
    let spec = SyntheticCorpusSpec {
        n_natural: 1,
        n_rs: 1,
        k_classes: 4,
        image_size: 16,
        seed: 9,
    };
    let ds = generate_rs_scenes(&spec, 80, 0).unwrap();
    let enc = FrozenEncoder::random(&tiny_encoder(), 5).unwrap();
    let base = EvalProtocol {
        trials: 2,
        epochs: 10,
        train_fraction: 0.5,
        ..EvalProtocol::desk(EvalMode::StageProbe, 16)
    };
    let r = stagewise_probe(&enc, &ds, &base).unwrap();
    let stages = r.stages.as_ref().unwrap();
    assert_eq!(stages.len(), 4);
    let best = stages.iter().map(|s| s.mean).fold(f64::MIN, f64::max);
    assert!(best >= stages[0].mean);

    let grid1 = EvalProtocol { stage_grid: 1, ..base.clone() };
    let r1 = stagewise_probe(&enc, &ds, &grid1).unwrap();
    let lp = linear_probe(&enc, &ds, &EvalProtocol { mode: EvalMode::Probe, ..grid1 }).unwrap();
    assert_eq!(r1.stages.unwrap().last().unwrap().accuracies, lp.accuracies);
}

#[test]
fn class_count_mismatch_is_rejected() {
    let ds = two_class_set(20);
    let enc = FrozenEncoder::random(&tiny_encoder(), 1).unwrap();
    let protocol = EvalProtocol {
        n_classes: Some(3),
        ..EvalProtocol::desk(EvalMode::Probe, 16)
    };
    assert_eq!(linear_probe(&enc, &ds, &protocol).unwrap_err().code(), "config");
    let bad_size = EvalProtocol::desk(EvalMode::Probe, 12);
    assert_eq!(linear_probe(&enc, &ds, &bad_size).unwrap_err().code(), "config");
}
