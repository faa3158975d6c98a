#![allow(dead_code)]

pub mod gradcheck;

use gersp::data::{
    generate_synthetic_corpus, next_dual_batch, DualBatch, LabeledDataset, SamplerState, SyntheticCorpusSpec,
    UnlabeledDataset,
};
use gersp::model::EncoderSpec;
use gersp::trainer::TrainingConfig;

/// Desk topology at the smallest sizes that still exercise every layer type.
pub fn tiny_encoder() -> EncoderSpec {
    EncoderSpec {
        stage_widths: vec![8, 8, 16, 16],
        stem_width: 8,
        input_size: 16,
        proj_hidden_dim: 16,
        proj_out_dim: 8,
        n_classes: 4,
        bn_groups: 2,
        ..EncoderSpec::desk()
    }
}

pub fn tiny_config() -> TrainingConfig {
    let encoder = tiny_encoder();
    TrainingConfig {
        augment: TrainingConfig::desk().augment.with_out_size(encoder.input_size),
        encoder,
        queue_capacity: 32,
        batch_size: 8,
        epochs: 1,
        seed: 11,
        ..TrainingConfig::desk()
    }
}

pub fn tiny_corpus(n: usize) -> (LabeledDataset, UnlabeledDataset) {
    generate_synthetic_corpus(&SyntheticCorpusSpec {
        n_natural: n,
        n_rs: n,
        k_classes: 4,
        image_size: 16,
        seed: 5,
    })
    .unwrap()
}

pub fn batch_for(cfg: &TrainingConfig, seed: u64) -> DualBatch {
    let (nat, rs) = tiny_corpus(cfg.batch_size * 2);
    let mut st = SamplerState::new(seed);
    next_dual_batch(&mut st, &nat, &rs, &cfg.augment, &cfg.normalize, cfg.batch_size).unwrap()
}
