use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::data::Normalize;
use crate::error::{GerspError, Result};
use crate::model::EncoderSpec;
use crate::schedule::{CosineRestartSchedule, SgdConfig};

/// Source of the teacher's BN running statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherRunningStats {
    /// Copied from the student after every EMA update.
    #[default]
    CopyStudent,
    /// Accumulated from the teacher's own shuffled train-mode forwards.
    OwnForward,
}

/// Every pre-training hyper-parameter. Serializes to one flat JSON object;
/// the nested records contribute their fields directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(flatten)]
    pub encoder: EncoderSpec,
    #[serde(flatten)]
    pub augment: AugmentationPolicy,
    #[serde(flatten)]
    pub normalize: Normalize,
    /// Weight of the supervised natural-image loss.
    pub alpha: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Teacher EMA coefficient.
    pub ema_m: f64,
    #[serde(default)]
    pub teacher_running_stats: TeacherRunningStats,
    pub queue_capacity: usize,
    pub batch_size: usize,
    pub epochs: u32,
    #[serde(flatten)]
    pub cosine: CosineRestartSchedule,
    #[serde(flatten)]
    pub optimizer: SgdConfig,
    pub seed: u64,
}

impl TrainingConfig {
    /// Reduced network on 32x32 inputs, small queue.
    pub fn desk() -> Self {
        let encoder = EncoderSpec::desk();
        Self {
            augment: AugmentationPolicy::default().with_out_size(encoder.input_size),
            encoder,
            normalize: Normalize::default(),
            alpha: 1.0,
            tau: 0.07,
            ema_m: 0.996,
            teacher_running_stats: TeacherRunningStats::default(),
            queue_capacity: 1024,
            batch_size: 32,
            epochs: 15,
            cosine: CosineRestartSchedule::default(),
            optimizer: SgdConfig::default(),
            seed: 0,
        }
    }

    /// ResNet-50 at 224x224 with the large queue.
    pub fn full() -> Self {
        let encoder = EncoderSpec::full();
        Self {
            augment: AugmentationPolicy::default().with_out_size(encoder.input_size),
            encoder,
            normalize: Normalize::default(),
            alpha: 1.0,
            tau: 0.07,
            ema_m: 0.996,
            teacher_running_stats: TeacherRunningStats::default(),
            queue_capacity: 65_536,
            batch_size: 128,
            epochs: 100,
            cosine: CosineRestartSchedule::default(),
            optimizer: SgdConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.augment.validate()?;
        self.normalize.validate()?;
        self.cosine.validate()?;
        self.optimizer.validate()?;
        let bad = |msg: String| Err(GerspError::Config(msg));
        if self.augment.out_size != self.encoder.input_size {
            return bad(format!(
                "out_size {} must equal input_size {}",
                self.augment.out_size, self.encoder.input_size
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.ema_m) {
            return bad(format!("ema_m must lie in [0, 1], got {}", self.ema_m));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(self.encoder.bn_groups) {
            return bad(format!(
                "batch_size {} must be a positive multiple of bn_groups {}",
                self.batch_size, self.encoder.bn_groups
            ));
        }
        if self.queue_capacity < self.batch_size {
            return bad(format!(
                "queue_capacity {} is smaller than batch_size {}",
                self.queue_capacity, self.batch_size
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        Ok(())
    }
}
