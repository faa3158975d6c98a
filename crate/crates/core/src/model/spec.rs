use serde::{Deserialize, Serialize};

use crate::error::{GerspError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand (x4).
    Bottleneck,
}

/// Encoder architecture: residual backbone, projector and predictor sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    /// Output channels of each stage.
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub block: BlockKind,
    pub stem_width: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_max_pool: bool,
    pub input_size: usize,
    pub proj_hidden_dim: usize,
    pub proj_out_dim: usize,
    pub n_classes: usize,
    /// Virtual device count for shuffled batch norm.
    pub bn_groups: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl EncoderSpec {
    /// Reduced-width residual network for CPU-scale runs on 32x32 inputs.
    pub fn desk() -> Self {
        Self {
            stage_widths: vec![16, 32, 64, 128],
            blocks_per_stage: vec![1, 1, 1, 1],
            block: BlockKind::Basic,
            stem_width: 16,
            stem_kernel: 3,
            stem_stride: 2,
            stem_max_pool: false,
            input_size: 32,
            proj_hidden_dim: 128,
            proj_out_dim: 128,
            n_classes: 10,
            bn_groups: 4,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// ResNet-50 topology with the 2048-128 projector.
    pub fn full() -> Self {
        Self {
            stage_widths: vec![256, 512, 1024, 2048],
            blocks_per_stage: vec![3, 4, 6, 3],
            block: BlockKind::Bottleneck,
            stem_width: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_max_pool: true,
            input_size: 224,
            proj_hidden_dim: 2048,
            proj_out_dim: 128,
            n_classes: 1000,
            bn_groups: 4,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn n_stages(&self) -> usize {
        self.stage_widths.len()
    }

    /// Dimension of the pooled backbone feature.
    pub fn feature_dim(&self) -> usize {
        *self.stage_widths.last().expect("validated spec has stages")
    }

    /// Spatial reduction from input to the last stage.
    pub fn total_stride(&self) -> usize {
        let pool = if self.stem_max_pool { 2 } else { 1 };
        self.stem_stride * pool * (1 << (self.n_stages().saturating_sub(1)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GerspError::Config(m));
        if self.stage_widths.len() != self.blocks_per_stage.len() || self.stage_widths.len() < 2 {
            return bad("stage_widths and blocks_per_stage must have equal length >= 2".into());
        }
        if self.stage_widths.contains(&0) || self.blocks_per_stage.contains(&0) {
            return bad("stage widths and block counts must be positive".into());
        }
        if self.block == BlockKind::Bottleneck && self.stage_widths.iter().any(|w| w % 4 != 0) {
            return bad("bottleneck stage widths must be multiples of 4".into());
        }
        if self.stem_width == 0 || self.stem_kernel == 0 || self.stem_kernel.is_multiple_of(2) || self.stem_stride == 0 {
            return bad("stem needs positive width, odd kernel and positive stride".into());
        }
        if self.proj_out_dim < 2 || self.proj_hidden_dim == 0 {
            return bad("proj_out_dim must be >= 2 and proj_hidden_dim positive".into());
        }
        if self.n_classes < 2 {
            return bad("n_classes must be >= 2".into());
        }
        if self.bn_groups < 2 {
            return bad("bn_groups must be >= 2".into());
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.total_stride()) {
            return bad(format!(
                "input_size {} must be a positive multiple of the total stride {}",
                self.input_size,
                self.total_stride()
            ));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return bad("bn_momentum must lie in [0,1] and bn_eps be positive".into());
        }
        Ok(())
    }
}
