//! Student/teacher encoders: residual backbone, global average pooling,
//! projector, predictor and shuffled batch norm for teacher forwards.

mod backbone;
mod heads;
pub mod layers;
mod spec;

pub use backbone::{update_running_stats, Backbone, BackboneCache, BackboneOutput, BnStatsLog, Mode};
pub use heads::{
    init_predictor, init_projector, predict_backward, predict_logits, project, project_backward,
    project_with_cache, ProjectionCache, NORM_FLOOR,
};
pub use layers::FeatureMap;
pub use spec::{BlockKind, EncoderSpec};

use crate::error::{GerspError, Result};
use crate::pixels::ImageBatch;
use crate::rng::RngStream;
use crate::tensor::{ParamSet, Scalar, Tensor};

/// Student and teacher parameter sets. The teacher has no predictor.
#[derive(Debug, Clone)]
pub struct EncoderBundle<T> {
    pub spec: EncoderSpec,
    pub student_backbone: ParamSet<T>,
    pub student_projector: ParamSet<T>,
    pub student_predictor: ParamSet<T>,
    pub student_running: ParamSet<T>,
    pub teacher_backbone: ParamSet<T>,
    pub teacher_projector: ParamSet<T>,
    pub teacher_running: ParamSet<T>,
}

impl<T: Scalar> EncoderBundle<T> {
    /// Teacher and student must match name-for-name and shape-for-shape.
    pub fn check_congruent(&self) -> Result<()> {
        self.student_backbone.check_congruent(&self.teacher_backbone)?;
        self.student_projector.check_congruent(&self.teacher_projector)?;
        self.student_running.check_congruent(&self.teacher_running)
    }

    pub fn cast<U: Scalar>(&self) -> EncoderBundle<U> {
        EncoderBundle {
            spec: self.spec.clone(),
            student_backbone: self.student_backbone.cast(),
            student_projector: self.student_projector.cast(),
            student_predictor: self.student_predictor.cast(),
            student_running: self.student_running.cast(),
            teacher_backbone: self.teacher_backbone.cast(),
            teacher_projector: self.teacher_projector.cast(),
            teacher_running: self.teacher_running.cast(),
        }
    }
}

/// Seeded initialization; the teacher starts as an exact copy of the student.
pub fn init_encoder<T: Scalar>(spec: &EncoderSpec, seed: u64) -> Result<EncoderBundle<T>> {
    let backbone = Backbone::new(spec)?;
    let root = RngStream::new(seed);
    let student_backbone = backbone.init_params(&mut root.derive(0));
    let student_projector = init_projector(
        spec.feature_dim(),
        spec.proj_hidden_dim,
        spec.proj_out_dim,
        &mut root.derive(1),
    );
    let student_predictor = init_predictor(spec.feature_dim(), spec.n_classes, &mut root.derive(2));
    let student_running = backbone.init_running();
    Ok(EncoderBundle {
        spec: spec.clone(),
        teacher_backbone: student_backbone.clone(),
        teacher_projector: student_projector.clone(),
        teacher_running: student_running.clone(),
        student_backbone,
        student_projector,
        student_predictor,
        student_running,
    })
}

/// NHWC image batch to a channel-major feature map.
pub fn batch_to_feature_map<T: Scalar>(batch: &ImageBatch) -> FeatureMap<T> {
    let (n, h, w) = (batch.len(), batch.height(), batch.width());
    let mut fm = FeatureMap::zeros(3, n, h, w);
    let p = h * w;
    for i in 0..n {
        let img = batch.image(i);
        for (px, rgb) in img.chunks_exact(3).enumerate() {
            for c in 0..3 {
                fm.data[(c * n + i) * p + px] = T::lit(f64::from(rgb[c]));
            }
        }
    }
    fm
}

fn pool_last<T: Scalar>(out: &BackboneOutput<T>) -> Tensor<T> {
    layers::global_avg_pool(out.stages.last().expect("backbone has stages"))
}

/// Backbone then global average pooling: `B x D_b`. Train mode refreshes the
/// running statistics in `running`.
pub fn forward_pooled<T: Scalar>(
    backbone: &Backbone,
    params: &ParamSet<T>,
    running: &mut ParamSet<T>,
    batch: &ImageBatch,
    mode: Mode,
) -> Result<Tensor<T>> {
    let out = backbone.forward(params, running, &batch_to_feature_map(batch), mode)?;
    update_running_stats(running, &out.bn_stats, backbone.spec().bn_momentum)?;
    Ok(pool_last(&out))
}

/// Eval-mode [`forward_pooled`] over shared, read-only running statistics.
pub fn forward_pooled_eval<T: Scalar>(
    backbone: &Backbone,
    params: &ParamSet<T>,
    running: &ParamSet<T>,
    batch: &ImageBatch,
) -> Result<Tensor<T>> {
    let out = backbone.forward(params, running, &batch_to_feature_map(batch), Mode::Eval)?;
    Ok(pool_last(&out))
}

/// Every stage's feature map, before pooling.
pub fn forward_stages<T: Scalar>(
    backbone: &Backbone,
    params: &ParamSet<T>,
    running: &mut ParamSet<T>,
    batch: &ImageBatch,
    mode: Mode,
) -> Result<Vec<FeatureMap<T>>> {
    let out = backbone.forward(params, running, &batch_to_feature_map(batch), mode)?;
    update_running_stats(running, &out.bn_stats, backbone.spec().bn_momentum)?;
    Ok(out.stages)
}

/// Draws a permutation, hands the permuted batch to `f`, and restores the
/// original row order of its `B x D` result.
pub fn with_shuffled_groups<T, F>(batch: &ImageBatch, groups: usize, rng: &mut RngStream, f: F) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnOnce(&ImageBatch, usize) -> Result<Tensor<T>>,
{
    let n = batch.len();
    if groups == 0 || !n.is_multiple_of(groups) {
        return Err(GerspError::Config(format!(
            "{groups} BN groups do not divide batch of {n}"
        )));
    }
    let perm = rng.permutation(n);
    let shuffled = f(&batch.select(&perm), groups)?;
    let (rows, d) = shuffled.dims2();
    if rows != n {
        return Err(GerspError::InvalidInput(format!("shuffled forward returned {rows} rows for {n}")));
    }
    let mut out = Tensor::zeros(&[n, d]);
    for (pos, &src) in perm.iter().enumerate() {
        out.row_mut(src).copy_from_slice(shuffled.row(pos));
    }
    Ok(out)
}

/// Teacher forward with shuffled batch norm: the batch is permuted, split
/// into `groups` slices with independent BN statistics (one per emulated
/// device), pooled, and returned in the original row order.
pub fn shuffled_forward<T: Scalar>(
    backbone: &Backbone,
    params: &ParamSet<T>,
    running: &mut ParamSet<T>,
    batch: &ImageBatch,
    groups: usize,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    with_shuffled_groups(batch, groups, rng, |shuffled, g| {
        let m = match mode {
            Mode::Train { .. } => Mode::Train { groups: g },
            Mode::Eval => Mode::Eval,
        };
        forward_pooled(backbone, params, running, shuffled, m)
    })
}
