use serde::{Deserialize, Serialize};

use super::{TeacherRunningStats, TrainingConfig};
use crate::data::DualBatch;
use crate::error::{GerspError, Result};
use crate::model::layers::global_avg_pool_backward;
use crate::model::{
    batch_to_feature_map, init_encoder, layers, predict_backward, predict_logits, project, project_backward,
    project_with_cache, shuffled_forward, update_running_stats, Backbone, EncoderBundle, Mode,
};
use crate::objective::{
    cross_entropy_with_grad, ema_update, info_nce_with_grad, total_loss, LossBreakdown, NegativeQueue,
};
use crate::rng::RngStream;
use crate::schedule::{sgd_step, OptimizerState};
use crate::tensor::{ParamSet, Scalar, Tensor};

const TAG_SHUFFLE: u64 = 21;

/// Scales applied to the two loss terms before back-propagation.
/// `ct` is 1 in training; tests set it to 0 to isolate the supervised branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ct: f64,
    pub alpha: f64,
    pub tau: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &TrainingConfig) -> Self {
        Self {
            ct: 1.0,
            alpha: cfg.alpha,
            tau: cfg.tau,
        }
    }
}

/// Student gradients, one set per parameter group.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub backbone: ParamSet<T>,
    pub projector: ParamSet<T>,
    pub predictor: ParamSet<T>,
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub breakdown: LossBreakdown,
    pub grads: Gradients<T>,
    /// Teacher keys `z^{k+}`, the rows to enqueue.
    pub keys: Tensor<T>,
}

fn pooled_grad_to_map<T: Scalar>(dpooled: &Tensor<T>, last: &layers::FeatureMap<T>) -> layers::FeatureMap<T> {
    global_avg_pool_backward(dpooled, last.c, last.n, last.h, last.w)
}

fn scaled<T: Scalar>(mut t: Tensor<T>, s: f64) -> Tensor<T> {
    let s = T::lit(s);
    t.data_mut().iter_mut().for_each(|v| *v = *v * s);
    t
}

struct Forward<T> {
    breakdown: LossBreakdown,
    keys: Tensor<T>,
    q_out: crate::model::BackboneOutput<T>,
    proj_cache: crate::model::ProjectionCache<T>,
    dz_q: Tensor<T>,
    s_out: crate::model::BackboneOutput<T>,
    s_pooled: Tensor<T>,
    dlogits: Tensor<T>,
}

fn forward<T: Scalar>(
    backbone: &Backbone,
    bundle: &mut EncoderBundle<T>,
    queue: &NegativeQueue<T>,
    batch: &DualBatch,
    weights: LossWeights,
    shuffle_rng: &mut RngStream,
) -> Result<Forward<T>> {
    let groups = bundle.spec.bn_groups;
    let momentum = bundle.spec.bn_momentum;
    let train = Mode::Train { groups };

    // Query branch.
    let q_out = backbone.forward(
        &bundle.student_backbone,
        &bundle.student_running,
        &batch_to_feature_map(&batch.rs_view_q),
        train,
    )?;
    update_running_stats(&mut bundle.student_running, &q_out.bn_stats, momentum)?;
    let q_pooled = layers::global_avg_pool(q_out.stages.last().expect("backbone has stages"));
    let (z_q, proj_cache) = project_with_cache(&bundle.student_projector, &q_pooled)?;

    // Key branch, no gradient.
    let k_pooled = shuffled_forward(
        backbone,
        &bundle.teacher_backbone,
        &mut bundle.teacher_running,
        &batch.rs_view_k,
        groups,
        train,
        shuffle_rng,
    )?;
    let keys = project(&bundle.teacher_projector, &k_pooled)?;

    // Supervised branch.
    let s_out = backbone.forward(
        &bundle.student_backbone,
        &bundle.student_running,
        &batch_to_feature_map(&batch.natural_images),
        train,
    )?;
    update_running_stats(&mut bundle.student_running, &s_out.bn_stats, momentum)?;
    let s_pooled = layers::global_avg_pool(s_out.stages.last().expect("backbone has stages"));
    let logits = predict_logits(&bundle.student_predictor, &s_pooled)?;

    let (l_ct, dz_q) = info_nce_with_grad(&z_q, &keys, queue, weights.tau)?;
    let (l_ce, dlogits) = cross_entropy_with_grad(&logits, &batch.natural_labels)?;
    let mut breakdown = total_loss(weights.ct * l_ct.f64(), l_ce.f64(), weights.alpha)?;
    breakdown.l_ct = l_ct.f64();
    Ok(Forward {
        breakdown,
        keys,
        q_out,
        proj_cache,
        dz_q,
        s_out,
        s_pooled,
        dlogits,
    })
}

/// Loss of one dual batch without back-propagation. Running statistics
/// advance exactly as in [`compute_gradients`].
pub fn compute_loss<T: Scalar>(
    backbone: &Backbone,
    bundle: &mut EncoderBundle<T>,
    queue: &NegativeQueue<T>,
    batch: &DualBatch,
    weights: LossWeights,
    shuffle_rng: &mut RngStream,
) -> Result<LossBreakdown> {
    forward(backbone, bundle, queue, batch, weights, shuffle_rng).map(|f| f.breakdown)
}

/// Forward and backward for one dual batch. Student BN statistics are
/// computed separately for the RS query views and the natural images; the
/// teacher runs without gradient under shuffled BN. Running statistics of
/// both networks advance; parameters are untouched.
pub fn compute_gradients<T: Scalar>(
    backbone: &Backbone,
    bundle: &mut EncoderBundle<T>,
    queue: &NegativeQueue<T>,
    batch: &DualBatch,
    weights: LossWeights,
    shuffle_rng: &mut RngStream,
) -> Result<StepOutput<T>> {
    let f = forward(backbone, bundle, queue, batch, weights, shuffle_rng)?;
    let mut grads = Gradients {
        backbone: bundle.student_backbone.zeros_like(),
        projector: bundle.student_projector.zeros_like(),
        predictor: bundle.student_predictor.zeros_like(),
    };
    if weights.ct != 0.0 {
        let dz_q = scaled(f.dz_q, weights.ct);
        let dq_pooled = project_backward(&bundle.student_projector, &f.proj_cache, &dz_q, &mut grads.projector)?;
        let last = f.q_out.stages.last().expect("backbone has stages");
        backbone.backward(
            &bundle.student_backbone,
            &f.q_out.cache,
            pooled_grad_to_map(&dq_pooled, last),
            &mut grads.backbone,
        )?;
    }
    if weights.alpha != 0.0 {
        let dlogits = scaled(f.dlogits, weights.alpha);
        let ds_pooled = predict_backward(&bundle.student_predictor, &f.s_pooled, &dlogits, &mut grads.predictor)?;
        let last = f.s_out.stages.last().expect("backbone has stages");
        backbone.backward(
            &bundle.student_backbone,
            &f.s_out.cache,
            pooled_grad_to_map(&ds_pooled, last),
            &mut grads.backbone,
        )?;
    }
    Ok(StepOutput {
        breakdown: f.breakdown,
        grads,
        keys: f.keys,
    })
}

/// One logged training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub epoch: u32,
    pub lr: f64,
    pub l_ct: f64,
    pub l_ce: f64,
    pub l_total: f64,
}

/// Mutable training state, owned by the training thread.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainingConfig,
    pub backbone: Backbone,
    pub bundle: EncoderBundle<f32>,
    pub queue: NegativeQueue<f32>,
    pub optimizer: OptimizerState<f32>,
    pub epoch: u32,
    pub iteration: u64,
    pub rng: RngStream,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    pub fn new(config: &TrainingConfig) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(config.seed);
        let bundle = init_encoder(&config.encoder, root.derive(1).key())?;
        Ok(Self {
            backbone: Backbone::new(&config.encoder)?,
            bundle,
            queue: NegativeQueue::new(config.queue_capacity, config.encoder.proj_out_dim)?,
            optimizer: OptimizerState::new(config.optimizer.clone(), config.cosine.lr_max),
            epoch: 0,
            iteration: 0,
            rng: root.derive(2),
            history: Vec::new(),
            config: config.clone(),
        })
    }
}

/// Forward, backward, SGD on the student, EMA into the teacher, enqueue keys.
pub fn train_step(state: &mut TrainState, batch: &DualBatch, lr: f64) -> Result<LossBreakdown> {
    let b = state.config.batch_size;
    if batch.len() != b || batch.rs_view_q.len() != b || batch.rs_view_k.len() != b {
        return Err(GerspError::InvalidInput(format!(
            "batch has {} / {} / {} rows, expected {b}",
            batch.len(),
            batch.rs_view_q.len(),
            batch.rs_view_k.len()
        )));
    }
    let mut shuffle_rng = state.rng.derive2(TAG_SHUFFLE, state.iteration);
    let out = compute_gradients(
        &state.backbone,
        &mut state.bundle,
        &state.queue,
        batch,
        LossWeights::from_config(&state.config),
        &mut shuffle_rng,
    )?;
    let bd = out.breakdown;
    if !(bd.l_ct.is_finite() && bd.l_ce.is_finite() && bd.l_total.is_finite()) {
        return Err(GerspError::Diverged {
            iteration: state.iteration,
            l_ct: bd.l_ct,
            l_ce: bd.l_ce,
            l_total: bd.l_total,
        });
    }

    state.optimizer.lr = lr;
    let bundle = &mut state.bundle;
    sgd_step("backbone", &mut bundle.student_backbone, &out.grads.backbone, &mut state.optimizer)?;
    sgd_step("projector", &mut bundle.student_projector, &out.grads.projector, &mut state.optimizer)?;
    sgd_step("predictor", &mut bundle.student_predictor, &out.grads.predictor, &mut state.optimizer)?;
    ema_update(&mut bundle.teacher_backbone, &bundle.student_backbone, state.config.ema_m)?;
    ema_update(&mut bundle.teacher_projector, &bundle.student_projector, state.config.ema_m)?;
    if state.config.teacher_running_stats == TeacherRunningStats::CopyStudent {
        bundle.teacher_running.clone_from(&bundle.student_running);
    }
    state.queue.push(&out.keys)?;

    state.history.push(StepRecord {
        iteration: state.iteration,
        epoch: state.epoch,
        lr,
        l_ct: bd.l_ct,
        l_ce: bd.l_ce,
        l_total: bd.l_total,
    });
    state.iteration += 1;
    Ok(bd)
}
