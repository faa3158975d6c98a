//! Downstream protocols: full fine-tuning, frozen linear probing and
//! stage-wise probing, each repeated over seeded train/test splits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::flip_horizontal;
use crate::data::{LabeledDataset, Normalize};
use crate::error::{GerspError, Result};
use crate::model::layers::{adaptive_avg_pool_flat, global_avg_pool};
use crate::model::{
    batch_to_feature_map, init_encoder, init_predictor, predict_backward, predict_logits, update_running_stats,
    Backbone, EncoderSpec, FeatureMap, Mode,
};
use crate::objective::cross_entropy_with_grad;
use crate::pixels::{Image, ImageBatch};
use crate::rng::RngStream;
use crate::schedule::{sgd_step, step_lr, OptimizerState, SgdConfig, StepSchedule};
use crate::tensor::{ParamSet, Tensor};
use crate::trainer::Checkpoint;

const TAG_SPLIT: u64 = 31;
const TAG_HEAD: u64 = 32;
const TAG_ORDER: u64 = 33;
/// Images per forward pass when extracting features.
const FEATURE_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Finetune,
    Probe,
    StageProbe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub mode: EvalMode,
    pub train_fraction: f64,
    pub trials: usize,
    pub epochs: u32,
    pub schedule: StepSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub flip_p: f64,
    /// Side length every image is resized to, without cropping.
    pub resize: usize,
    /// Pooling grid for stage-wise probes; 1 is plain global pooling.
    pub stage_grid: usize,
    /// Expected class count; checked against the dataset when set.
    pub n_classes: Option<usize>,
    pub seed: u64,
}

impl EvalProtocol {
    /// Short schedule for CPU runs: 30 epochs, decay at 10, 20, 25.
    pub fn desk(mode: EvalMode, resize: usize) -> Self {
        let base_lr = match mode {
            EvalMode::Finetune => 0.01,
            EvalMode::Probe | EvalMode::StageProbe => 0.1,
        };
        Self {
            mode,
            train_fraction: 0.2,
            trials: 5,
            epochs: 30,
            schedule: StepSchedule {
                base_lr,
                milestones: vec![10, 20, 25],
                gamma: 0.1,
            },
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            flip_p: 0.5,
            resize,
            stage_grid: 2,
            n_classes: None,
            seed: 0,
        }
    }

    /// 100 epochs, decay at 30, 60, 90, 224x224 inputs.
    pub fn full(mode: EvalMode) -> Self {
        Self {
            epochs: 100,
            schedule: StepSchedule {
                milestones: vec![30, 60, 90],
                ..Self::desk(mode, 224).schedule
            },
            ..Self::desk(mode, 224)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let bad = |m: String| Err(GerspError::Config(m));
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        if self.trials == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("trials, epochs and batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            return bad(format!("flip_p must lie in [0, 1], got {}", self.flip_p));
        }
        if self.stage_grid == 0 || self.resize == 0 {
            return bad("stage_grid and resize must be positive".into());
        }
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            no_decay_1d: false,
        }
        .validate()
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            no_decay_1d: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Per-trial top-1 with mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Always `"population"`: the deviation divides by the trial count.
    pub std_kind: String,
    /// Stage-wise results, present for stage probes. The top-level
    /// accuracies then repeat the last stage.
    pub stages: Option<Vec<StageSummary>>,
    pub n_train: usize,
    pub n_test: usize,
    pub protocol: EvalProtocol,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fraction of rows whose arg-max equals the label; ties go to the lowest index.
pub fn top1_accuracy(logits: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let (b, _) = logits.dims2();
    if labels.len() != b || b == 0 {
        return Err(GerspError::InvalidInput(format!("{} labels for {b} rows", labels.len())));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count();
    Ok(hits as f64 / b as f64)
}

/// Stratified split for one trial: each class contributes
/// `round(fraction * count)` training samples, clamped so both sides keep at
/// least one sample of every class that has two or more.
pub fn split_indices(labels: &[usize], n_classes: usize, fraction: f64, seed: u64, trial: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rng = RngStream::new(seed).derive2(TAG_SPLIT, trial as u64);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..n_classes {
        let members: Vec<usize> = labels.iter().enumerate().filter(|&(_, &l)| l == c).map(|(i, _)| i).collect();
        let perm = rng.permutation(members.len());
        let n = members.len();
        let k = if n >= 2 {
            ((fraction * n as f64).round() as usize).clamp(1, n - 1)
        } else {
            n
        };
        for (j, &p) in perm.iter().enumerate() {
            if j < k {
                train.push(members[p]);
            } else {
                test.push(members[p]);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Backbone weights to evaluate, with the pixel standardization they expect.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    pub spec: EncoderSpec,
    pub params: ParamSet<f32>,
    pub running: ParamSet<f32>,
    pub normalize: Normalize,
}

impl FrozenEncoder {
    /// Reads only the `backbone/` tensors.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec = ck.config().encoder.clone();
        let (params, running) = ck.backbone_for(&spec)?;
        Ok(Self {
            spec,
            params,
            running,
            normalize: ck.config().normalize,
        })
    }

    /// Freshly initialized weights, for from-scratch baselines.
    pub fn random(spec: &EncoderSpec, seed: u64) -> Result<Self> {
        let b = init_encoder::<f32>(spec, seed)?;
        Ok(Self {
            spec: spec.clone(),
            params: b.student_backbone,
            running: b.student_running,
            normalize: Normalize::default(),
        })
    }
}

fn prepare(dataset: &LabeledDataset, size: usize, norm: &Normalize) -> Vec<Image> {
    dataset
        .images()
        .par_iter()
        .map(|img| {
            let mut r = img.resize(size, size);
            norm.apply(&mut r);
            r
        })
        .collect()
}

fn check_inputs(encoder: &FrozenEncoder, dataset: &LabeledDataset, protocol: &EvalProtocol) -> Result<usize> {
    protocol.validate()?;
    let k = dataset.n_classes();
    if let Some(expected) = protocol.n_classes {
        if expected != k {
            return Err(GerspError::Config(format!(
                "head expects {expected} classes but the dataset has {k}"
            )));
        }
    }
    if k < 2 {
        return Err(GerspError::Dataset("evaluation needs at least two classes".into()));
    }
    let stride = encoder.spec.total_stride();
    if !protocol.resize.is_multiple_of(stride) {
        return Err(GerspError::Config(format!(
            "resize {} is not a multiple of the backbone stride {stride}",
            protocol.resize
        )));
    }
    Ok(k)
}

/// Eval-mode features of every stage, pooled by `pool`, for `images`.
fn stage_features(
    backbone: &Backbone,
    enc: &FrozenEncoder,
    images: &[Image],
    pool: &(dyn Fn(&FeatureMap<f32>) -> Tensor<f32> + Sync),
) -> Result<Vec<Tensor<f64>>> {
    let n_stages = enc.spec.n_stages();
    let chunks = images
        .par_chunks(FEATURE_CHUNK)
        .map(|chunk| -> Result<Vec<Tensor<f32>>> {
            let batch = ImageBatch::from_images(chunk)?;
            let out = backbone.forward(&enc.params, &enc.running, &batch_to_feature_map(&batch), Mode::Eval)?;
            Ok(out.stages.iter().map(pool).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_stage = Vec::with_capacity(n_stages);
    for s in 0..n_stages {
        let d = chunks[0][s].dims2().1;
        let data: Vec<f64> = chunks
            .iter()
            .flat_map(|c| c[s].data().iter().map(|&v| f64::from(v)))
            .collect();
        per_stage.push(Tensor::from_vec(&[images.len(), d], data)?);
    }
    Ok(per_stage)
}

fn gather(x: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let d = x.dims2().1;
    let mut out = Tensor::zeros(&[idx.len(), d]);
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(x.row(i));
    }
    out
}

/// Standardizes columns with statistics of `fit` rows; constant columns
/// are centred only.
fn standardizer(x: &Tensor<f64>, fit: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = x.dims2().1;
    let n = fit.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in fit {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for &i in fit {
        for ((s, &v), &m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    let scale = var.iter().map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

fn apply_standardizer(x: &mut Tensor<f64>, mean: &[f64], scale: &[f64]) {
    let (n, _) = x.dims2();
    for i in 0..n {
        for ((v, &m), &s) in x.row_mut(i).iter_mut().zip(mean).zip(scale) {
            *v = (*v - m) * s;
        }
    }
}

/// Linear head on fixed features: SGD with momentum under the protocol's
/// step schedule. A training row is swapped for its mirrored-image
/// counterpart with probability `flip_p`. Returns test top-1.
#[allow(clippy::too_many_arguments)]
pub fn train_linear_head(
    features: &Tensor<f64>,
    flipped: &Tensor<f64>,
    labels: &[usize],
    n_classes: usize,
    train: &[usize],
    test: &[usize],
    protocol: &EvalProtocol,
    rng: &RngStream,
) -> Result<f64> {
    let (mean, scale) = standardizer(features, train);
    let mut x = features.clone();
    let mut xf = flipped.clone();
    apply_standardizer(&mut x, &mean, &scale);
    apply_standardizer(&mut xf, &mean, &scale);
    let d = x.dims2().1;
    let mut head: ParamSet<f64> = init_predictor(d, n_classes, &mut rng.derive(TAG_HEAD));
    let mut opt = OptimizerState::new(protocol.sgd(), protocol.schedule.base_lr);
    let mut order_rng = rng.derive(TAG_ORDER);
    for epoch in 0..protocol.epochs {
        opt.lr = step_lr(epoch, &protocol.schedule);
        let perm = order_rng.permutation(train.len());
        for chunk in perm.chunks(protocol.batch_size) {
            let mut xb = Tensor::zeros(&[chunk.len(), d]);
            let mut yb = Vec::with_capacity(chunk.len());
            for (r, &p) in chunk.iter().enumerate() {
                let i = train[p];
                let src = if order_rng.chance(protocol.flip_p) { &xf } else { &x };
                xb.row_mut(r).copy_from_slice(src.row(i));
                yb.push(labels[i]);
            }
            let logits = predict_logits(&head, &xb)?;
            let (_, dlogits) = cross_entropy_with_grad(&logits, &yb)?;
            let mut grads = head.zeros_like();
            predict_backward(&head, &xb, &dlogits, &mut grads)?;
            sgd_step("head", &mut head, &grads, &mut opt)?;
        }
    }
    let xt = gather(&x, test);
    let yt: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    top1_accuracy(&predict_logits(&head, &xt)?, &yt)
}

fn report(
    protocol: &EvalProtocol,
    accuracies: Vec<f64>,
    stages: Option<Vec<StageSummary>>,
    n_train: usize,
    n_test: usize,
) -> EvalReport {
    let (mean, std) = mean_std(&accuracies);
    EvalReport {
        accuracies,
        mean,
        std,
        std_kind: "population".into(),
        stages,
        n_train,
        n_test,
        protocol: protocol.clone(),
    }
}

fn probe_stages(
    encoder: &FrozenEncoder,
    dataset: &LabeledDataset,
    protocol: &EvalProtocol,
    pool: &(dyn Fn(&FeatureMap<f32>) -> Tensor<f32> + Sync),
    only_last: bool,
) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    let k = check_inputs(encoder, dataset, protocol)?;
    let backbone = Backbone::new(&encoder.spec)?;
    let images = prepare(dataset, protocol.resize, &encoder.normalize);
    let mirrored: Vec<Image> = images
        .iter()
        .map(|img| {
            let mut m = img.clone();
            flip_horizontal(&mut m);
            m
        })
        .collect();
    let mut feats = stage_features(&backbone, encoder, &images, pool)?;
    let mut feats_flip = stage_features(&backbone, encoder, &mirrored, pool)?;
    if only_last {
        feats.drain(..feats.len() - 1);
        feats_flip.drain(..feats_flip.len() - 1);
    }
    let labels = dataset.labels();
    let splits: Vec<_> = (0..protocol.trials)
        .map(|t| split_indices(labels, k, protocol.train_fraction, protocol.seed, t))
        .collect();
    // acc[stage][trial]
    let acc = feats
        .iter()
        .zip(&feats_flip)
        .map(|(f, ff)| {
            splits
                .par_iter()
                .enumerate()
                .map(|(t, (train, test))| {
                    let rng = RngStream::new(protocol.seed).derive(t as u64);
                    train_linear_head(f, ff, labels, k, train, test, protocol, &rng)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((acc, splits[0].0.len(), splits[0].1.len()))
}

/// Frozen backbone in eval mode; only a linear head on pooled features trains.
pub fn linear_probe(encoder: &FrozenEncoder, dataset: &LabeledDataset, protocol: &EvalProtocol) -> Result<EvalReport> {
    let (mut acc, n_train, n_test) = probe_stages(encoder, dataset, protocol, &global_avg_pool, true)?;
    Ok(report(protocol, acc.remove(0), None, n_train, n_test))
}

/// One linear head per stage on features pooled to `stage_grid x stage_grid`.
pub fn stagewise_probe(encoder: &FrozenEncoder, dataset: &LabeledDataset, protocol: &EvalProtocol) -> Result<EvalReport> {
    let grid = protocol.stage_grid;
    let pool = move |fm: &FeatureMap<f32>| {
        if grid == 1 {
            global_avg_pool(fm)
        } else {
            adaptive_avg_pool_flat(fm, grid)
        }
    };
    let (acc, n_train, n_test) = probe_stages(encoder, dataset, protocol, &pool, false)?;
    let stages: Vec<StageSummary> = acc
        .iter()
        .enumerate()
        .map(|(s, a)| {
            let (mean, std) = mean_std(a);
            StageSummary {
                stage: s + 1,
                accuracies: a.clone(),
                mean,
                std,
            }
        })
        .collect();
    let last = acc.last().cloned().unwrap_or_default();
    Ok(report(protocol, last, Some(stages), n_train, n_test))
}

fn finetune_trial(
    backbone: &Backbone,
    encoder: &FrozenEncoder,
    images: &[Image],
    labels: &[usize],
    n_classes: usize,
    train: &[usize],
    test: &[usize],
    protocol: &EvalProtocol,
    rng: &RngStream,
) -> Result<f64> {
    let mut params = encoder.params.clone();
    let mut running = encoder.running.clone();
    let d = encoder.spec.feature_dim();
    let mut head: ParamSet<f32> = init_predictor(d, n_classes, &mut rng.derive(TAG_HEAD));
    let mut opt = OptimizerState::new(protocol.sgd(), protocol.schedule.base_lr);
    let mut order_rng = rng.derive(TAG_ORDER);
    let momentum = encoder.spec.bn_momentum;
    for epoch in 0..protocol.epochs {
        opt.lr = step_lr(epoch, &protocol.schedule);
        let perm = order_rng.permutation(train.len());
        for chunk in perm.chunks(protocol.batch_size) {
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut yb = Vec::with_capacity(chunk.len());
            for &p in chunk {
                let i = train[p];
                let mut img = images[i].clone();
                if order_rng.chance(protocol.flip_p) {
                    flip_horizontal(&mut img);
                }
                imgs.push(img);
                yb.push(labels[i]);
            }
            // Batch statistics of a single sample are degenerate.
            if imgs.len() < 2 {
                continue;
            }
            let batch = ImageBatch::from_images(&imgs)?;
            let out = backbone.forward(&params, &running, &batch_to_feature_map(&batch), Mode::TRAIN)?;
            update_running_stats(&mut running, &out.bn_stats, momentum)?;
            let last = out.stages.last().expect("backbone has stages");
            let pooled = global_avg_pool(last);
            let logits = predict_logits(&head, &pooled)?;
            let (loss, dlogits) = cross_entropy_with_grad(&logits, &yb)?;
            if !loss.is_finite() {
                return Err(GerspError::NonFinite("fine-tuning loss".into()));
            }
            let mut g_head = head.zeros_like();
            let dpooled = predict_backward(&head, &pooled, &dlogits, &mut g_head)?;
            let mut g_bb = params.zeros_like();
            let dmap = crate::model::layers::global_avg_pool_backward(&dpooled, last.c, last.n, last.h, last.w);
            backbone.backward(&params, &out.cache, dmap, &mut g_bb)?;
            sgd_step("backbone", &mut params, &g_bb, &mut opt)?;
            sgd_step("head", &mut head, &g_head, &mut opt)?;
        }
    }
    let test_imgs: Vec<Image> = test.iter().map(|&i| images[i].clone()).collect();
    let frozen = FrozenEncoder {
        spec: encoder.spec.clone(),
        params,
        running,
        normalize: encoder.normalize,
    };
    let pooled = stage_features(backbone, &frozen, &test_imgs, &|fm| global_avg_pool(fm))?
        .pop()
        .expect("backbone has stages");
    let logits = predict_logits(&head.cast::<f64>(), &pooled)?;
    let yt: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    top1_accuracy(&logits, &yt)
}

/// Loads the backbone, attaches a fresh pooled linear head and trains all
/// parameters. BN uses batch statistics while training and running
/// statistics for testing.
pub fn finetune_classifier(encoder: &FrozenEncoder, dataset: &LabeledDataset, protocol: &EvalProtocol) -> Result<EvalReport> {
    let k = check_inputs(encoder, dataset, protocol)?;
    let backbone = Backbone::new(&encoder.spec)?;
    let images = prepare(dataset, protocol.resize, &encoder.normalize);
    let labels = dataset.labels();
    let splits: Vec<_> = (0..protocol.trials)
        .map(|t| split_indices(labels, k, protocol.train_fraction, protocol.seed, t))
        .collect();
    let acc = splits
        .par_iter()
        .enumerate()
        .map(|(t, (train, test))| {
            let rng = RngStream::new(protocol.seed).derive(t as u64);
            finetune_trial(&backbone, encoder, &images, labels, k, train, test, protocol, &rng)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(report(protocol, acc, None, splits[0].0.len(), splits[0].1.len()))
}

/// Dispatches on `protocol.mode`.
pub fn evaluate(encoder: &FrozenEncoder, dataset: &LabeledDataset, protocol: &EvalProtocol) -> Result<EvalReport> {
    match protocol.mode {
        EvalMode::Finetune => finetune_classifier(encoder, dataset, protocol),
        EvalMode::Probe => linear_probe(encoder, dataset, protocol),
        EvalMode::StageProbe => stagewise_probe(encoder, dataset, protocol),
    }
}
