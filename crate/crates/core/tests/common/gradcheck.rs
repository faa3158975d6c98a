//! Central finite differences against the analytic backward pass, in f64.
//!
//! A coarse-step mismatch is re-measured with finer steps only when the
//! coarse perturbation provably flips a ReLU, i.e. when the loss is not
//! differentiable across the interval being differenced.

use gersp::augment::AugmentationPolicy;
use gersp::data::{generate_synthetic_corpus, next_dual_batch, DualBatch, Normalize, SamplerState, SyntheticCorpusSpec};
use gersp::model::layers::{global_avg_pool, linear_forward};
use gersp::model::{batch_to_feature_map, init_encoder, Backbone, EncoderBundle, EncoderSpec, Mode};
use gersp::objective::NegativeQueue;
use gersp::rng::RngStream;
use gersp::tensor::{ParamSet, Tensor};
use gersp::trainer::{compute_gradients, compute_loss, Gradients, LossWeights};

pub const STEP: f64 = 1e-4;
/// Finer steps tried in order once the coarse step straddles a ReLU kink.
pub const FINE_STEPS: [f64; 2] = [1e-5, 1e-6];
/// Gradients below this magnitude are compared on an absolute scale.
pub const FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Checks whose coarse step flipped at least one ReLU and were
    /// re-measured with finer steps.
    pub retried: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradCheck {
    fn record(&mut self, err: f64, what: impl FnOnce() -> String) {
        self.checked += 1;
        if err > self.max_rel {
            self.max_rel = err;
            self.worst = what();
        }
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        self.retried += other.retried;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }
}

pub fn unit_rows(rows: usize, dim: usize, rng: &mut RngStream) -> Tensor<f64> {
    let mut data: Vec<f64> = (0..rows * dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
    for r in data.chunks_mut(dim) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::from_vec(&[rows, dim], data).unwrap()
}

#[derive(Clone, Copy)]
enum Group {
    Backbone,
    Projector,
    Predictor,
}

fn group_mut(b: &mut EncoderBundle<f64>, g: Group) -> &mut ParamSet<f64> {
    match g {
        Group::Backbone => &mut b.student_backbone,
        Group::Projector => &mut b.student_projector,
        Group::Predictor => &mut b.student_predictor,
    }
}

/// One dual batch and a partly filled queue; combined loss with alpha = 1.
struct Fixture {
    spec: EncoderSpec,
    backbone: Backbone,
    bundle: EncoderBundle<f64>,
    batch: DualBatch,
    queue: NegativeQueue<f64>,
    weights: LossWeights,
    shuffle: RngStream,
}

impl Fixture {
    fn new(spec: &EncoderSpec, batch_size: usize, seed: u64) -> Self {
        let (nat, rs) = generate_synthetic_corpus(&SyntheticCorpusSpec {
            n_natural: batch_size,
            n_rs: batch_size,
            k_classes: spec.n_classes,
            image_size: spec.input_size,
            seed,
        })
        .unwrap();
        let policy = AugmentationPolicy::default().with_out_size(spec.input_size);
        let batch =
            next_dual_batch(&mut SamplerState::new(seed), &nat, &rs, &policy, &Normalize::default(), batch_size).unwrap();
        let mut queue = NegativeQueue::new(4 * batch_size, spec.proj_out_dim).unwrap();
        queue.push(&unit_rows(3 * batch_size, spec.proj_out_dim, &mut RngStream::new(seed ^ 77))).unwrap();
        Fixture {
            spec: spec.clone(),
            backbone: Backbone::new(spec).unwrap(),
            bundle: init_encoder(spec, seed).unwrap(),
            batch,
            queue,
            weights: LossWeights {
                ct: 1.0,
                alpha: 1.0,
                tau: 0.2,
            },
            shuffle: RngStream::new(seed).derive(9),
        }
    }

    fn analytic(&self) -> Gradients<f64> {
        let mut b = self.bundle.clone();
        compute_gradients(&self.backbone, &mut b, &self.queue, &self.batch, self.weights, &mut self.shuffle.clone())
            .unwrap()
            .grads
    }

    fn loss(&self, b: &EncoderBundle<f64>) -> f64 {
        compute_loss(&self.backbone, &mut b.clone(), &self.queue, &self.batch, self.weights, &mut self.shuffle.clone())
            .unwrap()
            .l_total
    }

    /// Signs of every ReLU input along both student branches, including the
    /// projector's hidden layer.
    fn relu_pattern(&self, b: &EncoderBundle<f64>) -> Vec<bool> {
        let train = Mode::Train { groups: self.spec.bn_groups };
        let fwd = |images| {
            self.backbone
                .forward(&b.student_backbone, &b.student_running, &batch_to_feature_map(images), train)
                .unwrap()
        };
        let q = fwd(&self.batch.rs_view_q);
        let s = fwd(&self.batch.natural_images);
        let pooled = global_avg_pool(q.stages.last().unwrap());
        let hidden = linear_forward(
            &pooled,
            b.student_projector.get("fc1.weight").unwrap(),
            b.student_projector.get("fc1.bias").unwrap(),
        );
        let mut p = q.cache.relu_pattern();
        p.extend(s.cache.relu_pattern());
        p.extend(hidden.data().iter().map(|&v| v > 0.0));
        p
    }

    /// Bundle with `h * dir` added to one tensor.
    fn shifted(&self, g: Group, name: &str, dir: &[(usize, f64)], h: f64) -> EncoderBundle<f64> {
        let mut b = self.bundle.clone();
        let t = group_mut(&mut b, g).get_mut(name).unwrap().data_mut();
        for &(i, d) in dir {
            t[i] += h * d;
        }
        b
    }

    /// Relative error of the directional derivative `<grad, dir>` against
    /// central differences, with the kink-aware refinement.
    fn check(&self, g: Group, name: &str, dir: &[(usize, f64)], analytic: f64, report: &mut GradCheck) -> f64 {
        let fd = |h: f64| (self.loss(&self.shifted(g, name, dir, h)) - self.loss(&self.shifted(g, name, dir, -h))) / (2.0 * h);
        let mut err = rel_err(analytic, fd(STEP));
        if err >= TOLERANCE {
            let up = self.relu_pattern(&self.shifted(g, name, dir, STEP));
            let down = self.relu_pattern(&self.shifted(g, name, dir, -STEP));
            if up != down {
                report.retried += 1;
                for h in FINE_STEPS {
                    err = rel_err(analytic, fd(h));
                    if err < TOLERANCE {
                        break;
                    }
                }
            }
        }
        err
    }

    fn tensors(grads: &Gradients<f64>) -> impl Iterator<Item = (Group, &str, &Tensor<f64>)> {
        [
            (Group::Backbone, &grads.backbone),
            (Group::Projector, &grads.projector),
            (Group::Predictor, &grads.predictor),
        ]
        .into_iter()
        .flat_map(|(g, set)| set.iter().map(move |(name, t)| (g, name, t)))
    }
}

/// Checks `d L_total / d theta` coordinate by coordinate. `per_tensor = None`
/// visits every scalar; `Some(k)` visits `k` seeded coordinates of each tensor.
pub fn network_gradcheck(spec: &EncoderSpec, batch_size: usize, per_tensor: Option<usize>, seed: u64) -> GradCheck {
    let fx = Fixture::new(spec, batch_size, seed);
    let grads = fx.analytic();
    let mut pick = RngStream::new(seed).derive(10);
    let mut report = GradCheck::default();
    for (g, name, gt) in Fixture::tensors(&grads) {
        let coords: Vec<usize> = match per_tensor {
            None => (0..gt.len()).collect(),
            Some(k) => (0..k.min(gt.len())).map(|_| pick.below(gt.len())).collect(),
        };
        for i in coords {
            let err = fx.check(g, name, &[(i, 1.0)], gt.data()[i], &mut report);
            report.record(err, || format!("{name}[{i}]"));
        }
    }
    report
}

/// Checks one seeded unit direction per tensor, so every scalar of the
/// network enters the comparison `<grad, v>` vs. `(L(theta + h v) - L(theta - h v)) / 2h`.
pub fn directional_gradcheck(spec: &EncoderSpec, batch_size: usize, seed: u64) -> GradCheck {
    let fx = Fixture::new(spec, batch_size, seed);
    let grads = fx.analytic();
    let mut dirs = RngStream::new(seed).derive(11);
    let mut report = GradCheck::default();
    for (g, name, gt) in Fixture::tensors(&grads) {
        let v = unit_rows(1, gt.len(), &mut dirs).into_data();
        let analytic: f64 = gt.data().iter().zip(&v).map(|(x, y)| x * y).sum();
        let dir: Vec<(usize, f64)> = v.into_iter().enumerate().collect();
        let err = fx.check(g, name, &dir, analytic, &mut report);
        report.record(err, || format!("{name} (direction)"));
    }
    report
}

/// Desk topology at reduced widths: same stages, blocks, heads and loss.
pub fn narrow_desk() -> EncoderSpec {
    EncoderSpec {
        stage_widths: vec![4, 4, 8, 8],
        stem_width: 4,
        proj_hidden_dim: 8,
        proj_out_dim: 8,
        n_classes: 3,
        bn_groups: 2,
        ..EncoderSpec::desk()
    }
}
