//! Residual backbone: stem, stages of basic or bottleneck blocks.

use rand_distr::{Distribution, Normal};

use super::layers::{
    bn_backward, bn_forward, conv_backward, conv_forward, max_pool_backward, max_pool_forward,
    relu_backward, relu_forward, BnBatchStats, BnCache, BnMode, ConvGeom, FeatureMap,
};
use super::spec::{BlockKind, EncoderSpec};
use crate::error::{GerspError, Result};
use crate::rng::RngStream;
use crate::tensor::{ParamSet, Scalar, Tensor};

/// Batch-norm behaviour for a whole forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics (split into `groups` independent slices).
    Train { groups: usize },
    /// Running statistics.
    Eval,
}

impl Mode {
    pub const TRAIN: Mode = Mode::Train { groups: 1 };
}

#[derive(Debug, Clone)]
struct ConvBn {
    name: String,
    geom: ConvGeom,
    relu: bool,
}

impl ConvBn {
    fn new(name: String, in_c: usize, out_c: usize, k: usize, stride: usize, relu: bool) -> Self {
        Self {
            name,
            geom: ConvGeom {
                in_c,
                out_c,
                k,
                stride,
                pad: k / 2,
            },
            relu,
        }
    }

    fn weight(&self) -> String {
        format!("{}.conv.weight", self.name)
    }

    fn gamma(&self) -> String {
        format!("{}.bn.weight", self.name)
    }

    fn beta(&self) -> String {
        format!("{}.bn.bias", self.name)
    }

    fn running_mean(&self) -> String {
        format!("{}.bn.running_mean", self.name)
    }

    fn running_var(&self) -> String {
        format!("{}.bn.running_var", self.name)
    }
}

#[derive(Debug, Clone)]
struct Block {
    main: Vec<ConvBn>,
    downsample: Option<ConvBn>,
}

#[derive(Debug)]
struct ConvBnCache<T> {
    in_hw: (usize, usize),
    cols: Vec<T>,
    bn: BnCache<T>,
    relu_mask: Option<Vec<bool>>,
}

#[derive(Debug)]
struct BlockCache<T> {
    main: Vec<ConvBnCache<T>>,
    downsample: Option<ConvBnCache<T>>,
    out_mask: Vec<bool>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug)]
pub struct BackboneCache<T> {
    stem: ConvBnCache<T>,
    pool: Option<(Vec<usize>, (usize, usize))>,
    blocks: Vec<Vec<BlockCache<T>>>,
    last_dims: (usize, usize, usize, usize),
}

impl<T> BackboneCache<T> {
    /// Concatenated ReLU activity pattern of the pass; differs between two
    /// passes exactly when some unit crossed a ReLU kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        if let Some(m) = &self.stem.relu_mask {
            out.extend_from_slice(m);
        }
        for stage in &self.blocks {
            for b in stage {
                for l in &b.main {
                    if let Some(m) = &l.relu_mask {
                        out.extend_from_slice(m);
                    }
                }
                out.extend_from_slice(&b.out_mask);
            }
        }
        out
    }
}

/// Named batch statistics produced by a train-mode pass.
pub type BnStatsLog<T> = Vec<(String, BnBatchStats<T>)>;

pub struct BackboneOutput<T> {
    /// Output of every stage, shallowest first.
    pub stages: Vec<FeatureMap<T>>,
    pub cache: BackboneCache<T>,
    pub bn_stats: BnStatsLog<T>,
}

/// Architecture of the residual backbone; parameters live in a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Backbone {
    spec: EncoderSpec,
    stem: ConvBn,
    stages: Vec<Vec<Block>>,
}

struct Fwd<'a, T> {
    params: &'a ParamSet<T>,
    running: &'a ParamSet<T>,
    mode: Mode,
    eps: T,
    stats: BnStatsLog<T>,
}

impl<T: Scalar> Fwd<'_, T> {
    fn conv_bn(&mut self, l: &ConvBn, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, ConvBnCache<T>)> {
        let w = self.params.get(&l.weight())?;
        let (y, cols) = conv_forward(&l.geom, w.data(), x);
        let gamma = self.params.get(&l.gamma())?.data();
        let beta = self.params.get(&l.beta())?.data();
        let mode = match self.mode {
            Mode::Train { groups } => BnMode::Batch { groups },
            Mode::Eval => BnMode::Running {
                mean: self.running.get(&l.running_mean())?.data(),
                var: self.running.get(&l.running_var())?.data(),
            },
        };
        let (mut y, bn, stats) = bn_forward(&y, gamma, beta, mode, self.eps);
        if let Some(s) = stats {
            self.stats.push((format!("{}.bn", l.name), s));
        }
        let relu_mask = if l.relu { Some(relu_forward(&mut y.data)) } else { None };
        if !y.is_finite() {
            return Err(GerspError::NonFinite(l.name.clone()));
        }
        Ok((
            y,
            ConvBnCache {
                in_hw: (x.h, x.w),
                cols,
                bn,
                relu_mask,
            },
        ))
    }

    fn block(&mut self, b: &Block, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, BlockCache<T>)> {
        let mut h = None;
        let mut main = Vec::with_capacity(b.main.len());
        for l in &b.main {
            let (y, c) = self.conv_bn(l, h.as_ref().unwrap_or(x))?;
            main.push(c);
            h = Some(y);
        }
        let mut out = h.expect("block has layers");
        let downsample = match &b.downsample {
            Some(l) => {
                let (sc, c) = self.conv_bn(l, x)?;
                for (o, s) in out.data.iter_mut().zip(&sc.data) {
                    *o += *s;
                }
                Some(c)
            }
            None => {
                for (o, s) in out.data.iter_mut().zip(&x.data) {
                    *o += *s;
                }
                None
            }
        };
        let out_mask = relu_forward(&mut out.data);
        Ok((
            out,
            BlockCache {
                main,
                downsample,
                out_mask,
            },
        ))
    }
}

fn conv_bn_backward<T: Scalar>(
    l: &ConvBn,
    params: &ParamSet<T>,
    cache: &ConvBnCache<T>,
    mut dy: FeatureMap<T>,
    grads: &mut ParamSet<T>,
    need_dx: bool,
) -> Result<Option<FeatureMap<T>>> {
    if let Some(mask) = &cache.relu_mask {
        relu_backward(&mut dy.data, mask);
    }
    let gamma = params.get(&l.gamma())?.data();
    let mut dgamma = grads.get(&l.gamma())?.data().to_vec();
    let mut dbeta = grads.get(&l.beta())?.data().to_vec();
    let dconv = bn_backward(&cache.bn, gamma, &dy, &mut dgamma, &mut dbeta);
    grads.get_mut(&l.gamma())?.data_mut().copy_from_slice(&dgamma);
    grads.get_mut(&l.beta())?.data_mut().copy_from_slice(&dbeta);
    let w = params.get(&l.weight())?.data();
    let dw = grads.get_mut(&l.weight())?.data_mut();
    Ok(conv_backward(&l.geom, w, cache.in_hw, &cache.cols, &dconv, dw, need_dx))
}

impl Backbone {
    pub fn new(spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let stem = ConvBn::new("stem".into(), 3, spec.stem_width, spec.stem_kernel, spec.stem_stride, true);
        let mut in_c = spec.stem_width;
        let mut stages = Vec::with_capacity(spec.n_stages());
        for (s, (&width, &count)) in spec.stage_widths.iter().zip(&spec.blocks_per_stage).enumerate() {
            let mut blocks = Vec::with_capacity(count);
            for b in 0..count {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let prefix = format!("stage{}.block{}", s + 1, b);
                let main = match spec.block {
                    BlockKind::Basic => vec![
                        ConvBn::new(format!("{prefix}.unit1"), in_c, width, 3, stride, true),
                        ConvBn::new(format!("{prefix}.unit2"), width, width, 3, 1, false),
                    ],
                    BlockKind::Bottleneck => {
                        let mid = width / 4;
                        vec![
                            ConvBn::new(format!("{prefix}.unit1"), in_c, mid, 1, 1, true),
                            ConvBn::new(format!("{prefix}.unit2"), mid, mid, 3, stride, true),
                            ConvBn::new(format!("{prefix}.unit3"), mid, width, 1, 1, false),
                        ]
                    }
                };
                let downsample = (stride != 1 || in_c != width)
                    .then(|| ConvBn::new(format!("{prefix}.downsample"), in_c, width, 1, stride, false));
                blocks.push(Block { main, downsample });
                in_c = width;
            }
            stages.push(blocks);
        }
        Ok(Self {
            spec: spec.clone(),
            stem,
            stages,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn layers(&self) -> impl Iterator<Item = &ConvBn> {
        std::iter::once(&self.stem).chain(
            self.stages
                .iter()
                .flatten()
                .flat_map(|b| b.main.iter().chain(b.downsample.iter())),
        )
    }

    /// Trainable parameter shapes in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for l in self.layers() {
            out.push((l.weight(), l.geom.weight_shape().to_vec()));
            out.push((l.gamma(), vec![l.geom.out_c]));
            out.push((l.beta(), vec![l.geom.out_c]));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Fan-in scaled normal conv weights, BN scale 1 and shift 0.
    pub fn init_params<T: Scalar>(&self, rng: &mut RngStream) -> ParamSet<T> {
        let mut p = ParamSet::new();
        for l in self.layers() {
            let std = (2.0 / l.geom.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            let shape = l.geom.weight_shape();
            let data = (0..shape.iter().product::<usize>())
                .map(|_| T::lit(normal.sample(rng)))
                .collect();
            p.insert(l.weight(), Tensor::from_vec(&shape, data).expect("shape"));
            p.insert(l.gamma(), Tensor::filled(&[l.geom.out_c], T::one()));
            p.insert(l.beta(), Tensor::zeros(&[l.geom.out_c]));
        }
        p
    }

    /// Running mean 0 and variance 1 for every BN layer.
    pub fn init_running<T: Scalar>(&self) -> ParamSet<T> {
        let mut p = ParamSet::new();
        for l in self.layers() {
            p.insert(l.running_mean(), Tensor::zeros(&[l.geom.out_c]));
            p.insert(l.running_var(), Tensor::filled(&[l.geom.out_c], T::one()));
        }
        p
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        running: &ParamSet<T>,
        x: &FeatureMap<T>,
        mode: Mode,
    ) -> Result<BackboneOutput<T>> {
        if x.c != 3 {
            return Err(GerspError::InvalidInput(format!("expected 3 input channels, got {}", x.c)));
        }
        let stride = self.spec.total_stride();
        if !x.h.is_multiple_of(stride) || !x.w.is_multiple_of(stride) || x.h == 0 || x.w == 0 {
            return Err(GerspError::InvalidInput(format!(
                "input {}x{} is not a multiple of the backbone stride {stride}",
                x.h, x.w
            )));
        }
        if let Mode::Train { groups } = mode {
            if groups == 0 || !x.n.is_multiple_of(groups) {
                return Err(GerspError::Config(format!(
                    "{groups} BN groups do not divide batch of {}",
                    x.n
                )));
            }
        }
        let mut f = Fwd {
            params,
            running,
            mode,
            eps: T::lit(self.spec.bn_eps),
            stats: Vec::new(),
        };
        let (mut h, stem) = f.conv_bn(&self.stem, x)?;
        let pool = if self.spec.stem_max_pool {
            let in_hw = (h.h, h.w);
            let (p, arg) = max_pool_forward(&h);
            h = p;
            Some((arg, in_hw))
        } else {
            None
        };
        let mut stage_out = Vec::with_capacity(self.stages.len());
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut sc = Vec::with_capacity(stage.len());
            for b in stage {
                let (y, c) = f.block(b, &h)?;
                sc.push(c);
                h = y;
            }
            stage_out.push(h.clone());
            caches.push(sc);
        }
        let last_dims = (h.c, h.n, h.h, h.w);
        Ok(BackboneOutput {
            stages: stage_out,
            cache: BackboneCache {
                stem,
                pool,
                blocks: caches,
                last_dims,
            },
            bn_stats: f.stats,
        })
    }

    /// Back-propagates a gradient on the last stage output into `grads`.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &BackboneCache<T>,
        d_last: FeatureMap<T>,
        grads: &mut ParamSet<T>,
    ) -> Result<()> {
        let (c, n, h, w) = cache.last_dims;
        if (d_last.c, d_last.n, d_last.h, d_last.w) != (c, n, h, w) {
            return Err(GerspError::InvalidInput("gradient does not match last stage".into()));
        }
        let mut d = d_last;
        for (stage, sc) in self.stages.iter().zip(&cache.blocks).rev() {
            for (b, bc) in stage.iter().zip(sc).rev() {
                relu_backward(&mut d.data, &bc.out_mask);
                let mut dm = d.clone();
                for (l, lc) in b.main.iter().zip(&bc.main).rev() {
                    dm = conv_bn_backward(l, params, lc, dm, grads, true)?.expect("dx requested");
                }
                let dsc = match (&b.downsample, &bc.downsample) {
                    (Some(l), Some(lc)) => conv_bn_backward(l, params, lc, d, grads, true)?.expect("dx requested"),
                    _ => d,
                };
                for (a, b) in dm.data.iter_mut().zip(&dsc.data) {
                    *a += *b;
                }
                d = dm;
            }
        }
        if let Some((arg, in_hw)) = &cache.pool {
            d = max_pool_backward(&d, arg, *in_hw);
        }
        conv_bn_backward(&self.stem, params, &cache.stem, d, grads, false)?;
        Ok(())
    }
}

/// Folds train-mode batch statistics into running estimates, group by group.
pub fn update_running_stats<T: Scalar>(running: &mut ParamSet<T>, stats: &BnStatsLog<T>, momentum: f64) -> Result<()> {
    let mom = T::lit(momentum);
    let keep = T::one() - mom;
    for (bn, s) in stats {
        for (mean, var) in s.mean.iter().zip(&s.var_unbiased) {
            for (r, &m) in running.get_mut(&format!("{bn}.running_mean"))?.data_mut().iter_mut().zip(mean) {
                *r = keep * *r + mom * m;
            }
            for (r, &v) in running.get_mut(&format!("{bn}.running_var"))?.data_mut().iter_mut().zip(var) {
                *r = keep * *r + mom * v;
            }
        }
    }
    Ok(())
}
