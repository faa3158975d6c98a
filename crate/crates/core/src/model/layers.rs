//! Layer kernels over channel-major (`C x N x H x W`) feature maps, each with
//! an explicit backward pass.

use crate::tensor::{gemm, Scalar, Tensor};

/// Channel-major activation tensor: `data[((c * n + i) * h + y) * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![T::zero(); c * n * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn at(&self, c: usize, i: usize, y: usize, x: usize) -> T {
        self.data[((c * self.n + i) * self.h + y) * self.w + x]
    }

    /// Rows `order` of the batch, in that order.
    pub fn select_rows(&self, order: &[usize]) -> Self {
        let p = self.plane();
        let mut out = Self::zeros(self.c, order.len(), self.h, self.w);
        for c in 0..self.c {
            for (dst, &src) in order.iter().enumerate() {
                let s = (c * self.n + src) * p;
                let d = (c * order.len() + dst) * p;
                out.data[d..d + p].copy_from_slice(&self.data[s..s + p]);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_c, self.in_c, self.k, self.k]
    }

    pub fn fan_in(&self) -> usize {
        self.in_c * self.k * self.k
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &FeatureMap<T>, oh: usize, ow: usize) -> Vec<T> {
    let np = x.n * oh * ow;
    let mut cols = vec![T::zero(); g.fan_in() * np];
    let (k, s, pad) = (g.k, g.stride, g.pad as isize);
    for c in 0..g.in_c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * np..(row + 1) * np];
                for i in 0..x.n {
                    let src = &x.data[(c * x.n + i) * x.h * x.w..(c * x.n + i + 1) * x.h * x.w];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ki as isize - pad;
                        let base = (i * oh + oy) * ow;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        for ox in 0..ow {
                            let ix = (ox * s) as isize + kj as isize - pad;
                            if ix >= 0 && ix < x.w as isize {
                                dst[base + ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], n: usize, h: usize, w: usize, oh: usize, ow: usize) -> FeatureMap<T> {
    let np = n * oh * ow;
    let mut dx = FeatureMap::zeros(g.in_c, n, h, w);
    let (k, s, pad) = (g.k, g.stride, g.pad as isize);
    for c in 0..g.in_c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * np..(row + 1) * np];
                for i in 0..n {
                    let dst = &mut dx.data[(c * n + i) * h * w..(c * n + i + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ki as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (i * oh + oy) * ow;
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * s) as isize + kj as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Convolution without bias. Returns the output and the im2col matrix needed
/// by the backward pass.
pub fn conv_forward<T: Scalar>(g: &ConvGeom, weight: &[T], x: &FeatureMap<T>) -> (FeatureMap<T>, Vec<T>) {
    debug_assert_eq!(x.c, g.in_c);
    let (oh, ow) = g.out_hw(x.h, x.w);
    let cols = if g.k == 1 && g.stride == 1 && g.pad == 0 {
        x.data.clone()
    } else {
        im2col(g, x, oh, ow)
    };
    let np = x.n * oh * ow;
    let mut out = FeatureMap::zeros(g.out_c, x.n, oh, ow);
    gemm(false, false, g.out_c, np, g.fan_in(), T::one(), weight, &cols, T::zero(), &mut out.data);
    (out, cols)
}

/// Accumulates the weight gradient into `dw`; returns the input gradient when
/// requested.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    weight: &[T],
    in_hw: (usize, usize),
    cols: &[T],
    dy: &FeatureMap<T>,
    dw: &mut [T],
    need_dx: bool,
) -> Option<FeatureMap<T>> {
    let (oh, ow) = (dy.h, dy.w);
    let np = dy.n * oh * ow;
    let kk = g.fan_in();
    gemm(false, true, g.out_c, kk, np, T::one(), &dy.data, cols, T::one(), dw);
    if !need_dx {
        return None;
    }
    let mut dcols = vec![T::zero(); kk * np];
    gemm(true, false, kk, np, g.out_c, T::one(), weight, &dy.data, T::zero(), &mut dcols);
    if g.k == 1 && g.stride == 1 && g.pad == 0 {
        return Some(FeatureMap {
            c: g.in_c,
            n: dy.n,
            h: in_hw.0,
            w: in_hw.1,
            data: dcols,
        });
    }
    Some(col2im(g, &dcols, dy.n, in_hw.0, in_hw.1, oh, ow))
}

/// How a batch-norm layer normalizes.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Batch statistics, computed independently over `groups` contiguous
    /// slices of the batch.
    Batch { groups: usize },
    /// Frozen running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    /// `inv_std[g * c + ch]` (a single group in running mode).
    inv_std: Vec<T>,
    groups: usize,
    batch_stats: bool,
}

/// Per-group batch statistics of one BN layer: biased mean and unbiased
/// variance, `groups x C` each.
#[derive(Debug, Clone)]
pub struct BnBatchStats<T> {
    pub mean: Vec<Vec<T>>,
    pub var_unbiased: Vec<Vec<T>>,
}

pub fn bn_forward<T: Scalar>(
    x: &FeatureMap<T>,
    gamma: &[T],
    beta: &[T],
    mode: BnMode<'_, T>,
    eps: T,
) -> (FeatureMap<T>, BnCache<T>, Option<BnBatchStats<T>>) {
    let (c, n, p) = (x.c, x.n, x.plane());
    let mut y = FeatureMap::zeros(c, n, x.h, x.w);
    let mut xhat = vec![T::zero(); x.data.len()];
    match mode {
        BnMode::Batch { groups } => {
            assert!(groups >= 1 && n % groups == 0, "BN groups must divide the batch");
            let per = n / groups;
            let m = per * p;
            let mf = T::lit(m as f64);
            let mut inv_std = vec![T::zero(); groups * c];
            let mut stats = BnBatchStats {
                mean: vec![vec![T::zero(); c]; groups],
                var_unbiased: vec![vec![T::zero(); c]; groups],
            };
            for g in 0..groups {
                for ch in 0..c {
                    let start = (ch * n + g * per) * p;
                    let seg = &x.data[start..start + m];
                    let mean = seg.iter().copied().sum::<T>() / mf;
                    let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                    let is = T::one() / (var + eps).sqrt();
                    inv_std[g * c + ch] = is;
                    stats.mean[g][ch] = mean;
                    stats.var_unbiased[g][ch] = if m > 1 {
                        var * mf / T::lit((m - 1) as f64)
                    } else {
                        var
                    };
                    let (gm, bt) = (gamma[ch], beta[ch]);
                    let xh = &mut xhat[start..start + m];
                    let yy = &mut y.data[start..start + m];
                    for ((o, h), &v) in yy.iter_mut().zip(xh.iter_mut()).zip(seg) {
                        *h = (v - mean) * is;
                        *o = gm * *h + bt;
                    }
                }
            }
            (
                y,
                BnCache {
                    xhat,
                    inv_std,
                    groups,
                    batch_stats: true,
                },
                Some(stats),
            )
        }
        BnMode::Running { mean, var } => {
            let mut inv_std = vec![T::zero(); c];
            let m = n * p;
            for ch in 0..c {
                let is = T::one() / (var[ch] + eps).sqrt();
                inv_std[ch] = is;
                let (mu, gm, bt) = (mean[ch], gamma[ch], beta[ch]);
                let start = ch * m;
                for i in start..start + m {
                    let h = (x.data[i] - mu) * is;
                    xhat[i] = h;
                    y.data[i] = gm * h + bt;
                }
            }
            (
                y,
                BnCache {
                    xhat,
                    inv_std,
                    groups: 1,
                    batch_stats: false,
                },
                None,
            )
        }
    }
}

/// Accumulates `dgamma`, `dbeta`; returns the input gradient.
pub fn bn_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &[T],
    dy: &FeatureMap<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> FeatureMap<T> {
    let (c, n, p) = (dy.c, dy.n, dy.plane());
    let mut dx = FeatureMap::zeros(c, n, dy.h, dy.w);
    let groups = cache.groups;
    let per = n / groups;
    let m = per * p;
    let mf = T::lit(m as f64);
    for g in 0..groups {
        for ch in 0..c {
            let start = (ch * n + g * per) * p;
            let d = &dy.data[start..start + m];
            let xh = &cache.xhat[start..start + m];
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            for (&a, &b) in d.iter().zip(xh) {
                sum_dy += a;
                sum_dy_xh += a * b;
            }
            dgamma[ch] += sum_dy_xh;
            dbeta[ch] += sum_dy;
            let is = cache.inv_std[g * c + ch];
            let out = &mut dx.data[start..start + m];
            if cache.batch_stats {
                let k = gamma[ch] * is / mf;
                for ((o, &a), &b) in out.iter_mut().zip(d).zip(xh) {
                    *o = k * (mf * a - sum_dy - b * sum_dy_xh);
                }
            } else {
                let k = gamma[ch] * is;
                for (o, &a) in out.iter_mut().zip(d) {
                    *o = k * a;
                }
            }
        }
    }
    dx
}

/// In-place ReLU; returns the active mask.
pub fn relu_forward<T: Scalar>(x: &mut [T]) -> Vec<bool> {
    x.iter_mut()
        .map(|v| {
            let on = *v > T::zero();
            if !on {
                *v = T::zero();
            }
            on
        })
        .collect()
}

pub fn relu_backward<T: Scalar>(dy: &mut [T], mask: &[bool]) {
    for (d, &on) in dy.iter_mut().zip(mask) {
        if !on {
            *d = T::zero();
        }
    }
}

/// 3x3, stride-2, padding-1 max pooling. Returns the output and argmax
/// offsets into each input plane.
pub fn max_pool_forward<T: Scalar>(x: &FeatureMap<T>) -> (FeatureMap<T>, Vec<usize>) {
    let oh = (x.h + 2 - 3) / 2 + 1;
    let ow = (x.w + 2 - 3) / 2 + 1;
    let mut out = FeatureMap::zeros(x.c, x.n, oh, ow);
    let mut arg = vec![0usize; out.data.len()];
    for plane in 0..x.c * x.n {
        let src = &x.data[plane * x.h * x.w..(plane + 1) * x.h * x.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = 0;
                for dy in 0..3 {
                    let iy = (oy * 2 + dy) as isize - 1;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let ix = (ox * 2 + dx) as isize - 1;
                        if ix < 0 || ix >= x.w as isize {
                            continue;
                        }
                        let idx = iy as usize * x.w + ix as usize;
                        if src[idx] > best {
                            best = src[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                out.data[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward<T: Scalar>(dy: &FeatureMap<T>, arg: &[usize], in_hw: (usize, usize)) -> FeatureMap<T> {
    let (h, w) = in_hw;
    let mut dx = FeatureMap::zeros(dy.c, dy.n, h, w);
    let op = dy.plane();
    for plane in 0..dy.c * dy.n {
        for o in 0..op {
            dx.data[plane * h * w + arg[plane * op + o]] += dy.data[plane * op + o];
        }
    }
    dx
}

/// Spatial mean per (sample, channel): `N x C`.
pub fn global_avg_pool<T: Scalar>(x: &FeatureMap<T>) -> Tensor<T> {
    let p = x.plane();
    let inv = T::one() / T::lit(p as f64);
    let mut out = Tensor::zeros(&[x.n, x.c]);
    for ch in 0..x.c {
        for i in 0..x.n {
            let s = (ch * x.n + i) * p;
            out.data_mut()[i * x.c + ch] = x.data[s..s + p].iter().copied().sum::<T>() * inv;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(dpooled: &Tensor<T>, c: usize, n: usize, h: usize, w: usize) -> FeatureMap<T> {
    let p = h * w;
    let inv = T::one() / T::lit(p as f64);
    let mut dx = FeatureMap::zeros(c, n, h, w);
    for ch in 0..c {
        for i in 0..n {
            let v = dpooled.data()[i * c + ch] * inv;
            let s = (ch * n + i) * p;
            dx.data[s..s + p].fill(v);
        }
    }
    dx
}

/// Adaptive average pooling to a `grid x grid` map, flattened per sample to
/// `N x (C * grid * grid)` (channel-major within a row).
pub fn adaptive_avg_pool_flat<T: Scalar>(x: &FeatureMap<T>, grid: usize) -> Tensor<T> {
    let dim = x.c * grid * grid;
    let mut out = Tensor::zeros(&[x.n, dim]);
    let bounds = |o: usize, len: usize| (o * len / grid, ((o + 1) * len).div_ceil(grid));
    for ch in 0..x.c {
        for i in 0..x.n {
            for gy in 0..grid {
                let (y0, y1) = bounds(gy, x.h);
                for gx in 0..grid {
                    let (x0, x1) = bounds(gx, x.w);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += x.at(ch, i, y, xx);
                        }
                    }
                    let cnt = T::lit(((y1 - y0) * (x1 - x0)) as f64);
                    out.data_mut()[i * dim + (ch * grid + gy) * grid + gx] = acc / cnt;
                }
            }
        }
    }
    out
}

/// `y = x W^T + b` with `x: B x in`, `W: out x in`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (b, d_in) = x.dims2();
    let (d_out, _) = weight.dims2();
    let mut y = Tensor::zeros(&[b, d_out]);
    for i in 0..b {
        y.row_mut(i).copy_from_slice(bias.data());
    }
    gemm(false, true, b, d_out, d_in, T::one(), x.data(), weight.data(), T::one(), y.data_mut());
    y
}

/// Accumulates weight and bias gradients; returns `dx`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    dweight: &mut Tensor<T>,
    dbias: &mut Tensor<T>,
) -> Tensor<T> {
    let (b, d_in) = x.dims2();
    let (_, d_out) = dy.dims2();
    gemm(true, false, d_out, d_in, b, T::one(), dy.data(), x.data(), T::one(), dweight.data_mut());
    for i in 0..b {
        for (g, &d) in dbias.data_mut().iter_mut().zip(dy.row(i)) {
            *g += d;
        }
    }
    let mut dx = Tensor::zeros(&[b, d_in]);
    gemm(false, false, b, d_in, d_out, T::one(), dy.data(), weight.data(), T::zero(), dx.data_mut());
    dx
}
