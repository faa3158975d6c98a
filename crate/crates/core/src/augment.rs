//! Strong augmentation: random resized crop, colour jitter, grayscale,
//! horizontal flip and Gaussian blur, in that order.

use serde::{Deserialize, Serialize};

use crate::error::{GerspError, Result};
use crate::pixels::Image;
use crate::rng::RngStream;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub crop_ratio_min: f64,
    pub crop_ratio_max: f64,
    pub crop_aspect_min: f64,
    pub crop_aspect_max: f64,
    pub out_size: usize,
    pub p_color_jitter: f64,
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub jitter_saturation: f64,
    pub jitter_hue: f64,
    pub p_grayscale: f64,
    pub p_hflip: f64,
    pub p_blur: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            crop_ratio_min: 0.2,
            crop_ratio_max: 1.0,
            crop_aspect_min: 3.0 / 4.0,
            crop_aspect_max: 4.0 / 3.0,
            out_size: 224,
            p_color_jitter: 0.8,
            jitter_brightness: 0.4,
            jitter_contrast: 0.4,
            jitter_saturation: 0.4,
            jitter_hue: 0.16,
            p_grayscale: 0.2,
            p_hflip: 0.5,
            p_blur: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
        }
    }
}

impl AugmentationPolicy {
    /// Full-image resize only; every random transform disabled.
    pub fn identity(out_size: usize) -> Self {
        Self {
            crop_ratio_min: 1.0,
            crop_ratio_max: 1.0,
            out_size,
            p_color_jitter: 0.0,
            p_grayscale: 0.0,
            p_hflip: 0.0,
            p_blur: 0.0,
            ..Self::default()
        }
    }

    pub fn with_out_size(mut self, out_size: usize) -> Self {
        self.out_size = out_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GerspError::Config(msg));
        if !(self.crop_ratio_min > 0.0
            && self.crop_ratio_min <= self.crop_ratio_max
            && self.crop_ratio_max <= 1.0)
        {
            return bad(format!(
                "crop ratio range must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.crop_ratio_min, self.crop_ratio_max
            ));
        }
        if !(self.crop_aspect_min > 0.0 && self.crop_aspect_min <= self.crop_aspect_max) {
            return bad("crop aspect range must be positive and ordered".into());
        }
        if self.out_size == 0 {
            return bad("out_size must be positive".into());
        }
        for (name, p) in [
            ("p_color_jitter", self.p_color_jitter),
            ("p_grayscale", self.p_grayscale),
            ("p_hflip", self.p_hflip),
            ("p_blur", self.p_blur),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be a probability, got {p}"));
            }
        }
        for (name, f) in [
            ("jitter_brightness", self.jitter_brightness),
            ("jitter_contrast", self.jitter_contrast),
            ("jitter_saturation", self.jitter_saturation),
            ("jitter_hue", self.jitter_hue),
        ] {
            if !(f >= 0.0) {
                return bad(format!("{name} must be >= 0, got {f}"));
            }
        }
        if self.jitter_hue > 0.5 {
            return bad("jitter_hue must be <= 0.5".into());
        }
        if !(self.blur_sigma_min > 0.0 && self.blur_sigma_min <= self.blur_sigma_max) {
            return bad("blur sigma range must be positive and ordered".into());
        }
        Ok(())
    }
}

/// Crop rectangle in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

/// What a single augmentation draw actually did.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentTrace {
    pub crop: CropRect,
    pub jitter: Option<Vec<(JitterOp, f64)>>,
    pub grayscale: bool,
    pub hflip: bool,
    pub blur_sigma: Option<f64>,
}

fn check_input(image: &Image) -> Result<()> {
    if image.height() < 2 || image.width() < 2 {
        return Err(GerspError::InvalidInput(format!(
            "image must be at least 2x2, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    if image.data().iter().any(|v| v.is_nan()) {
        return Err(GerspError::InvalidInput("image contains NaN pixels".into()));
    }
    Ok(())
}

pub fn strong_augment(image: &Image, policy: &AugmentationPolicy, rng: &mut RngStream) -> Result<Image> {
    strong_augment_traced(image, policy, rng).map(|(img, _)| img)
}

/// [`strong_augment`], also reporting every sampled decision.
pub fn strong_augment_traced(
    image: &Image,
    policy: &AugmentationPolicy,
    rng: &mut RngStream,
) -> Result<(Image, AugmentTrace)> {
    check_input(image)?;
    let crop = sample_crop(image.height(), image.width(), policy, rng);
    let mut out = resample(
        image,
        crop.x,
        crop.y,
        crop.width,
        crop.height,
        policy.out_size,
        policy.out_size,
    );

    let jitter = if rng.chance(policy.p_color_jitter) {
        Some(color_jitter(&mut out, policy, rng))
    } else {
        None
    };
    let grayscale = rng.chance(policy.p_grayscale);
    if grayscale {
        to_grayscale(&mut out);
    }
    let hflip = rng.chance(policy.p_hflip);
    if hflip {
        flip_horizontal(&mut out);
    }
    let blur_sigma = if rng.chance(policy.p_blur) {
        let sigma = rng.uniform(policy.blur_sigma_min, policy.blur_sigma_max);
        gaussian_blur(&mut out, sigma);
        Some(sigma)
    } else {
        None
    };
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((
        out,
        AugmentTrace {
            crop,
            jitter,
            grayscale,
            hflip,
            blur_sigma,
        },
    ))
}

/// Two augmented views of one source image.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePair {
    pub source: usize,
    pub view_q: Image,
    pub view_k: Image,
}

/// Independent augmentation draws from the disjoint sub-streams 0 and 1 of `rng`.
pub fn make_contrastive_pair(
    image: &Image,
    source: usize,
    policy: &AugmentationPolicy,
    rng: &RngStream,
) -> Result<ContrastivePair> {
    let view_q = strong_augment(image, policy, &mut rng.derive(0))?;
    let view_k = strong_augment(image, policy, &mut rng.derive(1))?;
    Ok(ContrastivePair {
        source,
        view_q,
        view_k,
    })
}

fn sample_crop(h: usize, w: usize, policy: &AugmentationPolicy, rng: &mut RngStream) -> CropRect {
    let (hf, wf) = (h as f64, w as f64);
    let area = hf * wf;
    if policy.crop_ratio_min >= 1.0 {
        return CropRect {
            x: 0.0,
            y: 0.0,
            width: wf,
            height: hf,
        };
    }
    let (log_lo, log_hi) = (policy.crop_aspect_min.ln(), policy.crop_aspect_max.ln());
    for _ in 0..10 {
        let target = area * rng.uniform(policy.crop_ratio_min, policy.crop_ratio_max);
        let aspect = rng.uniform(log_lo, log_hi).exp();
        let cw = (target * aspect).sqrt();
        let ch = (target / aspect).sqrt();
        if cw <= wf && ch <= hf {
            return CropRect {
                x: rng.uniform(0.0, wf - cw),
                y: rng.uniform(0.0, hf - ch),
                width: cw,
                height: ch,
            };
        }
    }
    // Fall back to the source aspect ratio, which always fits, centred.
    let r = rng.uniform(policy.crop_ratio_min, policy.crop_ratio_max).sqrt();
    let (cw, ch) = (wf * r, hf * r);
    CropRect {
        x: (wf - cw) / 2.0,
        y: (hf - ch) / 2.0,
        width: cw,
        height: ch,
    }
}

/// Bilinear resample of the rectangle `(x0, y0, cw, ch)` to `out_h x out_w`.
pub fn resample(image: &Image, x0: f64, y0: f64, cw: f64, ch: f64, out_h: usize, out_w: usize) -> Image {
    let (h, w) = (image.height(), image.width());
    let axis = |o: usize, origin: f64, extent: f64, out: usize, n: usize| -> (usize, usize, f32) {
        let s = (origin + (o as f64 + 0.5) * extent / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, (s - lo as f64) as f32)
    };
    let xs: Vec<_> = (0..out_w).map(|ox| axis(ox, x0, cw, out_w, w)).collect();
    let mut out = Image::zeros(out_h, out_w);
    for oy in 0..out_h {
        let (y_lo, y_hi, fy) = axis(oy, y0, ch, out_h, h);
        for (ox, &(x_lo, x_hi, fx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let top = image.get(y_lo, x_lo, c) * (1.0 - fx) + image.get(y_lo, x_hi, c) * fx;
                let bot = image.get(y_hi, x_lo, c) * (1.0 - fx) + image.get(y_hi, x_hi, c) * fx;
                out.set(oy, ox, c, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

fn color_jitter(image: &mut Image, policy: &AugmentationPolicy, rng: &mut RngStream) -> Vec<(JitterOp, f64)> {
    let ops = [
        JitterOp::Brightness,
        JitterOp::Contrast,
        JitterOp::Saturation,
        JitterOp::Hue,
    ];
    let order = rng.permutation(4);
    let mut applied = Vec::with_capacity(4);
    for i in order {
        let op = ops[i];
        let factor = match op {
            JitterOp::Brightness => jitter_factor(policy.jitter_brightness, rng),
            JitterOp::Contrast => jitter_factor(policy.jitter_contrast, rng),
            JitterOp::Saturation => jitter_factor(policy.jitter_saturation, rng),
            JitterOp::Hue => rng.uniform(-policy.jitter_hue, policy.jitter_hue),
        };
        match op {
            JitterOp::Brightness => adjust_brightness(image, factor as f32),
            JitterOp::Contrast => adjust_contrast(image, factor as f32),
            JitterOp::Saturation => adjust_saturation(image, factor as f32),
            JitterOp::Hue => adjust_hue(image, factor as f32),
        }
        applied.push((op, factor));
    }
    applied
}

fn jitter_factor(f: f64, rng: &mut RngStream) -> f64 {
    rng.uniform((1.0 - f).max(0.0), 1.0 + f)
}

fn luma(px: &[f32]) -> f32 {
    LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
}

pub fn adjust_brightness(image: &mut Image, factor: f32) {
    for v in image.data_mut() {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
}

pub fn adjust_contrast(image: &mut Image, factor: f32) {
    let n = (image.height() * image.width()) as f32;
    let mean = image.data().chunks_exact(3).map(luma).sum::<f32>() / n;
    for v in image.data_mut() {
        *v = ((*v - mean) * factor + mean).clamp(0.0, 1.0);
    }
}

pub fn adjust_saturation(image: &mut Image, factor: f32) {
    for px in image.data_mut().chunks_exact_mut(3) {
        let g = luma(px);
        for v in px.iter_mut() {
            *v = (g + factor * (*v - g)).clamp(0.0, 1.0);
        }
    }
}

/// Rotates hue by `shift` of the full circle.
pub fn adjust_hue(image: &mut Image, shift: f32) {
    for px in image.data_mut().chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        px[0] = r;
        px[1] = g;
        px[2] = b;
    }
}

pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, v)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

pub fn to_grayscale(image: &mut Image) {
    for px in image.data_mut().chunks_exact_mut(3) {
        let g = luma(px);
        px.fill(g);
    }
}

pub fn flip_horizontal(image: &mut Image) {
    let (h, w) = (image.height(), image.width());
    let data = image.data_mut();
    for y in 0..h {
        let row = &mut data[y * w * 3..(y + 1) * w * 3];
        for x in 0..w / 2 {
            for c in 0..3 {
                row.swap(x * 3 + c, (w - 1 - x) * 3 + c);
            }
        }
    }
}

/// Half-sample reflection (`d c b a | a b c d | d c b a`), which keeps the
/// image mean unchanged under a symmetric kernel.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Odd kernel of size `ceil(4 sigma)` (rounded up to odd).
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let mut size = (4.0 * sigma).ceil().max(1.0) as usize;
    if size.is_multiple_of(2) {
        size += 1;
    }
    let r = (size / 2) as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| (v / s) as f32).collect()
}

/// Separable Gaussian blur with reflective borders.
pub fn gaussian_blur(image: &mut Image, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (image.height(), image.width());
    let src = image.clone();
    let mut tmp = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (t, &kv) in k.iter().enumerate() {
                let xx = reflect(x as isize + t as isize - r, w);
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += kv * src.get(y, xx, c);
                }
            }
            for (c, a) in acc.iter().enumerate() {
                tmp.set(y, x, c, *a);
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (t, &kv) in k.iter().enumerate() {
                let yy = reflect(y as isize + t as isize - r, h);
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += kv * tmp.get(yy, x, c);
                }
            }
            for (c, a) in acc.iter().enumerate() {
                image.set(y, x, c, *a);
            }
        }
    }
}
