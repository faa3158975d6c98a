//! Seeded procedural corpora: class-conditioned textures standing in for
//! natural photographs, and overhead-style mosaics standing in for aerial scenes.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{LabeledDataset, UnlabeledDataset};
use crate::augment::hsv_to_rgb;
use crate::error::{GerspError, Result};
use crate::pixels::Image;
use crate::rng::RngStream;

const TAG_NATURAL: u64 = 1;
const TAG_RS: u64 = 2;
const TAG_SCENES: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub n_natural: usize,
    pub n_rs: usize,
    pub k_classes: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_natural == 0 || self.n_rs == 0 {
            return Err(GerspError::Config("corpus counts must be positive".into()));
        }
        if self.k_classes < 2 {
            return Err(GerspError::Config("k_classes must be at least 2".into()));
        }
        if self.image_size < 8 {
            return Err(GerspError::Config("image_size must be at least 8".into()));
        }
        Ok(())
    }
}

/// Names of the latent scene types, in id order. Types beyond this list
/// reuse the layouts with different stroke widths.
pub const RS_SCENE_NAMES: [&str; 10] = [
    "rows_dense",
    "rows_sparse",
    "columns_dense",
    "columns_sparse",
    "diagonal_dense",
    "diagonal_sparse",
    "grid_dense",
    "grid_sparse",
    "parcels",
    "water",
];

fn quantize(image: &mut Image) {
    for v in image.data_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

fn natural_image(class: usize, k: usize, size: usize, rng: &mut RngStream) -> Image {
    // Orientation and frequency cycle at a different period than hue so the
    // texture carries information the colour alone does not.
    let orientations = [0.0, 0.5, 0.25, 0.75, 0.125, 0.625, 0.375, 0.875];
    let theta = PI * orientations[(class * 3) % orientations.len()];
    let cycles = [2.0, 3.5, 5.0][class % 3];
    let hue = (class as f64 / k as f64 + rng.uniform(-0.2, 0.2) / k as f64).rem_euclid(1.0);
    let sat = rng.uniform(0.5, 0.65);
    let phase = rng.uniform(0.0, 2.0 * PI);
    let (c, s) = (theta.cos(), theta.sin());
    let mut img = Image::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 * c + y as f64 * s) / size as f64;
            let v = 0.55 + 0.25 * (2.0 * PI * cycles * u + phase).sin() + rng.uniform(-0.06, 0.06);
            let (r, g, b) = hsv_to_rgb(hue as f32, sat as f32, v.clamp(0.0, 1.0) as f32);
            img.set(y, x, 0, r);
            img.set(y, x, 1, g);
            img.set(y, x, 2, b);
        }
    }
    quantize(&mut img);
    img
}

fn random_colour(rng: &mut RngStream, v_lo: f64, v_hi: f64) -> [f32; 3] {
    let h = rng.uniform(0.0, 1.0) as f32;
    let s = rng.uniform(0.1, 0.6) as f32;
    let v = rng.uniform(v_lo, v_hi) as f32;
    let (r, g, b) = hsv_to_rgb(h, s, v);
    [r, g, b]
}

fn blend(img: &mut Image, y: usize, x: usize, colour: [f32; 3], alpha: f32) {
    for (c, &col) in colour.iter().enumerate() {
        let old = img.get(y, x, c);
        img.set(y, x, c, old + alpha * (col - old));
    }
}

/// Parallel strokes through the whole image. `angle` in radians.
fn strokes(img: &mut Image, angle: f64, spacing: f64, width: f64, colour: [f32; 3], rng: &mut RngStream) {
    let phase = rng.uniform(0.0, spacing);
    let (c, s) = (angle.cos(), angle.sin());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let u = x as f64 * s - y as f64 * c;
            let m = (u - phase).rem_euclid(spacing);
            let dist = m.min(spacing - m);
            let alpha = (width / 2.0 + 0.5 - dist).clamp(0.0, 1.0);
            if alpha > 0.0 {
                blend(img, y, x, colour, alpha as f32);
            }
        }
    }
}

fn rect(img: &mut Image, y0: usize, x0: usize, h: usize, w: usize, colour: [f32; 3]) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            blend(img, y, x, colour, 1.0);
        }
    }
}

fn disc(img: &mut Image, cy: f64, cx: f64, r: f64, colour: [f32; 3]) {
    for y in 0..img.height() {
        for x in 0..img.width() {
            let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
            let alpha = (r + 0.5 - d).clamp(0.0, 1.0);
            if alpha > 0.0 {
                blend(img, y, x, colour, alpha as f32);
            }
        }
    }
}

fn rs_image(scene: usize, size: usize, rng: &mut RngStream) -> Image {
    let sz = size as f64;
    let layout = scene % RS_SCENE_NAMES.len();
    let width = 1.0 + (scene / RS_SCENE_NAMES.len()) as f64 * 0.75 + rng.uniform(0.0, 0.6);
    let dense = sz / 6.0;
    let sparse = sz / 3.2;

    let ground = random_colour(rng, 0.25, 0.7);
    let mut img = Image::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                img.set(y, x, c, ground[c]);
            }
        }
    }
    // Nuisance clutter shared by every scene type.
    for _ in 0..rng.below(4) {
        let h = 2 + rng.below(size / 4);
        let w = 2 + rng.below(size / 4);
        let (y0, x0) = (rng.below(size), rng.below(size));
        let col = random_colour(rng, 0.2, 0.8);
        rect(&mut img, y0, x0, h, w, col);
    }

    let bright = rng.chance(0.5);
    let stroke = if bright {
        random_colour(rng, 0.8, 1.0)
    } else {
        random_colour(rng, 0.0, 0.2)
    };
    let jitter = rng.uniform(-0.08, 0.08);
    match layout {
        0 | 1 => {
            let sp = if layout == 0 { dense } else { sparse };
            strokes(&mut img, jitter, sp, width, stroke, rng);
        }
        2 | 3 => {
            let sp = if layout == 2 { dense } else { sparse };
            strokes(&mut img, PI / 2.0 + jitter, sp, width, stroke, rng);
        }
        4 | 5 => {
            let sp = if layout == 4 { dense } else { sparse };
            let a = if rng.chance(0.5) { PI / 4.0 } else { 3.0 * PI / 4.0 };
            strokes(&mut img, a + jitter, sp * 0.8, width, stroke, rng);
        }
        6 | 7 => {
            let sp = if layout == 6 { dense } else { sparse };
            strokes(&mut img, jitter, sp, width, stroke, rng);
            strokes(&mut img, PI / 2.0 + jitter, sp, width, stroke, rng);
        }
        8 => {
            let n = 6 + rng.below(6);
            for _ in 0..n {
                let h = 2 + rng.below((size / 6).max(1));
                let w = 2 + rng.below((size / 6).max(1));
                let (y0, x0) = (rng.below(size), rng.below(size));
                let col = if rng.chance(0.5) { stroke } else { random_colour(rng, 0.3, 0.9) };
                rect(&mut img, y0, x0, h, w, col);
            }
        }
        _ => {
            let r = rng.uniform(0.25, 0.4) * sz;
            let (cy, cx) = (rng.uniform(0.3, 0.7) * sz, rng.uniform(0.3, 0.7) * sz);
            disc(&mut img, cy, cx, r, stroke);
        }
    }

    let gain = rng.uniform(0.8, 1.2) as f32;
    for v in img.data_mut() {
        *v = *v * gain + rng.uniform(-0.04, 0.04) as f32;
    }
    quantize(&mut img);
    img
}

fn scene_names(k: usize) -> Vec<String> {
    (0..k)
        .map(|t| {
            let base = RS_SCENE_NAMES[t % RS_SCENE_NAMES.len()];
            match t / RS_SCENE_NAMES.len() {
                0 => base.to_string(),
                r => format!("{base}_{r}"),
            }
        })
        .collect()
}

/// Natural images are assigned classes round-robin; RS images draw their
/// latent scene type uniformly. Pixels are quantized to 8 bits so a PNG
/// round-trip is exact.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<(LabeledDataset, UnlabeledDataset)> {
    spec.validate()?;
    let root = RngStream::new(spec.seed);
    let k = spec.k_classes;
    let mut images = Vec::with_capacity(spec.n_natural);
    let mut labels = Vec::with_capacity(spec.n_natural);
    for i in 0..spec.n_natural {
        let class = i % k;
        images.push(natural_image(class, k, spec.image_size, &mut root.derive2(TAG_NATURAL, i as u64)));
        labels.push(class);
    }
    let names = (0..k).map(|c| format!("class_{c:02}")).collect();
    let natural = LabeledDataset::new(images, labels, names)?;

    let rs = (0..spec.n_rs)
        .map(|i| {
            let mut rng = root.derive2(TAG_RS, i as u64);
            let scene = rng.below(k);
            rs_image(scene, spec.image_size, &mut rng)
        })
        .collect();
    Ok((natural, UnlabeledDataset::new(rs)?))
}

/// Labeled overhead-style images from the same scene generator, on a
/// stream disjoint from the pre-training corpus. `split` selects
/// independent sets.
pub fn generate_rs_scenes(spec: &SyntheticCorpusSpec, n: usize, split: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let root = RngStream::new(spec.seed).derive2(TAG_SCENES, split);
    let k = spec.k_classes;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let scene = i % k;
        images.push(rs_image(scene, spec.image_size, &mut root.derive(i as u64)));
        labels.push(scene);
    }
    LabeledDataset::new(images, labels, scene_names(k))
}
