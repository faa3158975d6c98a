//! Image containers: a single HWC RGB image and an NHWC batch.

use crate::error::{GerspError, Result};

/// RGB image, row-major HWC, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(GerspError::InvalidInput(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += f64::from(px[c]);
            }
        }
        let n = (self.height * self.width) as f64;
        acc.map(|v| v / n)
    }

    /// Bilinear resize of the whole image (half-pixel centres).
    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        crate::augment::resample(self, 0.0, 0.0, self.width as f64, self.height as f64, out_h, out_w)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(height, width, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }
}

/// Batch of equally sized RGB images, NHWC.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    n: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBatch {
    pub fn from_images(images: &[Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| GerspError::InvalidInput("empty image batch".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(images.len() * h * w * 3);
        for img in images {
            if img.height() != h || img.width() != w {
                return Err(GerspError::InvalidInput(format!(
                    "batch mixes {h}x{w} and {}x{} images",
                    img.height(),
                    img.width()
                )));
            }
            data.extend_from_slice(img.data());
        }
        Ok(Self {
            n: images.len(),
            height: h,
            width: w,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let sz = self.height * self.width * 3;
        &self.data[i * sz..(i + 1) * sz]
    }

    /// New batch with rows taken in the given order.
    pub fn select(&self, order: &[usize]) -> ImageBatch {
        let mut data = Vec::with_capacity(order.len() * self.height * self.width * 3);
        for &i in order {
            data.extend_from_slice(self.image(i));
        }
        ImageBatch {
            n: order.len(),
            height: self.height,
            width: self.width,
            data,
        }
    }
}
