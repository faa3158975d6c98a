//! Datasets, the synthetic dual corpus and dual-batch sampling.

mod io;
mod sampler;
mod synthetic;

pub use io::{load_labeled_dataset, load_unlabeled_dataset, write_corpus, CorpusFile, CorpusManifest};
pub use sampler::{next_dual_batch, DualBatch, SamplerState};
pub use synthetic::{generate_rs_scenes, generate_synthetic_corpus, SyntheticCorpusSpec, RS_SCENE_NAMES};

use serde::{Deserialize, Serialize};

use crate::error::{GerspError, Result};
use crate::pixels::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(GerspError::Dataset(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if images.is_empty() {
            return Err(GerspError::Dataset("labeled dataset is empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(GerspError::Dataset(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Subset by index, keeping the class list.
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledDataset {
    images: Vec<Image>,
}

impl UnlabeledDataset {
    pub fn new(images: Vec<Image>) -> Result<Self> {
        if images.is_empty() {
            return Err(GerspError::Dataset("unlabeled dataset is empty".into()));
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }
}

/// Per-channel standardization applied after augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalize {
    pub pixel_mean: [f32; 3],
    pub pixel_std: [f32; 3],
}

impl Default for Normalize {
    fn default() -> Self {
        Self {
            pixel_mean: [0.485, 0.456, 0.406],
            pixel_std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalize {
    pub fn validate(&self) -> Result<()> {
        if self.pixel_std.iter().any(|s| !(*s > 0.0)) {
            return Err(GerspError::Config("pixel_std entries must be positive".into()));
        }
        Ok(())
    }

    pub fn apply(&self, image: &mut Image) {
        for px in image.data_mut().chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] - self.pixel_mean[c]) / self.pixel_std[c];
            }
        }
    }
}
