use rayon::prelude::*;

use super::{LabeledDataset, Normalize, UnlabeledDataset};
use crate::augment::{make_contrastive_pair, strong_augment, AugmentationPolicy};
use crate::error::{GerspError, Result};
use crate::pixels::{Image, ImageBatch};
use crate::rng::RngStream;

const TAG_NATURAL_ORDER: u64 = 11;
const TAG_RS_ORDER: u64 = 12;
const TAG_AUGMENT: u64 = 13;

/// Without-replacement cursor over `0..n`, reshuffled at each wrap.
#[derive(Debug, Clone, PartialEq)]
struct Cursor {
    tag: u64,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
}

impl Cursor {
    fn new(tag: u64) -> Self {
        Self {
            tag,
            epoch: 0,
            pos: 0,
            order: Vec::new(),
        }
    }

    fn next(&mut self, n: usize, root: &RngStream) -> usize {
        if self.order.len() != n {
            self.order = root.derive2(self.tag, 0).permutation(n);
            self.epoch = 0;
            self.pos = 0;
        } else if self.pos == n {
            self.epoch += 1;
            self.order = root.derive2(self.tag, self.epoch).permutation(n);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

/// Sampling position for both corpora plus the augmentation stream.
/// Each corpus keeps its own epoch cursor.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    root: RngStream,
    natural: Cursor,
    rs: Cursor,
    batches: u64,
}

impl SamplerState {
    pub fn new(seed: u64) -> Self {
        Self::from_stream(RngStream::new(seed))
    }

    pub fn from_stream(root: RngStream) -> Self {
        Self {
            root,
            natural: Cursor::new(TAG_NATURAL_ORDER),
            rs: Cursor::new(TAG_RS_ORDER),
            batches: 0,
        }
    }

    pub fn batches_drawn(&self) -> u64 {
        self.batches
    }

    /// Completed passes over the RS corpus.
    pub fn rs_epoch(&self) -> u64 {
        self.rs.epoch + u64::from(!self.rs.order.is_empty() && self.rs.pos == self.rs.order.len())
    }
}

/// Equal-sized natural and RS sub-batches, already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBatch {
    pub natural_images: ImageBatch,
    pub natural_labels: Vec<usize>,
    pub rs_view_q: ImageBatch,
    pub rs_view_k: ImageBatch,
    /// Source rows of each slot, for integrity checks.
    pub natural_indices: Vec<usize>,
    pub rs_indices: Vec<usize>,
}

impl DualBatch {
    pub fn len(&self) -> usize {
        self.natural_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.natural_labels.is_empty()
    }
}

/// Draws the next batch. Each slot augments from its own derived stream,
/// so the result does not depend on how slots are scheduled across threads.
pub fn next_dual_batch(
    state: &mut SamplerState,
    labeled: &LabeledDataset,
    unlabeled: &UnlabeledDataset,
    policy: &AugmentationPolicy,
    normalize: &Normalize,
    batch_size: usize,
) -> Result<DualBatch> {
    if batch_size == 0 {
        return Err(GerspError::Config("batch_size must be positive".into()));
    }
    let natural_indices: Vec<usize> = (0..batch_size)
        .map(|_| state.natural.next(labeled.len(), &state.root))
        .collect();
    let rs_indices: Vec<usize> = (0..batch_size)
        .map(|_| state.rs.next(unlabeled.len(), &state.root))
        .collect();
    let stream = state.root.derive2(TAG_AUGMENT, state.batches);
    state.batches += 1;

    let views = (0..batch_size)
        .into_par_iter()
        .map(|slot| -> Result<(Image, Image, Image)> {
            let slot_rng = stream.derive(slot as u64);
            let mut nat = strong_augment(
                &labeled.images()[natural_indices[slot]],
                policy,
                &mut slot_rng.derive(0),
            )?;
            let pair = make_contrastive_pair(
                &unlabeled.images()[rs_indices[slot]],
                rs_indices[slot],
                policy,
                &slot_rng.derive(1),
            )?;
            let (mut q, mut k) = (pair.view_q, pair.view_k);
            normalize.apply(&mut nat);
            normalize.apply(&mut q);
            normalize.apply(&mut k);
            Ok((nat, q, k))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut nat = Vec::with_capacity(batch_size);
    let mut q = Vec::with_capacity(batch_size);
    let mut k = Vec::with_capacity(batch_size);
    for (a, b, c) in views {
        nat.push(a);
        q.push(b);
        k.push(c);
    }
    Ok(DualBatch {
        natural_images: ImageBatch::from_images(&nat)?,
        natural_labels: natural_indices.iter().map(|&i| labeled.labels()[i]).collect(),
        rs_view_q: ImageBatch::from_images(&q)?,
        rs_view_k: ImageBatch::from_images(&k)?,
        natural_indices,
        rs_indices,
    })
}
