//! Joint supervised and momentum-contrastive pre-training of residual image
//! encoders, with downstream classification evaluation.
//!
//! A student encoder is trained on two objectives at once: cross-entropy on
//! labeled natural images and InfoNCE on two augmented views of unlabeled
//! remote-sensing images, with keys from an EMA teacher and negatives from a
//! FIFO queue.

pub mod augment;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod pixels;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{GerspError, Result};
