//! Joint pre-training: contrastive learning on RS views against an EMA
//! teacher and a negative queue, plus supervised learning on natural images.

mod checkpoint;
mod config;
mod step;

pub use checkpoint::{
    decode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, TensorEntry,
    TrainingMetadata, BACKBONE_PREFIX, FORMAT_VERSION, MAGIC, PREDICTOR_PREFIX, PROJECTOR_PREFIX,
};
pub use config::{TeacherRunningStats, TrainingConfig};
pub use step::{compute_gradients, compute_loss, train_step, Gradients, LossWeights, StepOutput, StepRecord, TrainState};

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use crate::data::{next_dual_batch, DualBatch, LabeledDataset, SamplerState, UnlabeledDataset};
use crate::error::{GerspError, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    /// JSON-lines metric log; defaults to `<out>.metrics.jsonl`.
    pub metrics_path: Option<PathBuf>,
    /// Print a one-line summary per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub state: TrainState,
    pub manifest: CheckpointManifest,
    pub metrics_path: PathBuf,
}

pub fn default_metrics_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".metrics.jsonl");
    PathBuf::from(s)
}

/// Steps per epoch: whole batches of the RS corpus.
pub fn steps_per_epoch(config: &TrainingConfig, unlabeled: &UnlabeledDataset) -> usize {
    unlabeled.len() / config.batch_size
}

/// Runs `epochs x steps_per_epoch` iterations, writes the metric log and the
/// final checkpoint to `out`. Batches are produced on a helper thread in
/// the same order a single thread would produce them.
pub fn pretrain(
    config: &TrainingConfig,
    labeled: &LabeledDataset,
    unlabeled: &UnlabeledDataset,
    out: &Path,
    opts: &PretrainOptions,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if labeled.n_classes() != config.encoder.n_classes {
        return Err(GerspError::Config(format!(
            "natural dataset has {} classes but n_classes is {}",
            labeled.n_classes(),
            config.encoder.n_classes
        )));
    }
    let steps = steps_per_epoch(config, unlabeled);
    if steps == 0 {
        return Err(GerspError::Dataset(format!(
            "{} RS images cannot fill one batch of {}",
            unlabeled.len(),
            config.batch_size
        )));
    }
    let total = steps * config.epochs as usize;
    let metrics_path = opts.metrics_path.clone().unwrap_or_else(|| default_metrics_path(out));
    let metrics_dir = metrics_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let metrics_tmp = tempfile::NamedTempFile::new_in(metrics_dir).map_err(|e| GerspError::io(metrics_dir, e))?;
    let mut log = BufWriter::new(metrics_tmp.as_file());

    let mut state = TrainState::new(config)?;
    let started = Instant::now();
    let sampler_stream = RngStream::new(config.seed).derive(3);

    std::thread::scope(|s| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<DualBatch>>(2);
        s.spawn(move || {
            let mut sampler = SamplerState::from_stream(sampler_stream);
            for _ in 0..total {
                let b = next_dual_batch(
                    &mut sampler,
                    labeled,
                    unlabeled,
                    &config.augment,
                    &config.normalize,
                    config.batch_size,
                );
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        });
        for epoch in 0..config.epochs {
            state.epoch = epoch;
            for step in 0..steps {
                let at = if config.cosine.per_iteration_lr {
                    f64::from(epoch) + step as f64 / steps as f64
                } else {
                    f64::from(epoch)
                };
                let lr = config.cosine.lr_at_epoch(at);
                let batch = rx
                    .recv()
                    .map_err(|_| GerspError::Dataset("batch producer stopped early".into()))??;
                train_step(&mut state, &batch, lr)?;
                let rec = state.history.last().expect("step recorded");
                serde_json::to_writer(&mut log, rec).expect("record serializes");
                log.write_all(b"\n").map_err(|e| GerspError::io(&metrics_path, e))?;
            }
            if opts.verbose {
                let recent = &state.history[state.history.len() - steps..];
                let mean = |f: fn(&StepRecord) -> f64| recent.iter().map(f).sum::<f64>() / steps as f64;
                eprintln!(
                    "epoch {:>3}/{}  lr {:.5}  l_ct {:.4}  l_ce {:.4}",
                    epoch + 1,
                    config.epochs,
                    recent[0].lr,
                    mean(|r| r.l_ct),
                    mean(|r| r.l_ce)
                );
            }
        }
        state.epoch = config.epochs;
        Ok(())
    })?;

    log.flush().map_err(|e| GerspError::io(&metrics_path, e))?;
    drop(log);
    let manifest = save_checkpoint(&state, out, started.elapsed().as_secs_f64())?;
    metrics_tmp
        .persist(&metrics_path)
        .map_err(|e| GerspError::io(&metrics_path, e.error))?;
    Ok(PretrainOutcome {
        state,
        manifest,
        metrics_path,
    })
}
