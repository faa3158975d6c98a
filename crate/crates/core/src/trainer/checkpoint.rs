//! Single-file tensor container: magic, manifest length, JSON manifest,
//! little-endian f32 payloads, trailing CRC32 of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{TrainState, TrainingConfig};
use crate::error::{GerspError, Result};
use crate::model::{init_predictor, init_projector, Backbone, EncoderBundle, EncoderSpec};
use crate::objective::LossBreakdown;
use crate::rng::RngStream;
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"GERSPCKP";
pub const FORMAT_VERSION: u32 = 1;
pub const BACKBONE_PREFIX: &str = "backbone/";
pub const PROJECTOR_PREFIX: &str = "nonessential/projector/";
pub const PREDICTOR_PREFIX: &str = "nonessential/predictor/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the payload section.
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs_completed: u32,
    pub iterations: u64,
    pub final_losses: Option<LossBreakdown>,
    pub wall_time_secs: f64,
    /// What was left out of the file.
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    pub config: TrainingConfig,
    pub metadata: TrainingMetadata,
    /// CRC32 over the payload bytes and the config echo. Unlike the file
    /// CRC it ignores wall time, so equal runs give equal values.
    pub content_checksum: u32,
}

/// A checkpoint read back from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: IndexMap<String, Tensor<f32>>,
    /// Trailing CRC32 of the file.
    pub file_crc: u32,
}

fn content_checksum(payload: &[u8], config: &TrainingConfig) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(payload);
    h.update(serde_json::to_string(config).expect("config serializes").as_bytes());
    h.finalize()
}

fn encode(tensors: &[(String, &Tensor<f32>)], config: &TrainingConfig, metadata: TrainingMetadata) -> (Vec<u8>, CheckpointManifest) {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            length: payload.len() as u64 - offset,
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        tensors: entries,
        content_checksum: content_checksum(&payload, config),
        config: config.clone(),
        metadata,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    (out, manifest)
}

/// Writes to a sibling temp file, then renames over `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| GerspError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| GerspError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| GerspError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| GerspError::io(path, e.error))?;
    Ok(())
}

/// Student backbone (with BN running statistics) under `backbone/`, projector
/// and predictor under `nonessential/`. Teacher, queue and optimizer state
/// are not stored.
pub fn save_checkpoint(state: &TrainState, path: &Path, wall_time_secs: f64) -> Result<CheckpointManifest> {
    let b = &state.bundle;
    let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (n, t) in b.student_backbone.iter().chain(b.student_running.iter()) {
        tensors.push((format!("{BACKBONE_PREFIX}{n}"), t));
    }
    for (n, t) in b.student_projector.iter() {
        tensors.push((format!("{PROJECTOR_PREFIX}{n}"), t));
    }
    for (n, t) in b.student_predictor.iter() {
        tensors.push((format!("{PREDICTOR_PREFIX}{n}"), t));
    }
    let metadata = TrainingMetadata {
        epochs_completed: state.epoch,
        iterations: state.iteration,
        final_losses: state.history.last().map(|r| LossBreakdown {
            l_ct: r.l_ct,
            l_ce: r.l_ce,
            l_total: r.l_total,
            alpha: state.config.alpha,
        }),
        wall_time_secs,
        excluded: vec!["teacher".into(), "negative_queue".into(), "optimizer_state".into()],
    };
    let (bytes, manifest) = encode(&tensors, &state.config, metadata);
    write_atomic(path, &bytes)?;
    Ok(manifest)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn parse_manifest(bytes: &[u8]) -> Option<(CheckpointManifest, usize)> {
    let len = read_u32(bytes, 8) as usize;
    let json = bytes.get(12..12usize.checked_add(len)?)?;
    let manifest: CheckpointManifest = serde_json::from_slice(json).ok()?;
    Some((manifest, 12 + len))
}

/// Decodes a checkpoint from memory; see [`load_checkpoint`].
/// Tensors packed back to back, each `4 * prod(shape)` bytes long.
fn extents_consistent(m: &CheckpointManifest) -> bool {
    let mut next = 0u64;
    m.tensors.iter().all(|e| {
        let ok = e.offset == next && e.length == e.shape.iter().fold(4u64, |n, &d| n.saturating_mul(d as u64));
        next = e.offset.saturating_add(e.length);
        ok
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(GerspError::Truncated(format!("{} bytes is shorter than any checkpoint", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(GerspError::BadMagic);
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = read_u32(bytes, bytes.len() - 4);
    let computed = crc32fast::hash(body);
    let parsed = parse_manifest(bytes);
    if stored != computed {
        // A short file with a self-consistent manifest was cut off; anything
        // else that fails the CRC was altered.
        if let Some((m, start)) = parsed.as_ref().filter(|(m, _)| extents_consistent(m)) {
            let declared = start + m.tensors.iter().map(|t| t.length as usize).sum::<usize>() + 4;
            if bytes.len() < declared {
                return Err(GerspError::Truncated(format!(
                    "file has {} bytes, manifest declares {declared}",
                    bytes.len()
                )));
            }
        }
        return Err(GerspError::ChecksumMismatch { stored, computed });
    }
    let (manifest, start) = parsed.ok_or_else(|| GerspError::Manifest("manifest is not valid JSON".into()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(GerspError::VersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let payload = &body[start..];
    let mut tensors = IndexMap::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(GerspError::Manifest(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
        }
        let bytes_needed = e.shape.iter().try_fold(4usize, |n, &d| n.checked_mul(d));
        let (off, len) = (e.offset as usize, e.length as usize);
        if bytes_needed != Some(len) || off.checked_add(len).is_none_or(|end| end > payload.len()) {
            return Err(GerspError::Manifest(format!("tensor `{}` has inconsistent extent", e.name)));
        }
        let data = payload[off..off + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
    }
    if tensors.len() != manifest.tensors.len() {
        return Err(GerspError::Manifest("duplicate tensor names".into()));
    }
    Ok(Checkpoint {
        manifest,
        tensors,
        file_crc: stored,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| GerspError::io(path, e))?;
    decode_checkpoint(&bytes)
}

impl Checkpoint {
    pub fn config(&self) -> &TrainingConfig {
        &self.manifest.config
    }

    fn group(&self, prefix: &str, expected: &[(String, Vec<usize>)]) -> Result<ParamSet<f32>> {
        let mut out = ParamSet::new();
        for (name, shape) in expected {
            let key = format!("{prefix}{name}");
            let t = self.tensors.get(&key).ok_or_else(|| GerspError::MissingTensor(key.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(GerspError::ShapeMismatch {
                    name: key,
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
            out.insert(name.clone(), t.clone());
        }
        Ok(out)
    }

    /// Backbone parameters and running statistics for `spec`. A tensor of
    /// the wrong shape is reported by name, first in network order.
    pub fn backbone_for(&self, spec: &EncoderSpec) -> Result<(ParamSet<f32>, ParamSet<f32>)> {
        let backbone = Backbone::new(spec)?;
        let params = self.group(BACKBONE_PREFIX, &backbone.param_shapes())?;
        let running_shapes: Vec<(String, Vec<usize>)> = backbone
            .init_running::<f32>()
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        let running = self.group(BACKBONE_PREFIX, &running_shapes)?;
        Ok((params, running))
    }

    /// Student networks from the stored config; the teacher is a copy of the student.
    pub fn bundle(&self) -> Result<EncoderBundle<f32>> {
        let spec = self.config().encoder.clone();
        let (backbone, running) = self.backbone_for(&spec)?;
        let shapes = |p: ParamSet<f32>| -> Vec<(String, Vec<usize>)> {
            p.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect()
        };
        let mut rng = RngStream::new(0);
        let d = spec.feature_dim();
        let projector = self.group(
            PROJECTOR_PREFIX,
            &shapes(init_projector(d, spec.proj_hidden_dim, spec.proj_out_dim, &mut rng)),
        )?;
        let predictor = self.group(PREDICTOR_PREFIX, &shapes(init_predictor(d, spec.n_classes, &mut rng)))?;
        Ok(EncoderBundle {
            spec,
            teacher_backbone: backbone.clone(),
            teacher_projector: projector.clone(),
            teacher_running: running.clone(),
            student_backbone: backbone,
            student_projector: projector,
            student_predictor: predictor,
            student_running: running,
        })
    }
}
