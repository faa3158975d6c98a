use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use super::{LabeledDataset, SyntheticCorpusSpec, UnlabeledDataset};
use crate::error::{GerspError, Result};
use crate::pixels::Image;

fn decode(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| GerspError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    Image::from_rgb8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| GerspError::io(dir, e))? {
        out.push(entry.map_err(|e| GerspError::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// One subdirectory per class; class ids follow the sorted directory names.
pub fn load_labeled_dataset(root: &Path) -> Result<LabeledDataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = class_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let files: Vec<PathBuf> = sorted_entries(&class_dir)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            return Err(GerspError::Dataset(format!("class directory `{name}` has no images")));
        }
        let label = class_names.len();
        for f in files {
            images.push(decode(&f)?);
            labels.push(label);
        }
        class_names.push(name);
    }
    if class_names.is_empty() {
        return Err(GerspError::Dataset(format!("no class directories under {}", root.display())));
    }
    LabeledDataset::new(images, labels, class_names)
}

/// Every file below `root`, in sorted path order; any undecodable file is an error.
pub fn load_unlabeled_dataset(root: &Path) -> Result<UnlabeledDataset> {
    if !root.is_dir() {
        return Err(GerspError::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut files = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| GerspError::io(root, e.into()))?;
        if entry.file_type().is_file() {
            files.push(entry.into_path());
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(GerspError::Dataset(format!("no images found under {}", root.display())));
    }
    let images = files.iter().map(|f| decode(f)).collect::<Result<Vec<_>>>()?;
    UnlabeledDataset::new(images)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFile {
    pub path: String,
    pub sha256: String,
}

/// Contents of `corpus.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: SyntheticCorpusSpec,
    pub files: Vec<CorpusFile>,
}

fn write_png(root: &Path, rel: &str, image: &Image, files: &mut Vec<CorpusFile>) -> Result<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| GerspError::io(parent, e))?;
    }
    let mut bytes = Vec::new();
    image::write_buffer_with_format(
        &mut std::io::Cursor::new(&mut bytes),
        &image.to_rgb8(),
        image.width() as u32,
        image.height() as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| GerspError::Decode {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    fs::write(&path, &bytes).map_err(|e| GerspError::io(&path, e))?;
    files.push(CorpusFile {
        path: rel.to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    });
    Ok(())
}

fn write_labeled(root: &Path, prefix: &str, data: &LabeledDataset, files: &mut Vec<CorpusFile>) -> Result<()> {
    for (i, (img, &label)) in data.images().iter().zip(data.labels()).enumerate() {
        let rel = format!("{prefix}/{}/{i:05}.png", data.class_names()[label]);
        write_png(root, &rel, img, files)?;
    }
    Ok(())
}

/// Writes `natural/<class>/<id>.png`, `rs/<id>.png`, optionally
/// `rs_scenes/<scene>/<id>.png`, and a `corpus.json` manifest.
pub fn write_corpus(
    root: &Path,
    spec: &SyntheticCorpusSpec,
    natural: &LabeledDataset,
    rs: &UnlabeledDataset,
    rs_scenes: Option<&LabeledDataset>,
) -> Result<CorpusManifest> {
    let mut files = Vec::new();
    write_labeled(root, "natural", natural, &mut files)?;
    for (i, img) in rs.images().iter().enumerate() {
        write_png(root, &format!("rs/{i:05}.png"), img, &mut files)?;
    }
    if let Some(scenes) = rs_scenes {
        write_labeled(root, "rs_scenes", scenes, &mut files)?;
    }
    let manifest = CorpusManifest {
        spec: spec.clone(),
        files,
    };
    let path = root.join("corpus.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| GerspError::io(&path, e))?;
    Ok(manifest)
}
