//! Canonical on-disk dataset container.
//!
//! A container is a directory holding
//! - `manifest.json`: the [`DatasetManifest`] as UTF-8 JSON,
//! - `samples.bin`: little-endian `f32`, row-major `[num_windows, W, C]`,
//! - `labels.bin` (optional): little-endian `i32`, one per window.

use std::fs;
use std::path::Path;

use ndarray::Array3;

use super::{DatasetManifest, WindowedDataset};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.bin";
pub const LABELS_FILE: &str = "labels.bin";

pub fn save_container(dataset: &WindowedDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let manifest = serde_json::to_string_pretty(&dataset.manifest)?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;

    let bytes: Vec<u8> = dataset
        .samples
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let path = dir.join(SAMPLES_FILE);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;

    let path = dir.join(LABELS_FILE);
    match &dataset.labels {
        Some(labels) => {
            let bytes: Vec<u8> = labels
                .iter()
                .flat_map(|&y| (y as i32).to_le_bytes())
                .collect();
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        None if path.exists() => fs::remove_file(&path).map_err(|e| Error::io(&path, e))?,
        None => {}
    }
    Ok(())
}

pub fn load_container(dir: impl AsRef<Path>) -> Result<WindowedDataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    let (n, w, c) = (
        manifest.num_windows,
        manifest.window_size,
        manifest.num_channels,
    );

    let path = dir.join(SAMPLES_FILE);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = n * w * c * 4;
    if bytes.len() != expected {
        return Err(Error::Integrity(format!(
            "{} holds {} bytes, manifest [{n}, {w}, {c}] needs {expected}",
            SAMPLES_FILE,
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let samples = Array3::from_shape_vec((n, w, c), values)
        .map_err(|e| Error::Integrity(e.to_string()))?;

    let path = dir.join(LABELS_FILE);
    let labels = if path.is_file() {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != n * 4 {
            return Err(Error::Integrity(format!(
                "{} holds {} bytes, expected {} for {n} windows",
                LABELS_FILE,
                bytes.len(),
                n * 4
            )));
        }
        let labels = bytes
            .chunks_exact(4)
            .enumerate()
            .map(|(i, b)| {
                let y = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                usize::try_from(y)
                    .map_err(|_| Error::Integrity(format!("negative label {y} at window {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(labels)
    } else {
        None
    };

    WindowedDataset::new(samples, labels, manifest).map_err(|e| match e {
        Error::Integrity(m) => Error::Integrity(m),
        other => Error::Integrity(other.to_string()),
    })
}
