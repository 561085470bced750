use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PatchStore, Provenance, Split, TaskDataset};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PATCH_FILE: &str = "patches.bin";

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    id: usize,
    label: u8,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct TaskManifest {
    task_id: String,
    height: usize,
    width: usize,
    channels: usize,
    channel_names: Vec<String>,
    /// Name of the little-endian float64 patch blob, `[Q, h, w, c]` row-major.
    patches: String,
    samples: Vec<SampleEntry>,
    #[serde(default)]
    provenance: Option<Provenance>,
}

/// Write `task` (with its transforms applied) to `dir`.
pub fn export_task(task: &TaskDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(task.len() * task.patch_shape().0 * task.patch_shape().1 * task.channels() * 8);
    for i in 0..task.len() {
        for v in task.patch(i) {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let samples = (0..task.len())
        .map(|id| SampleEntry {
            id,
            label: task.label(id) as u8,
            split: task.split_of(id).unwrap_or(Split::Test),
        })
        .collect();
    let (height, width, channels) = task.patch_shape();
    let manifest = TaskManifest {
        task_id: task.task_id().to_string(),
        height,
        width,
        channels,
        channel_names: task.channel_names(),
        patches: PATCH_FILE.to_string(),
        samples,
        provenance: Some(task.provenance().clone()),
    };
    let blob_path = dir.join(PATCH_FILE);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
}

/// Load one task directory.
pub fn load_task(dir: &Path) -> Result<TaskDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::ingestion(&manifest_path, "missing manifest"));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: TaskManifest =
        serde_json::from_str(&text).map_err(|e| Error::ingestion(&manifest_path, e.to_string()))?;
    for (k, s) in manifest.samples.iter().enumerate() {
        if s.id != k {
            return Err(Error::ingestion(&manifest_path, format!("sample {k} has id {}", s.id)));
        }
    }
    let blob_path = dir.join(&manifest.patches);
    let bytes = fs::read(&blob_path).map_err(|e| Error::ingestion(&blob_path, e.to_string()))?;
    let expected = manifest.samples.len() * manifest.height * manifest.width * manifest.channels * 8;
    if bytes.len() != expected {
        return Err(Error::ingestion(
            &blob_path,
            format!("blob has {} bytes, manifest implies {expected}", bytes.len()),
        ));
    }
    let pixels: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8 bytes")))
        .collect();
    if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::ingestion(&blob_path, "pixel values outside [0, 1]"));
    }
    let labels = manifest.samples.iter().map(|s| s.label).collect();
    let store = PatchStore::new(
        (manifest.height, manifest.width, manifest.channels),
        manifest.channel_names,
        pixels,
        labels,
    )
    .map_err(|e| Error::ingestion(&manifest_path, e.to_string()))?;
    let pool = |split| {
        manifest
            .samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.id)
            .collect::<Vec<_>>()
    };
    let (train, test) = (pool(Split::Train), pool(Split::Test));
    let mut task = TaskDataset::new(manifest.task_id, store, train, test)
        .map_err(|e| Error::ingestion(&manifest_path, e.to_string()))?;
    if let Some(p) = manifest.provenance {
        task.provenance = p;
    }
    Ok(task)
}

/// Load every task under `path`: either a single task directory or a
/// directory of task directories (loaded in name order).
pub fn load_dataset(path: &Path) -> Result<Vec<TaskDataset>> {
    if path.join(MANIFEST_FILE).is_file() {
        return Ok(vec![load_task(path)?]);
    }
    let entries = fs::read_dir(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::ingestion(path, e.to_string()))?;
        if entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        log::warn!("no task directories under {}", path.display());
    }
    dirs.iter().map(|d| load_task(d)).collect()
}
