//! Trained encoders found in a checkpoint directory.
//!
//! Each `<id>.safetensors` file and each `<id>/` training directory (newest
//! `epoch-N.safetensors` inside) becomes one encoder named `<id>`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use trio_core::encoders::{load_checkpoint, Census, Checkpoint, ProjectionHead, ReferenceEncoder};
use trio_core::trainer::latest_checkpoint;

use crate::error::{CliError, Result};

/// Checkpoint files of `dir`, as sorted `(id, path)` pairs.
pub fn discover(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let listing = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut found = Vec::new();
    for entry in listing {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if path.is_dir() {
            if let Some((_, latest)) = latest_checkpoint(&path) {
                found.push((name.to_string(), latest));
            }
        } else if let Some(id) = name.strip_suffix(".safetensors") {
            found.push((id.to_string(), path.clone()));
        }
    }
    found.sort();
    if let Some(w) = found.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(CliError::Config(format!(
            "encoder id {:?} appears twice in {}",
            w[0].0,
            dir.display()
        )));
    }
    Ok(found)
}

/// A file, or a training directory standing for its newest checkpoint.
pub fn checkpoint_file(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        latest_checkpoint(path)
            .map(|(_, p)| p)
            .ok_or_else(|| CliError::Config(format!("no checkpoints in {}", path.display())))
    } else {
        Ok(path.to_path_buf())
    }
}

/// What clients see about one loadable encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSummary {
    pub id: String,
    pub architecture: String,
    pub epoch: usize,
    pub seed: u64,
    pub checkpoint: String,
    pub census: Census,
}

pub struct LoadedEncoder {
    pub summary: EncoderSummary,
    pub encoder: Arc<ReferenceEncoder>,
    pub head: ProjectionHead,
}

pub fn load(id: &str, path: &Path, device: &Device) -> Result<LoadedEncoder> {
    let checkpoint: Checkpoint = load_checkpoint(path)?;
    let (encoder, head) = checkpoint.restore(device)?;
    let summary = EncoderSummary {
        id: id.to_string(),
        architecture: checkpoint.meta.spec.name.clone(),
        epoch: checkpoint.meta.epoch,
        seed: checkpoint.meta.seed,
        checkpoint: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        census: encoder.census(),
    };
    Ok(LoadedEncoder {
        summary,
        encoder: Arc::new(encoder),
        head,
    })
}

/// Loads every encoder in `dir`; a missing directory yields none.
pub fn load_all(dir: Option<&Path>, device: &Device) -> Result<Vec<LoadedEncoder>> {
    let Some(dir) = dir else {
        return Ok(Vec::new());
    };
    if !dir.exists() {
        tracing::warn!(dir = %dir.display(), "encoder directory does not exist");
        return Ok(Vec::new());
    }
    discover(dir)?
        .iter()
        .map(|(id, path)| load(id, path, device))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use trio_core::encoders::{build_encoder, reference_spec, save_checkpoint};
    use trio_core::trainer::checkpoint_path;

    fn write_tiny(path: &Path, epoch: usize) {
        let enc = build_encoder(&reference_spec("tiny").unwrap(), 1).unwrap();
        let head = ProjectionHead::identity(&Device::Cpu).unwrap();
        let ck = Checkpoint::capture(&enc, &head, epoch, serde_json::Value::Null).unwrap();
        save_checkpoint(path, &ck).unwrap();
    }

    #[test]
    fn finds_files_and_training_dirs() {
        let dir = tempfile::tempdir().unwrap();
        write_tiny(&dir.path().join("flat.safetensors"), 0);
        let run = dir.path().join("run");
        write_tiny(&checkpoint_path(&run, 1), 1);
        write_tiny(&checkpoint_path(&run, 2), 2);
        fs::write(dir.path().join("notes.txt"), "x").unwrap();

        let found = discover(dir.path()).unwrap();
        let ids: Vec<&str> = found.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["flat", "run"]);
        let loaded = load_all(Some(dir.path()), &Device::Cpu).unwrap();
        assert_eq!(loaded[1].summary.epoch, 2);
        assert_eq!(loaded[0].summary.architecture, "tiny");
        assert!(loaded[0].summary.census.trainable_parameters > 0);
    }

    #[test]
    fn missing_directory_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let gone = dir.path().join("nope");
        assert!(load_all(Some(&gone), &Device::Cpu).unwrap().is_empty());
    }
}
