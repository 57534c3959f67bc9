//! Single-file checkpoints: safetensors payload with a JSON metadata record.
//!
//! Tensor names: `encoder.<param>`, `head.weight`, and any extra state the
//! caller adds (e.g. `optim.<slot>.<param>`). Writes go to a temporary file
//! that is renamed into place.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::head::ProjectionHead;
use super::model::{build_encoder_on, ReferenceEncoder};
use super::spec::EncoderSpec;
use super::EncoderError;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const META_KEY: &str = "trio.meta";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub spec: EncoderSpec,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Free-form training state (optimizer settings, config echo).
    #[serde(default)]
    pub state: serde_json::Value,
}

/// Tensors by name, each as its shape and row-major values.
pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Host-side copy of every tensor plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: TensorMap,
}

fn host(t: &Tensor) -> Result<(Vec<usize>, Vec<f32>), EncoderError> {
    Ok((t.dims().to_vec(), t.flatten_all()?.to_vec1::<f32>()?))
}

impl Checkpoint {
    pub fn capture(
        encoder: &ReferenceEncoder,
        head: &ProjectionHead,
        epoch: usize,
        state: serde_json::Value,
    ) -> Result<Self, EncoderError> {
        let mut tensors = BTreeMap::new();
        for (name, var) in encoder.params() {
            tensors.insert(format!("encoder.{name}"), host(var.as_tensor())?);
        }
        tensors.insert("head.weight".into(), host(head.weight().as_tensor())?);
        Ok(Self {
            meta: CheckpointMeta {
                schema_version: CHECKPOINT_SCHEMA_VERSION,
                spec: encoder.spec().clone(),
                seed: encoder.seed(),
                epoch,
                state,
            },
            tensors,
        })
    }

    /// Rebuilds the encoder and head on `device`.
    pub fn restore(
        &self,
        device: &Device,
    ) -> Result<(ReferenceEncoder, ProjectionHead), EncoderError> {
        let encoder = build_encoder_on(&self.meta.spec, self.meta.seed, device)?;
        for (name, var) in encoder.params() {
            let key = format!("encoder.{name}");
            let (shape, data) = self
                .tensors
                .get(&key)
                .ok_or_else(|| EncoderError::Checkpoint(format!("missing tensor {key}")))?;
            if shape.as_slice() != var.dims() {
                return Err(EncoderError::Checkpoint(format!(
                    "tensor {key} has shape {shape:?}, expected {:?}",
                    var.dims()
                )));
            }
            var.set(&Tensor::from_slice(data, shape.as_slice(), device)?)?;
        }
        let (_, head_data) = self
            .tensors
            .get("head.weight")
            .ok_or_else(|| EncoderError::Checkpoint("missing tensor head.weight".into()))?;
        let head = ProjectionHead::from_data(head_data.clone(), device)?;
        Ok((encoder, head))
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), EncoderError> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = checkpoint
        .tensors
        .iter()
        .map(|(name, (shape, data))| {
            let raw = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), shape.clone(), raw)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, raw)| {
            TensorView::new(Dtype::F32, shape.clone(), raw)
                .map(|v| (name.clone(), v))
                .map_err(|e| EncoderError::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let meta = serde_json::to_string(&checkpoint.meta)
        .map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
    let metadata = HashMap::from([(META_KEY.to_string(), meta)]);
    let payload = safetensors::serialize(views, Some(metadata))
        .map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("safetensors.tmp");
    fs::write(&tmp, payload)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, EncoderError> {
    let bytes = fs::read(path)?;
    let bad = |e: String| EncoderError::Checkpoint(format!("{}: {e}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| bad("no training metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_json).map_err(|e| bad(e.to_string()))?;
    if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(bad(format!(
            "unsupported schema version {}",
            meta.schema_version
        )));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(bad(format!("tensor {name} is not f32")));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, (view.shape().to_vec(), data));
    }
    Ok(Checkpoint { meta, tensors })
}
