//! Audio encoders: the `(B, 16000)` PCM16 → `(B, 77, 768)` contract, the
//! reference architectures, the projection head and conformance tooling.

pub mod census;
mod checkpoint;
mod contract;
mod echo;
mod head;
pub mod layers;
pub mod mel;
mod model;
mod spec;

use candle_core::{DType, Tensor};

use crate::types::{AudioWaveform, EmbeddingMatrix, EMBED_DIM, SEQ_LEN};

pub use census::{Census, LayerKind};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, TensorMap,
    CHECKPOINT_SCHEMA_VERSION,
};
pub use contract::{random_waveforms, validate_contract, CheckResult, ConformanceReport};
pub use echo::EchoEncoder;
pub use head::{project, ProjectionHead, HEAD_INIT_NOISE};
pub use layers::{Mode, NoGradGuard};
pub use model::{build_encoder, ReferenceEncoder};
pub use spec::{
    reference_spec, reference_specs, ActivationKind, EncoderSpec, FrontEnd, Pooling,
    REFERENCE_NAMES,
};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),
    #[error("cannot encode an empty batch")]
    EmptyBatch,
    #[error("encoder output has shape {actual:?}, expected [{batch}, {SEQ_LEN}, {EMBED_DIM}]")]
    WrongOutputShape { batch: usize, actual: Vec<usize> },
    #[error("encoder output for batch item {item} has a non-finite entry")]
    NonFiniteOutput { item: usize },
    #[error("batch item {item} is not a registered waveform")]
    UnknownWaveform { item: usize },
    #[error("projection has norm {norm:e}, too close to zero to normalize")]
    ZeroNorm { norm: f64 },
    #[error("unknown reference encoder {0:?}")]
    UnknownReference(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Alignment(crate::alignment::AlignmentError),
    #[error(transparent)]
    Value(#[from] crate::types::ValueError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

/// Anything that maps one-second clips to 77x768 guidance matrices.
pub trait AudioEncoder: Send + Sync {
    fn name(&self) -> &str;

    /// Evaluation-mode forward pass returning a `(B, 77, 768)` tensor.
    fn encode_batch(&self, batch: &[AudioWaveform]) -> Result<Tensor, EncoderError>;
}

/// Checks a `(B, 77, 768)` output for shape and finiteness.
pub fn check_output(output: &Tensor, batch: usize) -> Result<(), EncoderError> {
    if output.dims() != [batch, SEQ_LEN, EMBED_DIM] {
        return Err(EncoderError::WrongOutputShape {
            batch,
            actual: output.dims().to_vec(),
        });
    }
    let per_item = output
        .to_dtype(DType::F32)?
        .reshape((batch, SEQ_LEN * EMBED_DIM))?
        .to_vec2::<f32>()?;
    if let Some(item) = per_item
        .iter()
        .position(|row| row.iter().any(|v| !v.is_finite()))
    {
        return Err(EncoderError::NonFiniteOutput { item });
    }
    Ok(())
}

/// Encodes a nonempty batch into validated matrices, preserving order.
pub fn encode(
    encoder: &dyn AudioEncoder,
    batch: &[AudioWaveform],
) -> Result<Vec<EmbeddingMatrix>, EncoderError> {
    if batch.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    let output = encoder.encode_batch(batch)?;
    check_output(&output, batch.len())?;
    Ok(EmbeddingMatrix::batch_from_tensor(&output)?)
}
