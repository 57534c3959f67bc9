//! Training targets from CLIP ViT-L/14: normalized text and image projections
//! plus the raw 77x768 text states, and a persistent cache for all three.

mod cache;
#[cfg(feature = "pretrained")]
mod pretrained;
mod surrogate;

use std::collections::HashMap;

use image::RgbImage;

use crate::dataset::Trio;
use crate::types::EmbeddingMatrix;

pub use cache::{precompute_targets, TargetCache, TargetCacheEntry, CACHE_SCHEMA_VERSION};
#[cfg(feature = "pretrained")]
pub use pretrained::{PretrainedClip, PretrainedClipPaths};
pub use surrogate::{SurrogateClip, SURROGATE_CHECKPOINT_ID};

/// Content tokens kept after the start token; the end token fills slot 77.
pub const MAX_CONTENT_TOKENS: usize = 75;

#[derive(Debug, thiserror::Error)]
pub enum ClipError {
    #[error("tokenizer failure: {0}")]
    TokenizerFailure(String),
    #[error("bad image: {0}")]
    BadImage(String),
    #[error("missing weights: {0}")]
    MissingWeights(String),
    #[error("trio {trio_id}: missing asset {path}")]
    MissingAsset { trio_id: String, path: String },
    #[error("no cached targets for trio {0}")]
    CacheMiss(String),
    #[error("cache was built with checkpoint {found}, expected {expected}")]
    CheckpointMismatch { expected: String, found: String },
    #[error("cache storage failure: {0}")]
    StorageFailure(String),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl From<std::io::Error> for ClipError {
    fn from(e: std::io::Error) -> Self {
        ClipError::StorageFailure(e.to_string())
    }
}

/// The three frozen target encoders.
pub trait ClipTargets: Send + Sync {
    /// Identifies the weights; stored in and checked against cache indexes.
    fn checkpoint_id(&self) -> &str;

    /// Final hidden states of the text transformer, `77 x 768`.
    fn encode_text_raw(&self, text: &str) -> Result<EmbeddingMatrix, ClipError>;

    /// Unit-norm text projection.
    fn encode_text_projection(&self, text: &str) -> Result<Vec<f32>, ClipError>;

    /// Unit-norm image projection.
    fn encode_image_projection(&self, image: &RgbImage) -> Result<Vec<f32>, ClipError>;

    /// Raw states and projection together; backends may share one forward pass.
    fn encode_text(&self, text: &str) -> Result<(EmbeddingMatrix, Vec<f32>), ClipError> {
        Ok((
            self.encode_text_raw(text)?,
            self.encode_text_projection(text)?,
        ))
    }
}

/// Per-trio training targets, looked up by trio id.
pub trait TargetSource: Send + Sync {
    /// Unit-norm `(text, image)` projections.
    fn projections(&self, trio_id: &str) -> Result<(Vec<f32>, Vec<f32>), ClipError>;

    /// Raw `77 x 768` text states.
    fn text_raw(&self, trio_id: &str) -> Result<EmbeddingMatrix, ClipError>;
}

impl TargetSource for TargetCache {
    fn projections(&self, trio_id: &str) -> Result<(Vec<f32>, Vec<f32>), ClipError> {
        self.get_projections(trio_id)
    }

    fn text_raw(&self, trio_id: &str) -> Result<EmbeddingMatrix, ClipError> {
        Ok(self.get(trio_id)?.text_raw)
    }
}

/// In-memory projections without raw states; `text_raw` reports a cache miss.
#[derive(Debug, Clone, Default)]
pub struct ProjectionTargets {
    entries: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl ProjectionTargets {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, trio_id: impl Into<String>, text: Vec<f32>, image: Vec<f32>) {
        self.entries.insert(trio_id.into(), (text, image));
    }

    /// Encodes the caption and image of each trio with `clip`.
    pub fn encode(clip: &dyn ClipTargets, trios: &[Trio]) -> Result<Self, ClipError> {
        let mut targets = Self::new();
        for trio in trios {
            targets.insert(
                trio.trio_id.clone(),
                clip.encode_text_projection(&trio.text)?,
                clip.encode_image_projection(&trio.image)?,
            );
        }
        Ok(targets)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl TargetSource for ProjectionTargets {
    fn projections(&self, trio_id: &str) -> Result<(Vec<f32>, Vec<f32>), ClipError> {
        self.entries
            .get(trio_id)
            .cloned()
            .ok_or_else(|| ClipError::CacheMiss(trio_id.to_string()))
    }

    fn text_raw(&self, trio_id: &str) -> Result<EmbeddingMatrix, ClipError> {
        Err(ClipError::CacheMiss(trio_id.to_string()))
    }
}

/// Center square crop, the first step of CLIP image preprocessing.
pub fn center_square(image: &RgbImage) -> RgbImage {
    let (w, h) = image.dimensions();
    let side = w.min(h);
    image::imageops::crop_imm(image, (w - side) / 2, (h - side) / 2, side, side).to_image()
}
