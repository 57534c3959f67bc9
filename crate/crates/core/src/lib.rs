//! Audio encoders that imitate the CLIP ViT-L/14 embedding space, the
//! contrastive objective that trains them, the evaluation battery, and the
//! bridge that feeds their 77x768 outputs to a latent diffusion denoiser.

pub mod alignment;
pub mod clip;
pub mod dataset;
pub mod diffusion;
pub mod encoders;
pub mod metrics;
pub mod trainer;
pub mod types;

pub use alignment::{AlignmentError, AlignmentLoss, ProjectionBatch, SimilarityMatrix};
pub use encoders::{AudioEncoder, EncoderError, EncoderSpec};
pub use metrics::{MetricsError, MetricsReport, Stat};
pub use types::{AudioWaveform, EmbeddingMatrix, ValueError};
