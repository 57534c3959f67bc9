//! Bridge from encoder outputs into latent diffusion: guidance construction
//! and mixing, the sampler, the denoiser backends and the generation loop.

mod backend;
mod guidance;
mod pipeline;
pub mod scheduler;
#[cfg(feature = "pretrained")]
mod sd15;

pub use backend::{
    image_to_tensor, mean_abs_error, tensor_to_image, DiffusionBackend, ToyBackend,
    TOY_BACKEND_NAME, VAE_SCALE,
};
pub use guidance::{
    guidance_from_audio, guidance_from_text, latent_dims, mix_guidance, random_guidance,
    GuidanceEmbedding, LatentDims, UncondPolicy, LATENT_CHANNELS, LATENT_FACTOR,
};
pub use pipeline::{
    generate, read_sidecar, render, write_outputs, FieldError, GeneratedImage, GenerationDefaults,
    GenerationRequest, GuidanceResolver, GuidanceSource, MediaInput, ModeDefaults, Payload,
    Progress, RenderParams, RequestErrors, Sidecar, MAX_REPEAT, RANDOM_ENCODER_ID,
    SIDECAR_SCHEMA_VERSION, TEXT_ENCODER_ID,
};
pub use scheduler::{img2img_iterations, SchedulerKind, SchedulerPin, MAX_STEPS};
#[cfg(feature = "pretrained")]
pub use sd15::{Sd15Backend, Sd15Paths, SD15_BACKEND_NAME};

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("at least one guidance source is required")]
    EmptySources,
    #[error("{weights} mixing weights for {sources} sources")]
    WeightMismatch { sources: usize, weights: usize },
    #[error("mixing weight {index} is {value}, expected a positive finite number")]
    InvalidWeight { index: usize, value: f64 },
    #[error("image {height}x{width} is smaller than one latent cell (8x8)")]
    TooSmall { height: usize, width: usize },
    #[error("steps must be between 1 and {max}, got {steps}")]
    InvalidSteps { steps: usize, max: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(RequestErrors),
    #[error("unknown encoder {0:?}")]
    UnknownEncoder(String),
    #[error("missing weights: {0}")]
    MissingWeights(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("storage failure: {0}")]
    Io(String),
    #[error(transparent)]
    Clip(#[from] crate::clip::ClipError),
    #[error(transparent)]
    Encoder(#[from] crate::encoders::EncoderError),
    #[error(transparent)]
    Value(#[from] crate::types::ValueError),
    #[error("device failure: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl From<std::io::Error> for DiffusionError {
    fn from(e: std::io::Error) -> Self {
        DiffusionError::Io(e.to_string())
    }
}
