//! Generation requests, guidance resolution and the sampling loop.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::Engine;
use candle_core::Tensor;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::backend::DiffusionBackend;
use super::guidance::{
    guidance_from_audio, guidance_from_text, latent_dims, mix_guidance, random_guidance,
    GuidanceEmbedding, UncondPolicy,
};
use super::scheduler::{img2img_iterations, Sampler, SchedulerKind, SchedulerPin, MAX_STEPS};
use super::DiffusionError;
use crate::clip::ClipTargets;
use crate::dataset::{decode_image, decode_wav, encode_png, validate_text};
use crate::encoders::AudioEncoder;
use crate::types::{AudioWaveform, IMAGE_SIDE};

pub const SIDECAR_SCHEMA_VERSION: u32 = 1;
/// Encoder id that routes text payloads through CLIP.
pub const TEXT_ENCODER_ID: &str = "clip";
/// Encoder id of the standard-normal baseline.
pub const RANDOM_ENCODER_ID: &str = "random";
pub const MAX_REPEAT: usize = 16;

/// A file path or inline base64 bytes; exactly one must be set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediaInput {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base64: Option<String>,
}

impl MediaInput {
    pub fn from_path(path: impl Into<PathBuf>) -> Self {
        Self {
            path: Some(path.into()),
            base64: None,
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self {
            path: None,
            base64: Some(base64::engine::general_purpose::STANDARD.encode(bytes)),
        }
    }

    fn check(&self) -> Result<(), String> {
        match (&self.path, &self.base64) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err("set exactly one of path and base64".into()),
        }
    }

    fn bytes(&self) -> Result<(Vec<u8>, String), String> {
        self.check()?;
        match (&self.path, &self.base64) {
            (Some(path), _) => fs::read(path)
                .map(|b| (b, path.display().to_string()))
                .map_err(|e| format!("{}: {e}", path.display())),
            (_, Some(data)) => base64::engine::general_purpose::STANDARD
                .decode(data.trim())
                .map(|b| (b, "inline data".to_string()))
                .map_err(|e| format!("invalid base64: {e}")),
            _ => unreachable!("checked above"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    /// One-second 16 kHz mono PCM16 WAV.
    Audio(MediaInput),
    Text {
        text: String,
    },
    Random {
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSource {
    pub encoder_id: String,
    pub payload: Payload,
}

impl GuidanceSource {
    pub fn text(prompt: impl Into<String>) -> Self {
        Self {
            encoder_id: TEXT_ENCODER_ID.into(),
            payload: Payload::Text {
                text: prompt.into(),
            },
        }
    }

    pub fn audio(encoder_id: impl Into<String>, input: MediaInput) -> Self {
        Self {
            encoder_id: encoder_id.into(),
            payload: Payload::Audio(input),
        }
    }

    pub fn random(seed: u64) -> Self {
        Self {
            encoder_id: RANDOM_ENCODER_ID.into(),
            payload: Payload::Random { seed },
        }
    }
}

fn default_repeat() -> usize {
    1
}

/// Everything needed to reproduce a set of generated images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRequest {
    pub guidance_sources: Vec<GuidanceSource>,
    /// Positive mixing weights, one per source; equal when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix_weights: Option<Vec<f64>>,
    /// 512x512 RGB PNG; switches to image-to-image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_image: Option<MediaInput>,
    pub guidance_scale: f64,
    pub steps: usize,
    /// Fraction of the schedule re-run on the init image, in `(0, 1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strength: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repeat")]
    pub repeat: usize,
    #[serde(default)]
    pub uncond_policy: UncondPolicy,
    #[serde(default)]
    pub scheduler: SchedulerKind,
}

/// One rejected request field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

/// All problems found in a request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestErrors(pub Vec<FieldError>);

impl fmt::Display for RequestErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|e| format!("{}: {}", e.field, e.message))
            .collect();
        f.write_str(&parts.join("; "))
    }
}

impl RequestErrors {
    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.0.push(FieldError {
            field: field.into(),
            message: message.into(),
        });
    }

    fn into_result(self) -> Result<(), RequestErrors> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(self)
        }
    }
}

/// Defaults for one generation mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDefaults {
    pub guidance_scale: f64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strength: Option<f64>,
}

/// Defaults and limits served to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationDefaults {
    pub text_to_image: ModeDefaults,
    pub image_to_image: ModeDefaults,
    pub uncond_policy: UncondPolicy,
    pub scheduler: SchedulerPin,
    pub max_steps: usize,
    pub max_repeat: usize,
    pub image_side: u32,
    pub text_encoder_id: String,
    pub random_encoder_id: String,
}

impl Default for GenerationDefaults {
    fn default() -> Self {
        Self {
            text_to_image: ModeDefaults {
                guidance_scale: 7.5,
                steps: 100,
                strength: None,
            },
            image_to_image: ModeDefaults {
                guidance_scale: 10.0,
                steps: 200,
                strength: Some(0.7),
            },
            uncond_policy: UncondPolicy::default(),
            scheduler: SchedulerKind::default().pin(),
            max_steps: MAX_STEPS,
            max_repeat: MAX_REPEAT,
            image_side: IMAGE_SIDE,
            text_encoder_id: TEXT_ENCODER_ID.into(),
            random_encoder_id: RANDOM_ENCODER_ID.into(),
        }
    }
}

impl GenerationRequest {
    /// Text, audio or noise sources without an init image, at 7.5 / 100 steps.
    pub fn text_to_image(sources: Vec<GuidanceSource>, seed: u64) -> Self {
        let d = GenerationDefaults::default().text_to_image;
        Self {
            guidance_sources: sources,
            mix_weights: None,
            init_image: None,
            guidance_scale: d.guidance_scale,
            steps: d.steps,
            strength: None,
            seed,
            repeat: 1,
            uncond_policy: UncondPolicy::default(),
            scheduler: SchedulerKind::default(),
        }
    }

    /// Sources plus an init image, at 10 / 0.7 / 200 steps.
    pub fn image_to_image(sources: Vec<GuidanceSource>, init_image: MediaInput, seed: u64) -> Self {
        let d = GenerationDefaults::default().image_to_image;
        Self {
            init_image: Some(init_image),
            guidance_scale: d.guidance_scale,
            steps: d.steps,
            strength: d.strength,
            ..Self::text_to_image(sources, seed)
        }
    }

    /// Checks every field that does not need the encoder registry.
    pub fn validate(&self) -> Result<(), RequestErrors> {
        let mut errors = RequestErrors(Vec::new());
        if self.guidance_sources.is_empty() {
            errors.push(
                "guidance_sources",
                "at least one guidance source is required",
            );
        }
        for (i, source) in self.guidance_sources.iter().enumerate() {
            if source.encoder_id.trim().is_empty() {
                errors.push(
                    format!("guidance_sources[{i}].encoder_id"),
                    "must not be empty",
                );
            }
            let field = format!("guidance_sources[{i}].payload");
            match &source.payload {
                Payload::Audio(input) => {
                    if let Err(e) = input.check() {
                        errors.push(field, e);
                    }
                }
                Payload::Text { text } => {
                    if let Err(e) = validate_text(text) {
                        errors.push(field, e.to_string());
                    }
                }
                Payload::Random { .. } => {}
            }
        }
        if let Some(weights) = &self.mix_weights {
            if weights.len() != self.guidance_sources.len() {
                errors.push(
                    "mix_weights",
                    format!(
                        "{} weights for {} sources",
                        weights.len(),
                        self.guidance_sources.len()
                    ),
                );
            }
            if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                errors.push("mix_weights", "weights must be positive and finite");
            }
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale > 0.0) {
            errors.push("guidance_scale", "must be a positive number");
        }
        if self.steps == 0 || self.steps > MAX_STEPS {
            errors.push("steps", format!("must be between 1 and {MAX_STEPS}"));
        }
        match (&self.init_image, self.strength) {
            (Some(input), strength) => {
                if let Err(e) = input.check() {
                    errors.push("init_image", e);
                }
                match strength {
                    None => errors.push("strength", "required with init_image"),
                    Some(s) if !(s > 0.0 && s <= 1.0) => {
                        errors.push("strength", "must be in (0, 1]")
                    }
                    Some(_) => {}
                }
            }
            (None, Some(_)) => errors.push("strength", "only applies with init_image"),
            (None, None) => {}
        }
        if self.repeat == 0 || self.repeat > MAX_REPEAT {
            errors.push("repeat", format!("must be between 1 and {MAX_REPEAT}"));
        }
        errors.into_result()
    }

    /// Whether any input is read from a server-side path.
    pub fn uses_paths(&self) -> bool {
        let source_paths = self
            .guidance_sources
            .iter()
            .any(|s| matches!(&s.payload, Payload::Audio(m) if m.path.is_some()));
        source_paths || self.init_image.as_ref().is_some_and(|m| m.path.is_some())
    }

    /// Mode label from the source kinds: `A`udio, `T`ext, `R`andom, plus `I` with an init image.
    pub fn mode(&self) -> String {
        let has = |f: fn(&Payload) -> bool| self.guidance_sources.iter().any(|s| f(&s.payload));
        let mut mode = String::new();
        for (letter, present) in [
            ('A', has(|p| matches!(p, Payload::Audio(_)))),
            ('T', has(|p| matches!(p, Payload::Text { .. }))),
            ('R', has(|p| matches!(p, Payload::Random { .. }))),
            ('I', self.init_image.is_some()),
        ] {
            if present {
                mode.push(letter);
            }
        }
        mode
    }

    /// Distinct encoder ids in source order, joined by `+` and made filename-safe.
    pub fn encoder_label(&self) -> String {
        let mut seen = Vec::<&str>::new();
        for s in &self.guidance_sources {
            if !seen.contains(&s.encoder_id.as_str()) {
                seen.push(&s.encoder_id);
            }
        }
        seen.join("+")
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || "+-.".contains(c) {
                    c
                } else {
                    '-'
                }
            })
            .collect()
    }

    /// `{mode}_{encoders}_{seed}_{index}`.
    pub fn output_stem(&self, index: usize) -> String {
        format!(
            "{}_{}_{}_{}",
            self.mode(),
            self.encoder_label(),
            self.seed,
            index
        )
    }

    /// Seed of the `index`-th repeat.
    pub fn image_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add(index as u64)
    }

    /// Denoising iterations each image will run.
    pub fn planned_iterations(&self) -> usize {
        match (&self.init_image, self.strength) {
            (Some(_), Some(strength)) => img2img_iterations(self.steps, strength),
            _ => self.steps,
        }
    }
}

/// Maps encoder ids to the models that turn payloads into guidance.
#[derive(Clone, Default)]
pub struct GuidanceResolver {
    clip: Option<Arc<dyn ClipTargets>>,
    audio: BTreeMap<String, Arc<dyn AudioEncoder>>,
}

impl GuidanceResolver {
    pub fn new(clip: Option<Arc<dyn ClipTargets>>) -> Self {
        Self {
            clip,
            audio: BTreeMap::new(),
        }
    }

    pub fn insert_audio_encoder(&mut self, id: impl Into<String>, encoder: Arc<dyn AudioEncoder>) {
        self.audio.insert(id.into(), encoder);
    }

    pub fn with_audio_encoder(
        mut self,
        id: impl Into<String>,
        encoder: Arc<dyn AudioEncoder>,
    ) -> Self {
        self.insert_audio_encoder(id, encoder);
        self
    }

    pub fn audio_encoder_ids(&self) -> impl Iterator<Item = &str> {
        self.audio.keys().map(String::as_str)
    }

    pub fn has_text_encoder(&self) -> bool {
        self.clip.is_some()
    }

    /// Checks that every source names an encoder able to read its payload.
    pub fn check(&self, request: &GenerationRequest) -> Result<(), RequestErrors> {
        let mut errors = RequestErrors(Vec::new());
        for (i, source) in request.guidance_sources.iter().enumerate() {
            let field = format!("guidance_sources[{i}].encoder_id");
            let id = source.encoder_id.as_str();
            match &source.payload {
                Payload::Text { .. } if id != TEXT_ENCODER_ID => errors.push(
                    field,
                    format!("text payloads use encoder {TEXT_ENCODER_ID:?}"),
                ),
                Payload::Text { .. } if self.clip.is_none() => {
                    errors.push(field, "no text encoder is loaded")
                }
                Payload::Random { .. } if id != RANDOM_ENCODER_ID => errors.push(
                    field,
                    format!("random payloads use encoder {RANDOM_ENCODER_ID:?}"),
                ),
                Payload::Audio(_) if !self.audio.contains_key(id) => {
                    errors.push(field, format!("unknown audio encoder {id:?}"))
                }
                _ => {}
            }
        }
        if request.uncond_policy == UncondPolicy::EmptyText
            && self.clip.is_none()
            && request
                .guidance_sources
                .iter()
                .any(|s| matches!(s.payload, Payload::Audio(_)))
        {
            errors.push("uncond_policy", "empty_text needs a text encoder");
        }
        errors.into_result()
    }

    /// Guidance of one source.
    pub fn resolve(
        &self,
        source: &GuidanceSource,
        policy: UncondPolicy,
    ) -> Result<GuidanceEmbedding, DiffusionError> {
        match &source.payload {
            Payload::Text { text } => {
                let clip = self
                    .clip
                    .as_deref()
                    .ok_or_else(|| DiffusionError::UnknownEncoder(source.encoder_id.clone()))?;
                guidance_from_text(clip, text)
            }
            Payload::Random { seed } => Ok(random_guidance(*seed)),
            Payload::Audio(input) => {
                let encoder = self
                    .audio
                    .get(&source.encoder_id)
                    .ok_or_else(|| DiffusionError::UnknownEncoder(source.encoder_id.clone()))?;
                let wave = load_audio(input)?;
                guidance_from_audio(encoder.as_ref(), &wave, policy, self.clip.as_deref())
            }
        }
    }

    /// Mixed guidance of all sources in `request`.
    pub fn guidance(
        &self,
        request: &GenerationRequest,
    ) -> Result<GuidanceEmbedding, DiffusionError> {
        let sources = request
            .guidance_sources
            .iter()
            .map(|s| self.resolve(s, request.uncond_policy))
            .collect::<Result<Vec<_>, _>>()?;
        mix_guidance(&sources, request.mix_weights.as_deref())
    }
}

fn invalid(field: &str, message: String) -> DiffusionError {
    DiffusionError::InvalidRequest(RequestErrors(vec![FieldError {
        field: field.into(),
        message,
    }]))
}

fn load_audio(input: &MediaInput) -> Result<AudioWaveform, DiffusionError> {
    let (bytes, label) = input.bytes().map_err(|e| invalid("payload", e))?;
    decode_wav(&bytes, &label).map_err(|e| invalid("payload", e.to_string()))
}

fn load_init_image(input: &MediaInput) -> Result<RgbImage, DiffusionError> {
    let (bytes, label) = input.bytes().map_err(|e| invalid("init_image", e))?;
    decode_image(&bytes, &label).map_err(|e| invalid("init_image", e.to_string()))
}

/// Sampling parameters for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderParams {
    /// Zero ignores the conditional component entirely.
    pub guidance_scale: f64,
    pub steps: usize,
    pub strength: Option<f64>,
    pub seed: u64,
    pub scheduler: SchedulerKind,
}

/// Samples one image; returns it with the number of denoising iterations run.
///
/// `init_latents` switches to image-to-image: the init latents are noised to
/// the strength point and only the remaining iterations run.
pub fn render(
    backend: &dyn DiffusionBackend,
    guidance: &GuidanceEmbedding,
    params: &RenderParams,
    init_latents: Option<&Tensor>,
    on_step: &mut dyn FnMut(usize, usize),
) -> Result<(RgbImage, usize), DiffusionError> {
    let side = IMAGE_SIDE as usize;
    let dims = latent_dims(side, side)?;
    let (c, h, w) = dims.shape();
    let device = backend.device();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise: Vec<f32> = (0..c * h * w)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let noise = Tensor::from_vec(noise, (1, c, h, w), device)?;

    let mut sampler = Sampler::new(params.scheduler, params.steps)?;
    let (start, mut latents) = match init_latents {
        Some(init) => {
            let strength = params.strength.unwrap_or(1.0);
            let start = params.steps - img2img_iterations(params.steps, strength);
            let t = sampler.timesteps()[start];
            (start, sampler.schedule().add_noise(init, &noise, t)?)
        }
        None => (0, noise),
    };
    let context = guidance.to_context(device)?;
    let timesteps = sampler.timesteps()[start..].to_vec();
    let total = timesteps.len();
    for (i, &t) in timesteps.iter().enumerate() {
        let doubled = Tensor::cat(&[&latents, &latents], 0)?;
        let noise_pred = backend.predict_noise(&doubled, t, &context)?;
        let uncond = noise_pred.narrow(0, 0, 1)?;
        let cond = noise_pred.narrow(0, 1, 1)?;
        let guided = (&uncond + ((cond - &uncond)? * params.guidance_scale)?)?;
        latents = sampler.step(&guided, t, &latents)?;
        on_step(i + 1, total);
    }
    Ok((backend.decode_latents(&latents)?, total))
}

/// Position within a multi-image generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub image: usize,
    pub images: usize,
    pub step: usize,
    pub steps: usize,
}

impl Progress {
    /// Completed fraction over all images.
    pub fn fraction(&self) -> f64 {
        let total = (self.images * self.steps).max(1);
        (self.image * self.steps + self.step) as f64 / total as f64
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedImage {
    pub index: usize,
    pub seed: u64,
    pub image: RgbImage,
    /// Denoising iterations actually executed.
    pub iterations: usize,
}

/// Runs a full request: validation, guidance, then `repeat` images with seeds `seed + index`.
pub fn generate(
    backend: &dyn DiffusionBackend,
    resolver: &GuidanceResolver,
    request: &GenerationRequest,
    on_progress: &mut dyn FnMut(Progress),
) -> Result<Vec<GeneratedImage>, DiffusionError> {
    request.validate().map_err(DiffusionError::InvalidRequest)?;
    resolver
        .check(request)
        .map_err(DiffusionError::InvalidRequest)?;
    let guidance = resolver.guidance(request)?;
    let init_latents = match &request.init_image {
        Some(input) => Some(backend.encode_image(&load_init_image(input)?)?),
        None => None,
    };
    let steps = request.planned_iterations();
    let mut images = Vec::with_capacity(request.repeat);
    for index in 0..request.repeat {
        let params = RenderParams {
            guidance_scale: request.guidance_scale,
            steps: request.steps,
            strength: request.strength,
            seed: request.image_seed(index),
            scheduler: request.scheduler,
        };
        let mut on_step = |step: usize, _: usize| {
            on_progress(Progress {
                image: index,
                images: request.repeat,
                step,
                steps,
            })
        };
        let (image, iterations) = render(
            backend,
            &guidance,
            &params,
            init_latents.as_ref(),
            &mut on_step,
        )?;
        images.push(GeneratedImage {
            index,
            seed: params.seed,
            image,
            iterations,
        });
    }
    Ok(images)
}

/// Reproducibility record written next to each PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub schema_version: u32,
    pub file: String,
    pub index: usize,
    pub seed: u64,
    pub mode: String,
    pub encoders: String,
    pub backend: String,
    pub scheduler: SchedulerPin,
    pub iterations: usize,
    pub request: GenerationRequest,
}

/// Writes `{stem}.png` and `{stem}.json` per image; returns the PNG paths.
pub fn write_outputs(
    dir: &Path,
    backend_name: &str,
    request: &GenerationRequest,
    images: &[GeneratedImage],
) -> Result<Vec<PathBuf>, DiffusionError> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(images.len());
    for generated in images {
        let stem = request.output_stem(generated.index);
        let png = dir.join(format!("{stem}.png"));
        fs::write(&png, encode_png(&generated.image))?;
        let sidecar = Sidecar {
            schema_version: SIDECAR_SCHEMA_VERSION,
            file: format!("{stem}.png"),
            index: generated.index,
            seed: generated.seed,
            mode: request.mode(),
            encoders: request.encoder_label(),
            backend: backend_name.to_string(),
            scheduler: request.scheduler.pin(),
            iterations: generated.iterations,
            request: request.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| DiffusionError::Io(e.to_string()))?;
        fs::write(dir.join(format!("{stem}.json")), json)?;
        paths.push(png);
    }
    Ok(paths)
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar, DiffusionError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| DiffusionError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::SurrogateClip;
    use crate::dataset::{encode_wav, synth_audio, synth_image};
    use crate::diffusion::ToyBackend;
    use crate::encoders::EchoEncoder;
    use crate::types::EMBED_DIM;

    fn resolver() -> GuidanceResolver {
        let mut echo = EchoEncoder::new("echo");
        echo.insert(&AudioWaveform::silence(), vec![0.0; EMBED_DIM])
            .unwrap();
        echo.insert(&synth_audio(1, 0), vec![0.7; EMBED_DIM])
            .unwrap();
        GuidanceResolver::new(Some(Arc::new(SurrogateClip::new())))
            .with_audio_encoder("echo", Arc::new(echo))
    }

    fn small(sources: Vec<GuidanceSource>) -> GenerationRequest {
        GenerationRequest {
            steps: 4,
            ..GenerationRequest::text_to_image(sources, 3)
        }
    }

    #[test]
    fn validation_names_fields() {
        let mut r = small(vec![]);
        r.steps = 0;
        r.guidance_scale = 0.0;
        r.repeat = 0;
        r.strength = Some(0.5);
        let fields: Vec<String> = r
            .validate()
            .unwrap_err()
            .0
            .into_iter()
            .map(|e| e.field)
            .collect();
        for f in [
            "guidance_sources",
            "steps",
            "guidance_scale",
            "repeat",
            "strength",
        ] {
            assert!(fields.iter().any(|x| x == f), "{f} missing from {fields:?}");
        }
        let mut r = small(vec![GuidanceSource::text("a dog")]);
        r.init_image = Some(MediaInput::default());
        let fields: Vec<String> = r
            .validate()
            .unwrap_err()
            .0
            .into_iter()
            .map(|e| e.field)
            .collect();
        assert_eq!(fields, vec!["init_image", "strength"]);
    }

    #[test]
    fn resolver_rejects_unknown_encoders() {
        let r = small(vec![
            GuidanceSource::audio("missing", MediaInput::from_bytes(b"x")),
            GuidanceSource {
                encoder_id: "clip".into(),
                payload: Payload::Random { seed: 1 },
            },
        ]);
        let errors = resolver().check(&r).unwrap_err().0;
        assert_eq!(errors.len(), 2);
        assert!(errors[0].message.contains("missing"));
    }

    #[test]
    fn mode_and_stem() {
        let wav = MediaInput::from_bytes(&encode_wav(&synth_audio(1, 0)));
        let r = GenerationRequest::image_to_image(
            vec![
                GuidanceSource::audio("echo", wav),
                GuidanceSource::text("a dog barking"),
            ],
            MediaInput::from_path("init.png"),
            42,
        );
        assert_eq!(r.mode(), "ATI");
        assert_eq!(r.output_stem(1), "ATI_echo+clip_42_1");
        assert_eq!(r.planned_iterations(), 140);
        assert!(r.uses_paths());
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<GenerationRequest>(&json).unwrap(), r);
    }

    #[test]
    fn generation_is_deterministic_and_repeats_differ() {
        let backend = ToyBackend::new();
        let mut r = small(vec![GuidanceSource::text("children talking and playing")]);
        r.repeat = 2;
        let mut events = Vec::new();
        let a = generate(&backend, &resolver(), &r, &mut |p| events.push(p)).unwrap();
        let b = generate(&backend, &resolver(), &r, &mut |_| {}).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(encode_png(&a[0].image), encode_png(&b[0].image));
        assert_ne!(a[0].image, a[1].image);
        assert_eq!((a[0].seed, a[1].seed), (3, 4));
        assert_eq!(events.len(), 8);
        assert_eq!(events.last().unwrap().fraction(), 1.0);
    }

    #[test]
    fn image_to_image_counts_iterations() {
        let backend = ToyBackend::new();
        let init = MediaInput::from_bytes(&encode_png(&synth_image(2, 0)));
        let mut r = GenerationRequest::image_to_image(vec![GuidanceSource::random(5)], init, 1);
        r.steps = 10;
        r.strength = Some(0.35);
        let out = generate(&backend, &resolver(), &r, &mut |_| {}).unwrap();
        assert_eq!(out[0].iterations, 4);
    }

    #[test]
    fn zero_scale_ignores_conditional() {
        let backend = ToyBackend::new();
        let params = RenderParams {
            guidance_scale: 0.0,
            steps: 5,
            strength: None,
            seed: 9,
            scheduler: SchedulerKind::Plms,
        };
        let a = random_guidance(1);
        let b = GuidanceEmbedding {
            unconditional: a.unconditional.clone(),
            conditional: random_guidance(2).conditional,
        };
        let (img_a, _) = render(&backend, &a, &params, None, &mut |_, _| {}).unwrap();
        let (img_b, _) = render(&backend, &b, &params, None, &mut |_, _| {}).unwrap();
        assert_eq!(img_a, img_b);
        let scaled = RenderParams {
            guidance_scale: 7.5,
            ..params
        };
        let (img_c, _) = render(&backend, &a, &scaled, None, &mut |_, _| {}).unwrap();
        let (img_d, _) = render(&backend, &b, &scaled, None, &mut |_, _| {}).unwrap();
        assert_ne!(img_c, img_d);
    }

    #[test]
    fn outputs_and_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        let backend = ToyBackend::new();
        let wav = MediaInput::from_bytes(&encode_wav(&synth_audio(1, 0)));
        let r = small(vec![GuidanceSource::audio("echo", wav)]);
        let images = generate(&backend, &resolver(), &r, &mut |_| {}).unwrap();
        let paths = write_outputs(dir.path(), backend.name(), &r, &images).unwrap();
        assert_eq!(paths[0].file_name().unwrap(), "A_echo_3_0.png");
        let sidecar = read_sidecar(&paths[0].with_extension("json")).unwrap();
        assert_eq!(sidecar.request, r);
        assert_eq!(sidecar.iterations, 4);
        assert_eq!(sidecar.scheduler.name, "pndm-plms");
        let again = generate(&backend, &resolver(), &sidecar.request, &mut |_| {}).unwrap();
        assert_eq!(fs::read(&paths[0]).unwrap(), encode_png(&again[0].image));
    }
}
