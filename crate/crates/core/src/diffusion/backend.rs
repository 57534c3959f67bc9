//! The denoiser/VAE interface and a small deterministic reference backend.

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::guidance::{LATENT_CHANNELS, LATENT_FACTOR};
use super::DiffusionError;
use crate::types::EMBED_DIM;

/// Latents are stored multiplied by this factor, as in SD 1.5.
pub const VAE_SCALE: f64 = 0.18215;

/// Noise predictor plus latent encoder/decoder.
pub trait DiffusionBackend: Send + Sync {
    fn name(&self) -> &str;

    fn device(&self) -> &Device;

    /// Noise estimates for `(B, 4, h, w)` latents at timestep `t` under a
    /// `(B, 77, 768)` context; item `i` of the output depends only on item `i` of the inputs.
    fn predict_noise(
        &self,
        latents: &Tensor,
        t: usize,
        context: &Tensor,
    ) -> Result<Tensor, DiffusionError>;

    /// Scaled `(1, 4, H/8, W/8)` latents of an RGB image.
    fn encode_image(&self, image: &RgbImage) -> Result<Tensor, DiffusionError>;

    /// RGB image of scaled `(1, 4, h, w)` latents.
    fn decode_latents(&self, latents: &Tensor) -> Result<RgbImage, DiffusionError>;
}

/// `(1, 3, H, W)` tensor with values in `[-1, 1]`.
pub fn image_to_tensor(image: &RgbImage, device: &Device) -> candle_core::Result<Tensor> {
    let (w, h) = image.dimensions();
    let data: Vec<f32> = image
        .as_raw()
        .iter()
        .map(|&b| b as f32 / 127.5 - 1.0)
        .collect();
    Tensor::from_vec(data, (h as usize, w as usize, 3), device)?
        .permute((2, 0, 1))?
        .unsqueeze(0)
}

/// Inverse of [`image_to_tensor`], clamping to `[-1, 1]` and rounding.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage, DiffusionError> {
    let (_, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(DiffusionError::Backend(format!(
            "expected 3 image channels, got {c}"
        )));
    }
    let pixels: Vec<u8> = t
        .get(0)?
        .permute((1, 2, 0))?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?
        .into_iter()
        .map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect();
    RgbImage::from_raw(w as u32, h as u32, pixels).ok_or_else(|| {
        DiffusionError::Backend("decoded buffer does not match its dimensions".into())
    })
}

/// Cheap stand-in for SD 1.5, deterministic on CPU.
///
/// The "VAE" is 8x8 average pooling (RGB plus their mean as a fourth channel)
/// and bilinear upsampling back. The denoiser is `tanh` of the latents
/// plus a per-channel bias read from the context through a fixed random map,
/// so different guidance gives different images and the guidance scale matters.
pub struct ToyBackend {
    context_map: Tensor,
    device: Device,
}

pub const TOY_BACKEND_NAME: &str = "toy-v1";

impl ToyBackend {
    pub fn new() -> Self {
        let device = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(0x746f_7962);
        let scale = 4.0 / (EMBED_DIM as f32).sqrt();
        let values: Vec<f32> = (0..EMBED_DIM * LATENT_CHANNELS)
            .map(|_| StandardNormal.sample(&mut rng))
            .map(|v: f32| v * scale)
            .collect();
        let context_map =
            Tensor::from_vec(values, (EMBED_DIM, LATENT_CHANNELS), &device).expect("fixed shape");
        Self {
            context_map,
            device,
        }
    }
}

impl Default for ToyBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl DiffusionBackend for ToyBackend {
    fn name(&self) -> &str {
        TOY_BACKEND_NAME
    }

    fn device(&self) -> &Device {
        &self.device
    }

    fn predict_noise(
        &self,
        latents: &Tensor,
        t: usize,
        context: &Tensor,
    ) -> Result<Tensor, DiffusionError> {
        let (b, c, _, _) = latents.dims4()?;
        let bias = context
            .mean(1)?
            .matmul(&self.context_map)?
            .reshape((b, c, 1, 1))?;
        let time = 1.0 + t as f64 / 1000.0;
        Ok((latents * 0.8)?.broadcast_add(&(bias * time)?)?.tanh()?)
    }

    fn encode_image(&self, image: &RgbImage) -> Result<Tensor, DiffusionError> {
        let pooled = image_to_tensor(image, &self.device)?.avg_pool2d(LATENT_FACTOR)?;
        let luma = pooled.mean_keepdim(1)?;
        Ok((Tensor::cat(&[pooled, luma], 1)? * VAE_SCALE)?)
    }

    fn decode_latents(&self, latents: &Tensor) -> Result<RgbImage, DiffusionError> {
        let (_, _, h, w) = latents.dims4()?;
        let rgb = (latents / VAE_SCALE)?.narrow(1, 0, 3)?;
        let up = rgb.upsample_bilinear2d(h * LATENT_FACTOR, w * LATENT_FACTOR, false)?;
        tensor_to_image(&up)
    }
}

/// Mean absolute pixel difference in `[0, 1]` units.
pub fn mean_abs_error(a: &RgbImage, b: &RgbImage) -> f64 {
    let total: u64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| x.abs_diff(y) as u64)
        .sum();
    total as f64 / (a.as_raw().len() as f64 * 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_image;

    #[test]
    fn image_tensor_round_trip_is_exact() {
        let img = synth_image(3, 1);
        let t = image_to_tensor(&img, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 512, 512]);
        assert_eq!(tensor_to_image(&t).unwrap(), img);
    }

    #[test]
    fn toy_latent_round_trip_is_close() {
        let backend = ToyBackend::new();
        for index in 0..32 {
            let img = synth_image(9, index);
            let latents = backend.encode_image(&img).unwrap();
            assert_eq!(latents.dims(), &[1, 4, 64, 64]);
            let back = backend.decode_latents(&latents).unwrap();
            let mae = mean_abs_error(&img, &back);
            assert!(mae < 0.1, "image {index}: {mae}");
        }
    }

    #[test]
    fn toy_noise_is_per_item() {
        let backend = ToyBackend::new();
        let d = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (1, 4, 8, 8), &d).unwrap();
        let ctx_a = Tensor::zeros((1, 77, 768), DType::F32, &d).unwrap();
        let ctx_b = Tensor::ones((1, 77, 768), DType::F32, &d).unwrap();
        let single = backend.predict_noise(&x, 500, &ctx_a).unwrap();
        let pair = backend
            .predict_noise(
                &Tensor::cat(&[&x, &x], 0).unwrap(),
                500,
                &Tensor::cat(&[&ctx_a, &ctx_b], 0).unwrap(),
            )
            .unwrap();
        let first = pair.get(0).unwrap().unsqueeze(0).unwrap();
        let diff = (first - &single)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(diff, 0.0);
        let other = (pair.get(1).unwrap() - pair.get(0).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap();
        assert!(other.to_scalar::<f32>().unwrap() > 0.0);
    }
}
