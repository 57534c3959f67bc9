//! Stable Diffusion 1.5 U-Net and VAE over pretrained safetensors files.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::stable_diffusion::unet_2d::UNet2DConditionModel;
use candle_transformers::models::stable_diffusion::vae::{AutoEncoderKL, AutoEncoderKLConfig};
use candle_transformers::models::stable_diffusion::StableDiffusionConfig;
use image::RgbImage;

use super::backend::{image_to_tensor, tensor_to_image, DiffusionBackend, VAE_SCALE};
use super::guidance::LATENT_CHANNELS;
use super::DiffusionError;
use crate::types::IMAGE_SIDE;

pub const SD15_BACKEND_NAME: &str = "sd15";

#[derive(Debug, Clone)]
pub struct Sd15Paths {
    /// `unet/diffusion_pytorch_model.safetensors`
    pub unet: PathBuf,
    /// `vae/diffusion_pytorch_model.safetensors`
    pub vae: PathBuf,
}

impl Sd15Paths {
    /// The diffusers layout of a `stable-diffusion-v1-5` snapshot directory.
    pub fn from_dir(dir: &Path) -> Self {
        Self {
            unet: dir.join("unet").join("diffusion_pytorch_model.safetensors"),
            vae: dir.join("vae").join("diffusion_pytorch_model.safetensors"),
        }
    }

    pub fn check(&self) -> Result<(), DiffusionError> {
        for path in [&self.unet, &self.vae] {
            if !path.is_file() {
                return Err(DiffusionError::MissingWeights(path.display().to_string()));
            }
        }
        Ok(())
    }
}

pub struct Sd15Backend {
    unet: UNet2DConditionModel,
    vae: AutoEncoderKL,
    device: Device,
}

fn vae_config() -> AutoEncoderKLConfig {
    AutoEncoderKLConfig {
        block_out_channels: vec![128, 256, 512, 512],
        layers_per_block: 2,
        latent_channels: LATENT_CHANNELS,
        norm_num_groups: 32,
        use_quant_conv: true,
        use_post_quant_conv: true,
    }
}

/// Loads the VAE with the log-variance half of `quant_conv` forced to a huge
/// negative constant. The encoder's sample then equals the posterior mean, so
/// image-to-image runs do not draw from candle's unseeded generator.
fn load_mean_vae(path: &Path, device: &Device) -> Result<AutoEncoderKL, DiffusionError> {
    let mut tensors = candle_core::safetensors::load(path, device)?;
    let latent = LATENT_CHANNELS;
    let weight = tensors
        .get("quant_conv.weight")
        .ok_or_else(|| {
            DiffusionError::MissingWeights(format!("{}: quant_conv.weight", path.display()))
        })?
        .to_dtype(DType::F32)?;
    let bias = tensors
        .get("quant_conv.bias")
        .ok_or_else(|| {
            DiffusionError::MissingWeights(format!("{}: quant_conv.bias", path.display()))
        })?
        .to_dtype(DType::F32)?;
    let mean_weight = weight.narrow(0, 0, latent)?;
    let weight = Tensor::cat(&[mean_weight.clone(), mean_weight.zeros_like()?], 0)?;
    let bias = Tensor::cat(
        &[
            bias.narrow(0, 0, latent)?,
            Tensor::full(-1e4f32, latent, device)?,
        ],
        0,
    )?;
    tensors.insert("quant_conv.weight".into(), weight);
    tensors.insert("quant_conv.bias".into(), bias);
    let vb = VarBuilder::from_tensors(tensors, DType::F32, device);
    Ok(AutoEncoderKL::new(vb, 3, 3, vae_config())?)
}

impl Sd15Backend {
    pub fn load(paths: &Sd15Paths, device: &Device) -> Result<Self, DiffusionError> {
        paths.check()?;
        let side = IMAGE_SIDE as usize;
        let config = StableDiffusionConfig::v1_5(None, Some(side), Some(side));
        let unet = config.build_unet(&paths.unet, device, LATENT_CHANNELS, false, DType::F32)?;
        let vae = load_mean_vae(&paths.vae, device)?;
        Ok(Self {
            unet,
            vae,
            device: device.clone(),
        })
    }
}

impl DiffusionBackend for Sd15Backend {
    fn name(&self) -> &str {
        SD15_BACKEND_NAME
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
        Ok(self.unet.forward(latents, t as f64, context)?)
    }

    fn encode_image(&self, image: &RgbImage) -> Result<Tensor, DiffusionError> {
        let pixels = image_to_tensor(image, &self.device)?;
        Ok((self.vae.encode(&pixels)?.sample()? * VAE_SCALE)?)
    }

    fn decode_latents(&self, latents: &Tensor) -> Result<RgbImage, DiffusionError> {
        let pixels = self.vae.decode(&(latents / VAE_SCALE)?)?;
        tensor_to_image(&pixels)
    }
}
