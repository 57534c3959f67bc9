//! CLIP ViT-L/14 over a Hugging Face `model.safetensors` and `tokenizer.json`.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Linear, VarBuilder};
use candle_transformers::models::clip::text_model::{
    Activation, ClipTextConfig, ClipTextTransformer,
};
use candle_transformers::models::clip::vision_model::{ClipVisionConfig, ClipVisionTransformer};
use image::RgbImage;
use tokenizers::Tokenizer;

use super::{center_square, ClipError, ClipTargets, MAX_CONTENT_TOKENS};
use crate::types::{l2_normalize, EmbeddingMatrix, EMBED_DIM, SEQ_LEN};

const BOS_ID: u32 = 49406;
const EOS_ID: u32 = 49407;
const VISION_SIDE: u32 = 224;
const PIXEL_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const PIXEL_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

#[derive(Debug, Clone)]
pub struct PretrainedClipPaths {
    pub weights: PathBuf,
    pub tokenizer: PathBuf,
}

pub struct PretrainedClip {
    tokenizer: Tokenizer,
    text: ClipTextTransformer,
    text_projection: Linear,
    vision: ClipVisionTransformer,
    visual_projection: Linear,
    device: Device,
    checkpoint_id: String,
}

fn text_config() -> ClipTextConfig {
    ClipTextConfig {
        vocab_size: 49408,
        embed_dim: EMBED_DIM,
        activation: Activation::QuickGelu,
        intermediate_size: 3072,
        max_position_embeddings: SEQ_LEN,
        pad_with: None,
        num_hidden_layers: 12,
        num_attention_heads: 12,
        projection_dim: EMBED_DIM,
    }
}

fn vision_config() -> ClipVisionConfig {
    ClipVisionConfig {
        embed_dim: 1024,
        activation: Activation::QuickGelu,
        intermediate_size: 4096,
        num_hidden_layers: 24,
        num_attention_heads: 16,
        projection_dim: EMBED_DIM,
        num_channels: 3,
        image_size: VISION_SIDE as usize,
        patch_size: 14,
    }
}

impl PretrainedClipPaths {
    /// `model.safetensors` and `tokenizer.json` inside a Hugging Face snapshot directory.
    pub fn from_dir(dir: &Path) -> Self {
        Self {
            weights: dir.join("model.safetensors"),
            tokenizer: dir.join("tokenizer.json"),
        }
    }
}

fn require(path: &Path) -> Result<(), ClipError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(ClipError::MissingWeights(path.display().to_string()))
    }
}

impl PretrainedClip {
    pub fn load(paths: &PretrainedClipPaths, device: &Device) -> Result<Self, ClipError> {
        require(&paths.weights)?;
        require(&paths.tokenizer)?;
        let tokenizer = Tokenizer::from_file(&paths.tokenizer)
            .map_err(|e| ClipError::TokenizerFailure(e.to_string()))?;
        // SAFETY: the weights file is memory-mapped read-only and not modified while mapped.
        let vb =
            unsafe { VarBuilder::from_mmaped_safetensors(&[&paths.weights], DType::F32, device)? };
        let text = ClipTextTransformer::new(vb.pp("text_model"), &text_config())?;
        let text_projection =
            candle_nn::linear_no_bias(EMBED_DIM, EMBED_DIM, vb.pp("text_projection"))?;
        let vision = ClipVisionTransformer::new(vb.pp("vision_model"), &vision_config())?;
        let visual_projection =
            candle_nn::linear_no_bias(1024, EMBED_DIM, vb.pp("visual_projection"))?;
        let size = std::fs::metadata(&paths.weights)?.len();
        let name = paths
            .weights
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self {
            tokenizer,
            text,
            text_projection,
            vision,
            visual_projection,
            device: device.clone(),
            checkpoint_id: format!("clip-vit-large-patch14/{name}/{size}"),
        })
    }

    /// Start token, up to 75 content tokens, end token, end-token padding to 77.
    /// Returns the ids and the position of the first end token.
    fn token_ids(&self, text: &str) -> Result<(Vec<u32>, usize), ClipError> {
        let encoding = self
            .tokenizer
            .encode(text, false)
            .map_err(|e| ClipError::TokenizerFailure(e.to_string()))?;
        let content: Vec<u32> = encoding
            .get_ids()
            .iter()
            .copied()
            .filter(|&id| id != BOS_ID && id != EOS_ID)
            .take(MAX_CONTENT_TOKENS)
            .collect();
        let mut ids = Vec::with_capacity(SEQ_LEN);
        ids.push(BOS_ID);
        ids.extend(&content);
        let eos = ids.len();
        ids.resize(SEQ_LEN, EOS_ID);
        Ok((ids, eos))
    }

    fn text_states(&self, text: &str) -> Result<(Tensor, usize), ClipError> {
        let (ids, eos) = self.token_ids(text)?;
        let ids = Tensor::new(ids.as_slice(), &self.device)?.unsqueeze(0)?;
        Ok((
            self.text.forward_with_mask(&ids, usize::MAX)?.squeeze(0)?,
            eos,
        ))
    }

    fn projection(&self, states: &Tensor, eos: usize) -> Result<Vec<f32>, ClipError> {
        let pooled = states.get(eos)?.unsqueeze(0)?;
        let mut v = self
            .text_projection
            .forward(&pooled)?
            .squeeze(0)?
            .to_vec1::<f32>()?;
        l2_normalize(&mut v);
        Ok(v)
    }

    fn pixel_values(&self, image: &RgbImage) -> Result<Tensor, ClipError> {
        if image.width() == 0 || image.height() == 0 {
            return Err(ClipError::BadImage("empty image".into()));
        }
        let square = center_square(image);
        let resized = image::imageops::resize(
            &square,
            VISION_SIDE,
            VISION_SIDE,
            image::imageops::FilterType::CatmullRom,
        );
        let side = VISION_SIDE as usize;
        let mut data = vec![0f32; 3 * side * side];
        for (x, y, px) in resized.enumerate_pixels() {
            for c in 0..3 {
                let v = px.0[c] as f32 / 255.0;
                data[c * side * side + y as usize * side + x as usize] =
                    (v - PIXEL_MEAN[c]) / PIXEL_STD[c];
            }
        }
        Ok(Tensor::from_vec(data, (1, 3, side, side), &self.device)?)
    }
}

impl ClipTargets for PretrainedClip {
    fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }

    fn encode_text_raw(&self, text: &str) -> Result<EmbeddingMatrix, ClipError> {
        let (states, _) = self.text_states(text)?;
        EmbeddingMatrix::from_tensor(&states)
            .map_err(|e| ClipError::TokenizerFailure(e.to_string()))
    }

    fn encode_text_projection(&self, text: &str) -> Result<Vec<f32>, ClipError> {
        let (states, eos) = self.text_states(text)?;
        self.projection(&states, eos)
    }

    fn encode_image_projection(&self, image: &RgbImage) -> Result<Vec<f32>, ClipError> {
        let pixels = self.pixel_values(image)?;
        let features = self.vision.forward(&pixels)?;
        let mut v = self
            .visual_projection
            .forward(&features)?
            .squeeze(0)?
            .to_vec1::<f32>()?;
        l2_normalize(&mut v);
        Ok(v)
    }

    fn encode_text(&self, text: &str) -> Result<(EmbeddingMatrix, Vec<f32>), ClipError> {
        let (states, eos) = self.text_states(text)?;
        let projection = self.projection(&states, eos)?;
        let raw = EmbeddingMatrix::from_tensor(&states)
            .map_err(|e| ClipError::TokenizerFailure(e.to_string()))?;
        Ok((raw, projection))
    }
}
