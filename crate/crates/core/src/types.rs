//! Shared value types: one-second PCM clips and 77x768 guidance matrices.

use candle_core::{Device, Tensor};

pub const SAMPLE_RATE: u32 = 16_000;
/// One second of mono audio.
pub const CLIP_SAMPLES: usize = 16_000;
/// Token positions in a CLIP text embedding.
pub const SEQ_LEN: usize = 77;
/// Hidden width of CLIP ViT-L/14 text states and projections.
pub const EMBED_DIM: usize = 768;
/// Divisor that maps PCM16 samples into roughly [-1, 1].
pub const PCM_SCALE: f32 = 32767.0;
/// Side length of the RGB images in a trio.
pub const IMAGE_SIDE: u32 = 512;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValueError {
    #[error("audio clip must have {CLIP_SAMPLES} samples, got {0}")]
    WrongLength(usize),
    #[error("sample {index} = {value} is outside the signed 16-bit range")]
    SampleOutOfRange { index: usize, value: i64 },
    #[error("embedding must be {SEQ_LEN}x{EMBED_DIM}, got {0:?}")]
    WrongShape(Vec<usize>),
    #[error("embedding has a non-finite entry at flat index {0}")]
    NonFinite(usize),
}

/// Exactly one second of 16 kHz mono PCM16 audio.
#[derive(Clone, PartialEq, Eq)]
pub struct AudioWaveform {
    samples: Vec<i16>,
}

impl std::fmt::Debug for AudioWaveform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let peak = self
            .samples
            .iter()
            .map(|s| s.unsigned_abs())
            .max()
            .unwrap_or(0);
        f.debug_struct("AudioWaveform")
            .field("samples", &self.samples.len())
            .field("peak", &peak)
            .finish()
    }
}

impl AudioWaveform {
    pub fn new(samples: Vec<i16>) -> Result<Self, ValueError> {
        if samples.len() != CLIP_SAMPLES {
            return Err(ValueError::WrongLength(samples.len()));
        }
        Ok(Self { samples })
    }

    /// Accepts wider integers, rejecting anything outside `i16`.
    pub fn from_i64(samples: &[i64]) -> Result<Self, ValueError> {
        let narrowed = samples
            .iter()
            .enumerate()
            .map(|(index, &value)| {
                i16::try_from(value).map_err(|_| ValueError::SampleOutOfRange { index, value })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(narrowed)
    }

    pub fn silence() -> Self {
        Self {
            samples: vec![0; CLIP_SAMPLES],
        }
    }

    pub fn samples(&self) -> &[i16] {
        &self.samples
    }

    /// Stacks raw sample values (not yet divided by 32767) into a `(B, 16000)` f32 tensor.
    pub fn batch_tensor(batch: &[AudioWaveform], device: &Device) -> candle_core::Result<Tensor> {
        let mut flat = Vec::with_capacity(batch.len() * CLIP_SAMPLES);
        for wave in batch {
            flat.extend(wave.samples.iter().map(|&s| s as f32));
        }
        Tensor::from_vec(flat, (batch.len(), CLIP_SAMPLES), device)
    }
}

/// A finite 77x768 matrix: the guidance currency shared by every encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn from_vec(values: Vec<f32>) -> Result<Self, ValueError> {
        if values.len() != SEQ_LEN * EMBED_DIM {
            return Err(ValueError::WrongShape(vec![values.len()]));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ValueError::NonFinite(i));
        }
        Ok(Self { values })
    }

    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; SEQ_LEN * EMBED_DIM],
        }
    }

    /// Reads a `(77, 768)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self, ValueError> {
        if t.dims() != [SEQ_LEN, EMBED_DIM] {
            return Err(ValueError::WrongShape(t.dims().to_vec()));
        }
        let values = t
            .to_dtype(candle_core::DType::F32)
            .and_then(|t| t.flatten_all())
            .and_then(|t| t.to_vec1::<f32>())
            .map_err(|_| ValueError::WrongShape(t.dims().to_vec()))?;
        Self::from_vec(values)
    }

    /// Splits a `(B, 77, 768)` tensor into matrices.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<Self>, ValueError> {
        let dims = t.dims();
        if dims.len() != 3 || dims[1] != SEQ_LEN || dims[2] != EMBED_DIM {
            return Err(ValueError::WrongShape(dims.to_vec()));
        }
        let flat = t
            .to_dtype(candle_core::DType::F32)
            .and_then(|t| t.flatten_all())
            .and_then(|t| t.to_vec1::<f32>())
            .map_err(|_| ValueError::WrongShape(dims.to_vec()))?;
        flat.chunks_exact(SEQ_LEN * EMBED_DIM)
            .map(|c| Self::from_vec(c.to_vec()))
            .collect()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn row(&self, position: usize) -> &[f32] {
        &self.values[position * EMBED_DIM..(position + 1) * EMBED_DIM]
    }

    pub fn to_tensor(&self, device: &Device) -> candle_core::Result<Tensor> {
        Tensor::from_slice(&self.values, (SEQ_LEN, EMBED_DIM), device)
    }

    /// Mean over the 77 positions.
    pub fn mean_row(&self) -> Vec<f32> {
        let mut acc = vec![0f64; EMBED_DIM];
        for row in self.values.chunks_exact(EMBED_DIM) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        acc.into_iter()
            .map(|a| (a / SEQ_LEN as f64) as f32)
            .collect()
    }
}

/// L2-normalizes a vector in place; returns the original norm.
pub fn l2_normalize(v: &mut [f32]) -> f64 {
    let norm = v
        .iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
    norm
}
