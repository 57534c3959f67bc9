//! Projection head: 77x768 guidance matrix → unit 768-vector.
//!
//! Mean over the 77 positions, a bias-free learned 768x768 map, then L2
//! normalization. The map starts at identity plus small Gaussian noise.

use candle_core::{Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::param;
use super::EncoderError;
use crate::alignment::{row_normalize, AlignmentError, ProjectionBatch, ZERO_NORM_EPS};
use crate::types::{EmbeddingMatrix, EMBED_DIM};

/// Standard deviation of the noise added to the identity at initialization.
pub const HEAD_INIT_NOISE: f64 = 1e-3;

/// Mixed into the encoder seed so head noise is independent of encoder weights.
const HEAD_SEED_SALT: u64 = 0x68ea_d5ee_d000_0001;

pub struct ProjectionHead {
    weight: Var,
}

impl ProjectionHead {
    /// Identity plus `N(0, HEAD_INIT_NOISE^2)` noise drawn under `seed`.
    pub fn new(seed: u64, device: &Device) -> Result<Self, EncoderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ HEAD_SEED_SALT);
        let noise = Normal::new(0.0f32, HEAD_INIT_NOISE as f32).expect("finite std");
        let mut data: Vec<f32> = (0..EMBED_DIM * EMBED_DIM)
            .map(|_| noise.sample(&mut rng))
            .collect();
        for i in 0..EMBED_DIM {
            data[i * EMBED_DIM + i] += 1.0;
        }
        Self::from_data(data, device)
    }

    /// Exact identity map.
    pub fn identity(device: &Device) -> Result<Self, EncoderError> {
        let mut data = vec![0f32; EMBED_DIM * EMBED_DIM];
        for i in 0..EMBED_DIM {
            data[i * EMBED_DIM + i] = 1.0;
        }
        Self::from_data(data, device)
    }

    /// Row-major `(768, 768)` weights; output is `x W^T`.
    pub fn from_data(data: Vec<f32>, device: &Device) -> Result<Self, EncoderError> {
        let t = Tensor::from_vec(data, (EMBED_DIM, EMBED_DIM), device)?;
        Ok(Self {
            weight: Var::from_tensor(&t)?,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.elem_count()
    }

    /// `(B, 77, 768)` → normalized `(B, 768)` batch, keeping the autograd graph.
    pub fn project_batch(&self, raw: &Tensor) -> Result<ProjectionBatch, EncoderError> {
        let pooled = raw.mean(1)?;
        let mapped = pooled.matmul(&param(&self.weight).t()?)?;
        row_normalize(&ProjectionBatch::new(mapped).map_err(alignment_error)?)
            .map_err(alignment_error)
    }
}

fn alignment_error(e: AlignmentError) -> EncoderError {
    match e {
        AlignmentError::ZeroRow { norm, .. } => EncoderError::ZeroNorm { norm },
        other => EncoderError::Alignment(other),
    }
}

/// Projects a single matrix to a unit vector.
pub fn project(matrix: &EmbeddingMatrix, head: &ProjectionHead) -> Result<Vec<f32>, EncoderError> {
    let pooled = matrix.mean_row();
    let w = head
        .weight
        .as_tensor()
        .to_dtype(candle_core::DType::F64)?
        .to_vec2::<f64>()?;
    let mapped: Vec<f64> = w
        .iter()
        .map(|row| row.iter().zip(&pooled).map(|(a, &b)| a * b as f64).sum())
        .collect();
    let norm = mapped.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm.is_nan() || norm <= ZERO_NORM_EPS {
        return Err(EncoderError::ZeroNorm { norm });
    }
    Ok(mapped.iter().map(|v| (v / norm) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::SEQ_LEN;
    use candle_core::D;

    fn row_norms(t: &Tensor) -> candle_core::Result<Vec<f32>> {
        t.sqr()?.sum(D::Minus1)?.sqrt()?.to_vec1::<f32>()
    }

    #[test]
    fn parameter_count_of_bias_free_map() {
        let head = ProjectionHead::identity(&Device::Cpu).unwrap();
        assert_eq!(head.parameter_count(), 589_824);
    }

    #[test]
    fn identical_rows_project_to_direction() {
        let v: Vec<f32> = (0..EMBED_DIM).map(|i| ((i % 7) as f32) - 3.0).collect();
        let m = EmbeddingMatrix::from_vec(v.repeat(SEQ_LEN)).unwrap();
        let head = ProjectionHead::identity(&Device::Cpu).unwrap();
        let p = project(&m, &head).unwrap();
        let norm = v.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt();
        for (a, b) in p.iter().zip(&v) {
            assert!((*a as f64 - *b as f64 / norm).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_matrix_is_rejected() {
        let head = ProjectionHead::new(0, &Device::Cpu).unwrap();
        assert!(matches!(
            project(&EmbeddingMatrix::zeros(), &head),
            Err(EncoderError::ZeroNorm { .. })
        ));
    }

    #[test]
    fn batch_projection_is_unit_norm() {
        let head = ProjectionHead::new(4, &Device::Cpu).unwrap();
        let raw = Tensor::randn(0f32, 1.0, (3, SEQ_LEN, EMBED_DIM), &Device::Cpu).unwrap();
        let batch = head.project_batch(&raw).unwrap();
        for n in row_norms(batch.rows()).unwrap() {
            assert!((n - 1.0).abs() < 1e-5);
        }
    }
}
