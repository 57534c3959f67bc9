//! Seeded inputs shared by the benchmarks.

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trio_core::diffusion::{random_guidance, GuidanceEmbedding};
use trio_core::types::EMBED_DIM;
use trio_core::{AudioWaveform, ProjectionBatch};

/// `m` unit-norm rows of width 768.
pub fn projection_batch(m: usize, seed: u64) -> ProjectionBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f32> = (0..m * EMBED_DIM)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let rows = Tensor::from_vec(values, (m, EMBED_DIM), &Device::Cpu).expect("shape matches");
    let norms = rows
        .sqr()
        .and_then(|r| r.sum_keepdim(1))
        .and_then(|r| r.sqrt())
        .expect("row norms");
    let unit = rows
        .broadcast_div(&norms)
        .expect("random rows have nonzero norm");
    ProjectionBatch::normalized(unit).expect("rows were just normalized")
}

/// `m` rows of width `n` with values in `[-2, 2)`.
pub fn matrix(m: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

pub fn guidance_set(n: usize, seed: u64) -> Vec<GuidanceEmbedding> {
    (0..n as u64).map(|i| random_guidance(seed + i)).collect()
}

pub fn waveforms(n: usize) -> Vec<AudioWaveform> {
    (0..n)
        .map(|i| trio_core::dataset::synth_audio(3, i))
        .collect()
}
