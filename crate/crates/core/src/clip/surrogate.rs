//! Deterministic stand-in for CLIP when pretrained weights are absent.
//!
//! Words are hashed to fixed Gaussian embeddings. Raw text states are causal
//! running means of the token embeddings (plus a position code), standardized
//! per position, so later tokens never change earlier positions. Projections
//! are fixed random linear maps of a bag of words (text) or a 16x16 color
//! thumbnail (image). The outputs have the right shapes, norms, determinism
//! and truncation behavior, but carry no semantics.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{center_square, ClipError, ClipTargets, MAX_CONTENT_TOKENS};
use crate::types::{l2_normalize, EmbeddingMatrix, EMBED_DIM, SEQ_LEN};

pub const SURROGATE_CHECKPOINT_ID: &str = "surrogate-clip-v1";

const THUMB: usize = 16;
const BOS: u64 = 0x5374_6172_7454_6f6b;
const EOS: u64 = 0x456e_6454_6f6b_656e;
const POSITION_SALT: u64 = 0x506f_7369_7469_6f6e;

pub struct SurrogateClip {
    text_map: Vec<f32>,
    image_map: Vec<f32>,
    positions: Vec<f32>,
}

impl Default for SurrogateClip {
    fn default() -> Self {
        Self::new()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn gaussian(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Lowercased alphanumeric words, truncated to the content-token limit.
pub fn surrogate_tokens(text: &str) -> Vec<u64> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .take(MAX_CONTENT_TOKENS)
        .map(|w| fnv1a(w.to_lowercase().as_bytes()))
        .collect()
}

fn mat_vec(m: &[f32], v: &[f64]) -> Vec<f32> {
    m.chunks_exact(EMBED_DIM)
        .map(|row| row.iter().zip(v).map(|(&a, &b)| a as f64 * b).sum::<f64>() as f32)
        .collect()
}

fn normalized(mut v: Vec<f32>, what: &str) -> Result<Vec<f32>, ClipError> {
    let norm = l2_normalize(&mut v);
    if norm.is_nan() || norm <= 1e-12 {
        return Err(ClipError::BadImage(format!(
            "{what} projection has zero norm"
        )));
    }
    Ok(v)
}

impl SurrogateClip {
    pub fn new() -> Self {
        Self {
            text_map: gaussian(fnv1a(b"text-projection"), EMBED_DIM * EMBED_DIM),
            image_map: gaussian(fnv1a(b"image-projection"), EMBED_DIM * EMBED_DIM),
            positions: gaussian(POSITION_SALT, SEQ_LEN * EMBED_DIM),
        }
    }
}

impl ClipTargets for SurrogateClip {
    fn checkpoint_id(&self) -> &str {
        SURROGATE_CHECKPOINT_ID
    }

    fn encode_text_raw(&self, text: &str) -> Result<EmbeddingMatrix, ClipError> {
        let content = surrogate_tokens(text);
        let mut sequence = Vec::with_capacity(SEQ_LEN);
        sequence.push(BOS);
        sequence.extend(&content);
        sequence.resize(SEQ_LEN, EOS);

        let mut out = Vec::with_capacity(SEQ_LEN * EMBED_DIM);
        let mut running = vec![0f64; EMBED_DIM];
        let mut cached: Option<(u64, Vec<f32>)> = None;
        for (p, &tok) in sequence.iter().enumerate() {
            let emb = match &cached {
                Some((t, e)) if *t == tok => e.clone(),
                _ => {
                    let e = gaussian(tok, EMBED_DIM);
                    cached = Some((tok, e.clone()));
                    e
                }
            };
            for (r, &e) in running.iter_mut().zip(&emb) {
                *r += e as f64;
            }
            let pos = &self.positions[p * EMBED_DIM..(p + 1) * EMBED_DIM];
            let row: Vec<f64> = running
                .iter()
                .zip(pos)
                .map(|(&r, &q)| r / (p + 1) as f64 + 0.5 * q as f64)
                .collect();
            let mean = row.iter().sum::<f64>() / EMBED_DIM as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / EMBED_DIM as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            out.extend(row.iter().map(|v| ((v - mean) * inv) as f32));
        }
        EmbeddingMatrix::from_vec(out).map_err(|e| ClipError::TokenizerFailure(e.to_string()))
    }

    fn encode_text_projection(&self, text: &str) -> Result<Vec<f32>, ClipError> {
        let mut content = surrogate_tokens(text);
        if content.is_empty() {
            content.push(EOS);
        }
        let mut bag = vec![0f64; EMBED_DIM];
        for &tok in &content {
            for (b, e) in bag.iter_mut().zip(gaussian(tok, EMBED_DIM)) {
                *b += e as f64;
            }
        }
        normalized(mat_vec(&self.text_map, &bag), "text")
    }

    fn encode_image_projection(&self, image: &RgbImage) -> Result<Vec<f32>, ClipError> {
        let square = center_square(image);
        let side = square.width() as usize;
        if side < THUMB {
            return Err(ClipError::BadImage(format!(
                "image {}x{} is smaller than {THUMB}x{THUMB}",
                image.width(),
                image.height()
            )));
        }
        let mut thumb = Vec::with_capacity(THUMB * THUMB * 3);
        for ty in 0..THUMB {
            let (y0, y1) = (ty * side / THUMB, (ty + 1) * side / THUMB);
            for tx in 0..THUMB {
                let (x0, x1) = (tx * side / THUMB, (tx + 1) * side / THUMB);
                let mut sums = [0u64; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let px = square.get_pixel(x as u32, y as u32).0;
                        for c in 0..3 {
                            sums[c] += px[c] as u64;
                        }
                    }
                }
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                for s in sums {
                    thumb.push(s as f64 / count / 255.0 - 0.5);
                }
            }
        }
        normalized(mat_vec(&self.image_map, &thumb), "image")
    }
}
