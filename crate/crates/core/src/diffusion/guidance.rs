//! Classifier-free guidance pairs: building them from text, audio or noise,
//! and mixing several of them into one.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::clip::ClipTargets;
use crate::encoders::{encode, AudioEncoder};
use crate::types::{AudioWaveform, EmbeddingMatrix, EMBED_DIM, SEQ_LEN};

/// The `(unconditional, conditional)` pair handed to the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceEmbedding {
    pub unconditional: EmbeddingMatrix,
    pub conditional: EmbeddingMatrix,
}

impl GuidanceEmbedding {
    /// Stacks the pair into a `(2, 77, 768)` tensor, unconditional first.
    pub fn to_context(
        &self,
        device: &candle_core::Device,
    ) -> candle_core::Result<candle_core::Tensor> {
        candle_core::Tensor::stack(
            &[
                self.unconditional.to_tensor(device)?,
                self.conditional.to_tensor(device)?,
            ],
            0,
        )
    }
}

/// What stands in for "no input" when audio replaces the text encoder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncondPolicy {
    /// The encoder's output for an all-zero clip.
    #[default]
    SilentAudio,
    /// CLIP's raw states for the empty string.
    EmptyText,
}

impl std::fmt::Display for UncondPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UncondPolicy::SilentAudio => "silent_audio",
            UncondPolicy::EmptyText => "empty_text",
        })
    }
}

impl std::str::FromStr for UncondPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "silent_audio" => Ok(UncondPolicy::SilentAudio),
            "empty_text" => Ok(UncondPolicy::EmptyText),
            other => Err(format!(
                "unknown unconditional policy {other:?} (expected silent_audio or empty_text)"
            )),
        }
    }
}

/// Conditional states of `prompt`, unconditional states of the empty string.
pub fn guidance_from_text(
    clip: &dyn ClipTargets,
    prompt: &str,
) -> Result<GuidanceEmbedding, DiffusionError> {
    Ok(GuidanceEmbedding {
        unconditional: clip.encode_text_raw("")?,
        conditional: clip.encode_text_raw(prompt)?,
    })
}

/// Conditional output of `encoder` on `wave`; the unconditional side follows `policy`.
///
/// `clip` is only consulted under [`UncondPolicy::EmptyText`].
pub fn guidance_from_audio(
    encoder: &dyn AudioEncoder,
    wave: &AudioWaveform,
    policy: UncondPolicy,
    clip: Option<&dyn ClipTargets>,
) -> Result<GuidanceEmbedding, DiffusionError> {
    let single = |w: &AudioWaveform| -> Result<EmbeddingMatrix, DiffusionError> {
        Ok(encode(encoder, std::slice::from_ref(w))?.remove(0))
    };
    let unconditional = match policy {
        UncondPolicy::SilentAudio => single(&AudioWaveform::silence())?,
        UncondPolicy::EmptyText => {
            let clip = clip.ok_or_else(|| {
                DiffusionError::MissingWeights(
                    "the empty_text policy needs a CLIP text encoder".into(),
                )
            })?;
            clip.encode_text_raw("")?
        }
    };
    Ok(GuidanceEmbedding {
        unconditional,
        conditional: single(wave)?,
    })
}

/// Both matrices filled with i.i.d. standard normal values drawn from `seed`.
pub fn random_guidance(seed: u64) -> GuidanceEmbedding {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        let values: Vec<f32> = (0..SEQ_LEN * EMBED_DIM)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        EmbeddingMatrix::from_vec(values).expect("normal draws are finite")
    };
    let unconditional = draw();
    let conditional = draw();
    GuidanceEmbedding {
        unconditional,
        conditional,
    }
}

fn compare_values(a: &[f32], b: &[f32]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Total order on content, so the summation order never depends on input order.
fn compare_sources(a: (&GuidanceEmbedding, f64), b: (&GuidanceEmbedding, f64)) -> Ordering {
    compare_values(a.0.conditional.values(), b.0.conditional.values())
        .then_with(|| compare_values(a.0.unconditional.values(), b.0.unconditional.values()))
        .then_with(|| a.1.total_cmp(&b.1))
}

/// Weighted elementwise mean, applied to each component separately.
///
/// `weights = None` gives every source the same weight. Sources are summed in
/// a canonical order (sorted by content) in `f64`, so equal-weight mixes are
/// bitwise invariant under permutation of `sources`.
pub fn mix_guidance(
    sources: &[GuidanceEmbedding],
    weights: Option<&[f64]>,
) -> Result<GuidanceEmbedding, DiffusionError> {
    if sources.is_empty() {
        return Err(DiffusionError::EmptySources);
    }
    let weights: Vec<f64> = match weights {
        Some(w) if w.len() != sources.len() => {
            return Err(DiffusionError::WeightMismatch {
                sources: sources.len(),
                weights: w.len(),
            })
        }
        Some(w) => w.to_vec(),
        None => vec![1.0; sources.len()],
    };
    if let Some((index, &value)) = weights
        .iter()
        .enumerate()
        .find(|(_, w)| !(w.is_finite() && **w > 0.0))
    {
        return Err(DiffusionError::InvalidWeight { index, value });
    }
    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.sort_by(|&i, &j| compare_sources((&sources[i], weights[i]), (&sources[j], weights[j])));
    let total: f64 = order.iter().map(|&i| weights[i]).sum();

    let mix = |pick: fn(&GuidanceEmbedding) -> &EmbeddingMatrix| -> Result<EmbeddingMatrix, DiffusionError> {
        let mut acc = vec![0f64; SEQ_LEN * EMBED_DIM];
        for &i in &order {
            for (a, &v) in acc.iter_mut().zip(pick(&sources[i]).values()) {
                *a += weights[i] * v as f64;
            }
        }
        Ok(EmbeddingMatrix::from_vec(acc.into_iter().map(|a| (a / total) as f32).collect())?)
    };
    Ok(GuidanceEmbedding {
        unconditional: mix(|g| &g.unconditional)?,
        conditional: mix(|g| &g.conditional)?,
    })
}

/// Latent tensor shape `(channels, height, width)` for an image of `a x b` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Set when a side is not a multiple of 8; decoding then distorts slightly.
    pub truncated: bool,
}

impl LatentDims {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_FACTOR: usize = 8;

/// `(4, ⌊a/8⌋, ⌊b/8⌋)` for an `a x b` image.
pub fn latent_dims(a: usize, b: usize) -> Result<LatentDims, DiffusionError> {
    if a < LATENT_FACTOR || b < LATENT_FACTOR {
        return Err(DiffusionError::TooSmall {
            height: a,
            width: b,
        });
    }
    let truncated = a % LATENT_FACTOR != 0 || b % LATENT_FACTOR != 0;
    if truncated {
        tracing::warn!(
            height = a,
            width = b,
            "image side is not a multiple of 8; decoding will distort"
        );
    }
    Ok(LatentDims {
        channels: LATENT_CHANNELS,
        height: a / LATENT_FACTOR,
        width: b / LATENT_FACTOR,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::SurrogateClip;
    use crate::encoders::EchoEncoder;

    fn constant(v: f32) -> EmbeddingMatrix {
        EmbeddingMatrix::from_vec(vec![v; SEQ_LEN * EMBED_DIM]).unwrap()
    }

    fn pair(u: f32, c: f32) -> GuidanceEmbedding {
        GuidanceEmbedding {
            unconditional: constant(u),
            conditional: constant(c),
        }
    }

    #[test]
    fn text_guidance_of_empty_prompt_is_symmetric() {
        let clip = SurrogateClip::new();
        let g = guidance_from_text(&clip, "").unwrap();
        assert_eq!(g.conditional, g.unconditional);
        let g = guidance_from_text(&clip, "a dog barking").unwrap();
        assert_ne!(g.conditional, g.unconditional);
        assert_eq!(g, guidance_from_text(&clip, "a dog barking").unwrap());
    }

    #[test]
    fn audio_guidance_policies() {
        let clip = SurrogateClip::new();
        let mut echo = EchoEncoder::new("echo");
        let tone = crate::dataset::synth_audio(1, 0);
        echo.insert(&AudioWaveform::silence(), vec![0.5; EMBED_DIM])
            .unwrap();
        echo.insert(&tone, vec![-1.0; EMBED_DIM]).unwrap();

        let silent = guidance_from_audio(
            &echo,
            &AudioWaveform::silence(),
            UncondPolicy::SilentAudio,
            None,
        )
        .unwrap();
        assert_eq!(silent.conditional, silent.unconditional);

        let g = guidance_from_audio(&echo, &tone, UncondPolicy::EmptyText, Some(&clip)).unwrap();
        assert_eq!(
            g.unconditional,
            guidance_from_text(&clip, "").unwrap().unconditional
        );
        assert_eq!(g.conditional, constant(-1.0));

        let err = guidance_from_audio(&echo, &tone, UncondPolicy::EmptyText, None).unwrap_err();
        assert!(matches!(err, DiffusionError::MissingWeights(_)));
    }

    #[test]
    fn random_guidance_is_standard_normal_and_seeded() {
        let g = random_guidance(7);
        assert_eq!(g, random_guidance(7));
        assert_ne!(g, random_guidance(8));
        let v = g.conditional.values();
        let n = v.len() as f64;
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((0.98..1.02).contains(&var.sqrt()), "std {}", var.sqrt());
    }

    #[test]
    fn mix_hand_cases() {
        let g = random_guidance(1);
        assert_eq!(
            mix_guidance(std::slice::from_ref(&g), Some(&[1.0])).unwrap(),
            g
        );
        assert_eq!(mix_guidance(&[g.clone(), g.clone()], None).unwrap(), g);
        assert_eq!(
            mix_guidance(&[pair(0.0, 0.0), pair(2.0, 2.0)], None).unwrap(),
            pair(1.0, 1.0)
        );
        assert_eq!(
            mix_guidance(&[pair(0.0, 4.0), pair(4.0, 0.0)], Some(&[3.0, 1.0])).unwrap(),
            pair(1.0, 3.0)
        );
    }

    #[test]
    fn mix_rejects_bad_input() {
        assert!(matches!(
            mix_guidance(&[], None),
            Err(DiffusionError::EmptySources)
        ));
        assert!(matches!(
            mix_guidance(&[pair(0.0, 0.0)], Some(&[1.0, 1.0])),
            Err(DiffusionError::WeightMismatch {
                sources: 1,
                weights: 2
            })
        ));
        assert!(matches!(
            mix_guidance(&[pair(0.0, 0.0)], Some(&[0.0])),
            Err(DiffusionError::InvalidWeight { index: 0, .. })
        ));
    }

    #[test]
    fn latent_dims_floor_and_warning() {
        let d = latent_dims(512, 512).unwrap();
        assert_eq!((d.shape(), d.truncated), ((4, 64, 64), false));
        assert_eq!(latent_dims(8, 8).unwrap().shape(), (4, 1, 1));
        let d = latent_dims(511, 513).unwrap();
        assert_eq!((d.shape(), d.truncated), ((4, 63, 64), true));
        assert!(matches!(
            latent_dims(7, 512),
            Err(DiffusionError::TooSmall { .. })
        ));
    }
}
