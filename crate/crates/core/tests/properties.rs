//! Property tests for the loss, the metrics, guidance mixing and the sampler arithmetic.

use candle_core::{Device, Tensor};
use proptest::prelude::*;

use trio_core::alignment::{
    cross_entropy_value, row_normalize, tceocs, AlignmentLoss, ProjectionBatch,
};
use trio_core::diffusion::{
    img2img_iterations, latent_dims, mix_guidance, scheduler::timesteps, GenerationRequest,
    GuidanceEmbedding, GuidanceSource, MAX_STEPS,
};
use trio_core::metrics::{mse_mean, r2_stats, PredictionSet};
use trio_core::types::{EmbeddingMatrix, EMBED_DIM, SEQ_LEN};

fn matrix(m: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, n), m)
}

/// Rows kept away from zero so normalization is well defined.
fn nonzero_rows(m: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    matrix(m, n).prop_map(|mut rows| {
        for row in &mut rows {
            row[0] += if row[0] >= 0.0 { 0.5 } else { -0.5 };
        }
        rows
    })
}

fn normalized(rows: &[Vec<f64>]) -> ProjectionBatch {
    row_normalize(&ProjectionBatch::from_rows(rows).unwrap()).unwrap()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    let (m, n) = (rows.len(), rows[0].len());
    Tensor::from_vec(rows.concat(), (m, n), &Device::Cpu).unwrap()
}

fn identity(m: usize) -> Tensor {
    Tensor::eye(m, candle_core::DType::F64, &Device::Cpu).unwrap()
}

fn loss(a: &[Vec<f64>], t: &[Vec<f64>], i: &[Vec<f64>]) -> f64 {
    AlignmentLoss::default()
        .value(&normalized(a), &normalized(t), &normalized(i))
        .unwrap()
}

type Rows = Vec<Vec<f64>>;

fn batch_triple() -> impl Strategy<Value = (Rows, Rows, Rows)> {
    (2usize..8, 2usize..6)
        .prop_flat_map(|(m, n)| (nonzero_rows(m, n), nonzero_rows(m, n), nonzero_rows(m, n)))
}

fn embedding(value: f32) -> EmbeddingMatrix {
    EmbeddingMatrix::from_vec(vec![value; SEQ_LEN * EMBED_DIM]).unwrap()
}

/// Small per-source patterns expanded to full matrices; keeps shrinking cheap.
fn guidance_set() -> impl Strategy<Value = Vec<(f32, f32, f32)>> {
    prop::collection::vec((-5.0f32..5.0, -5.0f32..5.0, -1.0f32..1.0), 1..6)
}

fn expand(set: &[(f32, f32, f32)]) -> Vec<GuidanceEmbedding> {
    set.iter()
        .map(|&(u, c, slope)| {
            let ramp: Vec<f32> = (0..SEQ_LEN * EMBED_DIM)
                .map(|k| c + slope * (k % 97) as f32 / 97.0)
                .collect();
            GuidanceEmbedding {
                unconditional: embedding(u),
                conditional: EmbeddingMatrix::from_vec(ramp).unwrap(),
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_entropy_ignores_row_shifts(logits in matrix(5, 5), shifts in prop::collection::vec(-50.0f64..50.0, 5)) {
        let shifted: Vec<Vec<f64>> = logits
            .iter()
            .zip(&shifts)
            .map(|(row, s)| row.iter().map(|v| v + s).collect())
            .collect();
        let a = cross_entropy_value(&tensor(&logits), &identity(5)).unwrap();
        let b = cross_entropy_value(&tensor(&shifted), &identity(5)).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        prop_assert!(a > 0.0);
    }

    #[test]
    fn tceocs_is_symmetric((a, b, _) in batch_triple()) {
        let ab = tceocs(&normalized(&a), &normalized(&b)).unwrap();
        let ba = tceocs(&normalized(&b), &normalized(&a)).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
    }

    #[test]
    fn loss_is_invariant_to_joint_row_permutation((a, t, i) in batch_triple(), seed in any::<u64>()) {
        let m = a.len();
        let mut order: Vec<usize> = (0..m).collect();
        let mut state = seed;
        for k in (1..m).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(k, (state >> 33) as usize % (k + 1));
        }
        let permute = |rows: &[Vec<f64>]| order.iter().map(|&j| rows[j].clone()).collect::<Vec<_>>();
        let before = loss(&a, &t, &i);
        let after = loss(&permute(&a), &permute(&t), &permute(&i));
        prop_assert!((before - after).abs() < 1e-9, "{before} vs {after}");
    }

    #[test]
    fn loss_ignores_positive_row_scaling((a, t, i) in batch_triple(), scales in prop::collection::vec(0.01f64..100.0, 8)) {
        let scaled: Vec<Vec<f64>> = a
            .iter()
            .zip(scales.iter().cycle())
            .map(|(row, s)| row.iter().map(|v| v * s).collect())
            .collect();
        let before = loss(&a, &t, &i);
        let after = loss(&scaled, &t, &i);
        prop_assert!((before - after).abs() < 1e-9, "{before} vs {after}");
    }

    #[test]
    fn mse_is_symmetric_and_zero_on_identity(p in matrix(4, 3), x in matrix(4, 3)) {
        let pxs = mse_mean(&PredictionSet::from_rows(&p, &x).unwrap()).unwrap();
        let xps = mse_mean(&PredictionSet::from_rows(&x, &p).unwrap()).unwrap();
        prop_assert!((pxs - xps).abs() < 1e-12);
        prop_assert_eq!(mse_mean(&PredictionSet::from_rows(&p, &p).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn r2_is_invariant_to_common_offsets(p in matrix(6, 3), x in nonzero_rows(6, 3), offset in -10.0f64..10.0) {
        let shift = |rows: &[Vec<f64>]| rows.iter().map(|r| r.iter().map(|v| v + offset).collect()).collect::<Vec<Vec<f64>>>();
        let base = r2_stats(&PredictionSet::from_rows(&p, &x).unwrap()).unwrap();
        let moved = r2_stats(&PredictionSet::from_rows(&shift(&p), &shift(&x)).unwrap()).unwrap();
        prop_assert_eq!(base.excluded, moved.excluded);
        if let (Some(a), Some(b)) = (base.mean.value(), moved.mean.value()) {
            prop_assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn mix_stays_within_source_bounds(set in guidance_set(), weights in prop::collection::vec(0.01f64..10.0, 6)) {
        let sources = expand(&set);
        let w = &weights[..sources.len()];
        let mixed = mix_guidance(&sources, Some(w)).unwrap();
        for k in [0usize, 1, 96, 500, SEQ_LEN * EMBED_DIM - 1] {
            let values: Vec<f32> = sources.iter().map(|g| g.conditional.values()[k]).collect();
            let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let v = mixed.conditional.values()[k];
            prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5, "{v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn weighted_mix_is_permutation_invariant(set in guidance_set(), weights in prop::collection::vec(0.01f64..10.0, 6)) {
        let sources = expand(&set);
        let w = weights[..sources.len()].to_vec();
        let forward = mix_guidance(&sources, Some(&w)).unwrap();
        let rev_sources: Vec<_> = sources.iter().rev().cloned().collect();
        let rev_weights: Vec<_> = w.iter().rev().cloned().collect();
        prop_assert_eq!(forward, mix_guidance(&rev_sources, Some(&rev_weights)).unwrap());
    }

    #[test]
    fn latent_dims_follow_the_floor_rule(a in 8usize..4096, b in 8usize..4096) {
        let d = latent_dims(a, b).unwrap();
        prop_assert_eq!(d.shape(), (4, a / 8, b / 8));
        prop_assert_eq!(d.truncated, a % 8 != 0 || b % 8 != 0);
    }

    #[test]
    fn timesteps_descend_to_one(steps in 1usize..=MAX_STEPS) {
        let t = timesteps(steps).unwrap();
        prop_assert_eq!(t.len(), steps);
        prop_assert_eq!(*t.last().unwrap(), 1);
        prop_assert!(t[0] < 1000);
        prop_assert!(t.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn strength_rounds_up(steps in 1usize..=MAX_STEPS, strength in 0.001f64..=1.0) {
        let k = img2img_iterations(steps, strength);
        let exact = strength * steps as f64;
        prop_assert!((1..=steps).contains(&k));
        prop_assert!(k as f64 >= exact - 1e-6 || k == steps);
        prop_assert!((k as f64) < exact + 1.0 || k == 1);
    }

    #[test]
    fn requests_round_trip_through_json(seed in any::<u64>(), steps in 1usize..=MAX_STEPS, scale in 0.1f64..30.0, prompt in "[a-z]{1,12}( [a-z]{1,12}){0,5}") {
        let mut r = GenerationRequest::text_to_image(vec![GuidanceSource::text(prompt), GuidanceSource::random(seed)], seed);
        r.steps = steps;
        r.guidance_scale = scale;
        r.mix_weights = Some(vec![scale, 1.0 / scale]);
        let json = serde_json::to_string(&r).unwrap();
        prop_assert_eq!(serde_json::from_str::<GenerationRequest>(&json).unwrap(), r);
    }
}
