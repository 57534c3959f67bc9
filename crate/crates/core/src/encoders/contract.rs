//! Conformance checks for any [`AudioEncoder`].

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_output, AudioEncoder, EncoderError};
use crate::types::{AudioWaveform, CLIP_SAMPLES};

/// Batch sizes exercised by the shape and finiteness checks.
pub const CONTRACT_BATCH_SIZES: [usize; 3] = [1, 2, 17];
/// Joint vs one-by-one encoding tolerance, relative to the output scale.
pub const PACKING_TOLERANCE: f64 = 1e-5;
/// Largest output magnitude accepted for full-scale input.
pub const FULL_SCALE_BOUND: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub encoder: String,
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn record(&mut self, name: &str, outcome: Result<String, String>) {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.checks.push(CheckResult {
            name: name.into(),
            passed,
            detail,
        });
    }
}

/// Random valid clips: uniform noise at a random peak level.
pub fn random_waveforms(n: usize, rng: &mut ChaCha8Rng) -> Vec<AudioWaveform> {
    (0..n)
        .map(|_| {
            let peak: i16 = rng.random_range(100..=i16::MAX);
            let samples = (0..CLIP_SAMPLES)
                .map(|_| rng.random_range(-peak..=peak))
                .collect();
            AudioWaveform::new(samples).expect("exact length")
        })
        .collect()
}

fn flat(t: &Tensor) -> Result<Vec<f32>, EncoderError> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

fn describe(e: EncoderError) -> String {
    e.to_string()
}

/// Runs every check; failures become report entries rather than errors.
pub fn validate_contract(encoder: &dyn AudioEncoder, seed: u64) -> ConformanceReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ConformanceReport {
        encoder: encoder.name().to_string(),
        checks: Vec::new(),
    };

    let mut shape_notes = Vec::new();
    let mut finite_notes = Vec::new();
    let mut shape_ok = true;
    let mut finite_ok = true;
    for &size in &CONTRACT_BATCH_SIZES {
        let batch = random_waveforms(size, &mut rng);
        match encoder.encode_batch(&batch) {
            Ok(out) => match check_output(&out, size) {
                Ok(()) => shape_notes.push(format!("{size}: ok")),
                Err(e @ EncoderError::WrongOutputShape { .. }) => {
                    shape_ok = false;
                    shape_notes.push(format!("{size}: {e}"));
                }
                Err(e) => {
                    shape_notes.push(format!("{size}: ok"));
                    finite_ok = false;
                    finite_notes.push(format!("{size}: {e}"));
                }
            },
            Err(e) => {
                shape_ok = false;
                finite_ok = false;
                shape_notes.push(format!("{size}: {e}"));
                finite_notes.push(format!("{size}: {e}"));
            }
        }
    }
    let join = |v: &[String]| v.join("; ");
    report.record(
        "shape",
        if shape_ok {
            Ok(join(&shape_notes))
        } else {
            Err(join(&shape_notes))
        },
    );
    report.record(
        "finite",
        if finite_ok {
            Ok("all entries finite".into())
        } else {
            Err(join(&finite_notes))
        },
    );

    let pair = random_waveforms(2, &mut rng);
    let joint = encoder.encode_batch(&pair).map_err(describe);

    report.record(
        "determinism",
        (|| {
            let first = flat(joint.as_ref().map_err(Clone::clone)?).map_err(describe)?;
            let again = flat(&encoder.encode_batch(&pair).map_err(describe)?).map_err(describe)?;
            if first == again {
                Ok("repeat encoding is bitwise identical".into())
            } else {
                Err("repeat encoding differs".into())
            }
        })(),
    );

    report.record(
        "batch_packing",
        (|| {
            let joint = flat(joint.as_ref().map_err(Clone::clone)?).map_err(describe)?;
            let mut single = Vec::with_capacity(joint.len());
            for w in &pair {
                single.extend(
                    flat(
                        &encoder
                            .encode_batch(std::slice::from_ref(w))
                            .map_err(describe)?,
                    )
                    .map_err(describe)?,
                );
            }
            if single.len() != joint.len() {
                return Err(format!("sizes differ: {} vs {}", single.len(), joint.len()));
            }
            let scale = joint.iter().fold(1f64, |m, v| m.max(v.abs() as f64));
            let diff = joint
                .iter()
                .zip(&single)
                .fold(0f64, |m, (a, b)| m.max((a - b).abs() as f64));
            if diff <= PACKING_TOLERANCE * scale {
                Ok(format!("max difference {diff:.3e}"))
            } else {
                Err(format!(
                    "max difference {diff:.3e} exceeds {:.1e}",
                    PACKING_TOLERANCE * scale
                ))
            }
        })(),
    );

    report.record(
        "input_scaling",
        (|| {
            let extremes = vec![
                AudioWaveform::new(vec![i16::MAX; CLIP_SAMPLES]).expect("length"),
                AudioWaveform::new(vec![i16::MIN; CLIP_SAMPLES]).expect("length"),
                AudioWaveform::new(
                    (0..CLIP_SAMPLES)
                        .map(|i| if i % 2 == 0 { i16::MAX } else { i16::MIN })
                        .collect(),
                )
                .expect("length"),
            ];
            let out = encoder.encode_batch(&extremes).map_err(describe)?;
            check_output(&out, extremes.len()).map_err(describe)?;
            let values = flat(&out).map_err(describe)?;
            let peak = values.iter().fold(0f64, |m, v| m.max(v.abs() as f64));
            if peak <= FULL_SCALE_BOUND {
                Ok(format!("full-scale peak output {peak:.3e}"))
            } else {
                Err(format!(
                    "full-scale peak output {peak:.3e} exceeds {FULL_SCALE_BOUND:.0e}; samples may not be divided by 32767"
                ))
            }
        })(),
    );
    report
}
