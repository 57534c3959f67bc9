//! Noise schedule and samplers for the SD 1.5 latent space.
//!
//! The default sampler is pseudo linear multistep (PLMS) over the SD 1.5
//! `scaled_linear` schedule. It spends exactly one model evaluation per
//! timestep: the first three steps use Adams-Bashforth formulas of increasing
//! order instead of repeating a timestep to warm up.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::DiffusionError;

pub const TRAIN_TIMESTEPS: usize = 1000;
pub const BETA_START: f64 = 0.00085;
pub const BETA_END: f64 = 0.012;
pub const STEPS_OFFSET: usize = 1;
/// Largest step count whose timesteps stay inside the training range.
pub const MAX_STEPS: usize = TRAIN_TIMESTEPS - STEPS_OFFSET;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    #[default]
    Plms,
    /// Deterministic DDIM (eta = 0).
    Ddim,
}

/// Name and version recorded next to every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerPin {
    pub name: String,
    pub version: u32,
}

impl SchedulerKind {
    pub fn pin(self) -> SchedulerPin {
        let name = match self {
            SchedulerKind::Plms => "pndm-plms",
            SchedulerKind::Ddim => "ddim",
        };
        SchedulerPin {
            name: name.into(),
            version: 1,
        }
    }
}

impl std::fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SchedulerKind::Plms => "plms",
            SchedulerKind::Ddim => "ddim",
        })
    }
}

impl std::str::FromStr for SchedulerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plms" => Ok(SchedulerKind::Plms),
            "ddim" => Ok(SchedulerKind::Ddim),
            other => Err(format!(
                "unknown scheduler {other:?} (expected plms or ddim)"
            )),
        }
    }
}

/// Cumulative products of `1 - beta` for the 1000 training timesteps.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// `scaled_linear`: betas evenly spaced in square-root space.
    pub fn sd15() -> Self {
        let (lo, hi) = (BETA_START.sqrt(), BETA_END.sqrt());
        let last = (TRAIN_TIMESTEPS - 1) as f64;
        let mut acc = 1.0;
        let alphas_cumprod = (0..TRAIN_TIMESTEPS)
            .map(|i| {
                let beta = (lo + (hi - lo) * i as f64 / last).powi(2);
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Self { alphas_cumprod }
    }

    /// Signal fraction at timestep `t`; negative timesteps fall back to `t = 0`.
    pub fn alpha_cumprod(&self, t: isize) -> f64 {
        self.alphas_cumprod[t.max(0) as usize]
    }

    /// `sqrt(a_t) x0 + sqrt(1 - a_t) noise`.
    pub fn add_noise(&self, x0: &Tensor, noise: &Tensor, t: usize) -> candle_core::Result<Tensor> {
        let a = self.alpha_cumprod(t as isize);
        (x0 * a.sqrt())? + (noise * (1.0 - a).sqrt())?
    }
}

/// Descending timesteps for `steps` evaluations: `(steps - 1 - i) * (1000 / steps) + 1`.
pub fn timesteps(steps: usize) -> Result<Vec<usize>, DiffusionError> {
    if steps == 0 || steps > MAX_STEPS {
        return Err(DiffusionError::InvalidSteps {
            steps,
            max: MAX_STEPS,
        });
    }
    let ratio = TRAIN_TIMESTEPS / steps;
    Ok((0..steps).rev().map(|i| i * ratio + STEPS_OFFSET).collect())
}

/// Iterations that run on the image-to-image path: `ceil(strength * steps)`, at least one.
pub fn img2img_iterations(steps: usize, strength: f64) -> usize {
    // The small slack keeps products like 0.7 * 200 from rounding up past an integer.
    ((strength * steps as f64 - 1e-9).ceil() as usize).clamp(1, steps)
}

/// A sampler walking one descending timestep sequence.
pub struct Sampler {
    kind: SchedulerKind,
    schedule: NoiseSchedule,
    timesteps: Vec<usize>,
    ratio: usize,
    history: Vec<Tensor>,
}

impl Sampler {
    pub fn new(kind: SchedulerKind, steps: usize) -> Result<Self, DiffusionError> {
        Ok(Self {
            kind,
            schedule: NoiseSchedule::sd15(),
            timesteps: timesteps(steps)?,
            ratio: TRAIN_TIMESTEPS / steps,
            history: Vec::new(),
        })
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Moves `sample` from timestep `t` to `t - 1000/steps` given the noise estimate.
    pub fn step(
        &mut self,
        noise: &Tensor,
        t: usize,
        sample: &Tensor,
    ) -> candle_core::Result<Tensor> {
        let prev = t as isize - self.ratio as isize;
        let a_t = self.schedule.alpha_cumprod(t as isize);
        let a_prev = self.schedule.alpha_cumprod(prev);
        match self.kind {
            SchedulerKind::Ddim => {
                let x0 = ((sample - (noise * (1.0 - a_t).sqrt())?)? / a_t.sqrt())?;
                (x0 * a_prev.sqrt())? + (noise * (1.0 - a_prev).sqrt())?
            }
            SchedulerKind::Plms => {
                self.history.push(noise.clone());
                if self.history.len() > 4 {
                    self.history.remove(0);
                }
                let e = self.multistep()?;
                let sample_coeff = (a_prev / a_t).sqrt();
                let denom = a_t * (1.0 - a_prev).sqrt() + (a_t * (1.0 - a_t) * a_prev).sqrt();
                (sample * sample_coeff)? - (e * ((a_prev - a_t) / denom))?
            }
        }
    }

    /// Adams-Bashforth combination of the stored estimates, newest last.
    fn multistep(&self) -> candle_core::Result<Tensor> {
        let h = &self.history;
        let weighted = |coeffs: &[f64], denom: f64| -> candle_core::Result<Tensor> {
            let newest_first = h.iter().rev();
            let mut acc: Option<Tensor> = None;
            for (e, &c) in newest_first.zip(coeffs) {
                let term = (e * c)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => (a + term)?,
                });
            }
            acc.expect("history is nonempty") / denom
        };
        match h.len() {
            1 => Ok(h[0].clone()),
            2 => weighted(&[3.0, -1.0], 2.0),
            3 => weighted(&[23.0, -16.0, 5.0], 12.0),
            _ => weighted(&[55.0, -59.0, 37.0, -9.0], 24.0),
        }
    }
}
