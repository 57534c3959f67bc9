//! Optimizers with checkpointable state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoders::TensorMap;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain stochastic gradient descent, fixed learning rate.
    #[default]
    Sgd,
    /// Adam with the usual defaults (0.9, 0.999, 1e-8), no weight decay.
    Adam,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!(
                "unknown optimizer {other:?} (expected sgd or adam)"
            )),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Updates a fixed, named parameter list.
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    params: Vec<(String, Var)>,
    moments: Vec<Moments>,
    step: u64,
}

impl Optimizer {
    pub fn new(
        kind: OptimizerKind,
        learning_rate: f64,
        params: Vec<(String, Var)>,
    ) -> candle_core::Result<Self> {
        let moments = match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam => params
                .iter()
                .map(|(_, p)| {
                    Ok(Moments {
                        m: p.zeros_like()?,
                        v: p.zeros_like()?,
                    })
                })
                .collect::<candle_core::Result<_>>()?,
        };
        Ok(Self {
            kind,
            learning_rate,
            params,
            moments,
            step: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients of `loss`. Parameters without a gradient are left alone.
    pub fn backward_step(&mut self, loss: &Tensor) -> candle_core::Result<()> {
        let grads = loss.backward()?;
        self.apply(&grads)
    }

    fn apply(&mut self, grads: &GradStore) -> candle_core::Result<()> {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (_, p) in &self.params {
                    if let Some(g) = grads.get(p) {
                        p.set(&p.sub(&(g * self.learning_rate)?)?)?;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let correction1 = 1.0 - BETA1.powi(t);
                let correction2 = 1.0 - BETA2.powi(t);
                for ((_, p), state) in self.params.iter().zip(&mut self.moments) {
                    let Some(g) = grads.get(p) else { continue };
                    state.m = ((&state.m * BETA1)? + (g * (1.0 - BETA1))?)?;
                    state.v = ((&state.v * BETA2)? + (g.sqr()? * (1.0 - BETA2))?)?;
                    let m_hat = (&state.m / correction1)?;
                    let v_hat = (&state.v / correction2)?;
                    let update = (m_hat / (v_hat.sqrt()? + EPSILON)?)?;
                    p.set(&p.sub(&(update * self.learning_rate)?)?)?;
                }
            }
        }
        Ok(())
    }

    /// Moment tensors keyed `optim.m.<param>` / `optim.v.<param>`.
    pub fn state_tensors(&self) -> candle_core::Result<TensorMap> {
        let mut out = BTreeMap::new();
        for ((name, _), state) in self.params.iter().zip(&self.moments) {
            for (key, t) in [("m", &state.m), ("v", &state.v)] {
                out.insert(
                    format!("optim.{key}.{name}"),
                    (t.dims().to_vec(), t.flatten_all()?.to_vec1::<f32>()?),
                );
            }
        }
        Ok(out)
    }

    /// Restores moments captured by [`Optimizer::state_tensors`] and the step count.
    pub fn restore_state(&mut self, tensors: &TensorMap, step: u64) -> Result<(), String> {
        for ((name, _), state) in self.params.iter().zip(&mut self.moments) {
            for (key, slot) in [("m", &mut state.m), ("v", &mut state.v)] {
                let full = format!("optim.{key}.{name}");
                let (shape, data) = tensors
                    .get(&full)
                    .ok_or_else(|| format!("missing tensor {full}"))?;
                *slot = Tensor::from_slice(data, shape.as_slice(), slot.device())
                    .map_err(|e| e.to_string())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn quadratic_steps(kind: OptimizerKind, lr: f64, steps: usize) -> f32 {
        let x = Var::new(&[3.0f32, -2.0], &Device::Cpu).unwrap();
        let mut opt = Optimizer::new(kind, lr, vec![("x".into(), x.clone())]).unwrap();
        for _ in 0..steps {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
        }
        x.as_tensor()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap()
    }

    #[test]
    fn sgd_step_is_exact() {
        let x = Var::new(&[1.0f32], &Device::Cpu).unwrap();
        let mut opt =
            Optimizer::new(OptimizerKind::Sgd, 0.25, vec![("x".into(), x.clone())]).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.backward_step(&loss).unwrap();
        // x - 0.25 * 2x = 0.5
        assert_eq!(x.as_tensor().to_vec1::<f32>().unwrap(), vec![0.5]);
    }

    #[test]
    fn both_optimizers_descend() {
        assert!(quadratic_steps(OptimizerKind::Sgd, 0.1, 50) < 1e-6);
        assert!(quadratic_steps(OptimizerKind::Adam, 0.1, 200) < 1e-2);
    }

    #[test]
    fn adam_state_round_trips() {
        let x = Var::new(&[1.0f32, 2.0], &Device::Cpu).unwrap();
        let mut opt =
            Optimizer::new(OptimizerKind::Adam, 0.1, vec![("x".into(), x.clone())]).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.backward_step(&loss).unwrap();
        let state = opt.state_tensors().unwrap();
        let y = Var::new(&[0.0f32, 0.0], &Device::Cpu).unwrap();
        let mut other = Optimizer::new(OptimizerKind::Adam, 0.1, vec![("x".into(), y)]).unwrap();
        other.restore_state(&state, opt.step_count()).unwrap();
        assert_eq!(other.state_tensors().unwrap(), state);
        assert_eq!(other.step_count(), 1);
    }
}
