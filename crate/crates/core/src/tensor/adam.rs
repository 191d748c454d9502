//! Adam optimizer with bias correction and optional global gradient-norm
//! clipping.

use super::nn::LayerParams;
use super::{Element, Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm ceiling across the whole parameter group; `None`
    /// disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

#[derive(Clone)]
struct Slot<E: Element> {
    m: Vec<E>,
    v: Vec<E>,
}

/// Optimizer state for one parameter group. Parameters are matched by their
/// position in the group, so callers must pass the same parameter list in the
/// same order on every step.
#[derive(Clone)]
pub struct Adam<E: Element> {
    pub config: AdamConfig,
    step_count: u64,
    slots: Vec<Slot<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step_count: 0,
            slots: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one Adam update to every parameter in the group and clear their
    /// gradients. Errors if any parameter has no populated gradient.
    pub fn step(&mut self, params: &mut [&mut LayerParams<E>]) -> Result<(), TensorError> {
        if self.slots.is_empty() {
            for p in params.iter() {
                self.slots.push(Slot {
                    m: vec![E::zero(); p.value.numel()],
                    v: vec![E::zero(); p.value.numel()],
                });
            }
        }
        assert_eq!(self.slots.len(), params.len(), "parameter group changed size");

        for p in params.iter() {
            if p.grad.is_none() {
                return Err(TensorError::MissingGrad(p.name.clone()));
            }
        }

        // Global norm clip across the whole group, f64 accumulation.
        let mut scale = E::one();
        if let Some(max_norm) = self.config.max_grad_norm {
            let mut sq = 0.0f64;
            for p in params.iter() {
                for &g in p.grad.as_ref().unwrap() {
                    let gf = g.as_f64();
                    sq += gf * gf;
                }
            }
            let norm = sq.sqrt();
            if norm > max_norm {
                scale = E::of_f64(max_norm / norm);
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let beta1 = E::of_f64(self.config.beta1);
        let beta2 = E::of_f64(self.config.beta2);
        let lr = E::of_f64(self.config.lr);
        let eps = E::of_f64(self.config.eps);
        let bc1 = E::one() - beta1.powi(t);
        let bc2 = E::one() - beta2.powi(t);

        for (p, slot) in params.iter_mut().zip(self.slots.iter_mut()) {
            let grad = p.grad.as_ref().unwrap();
            debug_assert_eq!(grad.len(), p.value.numel());
            let mut out = p.value.data().to_vec();
            for i in 0..out.len() {
                let g = grad[i] * scale;
                slot.m[i] = beta1 * slot.m[i] + (E::one() - beta1) * g;
                slot.v[i] = beta2 * slot.v[i] + (E::one() - beta2) * g * g;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                out[i] = out[i] - lr * mhat / (vhat.sqrt() + eps);
            }
            let shape = p.value.shape().to_vec();
            p.set_value(Tensor::new(out, &shape));
            p.grad = None;
        }
        Ok(())
    }

    /// Serialize (step_count, m, v) as f64 for checkpointing.
    pub fn state(&self) -> (u64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let m = self
            .slots
            .iter()
            .map(|s| s.m.iter().map(|v| v.as_f64()).collect())
            .collect();
        let v = self
            .slots
            .iter()
            .map(|s| s.v.iter().map(|v| v.as_f64()).collect())
            .collect();
        (self.step_count, m, v)
    }

    pub fn restore(&mut self, step_count: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.step_count = step_count;
        self.slots = m
            .into_iter()
            .zip(v)
            .map(|(ms, vs)| Slot {
                m: ms.into_iter().map(E::of_f64).collect(),
                v: vs.into_iter().map(E::of_f64).collect(),
            })
            .collect();
    }
}
