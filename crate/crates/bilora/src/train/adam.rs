//! Adam optimizer over named parameters. Moment buffers live here, keyed
//! by parameter name, so the optimizer can outlive any particular batch
//! and serialization stays the trainer's concern.

use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// First and second moment estimates for one parameter.
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: moments are tracked in 64-bit regardless of the
/// parameter scalar so the update arithmetic is uniform.
pub struct AdamState {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: u64,
    slots: BTreeMap<String, Slot>,
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            epsilon,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Moment buffers for one parameter, once it has taken a step.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.slots
            .get(name)
            .map(|s| (s.m.as_slice(), s.v.as_slice()))
    }

    /// Apply one update to every listed parameter that requires gradients
    /// and has an accumulated gradient buffer; everything else is left
    /// untouched. Consumed gradients are cleared.
    pub fn step<F: Scalar>(&mut self, params: &[(String, Tensor<F>)], lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, tensor) in params {
            if !tensor.requires_grad() {
                continue;
            }
            let Some(grad) = tensor.grad() else {
                continue;
            };
            if grad.iter().any(|g| !g.as_f64().is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter {name}"
                )));
            }
            let n = tensor.numel();
            if grad.len() != n {
                return Err(Error::contract(
                    "adam_step",
                    format!("gradient of {name} has {} entries, expected {n}", grad.len()),
                ));
            }
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            if slot.m.len() != n {
                return Err(Error::contract(
                    "adam_step",
                    format!("moment buffers of {name} no longer match its shape"),
                ));
            }
            let mut data = tensor.to_vec();
            for i in 0..n {
                let g = grad[i].as_f64();
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                let theta = data[i].as_f64() - lr * m_hat / (v_hat.sqrt() + self.epsilon);
                data[i] = F::c(theta);
            }
            tensor.set_data(data)?;
            tensor.zero_grad();
        }
        Ok(())
    }
}
