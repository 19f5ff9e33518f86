//! AdamW with decoupled weight decay.
//!
//! The decay `p *= 1 - lr * wd` is applied to the pre-step value, separate
//! from the gradient-based update. Moment buffers and per-parameter step
//! counts are created lazily, so a parameter that receives no gradient in a
//! step (an entirely absent modality) is left completely untouched.

use std::collections::HashMap;

use crate::error::{McvaeError, Result};

use super::params::{ParamId, Params};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: HashMap<ParamId, Vec<f64>>,
    v: HashMap<ParamId, Vec<f64>>,
    steps: HashMap<ParamId, u64>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: HashMap::new(),
            v: HashMap::new(),
            steps: HashMap::new(),
        }
    }

    /// Apply one update over `(parameter, gradient)` pairs.
    ///
    /// The step is atomic: if any gradient contains a non-finite value the
    /// error names the offending parameter and neither weights, moments nor
    /// step counts change.
    pub fn step(&mut self, store: &mut Params, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        for (id, grad) in grads {
            if !store.is_trainable(*id) {
                return Err(McvaeError::InvalidArgument(format!(
                    "gradient supplied for non-trainable parameter {}",
                    store.name(*id)
                )));
            }
            if grad.len() != store.get(*id).len() {
                return Err(McvaeError::DimensionMismatch {
                    what: format!("gradient for {}", store.name(*id)),
                    expected: store.get(*id).len(),
                    got: grad.len(),
                });
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(McvaeError::NonFinite {
                    what: "gradient".into(),
                    context: store.name(*id).to_string(),
                });
            }
        }

        for (id, grad) in grads {
            let t = self.steps.entry(*id).or_insert(0);
            *t += 1;
            let t = *t;
            let n = grad.len();
            let m = self.m.entry(*id).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(*id).or_insert_with(|| vec![0.0; n]);
            let bc1 = 1.0 - self.beta1.powi(t as i32);
            let bc2 = 1.0 - self.beta2.powi(t as i32);
            let decay = 1.0 - self.lr * self.weight_decay;

            let p = store.get_mut(*id).data_mut();
            for i in 0..n {
                p[i] *= decay;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
