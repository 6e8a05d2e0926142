//! AdamW with bias correction and decoupled weight decay.

use super::params::Bound;
use super::{Gradients, ParamStore, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// Optimizer state. Moments are kept per parameter slot of the store it was
/// created for and start at zero.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub learning_rate: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, learning_rate: f64, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
        Self { config, learning_rate, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter. `grads` are indexed by slot;
    /// a trainable slot without a gradient is an error and nothing is updated.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        for (id, p) in store.iter() {
            if p.trainable && grads.get(id.index()).and_then(|g| g.as_ref()).is_none() {
                return Err(TensorError::MissingGrad(p.name.clone()));
            }
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let lr = self.learning_rate;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.get(id).trainable {
                continue;
            }
            let g = grads[id.index()].as_ref().unwrap();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let param = store.get_mut(id);
            for i in 0..param.data.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let mut p = param.data[i] as f64;
                p -= lr * weight_decay * p;
                p -= lr * m_hat / (v_hat.sqrt() + eps);
                if !p.is_finite() {
                    return Err(TensorError::NonFinite { op: "adamw" });
                }
                param.data[i] = p as f32;
            }
        }
        Ok(())
    }
}

/// Pulls the gradient of every bound slot out of `grads`.
pub fn collect_grads(store: &ParamStore, bound: &Bound, grads: &mut Gradients) -> Vec<Option<Vec<f64>>> {
    store.ids().map(|id| if store.get(id).trainable { grads.take(bound.var(id)) } else { None }).collect()
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
    norm
}
