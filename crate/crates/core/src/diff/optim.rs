//! AdamW with a linear-warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to parameters registered with `decay = true`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One AdamW update of every parameter in `store` at learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.first_moment.len() != store.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} grads / {} moments for {} parameters", grads.len(), self.first_moment.len(), store.len()),
            ));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{}: grad {:?} vs param {:?}", store.name(id), g.shape(), store.get(id).shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {}", store.name(id))));
            }
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let decay = if store.decays(id) { weight_decay } else { 0.0 };
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[k].data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p -= lr * (update + decay * *p);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr` over `warmup_steps`, then cosine decay to zero
/// at `total_steps`. Steps beyond `total_steps` stay at zero.
pub fn lr_schedule(step: u64, warmup_steps: u64, total_steps: u64, peak_lr: f64) -> f64 {
    if step < warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return if total_steps <= warmup_steps { peak_lr } else { 0.0 };
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}
