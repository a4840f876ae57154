use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam constants {self:?}")))
        }
    }
}

/// Adam with bias correction. Moments are kept in f32 so they round-trip
/// through checkpoints exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub params: AdamParams,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl Adam {
    pub fn new(n: usize, params: AdamParams) -> Self {
        Self {
            params,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn update(&mut self, weights: &mut [f32], grads: &[f32], lr: f64) {
        assert_eq!(weights.len(), grads.len());
        assert_eq!(weights.len(), self.m.len());
        self.step += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        for ((w, &g), (m, v)) in weights.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g = g as f64;
            let m1 = beta1 * *m as f64 + (1.0 - beta1) * g;
            let v1 = beta2 * *v as f64 + (1.0 - beta2) * g * g;
            *m = m1 as f32;
            *v = v1 as f32;
            let upd = (m1 / bc1) / ((v1 / bc2).sqrt() + eps);
            *w = (*w as f64 - lr * upd) as f32;
        }
    }
}
