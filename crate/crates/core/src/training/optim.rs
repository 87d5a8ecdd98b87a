use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ParamMap;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        AdamConfig { learning_rate, beta1, beta2, eps: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {:?}", self)))
        }
    }
}

/// Adam moments for one parameter collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamMap<f32>,
    pub v: ParamMap<f32>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamMap<f32>) -> Self {
        let zeros: ParamMap<f32> = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Adam { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update; `grads` are in `params` key order.
    pub fn update(&mut self, params: &mut ParamMap<f32>, grads: &[Tensor<f32>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(format!("{} gradients", params.len()), grads.len().to_string()));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = (c.learning_rate / bc1) as f32;
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, c.eps as f32);
        let inv_bc2 = (1.0 / bc2) as f32;
        for ((name, p), g) in params.iter_mut().zip(grads) {
            if g.shape() != p.shape() {
                return Err(Error::shape(format!("{} {:?}", name, p.shape()), format!("{:?}", g.shape())));
            }
            let m = self.m.get_mut(name).ok_or_else(|| Error::invalid(format!("no moment for {}", name)))?;
            let v = self.v.get_mut(name).ok_or_else(|| Error::invalid(format!("no moment for {}", name)))?;
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients so their joint L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: Option<f64>) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if let Some(limit) = max_norm {
        if norm > limit && norm.is_finite() {
            let s = (limit / norm) as f32;
            for g in grads.iter_mut() {
                for x in g.data_mut() {
                    *x *= s;
                }
            }
        }
    }
    norm
}
