use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        AdamW {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &[f32] {
        &self.m[id.index()]
    }

    /// Applies one update. `grads` pairs each parameter with its gradient;
    /// parameters absent from the list see a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor<f32>)]) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::shape("adamw", "optimizer state does not match the parameter store"));
        }
        let mut dense: Vec<Option<&Tensor<f32>>> = vec![None; store.len()];
        for (id, g) in grads {
            let i = id.index();
            if g.shape() != store.get(*id).shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("{}: grad {:?} vs param {:?}", store.name(*id), g.shape(), store.get(*id).shape()),
                ));
            }
            dense[i] = Some(g);
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                let g = dense[i].map_or(0.0, |g| g.data()[j] as f64);
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * g;
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mut pj = p[j] as f64;
                pj -= c.lr * c.weight_decay * pj;
                pj -= c.lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                p[j] = pj as f32;
            }
        }
        Ok(())
    }
}
