//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::encoder::Params;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

pub struct AdamW<T> {
    config: AdamWConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u32,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &Params<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .tensors()
            .iter()
            .map(|t| vec![T::zero(); t.data.len()])
            .collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>) {
        self.step += 1;
        let c = &self.config;
        let lr = T::of(c.learning_rate);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let eps = T::of(c.eps);
        let decay = T::one() - lr * T::of(c.weight_decay);
        let correct1 = T::one() - T::of(c.beta1.powi(self.step as i32));
        let correct2 = T::one() - T::of(c.beta2.powi(self.step as i32));

        let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
        for (((_, p), g), (m, v)) in tensors.zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
