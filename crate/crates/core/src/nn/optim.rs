use serde::{Deserialize, Serialize};

use super::{ParamGroup, Parameterized};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// The decay term is scaled by the schedule multiplier, not by the learning
/// rate: `θ ← θ − η·λ·θ − lr·m̂/(√v̂ + ε)`. With `lr = 0` parameters still
/// shrink by `(1 − η·λ)` per step.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<M: Parameterized>(model: &M, config: AdamWConfig) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
        AdamW {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `lr` gives the already-scheduled rate per group and
    /// `schedule` the multiplier applied to weight decay.
    pub fn step<M: Parameterized>(
        &mut self,
        model: &mut M,
        grads: &M,
        lr: impl Fn(ParamGroup) -> f64,
        schedule: f64,
    ) {
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - schedule * c.weight_decay;
        for (((param, grad), m), v) in model
            .params_mut()
            .into_iter()
            .zip(grads.params())
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let rate = lr(param.group);
            for i in 0..param.data.len() {
                let g = grad.data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                param.data[i] = param.data[i] * decay - rate * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}
