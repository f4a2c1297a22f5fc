//! Minimal double-precision neural network blocks with hand-written backward passes.
//!
//! Gradients are held in a value of the same type as the model (see
//! [`Parameterized::zeroed`]), so every block accumulates into a mirror of
//! itself and the optimizer walks both in lock step.

mod conv;
mod dense;
mod mlp;
mod optim;

pub use conv::{Conv2d, ConvBackbone, ConvBackboneCache, FeatureMap};
pub use dense::Dense;
pub use mlp::{Mlp, MlpCache};
pub use optim::{AdamW, AdamWConfig};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// Which learning-rate group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Pretrained (or backbone) weights.
    Backbone,
    /// Newly initialized layers: projection heads, FCNN paths.
    Head,
}

/// A trainable tensor stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub group: ParamGroup,
}

impl Param {
    pub fn zeros(shape: Vec<usize>, group: ParamGroup) -> Self {
        let len = shape.iter().product();
        Param {
            shape,
            data: vec![0.0; len],
            group,
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: Vec<usize>, bound: f64, group: ParamGroup, rng: &mut Rng) -> Self {
        let mut p = Param::zeros(shape, group);
        for v in &mut p.data {
            *v = rng.gen_range(-bound..=bound);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    /// A copy with every tensor zeroed, used as a gradient buffer.
    fn zeroed(&self) -> Self
    where
        Self: Clone,
    {
        let mut out = self.clone();
        for p in out.params_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    /// Elementwise `self += other`; both must share a structure.
    fn accumulate(&mut self, other: &Self) {
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d += s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for p in self.params_mut() {
            p.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Flattened copy of every parameter value.
    fn flat(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.data.iter().copied())
            .collect()
    }

    fn all_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
