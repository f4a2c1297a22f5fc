use serde::{Deserialize, Serialize};

use super::{Param, ParamGroup, Parameterized};
use crate::rng::Rng;

/// Fully connected layer, `y = W x + b` with `W` of shape `[out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, group: ParamGroup, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Dense {
            weight: Param::uniform(vec![outputs, inputs], bound, group, rng),
            bias: Param::uniform(vec![outputs], bound, group, rng),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize, group: ParamGroup) -> Self {
        Dense {
            weight: Param::zeros(vec![outputs, inputs], group),
            bias: Param::zeros(vec![outputs], group),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n_in = self.inputs();
        debug_assert_eq!(x.len(), n_in);
        self.weight
            .data
            .chunks_exact(n_in)
            .zip(&self.bias.data)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let n_in = self.inputs();
        let mut dx = vec![0.0; n_in];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias.data[o] += g;
            let row = &self.weight.data[o * n_in..(o + 1) * n_in];
            let grow = &mut grad.weight.data[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

impl Parameterized for Dense {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
