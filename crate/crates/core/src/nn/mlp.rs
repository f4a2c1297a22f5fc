use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{leaky_relu, leaky_relu_grad, Dense, Param, ParamGroup, Parameterized};
use crate::rng::Rng;

/// Stack of dense layers. Hidden layers use leaky-ReLU followed by inverted
/// dropout; the last layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub negative_slope: f64,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Dropout multipliers per hidden layer (empty when dropout was off).
    masks: Vec<Vec<f64>>,
}

impl Mlp {
    /// `layers` counts dense layers, output layer included.
    pub fn new(
        input: usize,
        hidden: usize,
        output: usize,
        layers: usize,
        negative_slope: f64,
        dropout: f64,
        rng: &mut Rng,
    ) -> Self {
        assert!(layers >= 1, "an MLP needs at least one layer");
        let mut dense = Vec::with_capacity(layers);
        let mut width = input;
        for i in 0..layers {
            let out = if i + 1 == layers { output } else { hidden };
            dense.push(Dense::new(width, out, ParamGroup::Head, rng));
            width = out;
        }
        Mlp {
            layers: dense,
            negative_slope,
            dropout,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(Dense::outputs).unwrap_or(0)
    }

    pub fn forward(&self, x: &[f64], mut dropout_rng: Option<&mut Rng>) -> (Vec<f64>, MlpCache) {
        let n = self.layers.len();
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n.saturating_sub(1)),
            masks: Vec::with_capacity(n.saturating_sub(1)),
        };
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            cache.inputs.push(h);
            if i + 1 == n {
                return (z, cache);
            }
            let mut a: Vec<f64> = z.iter().map(|&v| leaky_relu(v, self.negative_slope)).collect();
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) if self.dropout > 0.0 => {
                    let keep = 1.0 - self.dropout;
                    let mask: Vec<f64> = a
                        .iter()
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    a.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                    mask
                }
                _ => Vec::new(),
            };
            cache.pre.push(z);
            cache.masks.push(mask);
            h = a;
        }
        unreachable!("loop returns on the last layer")
    }

    pub fn infer(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x, None).0
    }

    /// Accumulates gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache, dy: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let n = self.layers.len();
        let mut d = dy.to_vec();
        for i in (0..n).rev() {
            if i + 1 < n {
                let mask = &cache.masks[i];
                for (j, v) in d.iter_mut().enumerate() {
                    if !mask.is_empty() {
                        *v *= mask[j];
                    }
                    *v *= leaky_relu_grad(cache.pre[i][j], self.negative_slope);
                }
            }
            d = self.layers[i].backward(&cache.inputs[i], &d, &mut grad.layers[i]);
        }
        d
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn layer_count_includes_output() {
        let mut r = rng::stream(1, 0);
        let m = Mlp::new(2, 64, 32, 2, 0.01, 0.2, &mut r);
        assert_eq!(m.layers.len(), 2);
        assert_eq!(m.layers[0].outputs(), 64);
        assert_eq!(m.output_width(), 32);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut r = rng::stream(3, 0);
        let m = Mlp::new(3, 5, 1, 3, 0.1, 0.0, &mut r);
        let x = [0.3, -0.7, 1.1];
        let (_, cache) = m.forward(&x, None);
        let mut g = m.zeroed();
        let dx = m.backward(&cache, &[1.0], &mut g);
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (m.infer(&xp)[0] - m.infer(&xm)[0]) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-7, "{fd} vs {}", dx[i]);
        }
    }
}
