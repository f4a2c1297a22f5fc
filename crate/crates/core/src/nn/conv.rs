use serde::{Deserialize, Serialize};

use super::{leaky_relu, leaky_relu_grad, Param, ParamGroup, Parameterized};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Channel-major activation tensor `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// 2-D convolution, weight shape `[out, in, k, k]`, zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Conv2d {
            weight: Param::uniform(
                vec![out_channels, in_channels, kernel, kernel],
                bound,
                group,
                rng,
            ),
            bias: Param::zeros(vec![out_channels], group),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape[2]
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let k = self.kernel();
        let oh = (height + 2 * self.padding).saturating_sub(k) / self.stride + 1;
        let ow = (width + 2 * self.padding).saturating_sub(k) / self.stride + 1;
        (oh, ow)
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let (oh, ow) = self.output_size(x.height, x.width);
        let k = self.kernel();
        let cin = self.in_channels();
        let mut out = FeatureMap::zeros(self.out_channels(), oh, ow);
        let (s, p) = (self.stride as isize, self.padding as isize);
        for o in 0..self.out_channels() {
            let plane = &mut out.data[o * oh * ow..(o + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = self.bias.data[o]);
            for i in 0..cin {
                let src = x.plane(i);
                for ky in 0..k {
                    for kx in 0..k {
                        let w = self.weight.data[((o * cin + i) * k + ky) * k + kx];
                        if w == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= x.height as isize {
                                continue;
                            }
                            let row = &src[iy as usize * x.width..(iy as usize + 1) * x.width];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix >= 0 && ix < x.width as isize {
                                    *ov += w * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad`, returns `dL/dx`.
    pub fn backward(&self, x: &FeatureMap, dy: &FeatureMap, grad: &mut Conv2d) -> FeatureMap {
        let k = self.kernel();
        let cin = self.in_channels();
        let (oh, ow) = (dy.height, dy.width);
        let (s, p) = (self.stride as isize, self.padding as isize);
        let mut dx = FeatureMap::zeros(cin, x.height, x.width);
        for o in 0..self.out_channels() {
            let dplane = dy.plane(o);
            grad.bias.data[o] += dplane.iter().sum::<f64>();
            for i in 0..cin {
                let src = x.plane(i);
                let dsrc = &mut dx.data[i * x.height * x.width..(i + 1) * x.height * x.width];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((o * cin + i) * k + ky) * k + kx;
                        let w = self.weight.data[widx];
                        let mut gw = 0.0;
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= x.height as isize {
                                continue;
                            }
                            let base = iy as usize * x.width;
                            for ox in 0..ow {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix < 0 || ix >= x.width as isize {
                                    continue;
                                }
                                let g = dplane[oy * ow + ox];
                                gw += g * src[base + ix as usize];
                                dsrc[base + ix as usize] += g * w;
                            }
                        }
                        grad.weight.data[widx] += gw;
                    }
                }
            }
        }
        dx
    }
}

impl Parameterized for Conv2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Strided convolutional encoder: conv blocks with leaky-ReLU, then global
/// average pooling into an embedding of `channels.last()` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBackbone {
    pub blocks: Vec<Conv2d>,
    pub negative_slope: f64,
}

#[derive(Debug, Clone)]
pub struct ConvBackboneCache {
    inputs: Vec<FeatureMap>,
    pre: Vec<FeatureMap>,
    /// Activations of the last block; the Grad-CAM target layer.
    pub activation: FeatureMap,
}

impl ConvBackbone {
    /// 3x3 kernels, stride 2, padding 1, one block per entry of `channels`.
    pub fn new(in_channels: usize, channels: &[usize], negative_slope: f64, rng: &mut Rng) -> Self {
        let mut blocks = Vec::with_capacity(channels.len());
        let mut cin = in_channels;
        for &c in channels {
            blocks.push(Conv2d::new(cin, c, 3, 2, 1, ParamGroup::Backbone, rng));
            cin = c;
        }
        ConvBackbone {
            blocks,
            negative_slope,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.blocks.last().map(Conv2d::out_channels).unwrap_or(0)
    }

    pub fn channel_layout(&self) -> Vec<usize> {
        self.blocks.iter().map(Conv2d::out_channels).collect()
    }

    /// Checks that `other` (e.g. loaded weights) has the same block shapes.
    pub fn check_compatible(&self, other: &ConvBackbone) -> Result<()> {
        let shapes = |b: &ConvBackbone| -> Vec<Vec<usize>> {
            b.blocks.iter().map(|c| c.weight.shape.clone()).collect()
        };
        if shapes(self) != shapes(other) {
            return Err(Error::shape(
                "backbone weights",
                format!("{:?}", shapes(self)),
                format!("{:?}", shapes(other)),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &FeatureMap) -> (Vec<f64>, ConvBackboneCache) {
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut pre = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for conv in &self.blocks {
            let z = conv.forward(&h);
            let mut a = z.clone();
            a.data
                .iter_mut()
                .for_each(|v| *v = leaky_relu(*v, self.negative_slope));
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        let area = (h.height * h.width) as f64;
        let embedding = (0..h.channels)
            .map(|c| h.plane(c).iter().sum::<f64>() / area)
            .collect();
        (
            embedding,
            ConvBackboneCache {
                inputs,
                pre,
                activation: h,
            },
        )
    }

    /// Gradient at the last block's activation given `dL/d(embedding)`.
    pub fn pool_backward(cache: &ConvBackboneCache, d_embedding: &[f64]) -> FeatureMap {
        let a = &cache.activation;
        let area = (a.height * a.width) as f64;
        let mut d = FeatureMap::zeros(a.channels, a.height, a.width);
        for c in 0..a.channels {
            let g = d_embedding[c] / area;
            let n = a.height * a.width;
            d.data[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = g);
        }
        d
    }

    /// Backpropagates from the pooled embedding; returns `dL/d(input)`.
    pub fn backward(
        &self,
        cache: &ConvBackboneCache,
        d_embedding: &[f64],
        grad: &mut ConvBackbone,
    ) -> FeatureMap {
        let mut d = Self::pool_backward(cache, d_embedding);
        for i in (0..self.blocks.len()).rev() {
            d.data
                .iter_mut()
                .zip(&cache.pre[i].data)
                .for_each(|(g, z)| *g *= leaky_relu_grad(*z, self.negative_slope));
            d = self.blocks[i].backward(&cache.inputs[i], &d, &mut grad.blocks[i]);
        }
        d
    }
}

impl Parameterized for ConvBackbone {
    fn params(&self) -> Vec<&Param> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }
}
