//! Grad-CAM saliency over the fundus encoder's last convolutional block.

use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cohort::PreprocessConfig;
use crate::error::{Error, Result};
use crate::fusion::NeuralSystem;
use crate::nn::FeatureMap;
use crate::rng;
use crate::training::{Example, SystemInput};

/// Image-sized map with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub grid: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub target_layer: String,
    pub image_id: String,
}

impl SaliencyMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.grid[y * self.width + x]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for row in self.grid.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Jet-coloured map blended over the de-normalized image.
    pub fn overlay(&self, image: &FeatureMap, preprocess: &PreprocessConfig, alpha: f64) -> Result<RgbImage> {
        if image.height != self.height || image.width != self.width || image.channels != 3 {
            return Err(Error::shape(
                "overlay image",
                format!("3x{}x{}", self.height, self.width),
                format!("{}x{}x{}", image.channels, image.height, image.width),
            ));
        }
        let alpha = alpha.clamp(0.0, 1.0);
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let heat = jet(self.at(y, x));
                let mut px = [0u8; 3];
                for c in 0..3 {
                    let base = (image.at(c, y, x) * preprocess.channel_std[c] + preprocess.channel_mean[c]).clamp(0.0, 1.0);
                    let v = (1.0 - alpha) * base + alpha * heat[c];
                    px[c] = (v * 255.0).round() as u8;
                }
                out.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
        Ok(out)
    }

    pub fn write_overlay(&self, path: &Path, image: &FeatureMap, preprocess: &PreprocessConfig, alpha: f64) -> Result<()> {
        self.overlay(image, preprocess, alpha)?.save(path)?;
        Ok(())
    }
}

fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let f = |x: f64| (1.5 - (4.0 * v - x).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

/// Rectified channel-weighted activation at the target layer, before
/// upsampling: `max(0, Σ_c mean(∂z/∂A_c)·A_c)`.
pub fn cam_grid(system: &NeuralSystem, input: &SystemInput) -> Result<FeatureMap> {
    let (a, da) = system.activation_gradient(input)?;
    let n = a.height * a.width;
    if n == 0 {
        return Err(Error::Validation("target layer has no spatial extent".into()));
    }
    let mut cam = FeatureMap::zeros(1, a.height, a.width);
    for c in 0..a.channels {
        let alpha = da.plane(c).iter().sum::<f64>() / n as f64;
        for (o, v) in cam.data.iter_mut().zip(a.plane(c)) {
            *o += alpha * v;
        }
    }
    cam.data.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(cam)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, ty) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, tx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Min-max scaling to `[0, 1]`. An all-zero map stays zero and any other
/// constant map becomes all ones.
pub fn normalize(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= 0.0 {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else if hi - lo <= 0.0 {
        values.iter_mut().for_each(|v| *v = 1.0);
    } else {
        values.iter_mut().for_each(|v| *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0));
    }
}

pub fn grad_cam(system: &NeuralSystem, example: &Example<SystemInput>) -> Result<SaliencyMap> {
    let fundus = system
        .fundus()
        .ok_or_else(|| Error::Validation("Grad-CAM needs a system with an image encoder".into()))?;
    let img = example
        .input
        .image
        .as_ref()
        .ok_or_else(|| Error::Validation("Grad-CAM needs an image".into()))?;
    let cam = cam_grid(system, &example.input)?;
    let mut grid = upsample_bilinear(&cam.data, cam.height, cam.width, img.height, img.width);
    normalize(&mut grid);
    Ok(SaliencyMap {
        grid,
        height: img.height,
        width: img.width,
        target_layer: format!("backbone.blocks.{}", fundus.backbone.blocks.len() - 1),
        image_id: example.meta.image_id.clone(),
    })
}

/// `k` positive-labelled examples drawn at random with `seed`.
pub fn select_positive<X>(examples: &[Example<X>], k: usize, seed: u64) -> Vec<&Example<X>> {
    let mut pos: Vec<&Example<X>> = examples.iter().filter(|e| e.meta.label).collect();
    pos.shuffle(&mut rng::stream(seed, 0x4341_4d));
    pos.truncate(k);
    pos
}

pub fn explain_batch(system: &NeuralSystem, examples: &[Example<SystemInput>], k: usize, seed: u64) -> Result<Vec<SaliencyMap>> {
    select_positive(examples, k, seed)
        .into_iter()
        .map(|e| grad_cam(system, e))
        .collect()
}
