//! Fundus image preprocessing and training-time augmentation.
//!
//! Images are [`FeatureMap`]s with three channels in `[channel, y, x]` order.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::FeatureMap;
use crate::rng::Rng;

/// Decoded image with pixel values on the source scale (0–255 for 8-bit files).
pub type RawImage = FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub image_size: usize,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
}

impl Default for PreprocessConfig {
    /// ImageNet channel statistics.
    fn default() -> Self {
        PreprocessConfig {
            image_size: 512,
            channel_mean: [0.485, 0.456, 0.406],
            channel_std: [0.229, 0.224, 0.225],
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::config("image_size", "must be positive"));
        }
        if self.channel_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("channel_std", "every entry must be positive"));
        }
        if self.channel_mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::config("channel_mean", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub max_rotation_degrees: f64,
    pub hflip_probability: f64,
    pub blur_kernel: usize,
    pub blur_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_degrees: 360.0,
            hflip_probability: 0.5,
            blur_kernel: 3,
            blur_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Augmentation that leaves every image unchanged.
    pub fn identity() -> Self {
        AugmentConfig {
            max_rotation_degrees: 0.0,
            hflip_probability: 0.0,
            blur_kernel: 3,
            blur_probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blur_kernel == 0 || self.blur_kernel % 2 == 0 {
            return Err(Error::config("blur_kernel", "must be odd and at least 1"));
        }
        for (name, p) in [
            ("hflip_probability", self.hflip_probability),
            ("blur_probability", self.blur_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        if !(self.max_rotation_degrees >= 0.0) {
            return Err(Error::config("max_rotation_degrees", "must be non-negative"));
        }
        Ok(())
    }
}

pub fn load_image(path: &Path) -> Result<RawImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut out = FeatureMap::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out.data[(c * h + y as usize) * w + x as usize] = px[c] as f64;
        }
    }
    Ok(out)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear sample with half-pixel centers; coordinates are clamped.
fn sample_clamped(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], tx);
    let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], tx);
    lerp(top, bottom, ty)
}

/// Integer-factor box average, used before bilinear downscaling.
fn box_reduce(img: &FeatureMap, factor: usize) -> FeatureMap {
    let (h, w) = (img.height / factor, img.width / factor);
    let mut out = FeatureMap::zeros(img.channels, h, w);
    let norm = (factor * factor) as f64;
    for c in 0..img.channels {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..factor {
                    let row = (y * factor + dy) * img.width + x * factor;
                    acc += src[row..row + factor].iter().sum::<f64>();
                }
                out.data[(c * h + y) * w + x] = acc / norm;
            }
        }
    }
    out
}

fn resize(img: &FeatureMap, size: usize) -> FeatureMap {
    if img.height == size && img.width == size {
        return img.clone();
    }
    let factor = img.height.min(img.width) / size;
    let reduced;
    let src = if factor >= 2 {
        reduced = box_reduce(img, factor);
        &reduced
    } else {
        img
    };
    let mut out = FeatureMap::zeros(src.channels, size, size);
    let sy = src.height as f64 / size as f64;
    let sx = src.width as f64 / size as f64;
    for c in 0..src.channels {
        let plane = src.plane(c);
        for y in 0..size {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..size {
                let fx = (x as f64 + 0.5) * sx - 0.5;
                out.data[(c * size + y) * size + x] =
                    sample_clamped(plane, src.height, src.width, fy, fx);
            }
        }
    }
    out
}

fn center_crop(img: &FeatureMap) -> FeatureMap {
    let side = img.height.min(img.width);
    if img.height == img.width {
        return img.clone();
    }
    let oy = (img.height - side) / 2;
    let ox = (img.width - side) / 2;
    let mut out = FeatureMap::zeros(img.channels, side, side);
    for c in 0..img.channels {
        for y in 0..side {
            let src = (c * img.height + oy + y) * img.width + ox;
            let dst = (c * side + y) * side;
            out.data[dst..dst + side].copy_from_slice(&img.data[src..src + side]);
        }
    }
    out
}

/// Center-crops to a square, resizes to `image_size`, min-max scales to
/// `[0, 1]` over all channels (a constant image becomes all zeros) and
/// z-scores each channel.
pub fn preprocess_image(raw: &RawImage, cfg: &PreprocessConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    if raw.channels != 3 {
        return Err(Error::shape("image channels", 3, raw.channels));
    }
    if raw.height == 0 || raw.width == 0 {
        return Err(Error::Validation("zero-area image".into()));
    }
    let mut img = resize(&center_crop(raw), cfg.image_size);
    min_max_in_place(&mut img);
    let n = cfg.image_size * cfg.image_size;
    for c in 0..3 {
        let (m, s) = (cfg.channel_mean[c], cfg.channel_std[c]);
        img.data[c * n..(c + 1) * n]
            .iter_mut()
            .for_each(|v| *v = (*v - m) / s);
    }
    Ok(img)
}

fn min_max_in_place(img: &mut FeatureMap) {
    let (lo, hi) = img
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 1e-12 * hi.abs().max(1.0)) {
        img.data.iter_mut().for_each(|v| *v = 0.0);
    } else {
        img.data.iter_mut().for_each(|v| *v = ((*v - lo) / range).clamp(0.0, 1.0));
    }
}

/// Loads and preprocesses an image file.
pub fn preprocess_raw(path: &Path, cfg: &PreprocessConfig) -> Result<FeatureMap> {
    preprocess_image(&load_image(path)?, cfg)
}

/// Normalized 1-D Gaussian weights for an odd kernel size. The standard
/// deviation follows the usual size-derived default,
/// `0.3·((k − 1)/2 − 1) + 0.8` (0.8 for k = 3).
pub fn gaussian_kernel(size: usize) -> Vec<f64> {
    let sigma = 0.3 * ((size as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

fn gaussian_blur(img: &FeatureMap, size: usize) -> FeatureMap {
    let k = gaussian_kernel(size);
    let half = (size / 2) as isize;
    let (h, w) = (img.height, img.width);
    let mut tmp = FeatureMap::zeros(img.channels, h, w);
    let mut out = FeatureMap::zeros(img.channels, h, w);
    for c in 0..img.channels {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, wk) in k.iter().enumerate() {
                    let xx = reflect(x as isize + j as isize - half, w);
                    acc += wk * src[y * w + xx];
                }
                tmp.data[(c * h + y) * w + x] = acc;
            }
        }
        let mid = tmp.plane(c).to_vec();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, wk) in k.iter().enumerate() {
                    let yy = reflect(y as isize + j as isize - half, h);
                    acc += wk * mid[yy * w + x];
                }
                out.data[(c * h + y) * w + x] = acc;
            }
        }
    }
    out
}

/// Rotation about the image center, bilinear, zero outside the source.
fn rotate(img: &FeatureMap, degrees: f64) -> FeatureMap {
    let (h, w) = (img.height, img.width);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = FeatureMap::zeros(img.channels, h, w);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // Inverse mapping: rotate the output coordinate back by -θ.
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
                continue;
            }
            for c in 0..img.channels {
                out.data[(c * h + y) * w + x] = sample_clamped(img.plane(c), h, w, sy, sx);
            }
        }
    }
    out
}

fn hflip(img: &FeatureMap) -> FeatureMap {
    let mut out = img.clone();
    for row in out.data.chunks_exact_mut(img.width) {
        row.reverse();
    }
    out
}

/// Random rotation in `[0, max_rotation_degrees)`, then horizontal flip and
/// Gaussian blur, each with its configured probability.
pub fn augment_image(img: &FeatureMap, cfg: &AugmentConfig, rng: &mut Rng) -> Result<FeatureMap> {
    cfg.validate()?;
    if img.height != img.width {
        return Err(Error::shape(
            "augment input",
            "square image",
            format!("{}x{}", img.height, img.width),
        ));
    }
    let mut out = if cfg.max_rotation_degrees > 0.0 {
        let angle = rng.gen_range(0.0..cfg.max_rotation_degrees);
        rotate(img, angle)
    } else {
        img.clone()
    };
    if cfg.hflip_probability > 0.0 && rng.gen::<f64>() < cfg.hflip_probability {
        out = hflip(&out);
    }
    if cfg.blur_probability > 0.0 && rng.gen::<f64>() < cfg.blur_probability && cfg.blur_kernel > 1 {
        out = gaussian_blur(&out, cfg.blur_kernel);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ramp(h: usize, w: usize) -> RawImage {
        let mut img = FeatureMap::zeros(3, h, w);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 256) as f64;
        }
        img
    }

    #[test]
    fn full_size_source_becomes_square_target() {
        let raw = ramp(1934, 2576);
        let out = preprocess_image(&raw, &PreprocessConfig::default()).unwrap();
        assert_eq!((out.channels, out.height, out.width), (3, 512, 512));
        assert!(out.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constant_image_maps_to_negated_mean_over_std() {
        let mut raw = FeatureMap::zeros(3, 40, 30);
        raw.data.iter_mut().for_each(|v| *v = 117.0);
        let cfg = PreprocessConfig {
            image_size: 16,
            ..Default::default()
        };
        let out = preprocess_image(&raw, &cfg).unwrap();
        for c in 0..3 {
            let want = -cfg.channel_mean[c] / cfg.channel_std[c];
            assert!(out.plane(c).iter().all(|v| *v == want));
        }
    }

    #[test]
    fn brightest_pixel_maps_to_one_before_zscore() {
        let mut raw = FeatureMap::zeros(3, 8, 8);
        raw.data[5] = 255.0;
        let cfg = PreprocessConfig {
            image_size: 8,
            ..Default::default()
        };
        let out = preprocess_image(&raw, &cfg).unwrap();
        assert_eq!(out.data[5], (1.0 - 0.485) / 0.229);
        assert_eq!(out.data[6], (0.0 - 0.485) / 0.229);
    }

    #[test]
    fn rejects_bad_inputs() {
        let two = FeatureMap::zeros(2, 8, 8);
        assert!(preprocess_image(&two, &PreprocessConfig::default()).is_err());
        let empty = FeatureMap::zeros(3, 0, 8);
        assert!(preprocess_image(&empty, &PreprocessConfig::default()).is_err());
    }

    #[test]
    fn identity_augmentation() {
        let img = ramp(9, 9);
        let mut r = rng::stream(1, 1);
        let out = augment_image(&img, &AugmentConfig::identity(), &mut r).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let img = ramp(16, 16);
        let cfg = AugmentConfig::default();
        let a = augment_image(&img, &cfg, &mut rng::stream(4, 2)).unwrap();
        let b = augment_image(&img, &cfg, &mut rng::stream(4, 2)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height, a.width), (16, 16));
    }

    #[test]
    fn impulse_spreads_as_gaussian_outer_product() {
        let mut img = FeatureMap::zeros(3, 7, 7);
        img.data[3 * 7 + 3] = 1.0;
        let cfg = AugmentConfig {
            max_rotation_degrees: 0.0,
            hflip_probability: 0.0,
            blur_kernel: 3,
            blur_probability: 1.0,
        };
        let out = augment_image(&img, &cfg, &mut rng::stream(0, 0)).unwrap();
        // Direct 2-D Gaussian with sigma 0.8, normalized over the 3x3 window.
        let sigma: f64 = 0.8;
        let mut w2 = [[0.0; 3]; 3];
        let mut total = 0.0;
        for (dy, row) in w2.iter_mut().enumerate() {
            for (dx, v) in row.iter_mut().enumerate() {
                let r2 = ((dy as f64 - 1.0).powi(2) + (dx as f64 - 1.0).powi(2)) as f64;
                *v = (-r2 / (2.0 * sigma * sigma)).exp();
                total += *v;
            }
        }
        for dy in 0..3 {
            for dx in 0..3 {
                let got = out.at(0, 2 + dy, 2 + dx);
                assert!((got - w2[dy][dx] / total).abs() < 1e-12);
            }
        }
        assert_eq!(out.at(0, 0, 0), 0.0);
        assert_eq!(out.at(1, 3, 3), 0.0);
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = ramp(4, 4);
        let f = hflip(&img);
        assert_eq!(f.at(0, 1, 0), img.at(0, 1, 3));
        assert_eq!(hflip(&f), img);
    }

    #[test]
    fn quarter_rotation_moves_corner() {
        let mut img = FeatureMap::zeros(3, 5, 5);
        img.data[0] = 1.0; // (y=0, x=0)
        let r = rotate(&img, 90.0);
        let total: f64 = r.plane(0).iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(r.at(0, 0, 0).abs() < 1e-9);
    }

    #[test]
    fn rejects_even_blur_kernel() {
        let cfg = AugmentConfig {
            blur_kernel: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
