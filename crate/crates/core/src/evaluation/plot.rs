//! Minimal raster plots written as PNG: curve overlays and box plots.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

const SIZE: u32 = 480;
const MARGIN: u32 = 40;

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
];

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let lo = MARGIN;
    let hi = SIZE - MARGIN;
    line(&mut img, (lo as f64, hi as f64), (hi as f64, hi as f64), axis);
    line(&mut img, (lo as f64, lo as f64), (lo as f64, hi as f64), axis);
    img
}

/// Unit square to pixel coordinates.
fn to_px(x: f64, y: f64) -> (f64, f64) {
    let span = (SIZE - 2 * MARGIN) as f64;
    (
        MARGIN as f64 + x.clamp(0.0, 1.0) * span,
        (SIZE - MARGIN) as f64 - y.clamp(0.0, 1.0) * span,
    )
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (a.0 + t * (b.0 - a.0)).round() as i64;
        let y = (a.1 + t * (b.1 - a.1)).round() as i64;
        put(img, x, y, c);
    }
}

fn dashed(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    let n = (len / 6.0).ceil().max(1.0) as usize;
    for i in (0..n).step_by(2) {
        let t0 = i as f64 / n as f64;
        let t1 = ((i + 1) as f64 / n as f64).min(1.0);
        let p = |t: f64| (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        line(img, p(t0), p(t1), c);
    }
}

fn legend(img: &mut RgbImage, n: usize) {
    for i in 0..n {
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        let y0 = MARGIN + 6 + 12 * i as u32;
        for dy in 0..8 {
            for dx in 0..8 {
                put(img, (SIZE - MARGIN - 14 + dx) as i64, (y0 + dy) as i64, c);
            }
        }
    }
}

/// One solid polyline per series in the unit square; `dashed_series` are
/// drawn dashed in the colour of series `i / 3` (median/lower/upper triplets).
pub fn plot_curves(path: &Path, series: &[Vec<(f64, f64)>], dashed_series: &[Vec<(f64, f64)>]) -> Result<()> {
    let mut img = canvas();
    dashed(&mut img, to_px(0.0, 0.0), to_px(1.0, 1.0), Rgb([180, 180, 180]));
    for (i, pts) in dashed_series.iter().enumerate() {
        let c = Rgb(PALETTE[(i / 2) % PALETTE.len()]);
        for w in pts.windows(2) {
            dashed(&mut img, to_px(w[0].0, w[0].1), to_px(w[1].0, w[1].1), c);
        }
    }
    for (i, pts) in series.iter().enumerate() {
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        for w in pts.windows(2) {
            line(&mut img, to_px(w[0].0, w[0].1), to_px(w[1].0, w[1].1), c);
        }
    }
    legend(&mut img, series.len());
    img.save(path)?;
    Ok(())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (pos - i as f64) * (sorted[j] - sorted[i])
}

/// Box-and-whisker plot (quartiles, 2.5/97.5% whiskers) per group.
pub fn plot_boxes(path: &Path, groups: &[Vec<f64>]) -> Result<()> {
    let mut img = canvas();
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    if all.is_empty() {
        img.save(path)?;
        return Ok(());
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.05).max(1e-3);
    let (lo, hi) = (lo - pad, hi + pad);
    let scale = |v: f64| (v - lo) / (hi - lo);
    let slot = 1.0 / groups.len() as f64;
    for (g, vals) in groups.iter().enumerate() {
        if vals.is_empty() {
            continue;
        }
        let mut v = vals.clone();
        v.sort_by(f64::total_cmp);
        let c = Rgb(PALETTE[g % PALETTE.len()]);
        let cx = slot * (g as f64 + 0.5);
        let (x0, x1) = (cx - slot * 0.3, cx + slot * 0.3);
        let [w_lo, q1, med, q3, w_hi] = [0.025, 0.25, 0.5, 0.75, 0.975].map(|q| scale(quantile(&v, q)));
        for (a, b) in [
            ((x0, q1), (x1, q1)),
            ((x0, q3), (x1, q3)),
            ((x0, q1), (x0, q3)),
            ((x1, q1), (x1, q3)),
            ((cx, q3), (cx, w_hi)),
            ((cx, q1), (cx, w_lo)),
            ((cx - slot * 0.1, w_hi), (cx + slot * 0.1, w_hi)),
            ((cx - slot * 0.1, w_lo), (cx + slot * 0.1, w_lo)),
        ] {
            line(&mut img, to_px(a.0, a.1), to_px(b.0, b.1), c);
        }
        for dy in [-1.0, 0.0, 1.0] {
            let (p0, p1) = (to_px(x0, med), to_px(x1, med));
            line(&mut img, (p0.0, p0.1 + dy), (p1.0, p1.1 + dy), c);
        }
    }
    legend(&mut img, groups.len());
    img.save(path)?;
    Ok(())
}
