//! Synthetic cohorts with planted image and age signals.
//!
//! Each patient draws two independent latent scores, `z_img` and `z_age`.
//! The label is `s·z_img + t·z_age + ε > c` with `ε ~ N(0, 1)` and `c` set
//! from the requested prevalence, so the image carries the `z_img` half of
//! the signal (as lesion intensity) and age carries the `z_age` half.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{write_manifest, Eye, Gender, ImageSample, PatientRecord};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalConfig {
    /// Weight of the image latent in the label score.
    pub image_signal: f64,
    /// Weight of the age latent in the label score.
    pub age_signal: f64,
    pub hypertension_prevalence: f64,
    pub diabetes_given_hypertension: f64,
    pub diabetes_given_normotension: f64,
    pub female_fraction: f64,
    pub age_mean: f64,
    pub age_std: f64,
    pub max_images_per_patient: usize,
    pub image_size: usize,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig {
            image_signal: 3.0,
            age_signal: 3.0,
            hypertension_prevalence: 0.55,
            diabetes_given_hypertension: 0.8,
            diabetes_given_normotension: 0.5,
            female_fraction: 0.55,
            age_mean: 58.0,
            age_std: 12.0,
            max_images_per_patient: 2,
            image_size: 64,
        }
    }
}

impl SignalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("hypertension_prevalence", self.hypertension_prevalence),
            ("diabetes_given_hypertension", self.diabetes_given_hypertension),
            ("diabetes_given_normotension", self.diabetes_given_normotension),
            ("female_fraction", self.female_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        if !(self.hypertension_prevalence > 0.0 && self.hypertension_prevalence < 1.0) {
            return Err(Error::config(
                "hypertension_prevalence",
                "must lie strictly between 0 and 1",
            ));
        }
        if !(self.image_signal >= 0.0) || !(self.age_signal >= 0.0) {
            return Err(Error::config("signal", "signal strengths must be non-negative"));
        }
        if !(self.age_std >= 0.0) || !(self.age_mean > 0.0) {
            return Err(Error::config("age", "age_mean must be positive, age_std non-negative"));
        }
        if self.max_images_per_patient == 0 {
            return Err(Error::config("max_images_per_patient", "must be at least 1"));
        }
        if self.image_size < 16 {
            return Err(Error::config("image_size", "must be at least 16"));
        }
        Ok(())
    }
}

/// A generated patient with its latent image score.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPatient {
    pub record: PatientRecord,
    pub image_latent: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub records: Vec<PatientRecord>,
    pub manifest_path: PathBuf,
    pub image_paths: Vec<PathBuf>,
}

fn normal(rng: &mut rng::Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Demographics and labels only; image paths point under `image_dir` but no
/// files are written.
pub fn synthetic_patients(
    n_patients: usize,
    cfg: &SignalConfig,
    seed: u64,
    image_dir: &Path,
) -> Result<Vec<SyntheticPatient>> {
    cfg.validate()?;
    if n_patients < 2 {
        return Err(Error::config("n_patients", "must be at least 2"));
    }
    let scale = (cfg.image_signal.powi(2) + cfg.age_signal.powi(2) + 1.0).sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let threshold = scale * std_normal.inverse_cdf(1.0 - cfg.hypertension_prevalence);

    let mut out = Vec::with_capacity(n_patients);
    for i in 0..n_patients {
        let mut r = rng::stream(seed, i as u64);
        let z_img = normal(&mut r);
        let z_age = normal(&mut r);
        let noise = normal(&mut r);
        let hypertension = cfg.image_signal * z_img + cfg.age_signal * z_age + noise > threshold;
        let dm_rate = if hypertension {
            cfg.diabetes_given_hypertension
        } else {
            cfg.diabetes_given_normotension
        };
        let diabetes = r.gen::<f64>() < dm_rate;
        let gender = if r.gen::<f64>() < cfg.female_fraction {
            Gender::Female
        } else {
            Gender::Male
        };
        let age = (cfg.age_mean + cfg.age_std * z_age).max(18.0);
        let age = (age * 10.0).round() / 10.0;
        let n_images = r.gen_range(1..=cfg.max_images_per_patient);
        let patient_id = format!("S{i:05}");
        let images = (0..n_images)
            .map(|k| {
                let eye = match k {
                    0 => Eye::Right,
                    1 => Eye::Left,
                    _ => Eye::Unknown,
                };
                let name = format!("{patient_id}_{k}.png");
                ImageSample {
                    image_id: format!("images/{name}"),
                    patient_id: patient_id.clone(),
                    eye,
                    path: image_dir.join(&name),
                }
            })
            .collect();
        out.push(SyntheticPatient {
            record: PatientRecord {
                patient_id,
                age,
                gender,
                hypertension,
                diabetes,
                images,
            },
            image_latent: z_img,
        });
    }
    Ok(out)
}

fn blend(px: &mut [f64; 3], color: [f64; 3], alpha: f64) {
    for c in 0..3 {
        px[c] += alpha * (color[c] - px[c]);
    }
}

/// Draws a fundus-like image: orange retina disc, bright optic disc, dark
/// vessel strokes and yellow lesions whose opacity is `sigmoid(latent)`.
pub fn render_fundus(size: usize, latent: f64, r: &mut rng::Rng) -> RgbImage {
    let s = size as f64;
    let c = (s - 1.0) / 2.0;
    let radius = 0.47 * s;
    let mut canvas = vec![[0.0f64; 3]; size * size];

    let shade = 0.85 + 0.15 * r.gen::<f64>();
    for y in 0..size {
        for x in 0..size {
            let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt() / radius;
            if d <= 1.0 {
                let fall = 1.0 - 0.35 * d * d;
                canvas[y * size + x] = [0.72 * fall * shade, 0.30 * fall * shade, 0.12 * fall * shade];
            }
        }
    }

    let disc_angle = r.gen_range(0.0..std::f64::consts::TAU);
    let disc_r = 0.3 * radius;
    let (dx, dy) = (c + disc_r * disc_angle.cos(), c + disc_r * disc_angle.sin());

    // Vessels: random-walk strokes leaving the optic disc.
    let n_vessels = 5;
    for v in 0..n_vessels {
        let mut angle = disc_angle + std::f64::consts::PI
            + (v as f64 - 2.0) * 0.55
            + r.gen_range(-0.2..0.2);
        let (mut px, mut py) = (dx, dy);
        let width = 0.012 * s + 0.6;
        for _ in 0..(size * 3 / 2) {
            angle += r.gen_range(-0.12..0.12);
            px += 0.5 * angle.cos();
            py += 0.5 * angle.sin();
            stamp(&mut canvas, size, px, py, width, |p| blend(p, [0.45, 0.06, 0.05], 0.8));
        }
    }

    let alpha = 1.0 / (1.0 + (-latent).exp());
    let n_lesions = 10;
    for _ in 0..n_lesions {
        let a = r.gen_range(0.0..std::f64::consts::TAU);
        let rr = radius * r.gen::<f64>().sqrt() * 0.85;
        let (lx, ly) = (c + rr * a.cos(), c + rr * a.sin());
        stamp(&mut canvas, size, lx, ly, 0.045 * s, |p| {
            blend(p, [0.93, 0.85, 0.35], 0.9 * alpha)
        });
    }

    stamp(&mut canvas, size, dx, dy, 0.09 * s, |p| *p = [1.0, 0.95, 0.8]);

    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let p = canvas[y * size + x];
            let mut rgb = [0u8; 3];
            for k in 0..3 {
                let v = if p[k] > 0.0 { p[k] + 0.01 * normal(r) } else { p[k] };
                rgb[k] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(rgb));
        }
    }
    img
}

fn stamp(
    canvas: &mut [[f64; 3]],
    size: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    mut paint: impl FnMut(&mut [f64; 3]),
) {
    let x0 = (cx - radius).floor().max(0.0) as usize;
    let y0 = (cy - radius).floor().max(0.0) as usize;
    let x1 = ((cx + radius).ceil() as usize).min(size.saturating_sub(1));
    let y1 = ((cy + radius).ceil() as usize).min(size.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= radius * radius {
                paint(&mut canvas[y * size + x]);
            }
        }
    }
}

/// Writes `manifest.csv` and `images/*.png` under `out_dir`.
pub fn generate_synthetic_cohort(
    n_patients: usize,
    cfg: &SignalConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<SyntheticCohort> {
    let image_dir = out_dir.join("images");
    let patients = synthetic_patients(n_patients, cfg, seed, &image_dir)?;
    std::fs::create_dir_all(&image_dir)?;
    let mut image_paths = Vec::new();
    for (i, p) in patients.iter().enumerate() {
        for (k, img) in p.record.images.iter().enumerate() {
            let mut r = rng::substream(seed, 1 + i as u64, k as u64);
            render_fundus(cfg.image_size, p.image_latent, &mut r).save(&img.path)?;
            image_paths.push(img.path.clone());
        }
    }
    let records: Vec<PatientRecord> = patients.into_iter().map(|p| p.record).collect();
    let manifest_path = out_dir.join("manifest.csv");
    let file = std::fs::File::create(&manifest_path)?;
    write_manifest(std::io::BufWriter::new(file), &records, out_dir)?;
    Ok(SyntheticCohort {
        records,
        manifest_path,
        image_paths,
    })
}
