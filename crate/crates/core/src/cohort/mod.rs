//! Patients, images, splits and the image pipeline.

mod image_ops;
mod manifest;
mod split;
mod summary;
mod synthetic;

pub use image_ops::{
    augment_image, gaussian_kernel, load_image, preprocess_image, preprocess_raw, AugmentConfig,
    PreprocessConfig, RawImage,
};
pub use manifest::{load_manifest, parse_manifest, write_manifest};
pub use split::{stratified_patient_split, SplitAssignment, SplitReport, SplitRatios, Subset};
pub use summary::{cohort_summary, AgeStats, CellSummary, CohortSummary, GenderFilter, StatusFilter};
pub use synthetic::{generate_synthetic_cohort, synthetic_patients, SignalConfig, SyntheticCohort};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    /// Model input coding: male 0, female 1.
    pub fn code(self) -> f64 {
        match self {
            Gender::Male => 0.0,
            Gender::Female => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Eye {
    Left,
    Right,
    Unknown,
}

impl Eye {
    pub fn code(self) -> &'static str {
        match self {
            Eye::Left => "L",
            Eye::Right => "R",
            Eye::Unknown => "U",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub image_id: String,
    pub patient_id: String,
    pub eye: Eye,
    pub path: std::path::PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub age: f64,
    pub gender: Gender,
    pub hypertension: bool,
    pub diabetes: bool,
    pub images: Vec<ImageSample>,
}

/// `(age - mean) / std` with statistics taken from the training subset.
pub fn standardize_age(age: f64, train_mean: f64, train_std: f64) -> Result<f64> {
    if !(train_std > 0.0) || !train_std.is_finite() {
        return Err(Error::Validation(format!(
            "training age std must be positive, got {train_std}"
        )));
    }
    Ok((age - train_mean) / train_std)
}

/// Mean and sample standard deviation of the given patients' ages.
pub fn age_statistics<'a>(records: impl IntoIterator<Item = &'a PatientRecord>) -> Result<(f64, f64)> {
    let ages: Vec<f64> = records.into_iter().map(|r| r.age).collect();
    if ages.len() < 2 {
        return Err(Error::Validation(
            "need at least two training patients for age statistics".into(),
        ));
    }
    let n = ages.len() as f64;
    let mean = ages.iter().sum::<f64>() / n;
    let var = ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}
