//! CSV manifest: `patient_id,image_path,eye,age,gender,hypertension,diabetes`,
//! one row per image.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Eye, Gender, ImageSample, PatientRecord};
use crate::error::{Error, Result};

pub const HEADER: [&str; 7] = [
    "patient_id",
    "image_path",
    "eye",
    "age",
    "gender",
    "hypertension",
    "diabetes",
];

#[derive(Debug, Deserialize, Serialize)]
struct Row {
    patient_id: String,
    image_path: String,
    eye: String,
    age: String,
    gender: String,
    hypertension: String,
    diabetes: String,
}

fn parse_flag(value: &str, field: &str, line: usize) -> Result<bool> {
    match value.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Parse {
            location: format!("row {line}"),
            message: format!("{field} must be 0 or 1, got `{other}`"),
        }),
    }
}

fn parse_eye(value: &str, line: usize) -> Result<Eye> {
    match value.trim() {
        "L" | "l" => Ok(Eye::Left),
        "R" | "r" => Ok(Eye::Right),
        "U" | "u" => Ok(Eye::Unknown),
        other => Err(Error::Parse {
            location: format!("row {line}"),
            message: format!("eye must be L, R or U, got `{other}`"),
        }),
    }
}

fn parse_gender(value: &str, line: usize) -> Result<Gender> {
    match value.trim().to_ascii_lowercase().as_str() {
        "m" | "male" => Ok(Gender::Male),
        "f" | "female" => Ok(Gender::Female),
        other => Err(Error::Parse {
            location: format!("row {line}"),
            message: format!("gender must be M or F, got `{other}`"),
        }),
    }
}

/// Parses manifest text. Image paths are resolved against `base_dir`;
/// when `check_files` is set, every referenced image must exist.
pub fn parse_manifest<R: Read>(
    reader: R,
    base_dir: &Path,
    check_files: bool,
) -> Result<Vec<PatientRecord>> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Parse {
            location: "header".into(),
            message: format!("expected `{}`", HEADER.join(",")),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_patient: HashMap<String, PatientRecord> = HashMap::new();
    let mut image_ids: HashSet<String> = HashSet::new();

    for (i, row) in csv.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            location: format!("row {line}"),
            message: e.to_string(),
        })?;
        if row.patient_id.is_empty() {
            return Err(Error::Parse {
                location: format!("row {line}"),
                message: "empty patient_id".into(),
            });
        }
        let age: f64 = row.age.parse().map_err(|_| Error::Parse {
            location: format!("row {line}"),
            message: format!("age `{}` is not a number", row.age),
        })?;
        if !age.is_finite() || age <= 0.0 {
            return Err(Error::Validation(format!(
                "patient {}: age must be positive, got {age}",
                row.patient_id
            )));
        }
        let gender = parse_gender(&row.gender, line)?;
        let hypertension = parse_flag(&row.hypertension, "hypertension", line)?;
        let diabetes = parse_flag(&row.diabetes, "diabetes", line)?;
        let eye = parse_eye(&row.eye, line)?;

        let path: PathBuf = base_dir.join(&row.image_path);
        if check_files && !path.is_file() {
            return Err(Error::Validation(format!(
                "patient {}: missing image file {}",
                row.patient_id,
                path.display()
            )));
        }
        if !image_ids.insert(row.image_path.clone()) {
            return Err(Error::Validation(format!(
                "duplicate image {}",
                row.image_path
            )));
        }
        let sample = ImageSample {
            image_id: row.image_path.clone(),
            patient_id: row.patient_id.clone(),
            eye,
            path,
        };

        match by_patient.get_mut(&row.patient_id) {
            Some(rec) => {
                if rec.age != age
                    || rec.gender != gender
                    || rec.hypertension != hypertension
                    || rec.diabetes != diabetes
                {
                    return Err(Error::Validation(format!(
                        "duplicate patient_id {} with conflicting attributes (row {line})",
                        row.patient_id
                    )));
                }
                rec.images.push(sample);
            }
            None => {
                order.push(row.patient_id.clone());
                by_patient.insert(
                    row.patient_id.clone(),
                    PatientRecord {
                        patient_id: row.patient_id,
                        age,
                        gender,
                        hypertension,
                        diabetes,
                        images: vec![sample],
                    },
                );
            }
        }
    }

    Ok(order
        .into_iter()
        .map(|id| by_patient.remove(&id).expect("patient registered"))
        .collect())
}

pub fn load_manifest(path: &Path) -> Result<Vec<PatientRecord>> {
    let file = std::fs::File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(file, base, true)
}

/// Writes records with image paths made relative to `base_dir` when possible.
pub fn write_manifest<W: Write>(writer: W, records: &[PatientRecord], base_dir: &Path) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(HEADER)?;
    for rec in records {
        for img in &rec.images {
            let rel = img.path.strip_prefix(base_dir).unwrap_or(&img.path);
            csv.write_record([
                rec.patient_id.as_str(),
                &rel.to_string_lossy(),
                img.eye.code(),
                &format!("{}", rec.age),
                match rec.gender {
                    Gender::Male => "M",
                    Gender::Female => "F",
                },
                if rec.hypertension { "1" } else { "0" },
                if rec.diabetes { "1" } else { "0" },
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}
