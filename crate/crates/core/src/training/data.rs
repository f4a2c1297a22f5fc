use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{
    age_statistics, preprocess_raw, standardize_age, PatientRecord, PreprocessConfig, SplitAssignment, Subset,
};
use crate::error::{Error, Result};
use crate::nn::FeatureMap;
use crate::paths::DemographicInput;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub image_id: String,
    pub patient_id: String,
    pub label: bool,
    pub diabetes: bool,
}

#[derive(Debug, Clone)]
pub struct Example<X> {
    pub meta: ExampleMeta,
    pub input: X,
}

/// Model input for one image: the preprocessed image (absent when the
/// system does not look at images) and the patient's demographics.
#[derive(Debug, Clone)]
pub struct SystemInput {
    pub image: Option<Arc<FeatureMap>>,
    pub demo: DemographicInput,
}

/// Statistics fitted on the training subset and reused at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub age_mean: f64,
    pub age_std: f64,
    pub preprocess: PreprocessConfig,
}

impl PreprocessStats {
    pub fn fit(records: &[PatientRecord], split: &SplitAssignment, preprocess: &PreprocessConfig) -> Result<Self> {
        let train = records
            .iter()
            .filter(|r| split.subset_of(&r.patient_id) == Some(Subset::Train));
        let (age_mean, age_std) = age_statistics(train)?;
        Ok(PreprocessStats {
            age_mean,
            age_std,
            preprocess: preprocess.clone(),
        })
    }

    pub fn demographics(&self, r: &PatientRecord) -> Result<DemographicInput> {
        Ok(DemographicInput {
            age_std: standardize_age(r.age, self.age_mean, self.age_std)?,
            gender_code: r.gender.code(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Training,
    Evaluation,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Training => "training",
            Phase::Evaluation => "evaluation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessEvent {
    pub phase: Phase,
    pub subset: Subset,
    pub rows: usize,
    pub denied: bool,
}

/// Subset-partitioned examples behind a phase gate: the test subset cannot
/// be read during training. Every read is logged.
#[derive(Debug)]
pub struct DataAccess<X> {
    subsets: BTreeMap<Subset, Vec<Example<X>>>,
    phase: Mutex<Phase>,
    log: Mutex<Vec<AccessEvent>>,
}

impl<X> DataAccess<X> {
    pub fn new(subsets: BTreeMap<Subset, Vec<Example<X>>>) -> Self {
        DataAccess {
            subsets,
            phase: Mutex::new(Phase::Training),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn set_phase(&self, phase: Phase) {
        *self.phase.lock().unwrap() = phase;
    }

    pub fn phase(&self) -> Phase {
        *self.phase.lock().unwrap()
    }

    pub fn read(&self, subset: Subset) -> Result<&[Example<X>]> {
        let phase = self.phase();
        let denied = phase == Phase::Training && subset == Subset::Test;
        let rows = self.subsets.get(&subset).map_or(&[][..], Vec::as_slice);
        self.log.lock().unwrap().push(AccessEvent {
            phase,
            subset,
            rows: if denied { 0 } else { rows.len() },
            denied,
        });
        if denied {
            return Err(Error::TestSplitAccess {
                phase: phase.name().into(),
            });
        }
        Ok(rows)
    }

    pub fn access_log(&self) -> Vec<AccessEvent> {
        self.log.lock().unwrap().clone()
    }

    /// True when no training-phase read of the test subset was attempted.
    pub fn test_untouched_in_training(&self) -> bool {
        self.access_log()
            .iter()
            .all(|e| !(e.phase == Phase::Training && e.subset == Subset::Test))
    }
}

/// Builds per-image examples for every subset. Images are loaded and
/// preprocessed only when `load_images` is set.
pub fn build_dataset(
    records: &[PatientRecord],
    split: &SplitAssignment,
    stats: &PreprocessStats,
    load_images: bool,
) -> Result<DataAccess<SystemInput>> {
    stats.preprocess.validate()?;
    let mut items = Vec::new();
    for r in records {
        let subset = split
            .subset_of(&r.patient_id)
            .ok_or_else(|| Error::Validation(format!("patient {} has no split assignment", r.patient_id)))?;
        let demo = stats.demographics(r)?;
        for img in &r.images {
            items.push((subset, r, img, demo));
        }
    }
    let examples: Vec<(Subset, Example<SystemInput>)> = items
        .par_iter()
        .map(|(subset, r, img, demo)| {
            let image = if load_images {
                Some(Arc::new(preprocess_raw(&img.path, &stats.preprocess)?))
            } else {
                None
            };
            Ok((
                *subset,
                Example {
                    meta: ExampleMeta {
                        image_id: img.image_id.clone(),
                        patient_id: r.patient_id.clone(),
                        label: r.hypertension,
                        diabetes: r.diabetes,
                    },
                    input: SystemInput { image, demo: *demo },
                },
            ))
        })
        .collect::<Result<_>>()?;
    let mut subsets: BTreeMap<Subset, Vec<Example<SystemInput>>> = Subset::ALL.iter().map(|&s| (s, Vec::new())).collect();
    for (s, e) in examples {
        subsets.get_mut(&s).unwrap().push(e);
    }
    for v in subsets.values_mut() {
        v.sort_by(|a, b| a.meta.image_id.cmp(&b.meta.image_id));
    }
    Ok(DataAccess::new(subsets))
}
