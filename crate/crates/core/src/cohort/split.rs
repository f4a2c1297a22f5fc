//! Patient-level split stratified on hypertension × diabetes.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::PatientRecord;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Validation,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Validation, Subset::Test];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Validation => "validation",
            Subset::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "validation" => Ok(Subset::Validation),
            "test" => Ok(Subset::Test),
            other => Err(Error::Parse {
                location: "subset".into(),
                message: format!("unknown subset `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::config("ratios", "every ratio must be a non-negative number"));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "ratios",
                format!("ratios must sum to 1, got {total}"),
            ));
        }
        Ok(())
    }

    fn get(&self, subset: Subset) -> f64 {
        match subset {
            Subset::Train => self.train,
            Subset::Validation => self.validation,
            Subset::Test => self.test,
        }
    }
}

/// Per-subset balance achieved by a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub counts: BTreeMap<Subset, usize>,
    pub htn_prevalence: BTreeMap<Subset, f64>,
    pub htn_diabetes_fraction: BTreeMap<Subset, f64>,
    pub global_htn_prevalence: f64,
    pub global_htn_diabetes_fraction: f64,
    /// Largest |subset − global| over non-empty subsets, in percentage points.
    pub max_htn_deviation_points: f64,
    pub max_htn_diabetes_deviation_points: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Subset>,
    pub seed: u64,
    pub ratios: SplitRatios,
    pub warnings: Vec<String>,
}

impl SplitAssignment {
    pub fn subset_of(&self, patient_id: &str) -> Option<Subset> {
        self.assignment.get(patient_id).copied()
    }

    pub fn patients(&self, subset: Subset) -> impl Iterator<Item = &str> {
        self.assignment
            .iter()
            .filter(move |(_, s)| **s == subset)
            .map(|(p, _)| p.as_str())
    }

    pub fn count(&self, subset: Subset) -> usize {
        self.patients(subset).count()
    }

    pub fn report(&self, records: &[PatientRecord]) -> SplitReport {
        let mut counts = BTreeMap::new();
        let mut htn = BTreeMap::new();
        let mut htn_dm = BTreeMap::new();
        for r in records {
            if let Some(s) = self.subset_of(&r.patient_id) {
                *counts.entry(s).or_insert(0usize) += 1;
                if r.hypertension {
                    *htn.entry(s).or_insert(0usize) += 1;
                    if r.diabetes {
                        *htn_dm.entry(s).or_insert(0usize) += 1;
                    }
                }
            }
        }
        let n = records.len() as f64;
        let g_htn = records.iter().filter(|r| r.hypertension).count() as f64;
        let g_htn_dm = records
            .iter()
            .filter(|r| r.hypertension && r.diabetes)
            .count() as f64;
        let global_prev = if n > 0.0 { g_htn / n } else { 0.0 };
        let global_frac = if g_htn > 0.0 { g_htn_dm / g_htn } else { 0.0 };

        let mut prevalence = BTreeMap::new();
        let mut fraction = BTreeMap::new();
        let mut max_prev: f64 = 0.0;
        let mut max_frac: f64 = 0.0;
        for s in Subset::ALL {
            let c = *counts.get(&s).unwrap_or(&0);
            if c == 0 {
                continue;
            }
            let h = *htn.get(&s).unwrap_or(&0);
            let p = h as f64 / c as f64;
            prevalence.insert(s, p);
            max_prev = max_prev.max((p - global_prev).abs() * 100.0);
            if h > 0 {
                let f = *htn_dm.get(&s).unwrap_or(&0) as f64 / h as f64;
                fraction.insert(s, f);
                max_frac = max_frac.max((f - global_frac).abs() * 100.0);
            }
        }
        SplitReport {
            counts,
            htn_prevalence: prevalence,
            htn_diabetes_fraction: fraction,
            global_htn_prevalence: global_prev,
            global_htn_diabetes_fraction: global_frac,
            max_htn_deviation_points: max_prev,
            max_htn_diabetes_deviation_points: max_frac,
        }
    }

    /// `patient_id,subset` rows sorted by patient id.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["patient_id", "subset"])?;
        for (p, s) in &self.assignment {
            csv.write_record([p.as_str(), s.name()])?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R, seed: u64, ratios: SplitRatios) -> Result<Self> {
        let mut csv = csv::Reader::from_reader(reader);
        let mut assignment = BTreeMap::new();
        for (i, row) in csv.records().enumerate() {
            let row = row?;
            if row.len() != 2 {
                return Err(Error::Parse {
                    location: format!("split row {}", i + 2),
                    message: "expected patient_id,subset".into(),
                });
            }
            if assignment
                .insert(row[0].to_string(), row[1].parse()?)
                .is_some()
            {
                return Err(Error::Validation(format!(
                    "patient {} assigned twice",
                    &row[0]
                )));
            }
        }
        Ok(SplitAssignment {
            assignment,
            seed,
            ratios,
            warnings: Vec::new(),
        })
    }
}

/// Half-up rounding of `n * ratio`.
fn rounded_share(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio + 0.5).floor() as usize
}

/// Target patient counts per subset: validation and test are rounded to the
/// nearest integer, train takes the remainder.
fn subset_targets(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let mut val = rounded_share(n, ratios.validation);
    let mut test = rounded_share(n, ratios.test);
    while val + test > n {
        if val >= test {
            val -= 1;
        } else {
            test -= 1;
        }
    }
    [n - val - test, val, test]
}

/// Splits patients into train/validation/test.
///
/// Patients are grouped into four strata (HTN × diabetes, hypertensive
/// strata first), shuffled within each stratum with the seeded generator and
/// dealt so that cumulative per-subset counts at every stratum boundary are
/// the rounded proportional share. Keeping the hypertensive strata contiguous
/// bounds both the per-subset HTN prevalence and the HTN∩diabetes fraction
/// by half a patient of rounding at each boundary.
pub fn stratified_patient_split(
    records: &[PatientRecord],
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitAssignment> {
    ratios.validate()?;
    if records.is_empty() {
        return Err(Error::Validation("cannot split an empty cohort".into()));
    }
    let n = records.len();
    let targets = subset_targets(n, &ratios);

    let mut strata: [Vec<&PatientRecord>; 4] = Default::default();
    for r in records {
        let idx = match (r.hypertension, r.diabetes) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        strata[idx].push(r);
    }

    // Allocation matrix [stratum][subset].
    let mut alloc = [[0usize; 3]; 4];
    let mut placed = [0usize; 3];
    let mut cumulative = 0usize;
    for (s, members) in strata.iter().enumerate() {
        let size = members.len();
        cumulative += size;
        let mut take = [0usize; 3];
        for k in 1..3 {
            let want = (cumulative as f64 * targets[k] as f64 / n as f64 + 0.5).floor() as usize;
            take[k] = want.saturating_sub(placed[k]);
        }
        while take[1] + take[2] > size {
            if take[1] >= take[2] {
                take[1] -= 1;
            } else {
                take[2] -= 1;
            }
        }
        take[0] = size - take[1] - take[2];
        for k in 0..3 {
            placed[k] += take[k];
        }
        alloc[s] = take;
    }
    // Clamping in tiny strata can leave a subset short; move patients from
    // train in the largest strata until the totals match.
    for k in 1..3 {
        while placed[k] < targets[k] {
            let s = (0..4)
                .filter(|&s| alloc[s][0] > 0)
                .max_by_key(|&s| (alloc[s][0], std::cmp::Reverse(s)))
                .expect("train has spare patients when a subset is short");
            alloc[s][0] -= 1;
            alloc[s][k] += 1;
            placed[0] -= 1;
            placed[k] += 1;
        }
    }

    let mut warnings = Vec::new();
    let mut assignment = BTreeMap::new();
    for (s, members) in strata.iter_mut().enumerate() {
        members.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        let mut rng = rng::stream(seed, s as u64);
        members.shuffle(&mut rng);
        let mut it = members.iter();
        for subset in Subset::ALL {
            let count = alloc[s][subset.index()];
            if !members.is_empty() && count == 0 && ratios.get(subset) > 0.0 {
                warnings.push(format!(
                    "stratum {} has no patients in {}",
                    stratum_name(s),
                    subset.name()
                ));
            }
            for rec in it.by_ref().take(count) {
                if assignment.insert(rec.patient_id.clone(), subset).is_some() {
                    return Err(Error::Validation(format!(
                        "duplicate patient_id {}",
                        rec.patient_id
                    )));
                }
            }
        }
    }

    Ok(SplitAssignment {
        assignment,
        seed,
        ratios,
        warnings,
    })
}

fn stratum_name(s: usize) -> &'static str {
    ["htn+dm", "htn-only", "dm-only", "neither"][s]
}
