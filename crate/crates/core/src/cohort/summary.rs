//! Descriptive cohort statistics in the layout of a patient-characteristics table.

use serde::{Deserialize, Serialize};

use super::{Gender, PatientRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeStats {
    pub mean: f64,
    /// Sample standard deviation; absent for a single patient.
    pub std: Option<f64>,
    /// Normal-approximation 95% CI, `mean ± 1.96·std/√n`.
    pub ci95: Option<(f64, f64)>,
}

impl AgeStats {
    pub fn from_ages(ages: &[f64]) -> Option<Self> {
        if ages.is_empty() {
            return None;
        }
        let n = ages.len() as f64;
        let mean = ages.iter().sum::<f64>() / n;
        if ages.len() == 1 {
            return Some(AgeStats {
                mean,
                std: None,
                ci95: None,
            });
        }
        let var = ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        let half = 1.96 * std / n.sqrt();
        Some(AgeStats {
            mean,
            std: Some(std),
            ci95: Some((mean - half, mean + half)),
        })
    }

    /// `63.7±11.5 [62.4, 65.0]`.
    pub fn display(&self) -> String {
        match (self.std, self.ci95) {
            (Some(s), Some((lo, hi))) => format!("{:.1}±{:.1} [{:.1}, {:.1}]", self.mean, s, lo, hi),
            _ => format!("{:.1}", self.mean),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusFilter {
    Hypertensive,
    NonHypertensive,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenderFilter {
    Male,
    Female,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub status: StatusFilter,
    pub gender: GenderFilter,
    pub count: usize,
    pub age: Option<AgeStats>,
    pub diabetes_count: usize,
    /// Diabetic share of this cell, in percent.
    pub diabetes_percent: f64,
    /// This cell's share of its status row (all genders), in percent.
    pub gender_share_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub total: usize,
    pub cells: Vec<CellSummary>,
}

fn percent(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

pub fn cohort_summary(records: &[PatientRecord]) -> Result<CohortSummary> {
    if records.is_empty() {
        return Err(Error::Validation("cohort summary of an empty cohort".into()));
    }
    let statuses = [
        StatusFilter::Hypertensive,
        StatusFilter::NonHypertensive,
        StatusFilter::All,
    ];
    let genders = [GenderFilter::Male, GenderFilter::Female, GenderFilter::All];
    let mut cells = Vec::with_capacity(9);
    for status in statuses {
        let row: Vec<&PatientRecord> = records
            .iter()
            .filter(|r| match status {
                StatusFilter::Hypertensive => r.hypertension,
                StatusFilter::NonHypertensive => !r.hypertension,
                StatusFilter::All => true,
            })
            .collect();
        for gender in genders {
            let members: Vec<&PatientRecord> = row
                .iter()
                .copied()
                .filter(|r| match gender {
                    GenderFilter::Male => r.gender == Gender::Male,
                    GenderFilter::Female => r.gender == Gender::Female,
                    GenderFilter::All => true,
                })
                .collect();
            let ages: Vec<f64> = members.iter().map(|r| r.age).collect();
            let dm = members.iter().filter(|r| r.diabetes).count();
            cells.push(CellSummary {
                status,
                gender,
                count: members.len(),
                age: AgeStats::from_ages(&ages),
                diabetes_count: dm,
                diabetes_percent: percent(dm, members.len()),
                gender_share_percent: percent(members.len(), row.len()),
            });
        }
    }
    Ok(CohortSummary {
        total: records.len(),
        cells,
    })
}

impl CohortSummary {
    pub fn cell(&self, status: StatusFilter, gender: GenderFilter) -> &CellSummary {
        self.cells
            .iter()
            .find(|c| c.status == status && c.gender == gender)
            .expect("all nine cells are present")
    }

    /// Tab-separated table: rows by status, male/female columns per block.
    pub fn render_table(&self) -> String {
        let mut out = String::from(
            "Patient Characteristics\tAge Male\tAge Female\tDiabetes Male\tDiabetes Female\tGender Male\tGender Female\n",
        );
        for (status, label) in [
            (StatusFilter::Hypertensive, "Hypertension"),
            (StatusFilter::NonHypertensive, "Non-hypertension"),
            (StatusFilter::All, "All"),
        ] {
            let m = self.cell(status, GenderFilter::Male);
            let f = self.cell(status, GenderFilter::Female);
            let age = |c: &CellSummary| c.age.map(|a| a.display()).unwrap_or_else(|| "n/a".into());
            out.push_str(&format!(
                "{label}\t{}\t{}\t{:.0}% (n={})\t{:.0}% (n={})\t{:.0}% (n={})\t{:.0}% (n={})\n",
                age(m),
                age(f),
                m.diabetes_percent,
                m.diabetes_count,
                f.diabetes_percent,
                f.diabetes_count,
                m.gender_share_percent,
                m.count,
                f.gender_share_percent,
                f.count,
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize, age: f64, gender: Gender, htn: bool, dm: bool) -> PatientRecord {
        PatientRecord {
            patient_id: format!("p{i}"),
            age,
            gender,
            hypertension: htn,
            diabetes: dm,
            images: vec![],
        }
    }

    #[test]
    fn constant_ages_give_zero_width_interval() {
        let s = AgeStats::from_ages(&[50.0, 50.0, 50.0]).unwrap();
        assert_eq!(s.mean, 50.0);
        assert_eq!(s.std, Some(0.0));
        assert_eq!(s.ci95, Some((50.0, 50.0)));
    }

    #[test]
    fn three_ages_interval() {
        let s = AgeStats::from_ages(&[40.0, 50.0, 60.0]).unwrap();
        assert_eq!(s.mean, 50.0);
        assert!((s.std.unwrap() - 10.0).abs() < 1e-12);
        let (lo, hi) = s.ci95.unwrap();
        // 1.96 * 10 / sqrt(3) = 11.3161...
        assert!((lo - 38.684).abs() < 1e-3 && (hi - 61.316).abs() < 1e-3);
    }

    #[test]
    fn interval_half_width_matches_resampled_mean_spread() {
        // Brute-force check: the standard error used for the CI equals the
        // exact standard deviation of the mean over all n^n resamples, scaled
        // by sqrt(n/(n-1)).
        let ages = [40.0, 50.0, 60.0];
        let n = ages.len();
        let mut means = Vec::new();
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    means.push((ages[a] + ages[b] + ages[c]) / 3.0);
                }
            }
        }
        let m = means.iter().sum::<f64>() / means.len() as f64;
        let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / means.len() as f64;
        let se_population = var.sqrt();
        let se_sample = se_population * (n as f64 / (n as f64 - 1.0)).sqrt();
        let s = AgeStats::from_ages(&ages).unwrap();
        let (lo, hi) = s.ci95.unwrap();
        assert!(((hi - lo) / 2.0 - 1.96 * se_sample).abs() < 1e-9);
    }

    #[test]
    fn single_patient_has_no_interval() {
        let s = AgeStats::from_ages(&[70.0]).unwrap();
        assert_eq!(s.std, None);
        assert_eq!(s.ci95, None);
        assert!(AgeStats::from_ages(&[]).is_none());
    }

    #[test]
    fn display_format() {
        let s = AgeStats {
            mean: 63.7,
            std: Some(11.5),
            ci95: Some((63.7 - 1.96 * 11.5 / 310f64.sqrt(), 63.7 + 1.96 * 11.5 / 310f64.sqrt())),
        };
        assert_eq!(s.display(), "63.7±11.5 [62.4, 65.0]");
    }

    #[test]
    fn cells_partition_the_cohort() {
        let recs = vec![
            rec(0, 60.0, Gender::Male, true, true),
            rec(1, 62.0, Gender::Female, true, false),
            rec(2, 40.0, Gender::Female, false, false),
            rec(3, 45.0, Gender::Female, false, true),
        ];
        let s = cohort_summary(&recs).unwrap();
        let base: usize = s
            .cells
            .iter()
            .filter(|c| c.status != StatusFilter::All && c.gender != GenderFilter::All)
            .map(|c| c.count)
            .sum();
        assert_eq!(base, 4);
        let empty = s.cell(StatusFilter::NonHypertensive, GenderFilter::Male);
        assert_eq!(empty.count, 0);
        assert!(empty.age.is_none());
        let fem_nonhtn = s.cell(StatusFilter::NonHypertensive, GenderFilter::Female);
        assert_eq!(fem_nonhtn.diabetes_percent, 50.0);
        assert_eq!(fem_nonhtn.gender_share_percent, 100.0);
        assert!(s.render_table().contains("Non-hypertension"));
        for c in &s.cells {
            assert!((0.0..=100.0).contains(&c.diabetes_percent));
            assert!((0.0..=100.0).contains(&c.gender_share_percent));
        }
    }
}
