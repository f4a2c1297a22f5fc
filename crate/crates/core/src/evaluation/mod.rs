//! Classification metrics, percentile bootstrap intervals, paired model
//! comparison, subgroup analysis and ROC/PR bands.

mod bootstrap;
mod curves;
mod metrics;
pub mod plot;
pub mod report;

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bootstrap::{
    bootstrap_ci, bootstrap_distribution, paired_difference, percentile_indices, subgroup_eval,
    BootstrapConfig, BootstrapDistribution, BootstrapResult, BootstrapUnit, GroupResult,
    MetricInterval, PairedDifferenceResult, SubgroupReport,
};
pub use curves::{curve_band, pr_curve, roc_curve, CurveBand, CurveKind};
pub use metrics::{confusion_metrics, evaluate, pr_auc, roc_auc, Confusion, MetricReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    F1,
    Auc,
    Pr,
    Accuracy,
    Precision,
    Recall,
    Specificity,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::F1,
        Metric::Auc,
        Metric::Pr,
        Metric::Accuracy,
        Metric::Precision,
        Metric::Recall,
        Metric::Specificity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::F1 => "f1",
            Metric::Auc => "auc",
            Metric::Pr => "pr",
            Metric::Accuracy => "accuracy",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::Specificity => "specificity",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::F1 => "F1",
            Metric::Auc => "AUC",
            Metric::Pr => "PR",
            Metric::Accuracy => "Accuracy",
            Metric::Precision => "Precision",
            Metric::Recall => "Recall",
            Metric::Specificity => "Specificity",
        }
    }

    /// Threshold-free metrics that need both classes (AUC) or a positive (PR).
    pub fn is_rank(self) -> bool {
        matches!(self, Metric::Auc | Metric::Pr)
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub image_id: String,
    pub patient_id: String,
    pub probability: f64,
    pub label: u8,
    pub diabetes: u8,
}

impl PredictionRow {
    pub fn positive(&self) -> bool {
        self.label == 1
    }
}

/// Per-image predictions in canonical (image id) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    rows: Vec<PredictionRow>,
}

impl PredictionSet {
    pub fn new(mut rows: Vec<PredictionRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Validation("prediction set is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for r in &rows {
            if !(0.0..=1.0).contains(&r.probability) {
                return Err(Error::Validation(format!(
                    "probability {} for {} is outside [0, 1]",
                    r.probability, r.image_id
                )));
            }
            if r.label > 1 || r.diabetes > 1 {
                return Err(Error::Validation(format!("non-binary flag for {}", r.image_id)));
            }
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::Validation(format!("duplicate image id {}", r.image_id)));
            }
        }
        rows.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        Ok(PredictionSet { rows })
    }

    pub fn rows(&self) -> &[PredictionRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.probability).collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.rows.iter().map(PredictionRow::positive).collect()
    }

    /// Rows whose diabetes flag equals `flag`, if any.
    pub fn filter_diabetes(&self, flag: bool) -> Option<PredictionSet> {
        let rows: Vec<_> = self
            .rows
            .iter()
            .filter(|r| (r.diabetes == 1) == flag)
            .cloned()
            .collect();
        if rows.is_empty() {
            None
        } else {
            Some(PredictionSet { rows })
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(reader);
        let mut rows = Vec::new();
        for (i, rec) in rd.deserialize().enumerate() {
            let row: PredictionRow = rec.map_err(|e| Error::Parse {
                location: format!("predictions row {}", i + 2),
                message: e.to_string(),
            })?;
            rows.push(row);
        }
        Self::new(rows)
    }
}
