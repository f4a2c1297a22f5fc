use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::FeatureDim;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub head_learning_rates: Vec<f64>,
    pub backbone_learning_rates: Vec<f64>,
    /// Empty keeps the configured feature width.
    pub feature_dims: Vec<FeatureDim>,
    /// Empty keeps the configured image size.
    pub image_sizes: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            head_learning_rates: vec![1e-2, 5e-2, 1e-3, 5e-3],
            backbone_learning_rates: vec![1e-4, 5e-4, 1e-5, 5e-5, 1e-6, 5e-6],
            feature_dims: vec![],
            image_sizes: vec![],
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.head_learning_rates.is_empty() {
            return Err(Error::config("sweep.head_learning_rates", "must not be empty"));
        }
        if self.backbone_learning_rates.is_empty() {
            return Err(Error::config("sweep.backbone_learning_rates", "must not be empty"));
        }
        let lrs = self.head_learning_rates.iter().chain(&self.backbone_learning_rates);
        if lrs.clone().any(|&v| !(v > 0.0)) {
            return Err(Error::config("sweep", "learning rates must be positive"));
        }
        Ok(())
    }

    /// Cartesian product: feature dim, image size, head rate, backbone rate.
    pub fn cells(&self) -> Vec<SweepCell> {
        let dims: Vec<Option<FeatureDim>> = if self.feature_dims.is_empty() {
            vec![None]
        } else {
            self.feature_dims.iter().copied().map(Some).collect()
        };
        let sizes: Vec<Option<usize>> = if self.image_sizes.is_empty() {
            vec![None]
        } else {
            self.image_sizes.iter().copied().map(Some).collect()
        };
        let mut out = Vec::new();
        for &feature_dim in &dims {
            for &image_size in &sizes {
                for &head in &self.head_learning_rates {
                    for &backbone in &self.backbone_learning_rates {
                        out.push(SweepCell {
                            head_learning_rate: head,
                            backbone_learning_rate: backbone,
                            feature_dim,
                            image_size,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub head_learning_rate: f64,
    pub backbone_learning_rate: f64,
    pub feature_dim: Option<FeatureDim>,
    pub image_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub auc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Descending by AUC; failed cells last, in grid order.
    pub rows: Vec<SweepRow>,
    pub best: Option<SweepCell>,
}

/// Runs `run_cell` (returning best validation AUC and its epoch) for every
/// grid cell. Cell failures are recorded, not propagated.
pub fn sweep(grid: &SweepGrid, mut run_cell: impl FnMut(&SweepCell) -> Result<(f64, usize)>) -> Result<SweepResult> {
    grid.validate()?;
    let mut rows: Vec<SweepRow> = grid
        .cells()
        .into_iter()
        .map(|cell| match run_cell(&cell) {
            Ok((auc, epoch)) => SweepRow {
                cell,
                auc: Some(auc),
                best_epoch: Some(epoch),
                error: None,
            },
            Err(e) => SweepRow {
                cell,
                auc: None,
                best_epoch: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    rows.sort_by(|a, b| match (a.auc, b.auc) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let best = rows.first().filter(|r| r.auc.is_some()).map(|r| r.cell);
    Ok(SweepResult { rows, best })
}

fn dim_label(d: Option<FeatureDim>) -> String {
    d.map_or_else(|| "default".into(), |d| d.to_string())
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "rank",
            "feature_dim",
            "image_size",
            "head_learning_rate",
            "backbone_learning_rate",
            "auc",
            "best_epoch",
            "error",
        ])?;
        for (i, r) in self.rows.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                dim_label(r.cell.feature_dim),
                r.cell.image_size.map_or_else(|| "default".into(), |s| s.to_string()),
                r.cell.head_learning_rate.to_string(),
                r.cell.backbone_learning_rate.to_string(),
                r.auc.map_or_else(String::new, |a| format!("{a:.6}")),
                r.best_epoch.map_or_else(String::new, |e| e.to_string()),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Feature dim × head learning rate matrix of the best AUC over the
    /// remaining axes, tab separated.
    pub fn matrix_report(&self) -> String {
        let mut dims: Vec<Option<FeatureDim>> = Vec::new();
        let mut lrs: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !dims.contains(&r.cell.feature_dim) {
                dims.push(r.cell.feature_dim);
            }
            if !lrs.contains(&r.cell.head_learning_rate) {
                lrs.push(r.cell.head_learning_rate);
            }
        }
        dims.sort_by_key(|d| match d {
            Some(FeatureDim::Projected(n)) => (0, *n),
            Some(FeatureDim::Native(_)) => (1, 0),
            None => (2, 0),
        });
        lrs.sort_by(|a, b| b.total_cmp(a));
        let mut out = String::from("feature_dim");
        for lr in &lrs {
            out.push_str(&format!("\t{lr:e}"));
        }
        out.push('\n');
        for d in &dims {
            out.push_str(&dim_label(*d));
            for lr in &lrs {
                let best = self
                    .rows
                    .iter()
                    .filter(|r| r.cell.feature_dim == *d && r.cell.head_learning_rate == *lr)
                    .filter_map(|r| r.auc)
                    .fold(None, |acc: Option<f64>, a| Some(acc.map_or(a, |b| b.max(a))));
                out.push_str(&best.map_or_else(|| "\t-".into(), |a| format!("\t{a:.3}")));
            }
            out.push('\n');
        }
        out
    }
}
