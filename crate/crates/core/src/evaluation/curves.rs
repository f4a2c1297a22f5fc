use serde::{Deserialize, Serialize};

use super::bootstrap::{percentile_indices, run_iterations, Resampler};
use super::metrics::Scorer;
use super::{BootstrapConfig, PredictionSet};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Roc,
    Pr,
}

impl CurveKind {
    pub fn name(self) -> &'static str {
        match self {
            CurveKind::Roc => "roc",
            CurveKind::Pr => "pr",
        }
    }
}

/// One bootstrap run's curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandCurve {
    pub run: usize,
    pub area: f64,
    /// (FPR, TPR) for ROC, (recall, precision) for PR.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveBand {
    pub kind: CurveKind,
    pub median: BandCurve,
    pub lower: BandCurve,
    pub upper: BandCurve,
    pub iterations: usize,
    pub seed: u64,
}

fn weighted_roc(s: &Scorer, w: Option<&[f64]>) -> Vec<(f64, f64)> {
    let groups = s.group_weights(w);
    let (pos, neg) = s.class_totals(w);
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for &(_, gp, gn) in groups.iter().rev() {
        if gp == 0.0 && gn == 0.0 {
            continue;
        }
        tp += gp;
        fp += gn;
        pts.push((fp / neg, tp / pos));
    }
    pts
}

fn weighted_pr(s: &Scorer, w: Option<&[f64]>) -> Vec<(f64, f64)> {
    let groups = s.group_weights(w);
    let (pos, _) = s.class_totals(w);
    let mut pts = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for &(_, gp, gn) in groups.iter().rev() {
        if gp == 0.0 && gn == 0.0 {
            continue;
        }
        tp += gp;
        fp += gn;
        pts.push((tp / pos, tp / (tp + fp)));
    }
    pts
}

/// ROC points from the highest threshold down, starting at (0, 0).
pub fn roc_curve(probabilities: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    weighted_roc(&Scorer::new(probabilities, labels), None)
}

/// (recall, precision) points from the highest threshold down, starting at (0, 1).
pub fn pr_curve(probabilities: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    weighted_pr(&Scorer::new(probabilities, labels), None)
}

/// Bootstrap runs at the lower-median, 2.5th and 97.5th percentile of the area.
pub fn curve_band(set: &PredictionSet, kind: CurveKind, cfg: &BootstrapConfig) -> Result<CurveBand> {
    cfg.validate()?;
    let scorer = Scorer::from_set(set);
    match kind {
        CurveKind::Roc => scorer.auc(None)?,
        CurveKind::Pr => scorer.average_precision(None)?,
    };
    let sampler = Resampler::new(set, cfg);
    let area = |w: &[f64]| match kind {
        CurveKind::Roc => scorer.auc(Some(w)),
        CurveKind::Pr => scorer.average_precision(Some(w)),
    };
    let areas = run_iterations(cfg.workers, cfg.iterations, |b| area(&sampler.draw(b)?.0))?;
    let mut ranked: Vec<usize> = (0..areas.len()).collect();
    ranked.sort_by(|&a, &b| areas[a].total_cmp(&areas[b]).then(a.cmp(&b)));
    let (lo, hi) = percentile_indices(ranked.len());
    let curve = |run: usize| -> Result<BandCurve> {
        let (w, _) = sampler.draw(run)?;
        let points = match kind {
            CurveKind::Roc => weighted_roc(&scorer, Some(&w)),
            CurveKind::Pr => weighted_pr(&scorer, Some(&w)),
        };
        Ok(BandCurve {
            run,
            area: areas[run],
            points,
        })
    };
    Ok(CurveBand {
        kind,
        median: curve(ranked[(ranked.len() - 1) / 2])?,
        lower: curve(ranked[lo])?,
        upper: curve(ranked[hi])?,
        iterations: cfg.iterations,
        seed: cfg.seed,
    })
}
