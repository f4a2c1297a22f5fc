use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Metric, PredictionSet};
use crate::error::{Error, Result};

/// Weighted confusion counts. Weights are resample multiplicities (all 1 for
/// the original set).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: f64,
    pub fp: f64,
    pub tn: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

impl Confusion {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        ratio(2.0 * p * r, p + r)
    }

    pub fn add(&self, other: &Confusion) -> Confusion {
        Confusion {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }
}

/// Point estimates keyed by metric.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub values: BTreeMap<Metric, f64>,
}

impl MetricReport {
    pub fn get(&self, m: Metric) -> Option<f64> {
        self.values.get(&m).copied()
    }
}

/// Rows pre-sorted by probability so weighted metrics are a single pass over
/// tie groups.
#[derive(Debug, Clone)]
pub(crate) struct Scorer {
    probs: Vec<f64>,
    labels: Vec<bool>,
    /// Row indices in ascending probability order.
    order: Vec<usize>,
    /// End offsets (into `order`) of each equal-probability group.
    group_ends: Vec<usize>,
}

impl Scorer {
    pub fn new(probs: &[f64], labels: &[bool]) -> Self {
        assert_eq!(probs.len(), labels.len());
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(a.cmp(&b)));
        let mut group_ends = Vec::new();
        for i in 1..=order.len() {
            if i == order.len() || probs[order[i]] != probs[order[i - 1]] {
                group_ends.push(i);
            }
        }
        Scorer {
            probs: probs.to_vec(),
            labels: labels.to_vec(),
            order,
            group_ends,
        }
    }

    pub fn from_set(set: &PredictionSet) -> Self {
        Self::new(&set.probabilities(), &set.labels())
    }

    fn weight(w: Option<&[f64]>, i: usize) -> f64 {
        w.map_or(1.0, |w| w[i])
    }

    pub fn class_totals(&self, w: Option<&[f64]>) -> (f64, f64) {
        let mut pos = 0.0;
        let mut neg = 0.0;
        for (i, &y) in self.labels.iter().enumerate() {
            if y {
                pos += Self::weight(w, i);
            } else {
                neg += Self::weight(w, i);
            }
        }
        (pos, neg)
    }

    pub fn confusion(&self, w: Option<&[f64]>, threshold: f64) -> Confusion {
        let mut c = Confusion::default();
        for (i, (&p, &y)) in self.probs.iter().zip(&self.labels).enumerate() {
            let wi = Self::weight(w, i);
            match (p >= threshold, y) {
                (true, true) => c.tp += wi,
                (true, false) => c.fp += wi,
                (false, false) => c.tn += wi,
                (false, true) => c.fn_ += wi,
            }
        }
        c
    }

    /// (positive, negative) weight of each tie group, ascending probability.
    pub fn group_weights(&self, w: Option<&[f64]>) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::with_capacity(self.group_ends.len());
        let mut start = 0;
        for &end in &self.group_ends {
            let mut gp = 0.0;
            let mut gn = 0.0;
            for &i in &self.order[start..end] {
                if self.labels[i] {
                    gp += Self::weight(w, i);
                } else {
                    gn += Self::weight(w, i);
                }
            }
            out.push((self.probs[self.order[start]], gp, gn));
            start = end;
        }
        out
    }

    /// Mann–Whitney AUC with half credit for ties.
    pub fn auc(&self, w: Option<&[f64]>) -> Result<f64> {
        let groups = self.group_weights(w);
        let (pos, neg) = groups.iter().fold((0.0, 0.0), |(p, n), g| (p + g.1, n + g.2));
        if pos <= 0.0 || neg <= 0.0 {
            return Err(Error::UndefinedMetric("AUC needs both classes".into()));
        }
        let mut below = 0.0;
        let mut num = 0.0;
        for &(_, gp, gn) in &groups {
            num += gp * (below + 0.5 * gn);
            below += gn;
        }
        Ok(num / (pos * neg))
    }

    /// Step-wise average precision; each tie group is one threshold.
    pub fn average_precision(&self, w: Option<&[f64]>) -> Result<f64> {
        let groups = self.group_weights(w);
        let pos: f64 = groups.iter().map(|g| g.1).sum();
        if pos <= 0.0 {
            return Err(Error::UndefinedMetric("PR needs at least one positive".into()));
        }
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut ap = 0.0;
        for &(_, gp, gn) in groups.iter().rev() {
            tp += gp;
            fp += gn;
            if gp > 0.0 {
                ap += (gp / pos) * (tp / (tp + fp));
            }
        }
        Ok(ap)
    }

    pub fn metric(&self, m: Metric, w: Option<&[f64]>, confusion: &Confusion) -> Result<f64> {
        Ok(match m {
            Metric::F1 => confusion.f1(),
            Metric::Accuracy => confusion.accuracy(),
            Metric::Precision => confusion.precision(),
            Metric::Recall => confusion.recall(),
            Metric::Specificity => confusion.specificity(),
            Metric::Auc => self.auc(w)?,
            Metric::Pr => self.average_precision(w)?,
        })
    }

    pub fn metrics(&self, wanted: &[Metric], w: Option<&[f64]>, threshold: f64) -> Result<Vec<f64>> {
        let c = self.confusion(w, threshold);
        wanted.iter().map(|&m| self.metric(m, w, &c)).collect()
    }
}

pub(crate) fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config("threshold", "must lie in (0, 1)"));
    }
    Ok(())
}

/// Threshold-dependent metrics; probabilities `>= threshold` count as positive.
pub fn confusion_metrics(set: &PredictionSet, threshold: f64) -> Result<(Confusion, MetricReport)> {
    check_threshold(threshold)?;
    let s = Scorer::from_set(set);
    let c = s.confusion(None, threshold);
    let mut report = MetricReport::default();
    for m in [
        Metric::F1,
        Metric::Accuracy,
        Metric::Precision,
        Metric::Recall,
        Metric::Specificity,
    ] {
        report.values.insert(m, s.metric(m, None, &c)?);
    }
    Ok((c, report))
}

pub fn roc_auc(probabilities: &[f64], labels: &[bool]) -> Result<f64> {
    Scorer::new(probabilities, labels).auc(None)
}

pub fn pr_auc(probabilities: &[f64], labels: &[bool]) -> Result<f64> {
    Scorer::new(probabilities, labels).average_precision(None)
}

/// All seven metrics on one set.
pub fn evaluate(set: &PredictionSet, threshold: f64) -> Result<MetricReport> {
    check_threshold(threshold)?;
    let s = Scorer::from_set(set);
    let values = s.metrics(&Metric::ALL, None, threshold)?;
    Ok(MetricReport {
        values: Metric::ALL.into_iter().zip(values).collect(),
    })
}
