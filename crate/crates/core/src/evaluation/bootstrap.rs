use std::collections::BTreeMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{check_threshold, Scorer};
use super::{Metric, PredictionSet};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapUnit {
    /// Resample individual images.
    Image,
    /// Resample patients and keep all of their images together.
    Patient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub seed: u64,
    pub threshold: f64,
    /// Redraws allowed per iteration before a single-class resample is fatal.
    pub max_redraws: usize,
    pub unit: BootstrapUnit,
    /// Worker threads; 0 uses the global pool. Results do not depend on it.
    pub workers: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            iterations: 10_000,
            seed: 0,
            threshold: 0.5,
            max_redraws: 1000,
            unit: BootstrapUnit::Image,
            workers: 1,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("evaluation.iterations", "must be at least 1"));
        }
        check_threshold(self.threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricInterval {
    pub point: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub metrics: BTreeMap<Metric, MetricInterval>,
    pub iterations: usize,
    pub seed: u64,
    pub threshold: f64,
    pub unit: BootstrapUnit,
    pub observations: usize,
    /// Single-class resamples that were discarded and redrawn.
    pub redrawn: usize,
    pub percentile_rule: String,
    pub pr_estimator: String,
    pub notes: Vec<String>,
}

/// Raw per-iteration metric values, in iteration order.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapDistribution {
    pub metrics: Vec<Metric>,
    pub values: Vec<Vec<f64>>,
    pub redrawn: usize,
}

impl BootstrapDistribution {
    pub fn of(&self, m: Metric) -> Option<&[f64]> {
        self.metrics
            .iter()
            .position(|&x| x == m)
            .map(|i| self.values[i].as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDifferenceResult {
    pub metric: Metric,
    /// Metric of A minus metric of B on the original rows.
    pub point_difference: f64,
    pub mean_difference: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub significant: bool,
    pub iterations: usize,
    pub seed: u64,
    pub redrawn: usize,
}

impl PairedDifferenceResult {
    /// `0.020 [0.003, 0.038]`.
    pub fn display(&self) -> String {
        format!("{:.3} [{:.3}, {:.3}]", self.mean_difference, self.ci_lo, self.ci_hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub name: String,
    pub diabetes: bool,
    pub images: usize,
    pub percent: f64,
    pub result: Option<BootstrapResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub groups: Vec<GroupResult>,
}

/// Order-statistic indices of the 2.5% / 97.5% bounds in a sorted sample of
/// size `b`: the k-th smallest and k-th largest with `k = ceil(0.025·b)`.
pub fn percentile_indices(b: usize) -> (usize, usize) {
    let k = ((25 * b).div_ceil(1000)).max(1);
    (k - 1, b - k)
}

fn sorted_bounds(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (lo, hi) = percentile_indices(v.len());
    (v[lo], v[hi])
}

pub(crate) fn run_iterations<T: Send>(
    workers: usize,
    iterations: usize,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    match workers {
        1 => (0..iterations).map(&f).collect(),
        0 => (0..iterations).into_par_iter().map(&f).collect(),
        n => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
            pool.install(|| (0..iterations).into_par_iter().map(&f).collect())
        }
    }
}

/// Draws multiplicity vectors over the canonical row order.
pub(crate) struct Resampler {
    n: usize,
    labels: Vec<bool>,
    clusters: Option<Vec<Vec<usize>>>,
    seed: u64,
    max_redraws: usize,
}

impl Resampler {
    pub fn new(set: &PredictionSet, cfg: &BootstrapConfig) -> Self {
        let clusters = match cfg.unit {
            BootstrapUnit::Image => None,
            BootstrapUnit::Patient => {
                let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
                for (i, r) in set.rows().iter().enumerate() {
                    by_patient.entry(&r.patient_id).or_default().push(i);
                }
                Some(by_patient.into_values().collect())
            }
        };
        Resampler {
            n: set.len(),
            labels: set.labels(),
            clusters,
            seed: cfg.seed,
            max_redraws: cfg.max_redraws,
        }
    }

    /// Weights for iteration `b` and the number of redraws it needed.
    pub fn draw(&self, b: usize) -> Result<(Vec<f64>, usize)> {
        let mut r = rng::stream(self.seed, b as u64);
        for attempt in 0..=self.max_redraws {
            let mut w = vec![0.0; self.n];
            match &self.clusters {
                None => {
                    for _ in 0..self.n {
                        w[r.gen_range(0..self.n)] += 1.0;
                    }
                }
                Some(clusters) => {
                    for _ in 0..clusters.len() {
                        for &i in &clusters[r.gen_range(0..clusters.len())] {
                            w[i] += 1.0;
                        }
                    }
                }
            }
            let pos = w.iter().zip(&self.labels).any(|(&wi, &y)| y && wi > 0.0);
            let neg = w.iter().zip(&self.labels).any(|(&wi, &y)| !y && wi > 0.0);
            if pos && neg {
                return Ok((w, attempt));
            }
        }
        Err(Error::UndefinedMetric(format!(
            "bootstrap iteration {b}: every resample had a single class after {} redraws",
            self.max_redraws
        )))
    }
}

fn check_two_classes(set: &PredictionSet) -> Result<()> {
    let labels = set.labels();
    if !(labels.iter().any(|&y| y) && labels.iter().any(|&y| !y)) {
        return Err(Error::UndefinedMetric(
            "bootstrap needs both classes in the original set".into(),
        ));
    }
    Ok(())
}

pub fn bootstrap_distribution(
    set: &PredictionSet,
    metrics: &[Metric],
    cfg: &BootstrapConfig,
) -> Result<BootstrapDistribution> {
    cfg.validate()?;
    check_two_classes(set)?;
    let scorer = Scorer::from_set(set);
    let sampler = Resampler::new(set, cfg);
    let per_iter = run_iterations(cfg.workers, cfg.iterations, |b| {
        let (w, redraws) = sampler.draw(b)?;
        Ok((scorer.metrics(metrics, Some(&w), cfg.threshold)?, redraws))
    })?;
    let mut values = vec![Vec::with_capacity(cfg.iterations); metrics.len()];
    let mut redrawn = 0;
    for (vals, r) in per_iter {
        redrawn += r;
        for (dst, v) in values.iter_mut().zip(vals) {
            dst.push(v);
        }
    }
    Ok(BootstrapDistribution {
        metrics: metrics.to_vec(),
        values,
        redrawn,
    })
}

pub fn bootstrap_ci(set: &PredictionSet, metrics: &[Metric], cfg: &BootstrapConfig) -> Result<BootstrapResult> {
    let dist = bootstrap_distribution(set, metrics, cfg)?;
    let scorer = Scorer::from_set(set);
    let points = scorer.metrics(metrics, None, cfg.threshold)?;
    let mut out = BTreeMap::new();
    for ((m, vals), point) in metrics.iter().zip(&dist.values).zip(points) {
        let (ci_lo, ci_hi) = sorted_bounds(vals);
        out.insert(*m, MetricInterval { point, ci_lo, ci_hi });
    }
    let mut notes = Vec::new();
    if cfg.unit == BootstrapUnit::Image {
        notes.push(
            "resampling unit is the image; images of one patient are correlated and are not clustered"
                .to_string(),
        );
    }
    if dist.redrawn > 0 {
        notes.push(format!("{} single-class resamples were redrawn", dist.redrawn));
    }
    Ok(BootstrapResult {
        metrics: out,
        iterations: cfg.iterations,
        seed: cfg.seed,
        threshold: cfg.threshold,
        unit: cfg.unit,
        observations: set.len(),
        redrawn: dist.redrawn,
        percentile_rule: "order statistics k and B-k+1 with k = ceil(0.025 B)".into(),
        pr_estimator: "step-wise average precision, ties as one threshold".into(),
        notes,
    })
}

/// Paired comparison on shared resamples: per iteration `metric(a) − metric(b)`.
pub fn paired_difference(
    a: &PredictionSet,
    b: &PredictionSet,
    metric: Metric,
    cfg: &BootstrapConfig,
) -> Result<PairedDifferenceResult> {
    cfg.validate()?;
    if a.len() != b.len()
        || a
            .rows()
            .iter()
            .zip(b.rows())
            .any(|(x, y)| x.image_id != y.image_id || x.label != y.label)
    {
        return Err(Error::Validation(
            "paired comparison needs identical rows (image ids and labels)".into(),
        ));
    }
    check_two_classes(a)?;
    let sa = Scorer::from_set(a);
    let sb = Scorer::from_set(b);
    let sampler = Resampler::new(a, cfg);
    let one = |s: &Scorer, w: Option<&[f64]>| -> Result<f64> {
        let c = s.confusion(w, cfg.threshold);
        s.metric(metric, w, &c)
    };
    let per_iter = run_iterations(cfg.workers, cfg.iterations, |i| {
        let (w, redraws) = sampler.draw(i)?;
        Ok((one(&sa, Some(&w))? - one(&sb, Some(&w))?, redraws))
    })?;
    let redrawn = per_iter.iter().map(|x| x.1).sum();
    let diffs: Vec<f64> = per_iter.into_iter().map(|x| x.0).collect();
    let mean_difference = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let (ci_lo, ci_hi) = sorted_bounds(&diffs);
    Ok(PairedDifferenceResult {
        metric,
        point_difference: one(&sa, None)? - one(&sb, None)?,
        mean_difference,
        ci_lo,
        ci_hi,
        significant: !(ci_lo <= 0.0 && 0.0 <= ci_hi),
        iterations: cfg.iterations,
        seed: cfg.seed,
        redrawn,
    })
}

/// Bootstrap within the diabetic and non-diabetic partitions separately.
pub fn subgroup_eval(set: &PredictionSet, metrics: &[Metric], cfg: &BootstrapConfig) -> Result<SubgroupReport> {
    cfg.validate()?;
    let mut groups = Vec::new();
    for (name, flag) in [("diabetes", true), ("no_diabetes", false)] {
        let part = set.filter_diabetes(flag);
        let images = part.as_ref().map_or(0, PredictionSet::len);
        let (result, error) = match &part {
            None => (None, Some("empty group".to_string())),
            Some(p) => match bootstrap_ci(p, metrics, cfg) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            },
        };
        groups.push(GroupResult {
            name: name.into(),
            diabetes: flag,
            images,
            percent: 100.0 * images as f64 / set.len() as f64,
            result,
            error,
        });
    }
    Ok(SubgroupReport { groups })
}
