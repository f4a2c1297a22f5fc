//! Loss, learning-rate schedule, the mini-batch training loop with
//! best-checkpoint selection, and hyperparameter sweeps.

mod data;
mod sweep;

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use data::{build_dataset, AccessEvent, DataAccess, Example, ExampleMeta, Phase, PreprocessStats, SystemInput};
pub use sweep::{sweep, SweepCell, SweepGrid, SweepResult, SweepRow};

use crate::cohort::{AugmentConfig, Subset};
use crate::error::{Error, Result};
use crate::evaluation::roc_auc;
use crate::nn::{sigmoid, AdamW, AdamWConfig, Mlp, MlpCache, ParamGroup, Parameterized};
use crate::rng::{self, Rng};

/// Binary cross-entropy on a logit, `max(z,0) − z·y + ln(1 + e^{−|z|})`.
pub fn bce_loss(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// d(bce)/dz.
pub fn bce_grad(z: f64, y: f64) -> f64 {
    sigmoid(z) - y
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(πt/T))` for `0 ≤ t ≤ T`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::Validation(format!(
            "cosine schedule step {t} outside [0, {total}]"
        )));
    }
    if t == total {
        return Ok(lr_min);
    }
    let c = (std::f64::consts::PI * t as f64 / total as f64).cos();
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    ValidationAuc,
    /// Negated validation loss, so larger is still better.
    ValidationLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Cosine floor as a fraction of each group's base rate.
    pub lr_floor: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
    pub augment_validation: bool,
    /// Worker threads for per-sample gradients; 0 uses the global pool.
    /// Results are identical for every value.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 25,
            lr_floor: 0.0,
            optimizer: AdamWConfig::default(),
            seed: 0,
            selection_metric: SelectionMetric::ValidationAuc,
            augment_validation: false,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::config("train.lr_floor", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Base learning rate per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub head: f64,
    pub backbone: f64,
}

impl GroupRates {
    pub fn validate(&self) -> Result<()> {
        if !(self.head > 0.0) || !(self.backbone > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        Ok(())
    }

    pub fn of(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Head => self.head,
            ParamGroup::Backbone => self.backbone,
        }
    }
}

/// Randomness and switches for a training-mode forward pass.
pub struct TrainCtx<'a> {
    pub rng: &'a mut Rng,
    pub augment: Option<&'a AugmentConfig>,
    pub dropout: bool,
}

/// A model producing one logit per input with a hand-written backward pass.
pub trait Trainable: Parameterized + Clone + Send + Sync {
    type Input: Sync;
    type Cache: Send;

    /// `ctx` is `None` in evaluation mode.
    fn forward(&self, x: &Self::Input, ctx: Option<&mut TrainCtx<'_>>) -> Result<(f64, Self::Cache)>;
    fn backward(&self, cache: &Self::Cache, dlogit: f64, grad: &mut Self);

    fn logit(&self, x: &Self::Input) -> Result<f64> {
        Ok(self.forward(x, None)?.0)
    }
}

impl Trainable for Mlp {
    type Input = Vec<f64>;
    type Cache = MlpCache;

    fn forward(&self, x: &Vec<f64>, ctx: Option<&mut TrainCtx<'_>>) -> Result<(f64, MlpCache)> {
        if x.len() != self.input_width() {
            return Err(Error::shape("mlp input", self.input_width(), x.len()));
        }
        let rng = ctx.and_then(|c| if c.dropout { Some(&mut *c.rng) } else { None });
        let (out, cache) = Mlp::forward(self, x, rng);
        Ok((out[0], cache))
    }

    fn backward(&self, cache: &MlpCache, dlogit: f64, grad: &mut Self) {
        Mlp::backward(self, cache, &[dlogit], grad);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationSnapshot {
    pub auc: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<M> {
    /// 1-based epoch.
    pub epoch: usize,
    pub model: M,
    pub metrics: ValidationSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auc: Option<f64>,
    pub selection: Option<f64>,
    /// Schedule multiplier used for the epoch's last step.
    pub lr_scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// 1-based index of the first maximum.
pub fn select_best(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i + 1)
}

#[derive(Debug)]
pub struct TrainOutcome<M> {
    pub best: Checkpoint<M>,
    pub last: M,
    pub history: TrainHistory,
}

fn pool(workers: usize) -> Result<Option<rayon::ThreadPool>> {
    match workers {
        0 | 1 => Ok(None),
        n => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(Some)
            .map_err(|e| Error::Validation(format!("thread pool: {e}"))),
    }
}

fn par_map<T: Send>(workers: usize, pool: &Option<rayon::ThreadPool>, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    match (workers, pool) {
        (1, _) => (0..n).map(f).collect(),
        (_, Some(p)) => p.install(|| (0..n).into_par_iter().map(&f).collect()),
        (_, None) => (0..n).into_par_iter().map(f).collect(),
    }
}

const PERMUTATION_STREAM: u64 = 0x5045_524d;
const VALIDATION_STREAM: u64 = 0x5641_4c49;

fn validate_model<M: Trainable>(
    model: &M,
    val: &[Example<M::Input>],
    cfg: &TrainConfig,
    augment: Option<&AugmentConfig>,
    epoch: usize,
    pool: &Option<rayon::ThreadPool>,
) -> Result<ValidationSnapshot> {
    let logits = par_map(cfg.workers, pool, val.len(), |i| {
        if cfg.augment_validation {
            let mut r = rng::substream(cfg.seed ^ VALIDATION_STREAM, epoch as u64, i as u64);
            let mut ctx = TrainCtx {
                rng: &mut r,
                augment,
                dropout: false,
            };
            model.forward(&val[i].input, Some(&mut ctx)).map(|x| x.0)
        } else {
            model.logit(&val[i].input)
        }
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let labels: Vec<bool> = val.iter().map(|e| e.meta.label).collect();
    let loss = logits
        .iter()
        .zip(&labels)
        .map(|(&z, &y)| bce_loss(z, y as u8 as f64))
        .sum::<f64>()
        / val.len() as f64;
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let auc = roc_auc(&probs, &labels)
        .map_err(|_| Error::Validation("validation subset must contain both classes".into()))?;
    Ok(ValidationSnapshot { auc, loss })
}

fn run<M: Trainable>(
    mut model: M,
    train: &[Example<M::Input>],
    val: Option<&[Example<M::Input>]>,
    rates: GroupRates,
    cfg: &TrainConfig,
    augment: Option<&AugmentConfig>,
) -> Result<(Option<Checkpoint<M>>, M, TrainHistory)> {
    cfg.validate()?;
    rates.validate()?;
    if let Some(a) = augment {
        a.validate()?;
    }
    if train.is_empty() {
        return Err(Error::Validation("training subset is empty".into()));
    }
    if val.is_some_and(|v| v.is_empty()) {
        return Err(Error::Validation("validation subset is empty".into()));
    }
    let pool = pool(cfg.workers)?;
    let batches = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches;
    let mut opt = AdamW::new(&model, cfg.optimizer);
    let mut history = TrainHistory::default();
    let mut best: Option<Checkpoint<M>> = None;
    let mut t = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, PERMUTATION_STREAM, epoch as u64));
        let mut loss_sum = 0.0;
        let mut eta = 1.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            eta = cosine_lr(t, total, 1.0, cfg.lr_floor)?;
            let scale = 1.0 / batch.len() as f64;
            let per_sample = par_map(cfg.workers, &pool, batch.len(), |j| -> Result<(f64, M)> {
                let ex = &train[batch[j]];
                let mut r = rng::substream(cfg.seed, t as u64, j as u64);
                let mut ctx = TrainCtx {
                    rng: &mut r,
                    augment,
                    dropout: true,
                };
                let (z, cache) = model.forward(&ex.input, Some(&mut ctx))?;
                let y = ex.meta.label as u8 as f64;
                let mut g = model.zeroed();
                model.backward(&cache, bce_grad(z, y) * scale, &mut g);
                Ok((bce_loss(z, y), g))
            });
            let mut grad = model.zeroed();
            let mut batch_loss = 0.0;
            for item in per_sample {
                let (l, g) = item?;
                batch_loss += l;
                grad.accumulate(&g);
            }
            if !batch_loss.is_finite() || !grad.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    iteration: b,
                    message: format!("non-finite loss {batch_loss}"),
                });
            }
            loss_sum += batch_loss;
            opt.step(&mut model, &grad, |g| rates.of(g) * eta, eta);
            if !model.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    iteration: b,
                    message: "non-finite parameters after update".into(),
                });
            }
            t += 1;
        }
        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss: None,
            val_auc: None,
            selection: None,
            lr_scale: eta,
        };
        if let Some(val) = val {
            let snap = validate_model(&model, val, cfg, augment, epoch, &pool)?;
            let score = match cfg.selection_metric {
                SelectionMetric::ValidationAuc => snap.auc,
                SelectionMetric::ValidationLoss => -snap.loss,
            };
            if !score.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    iteration: batches,
                    message: "non-finite validation metric".into(),
                });
            }
            record.val_loss = Some(snap.loss);
            record.val_auc = Some(snap.auc);
            record.selection = Some(score);
            let better = best.as_ref().map_or(true, |b| {
                let prev = match cfg.selection_metric {
                    SelectionMetric::ValidationAuc => b.metrics.auc,
                    SelectionMetric::ValidationLoss => -b.metrics.loss,
                };
                score > prev
            });
            if better {
                best = Some(Checkpoint {
                    epoch,
                    model: model.clone(),
                    metrics: snap,
                });
            }
        }
        history.epochs.push(record);
    }
    Ok((best, model, history))
}

/// Trains on the training subset, selecting the epoch with the best
/// validation metric (ties keep the earliest). Augmentation, if given, is
/// applied to training images only unless `augment_validation` is set.
pub fn train<M: Trainable>(
    model: M,
    data: &DataAccess<M::Input>,
    rates: GroupRates,
    cfg: &TrainConfig,
    augment: Option<&AugmentConfig>,
) -> Result<TrainOutcome<M>> {
    data.set_phase(Phase::Training);
    let tr = data.read(Subset::Train)?;
    let va = data.read(Subset::Validation)?;
    train_on(model, tr, va, rates, cfg, augment)
}

pub fn train_on<M: Trainable>(
    model: M,
    train: &[Example<M::Input>],
    val: &[Example<M::Input>],
    rates: GroupRates,
    cfg: &TrainConfig,
    augment: Option<&AugmentConfig>,
) -> Result<TrainOutcome<M>> {
    let (best, last, history) = run(model, train, Some(val), rates, cfg, augment)?;
    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        last,
        history,
    })
}

/// Fixed-epoch training without checkpoint selection; returns the final weights.
pub fn fit_fixed<M: Trainable>(
    model: M,
    train: &[Example<M::Input>],
    rates: GroupRates,
    cfg: &TrainConfig,
) -> Result<(M, TrainHistory)> {
    let (_, last, history) = run(model, train, None, rates, cfg, None)?;
    Ok((last, history))
}

/// Logits for a slice of examples in evaluation mode.
pub fn predict_logits<M: Trainable>(model: &M, examples: &[Example<M::Input>], workers: usize) -> Result<Vec<f64>> {
    let pool = pool(workers)?;
    par_map(workers, &pool, examples.len(), |i| model.logit(&examples[i].input))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn bce_fixtures() {
        assert!((bce_loss(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(50.0, 1.0) < 1e-20);
        assert!(bce_loss(-800.0, 1.0).is_finite());
        assert!(bce_loss(800.0, 0.0).is_finite());
    }

    #[test]
    fn bce_matches_naive_formula() {
        let mut r = rng::stream(0, 0);
        for _ in 0..2000 {
            let z: f64 = r.gen_range(-20.0..20.0);
            let y = if r.gen_bool(0.5) { 1.0 } else { 0.0 };
            // -ln σ(z) and -ln(1 - σ(z)) = -ln σ(-z), without log1p.
            let naive = if y == 1.0 {
                (1.0 + (-z).exp()).ln()
            } else {
                (1.0 + z.exp()).ln()
            };
            assert!((bce_loss(z, y) - naive).abs() < 1e-12, "z={z}");
        }
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        for i in 0..=200 {
            let z = -10.0 + 0.1 * i as f64;
            for y in [0.0, 1.0] {
                let h = 1e-5;
                let fd = (bce_loss(z + h, y) - bce_loss(z - h, y)) / (2.0 * h);
                let an = bce_grad(z, y);
                let rel = (fd - an).abs() / an.abs().max(1e-8);
                assert!(rel < 1e-5, "z={z} y={y} rel={rel}");
            }
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.1, 0.001).unwrap(), 0.1);
        assert_eq!(cosine_lr(100, 100, 0.1, 0.001).unwrap(), 0.001);
        assert!((cosine_lr(50, 100, 0.1, 0.001).unwrap() - 0.0505).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.1, 0.0).is_err());
        assert!(cosine_lr(0, 0, 0.1, 0.0).is_err());
        let vals: Vec<f64> = (0..=37).map(|t| cosine_lr(t, 37, 1.0, 0.2).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn best_epoch_is_first_argmax() {
        assert_eq!(select_best(&[0.6, 0.8, 0.7]), Some(2));
        assert_eq!(select_best(&[0.5, 0.9, 0.9]), Some(2));
        assert_eq!(select_best(&[]), None);
    }

    fn toy_data(n: usize, seed: u64) -> Vec<Example<Vec<f64>>> {
        let mut r = rng::stream(seed, 0);
        (0..n)
            .map(|i| {
                let x: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
                let label = x[0] + 0.5 * x[1] > 0.0;
                Example {
                    meta: ExampleMeta {
                        image_id: format!("{i}"),
                        patient_id: format!("{i}"),
                        label,
                        diabetes: false,
                    },
                    input: x,
                }
            })
            .collect()
    }

    fn mlp(seed: u64) -> Mlp {
        Mlp::new(3, 16, 1, 3, 0.01, 0.1, &mut rng::stream(seed, 1))
    }

    fn cfg(epochs: usize, workers: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            workers,
            seed: 5,
            ..Default::default()
        }
    }

    const RATES: GroupRates = GroupRates {
        head: 1e-2,
        backbone: 1e-2,
    };

    #[test]
    fn learns_a_linear_rule_and_keeps_best_epoch() {
        let tr = toy_data(200, 1);
        let va = toy_data(80, 2);
        let out = train_on(mlp(0), &tr, &va, RATES, &cfg(15, 1), None).unwrap();
        assert!(out.best.metrics.auc > 0.95, "auc {}", out.best.metrics.auc);
        let aucs: Vec<f64> = out.history.epochs.iter().map(|e| e.val_auc.unwrap()).collect();
        assert!(aucs.iter().all(|&a| a <= out.best.metrics.auc));
        assert_eq!(select_best(&aucs), Some(out.best.epoch));
    }

    #[test]
    fn same_seed_same_history_for_any_worker_count() {
        let tr = toy_data(60, 1);
        let va = toy_data(30, 2);
        let a = train_on(mlp(0), &tr, &va, RATES, &cfg(3, 1), None).unwrap();
        let b = train_on(mlp(0), &tr, &va, RATES, &cfg(3, 1), None).unwrap();
        let c = train_on(mlp(0), &tr, &va, RATES, &cfg(3, 4), None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history, c.history);
        assert_eq!(a.last, c.last);
    }

    #[test]
    fn divergence_is_reported() {
        let tr = toy_data(20, 1);
        let va = toy_data(10, 2);
        let mut m = mlp(0);
        m.layers[0].weight.data[0] = f64::NAN;
        let err = train_on(m, &tr, &va, RATES, &cfg(1, 1), None).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, .. }));
    }

    #[test]
    fn empty_or_invalid_inputs() {
        let va = toy_data(10, 2);
        assert!(train_on(mlp(0), &[], &va, RATES, &cfg(1, 1), None).is_err());
        assert!(train_on(mlp(0), &va, &[], RATES, &cfg(1, 1), None).is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..cfg(1, 1)
        };
        assert!(train_on(mlp(0), &va, &va, RATES, &bad, None).is_err());
    }

    #[test]
    fn training_never_reads_test() {
        use std::collections::BTreeMap;
        let mut m = BTreeMap::new();
        m.insert(Subset::Train, toy_data(40, 1));
        m.insert(Subset::Validation, toy_data(20, 2));
        m.insert(Subset::Test, toy_data(20, 3));
        let data = DataAccess::new(m);
        train(mlp(0), &data, RATES, &cfg(1, 1), None).unwrap();
        assert!(data.test_untouched_in_training());
        assert!(data.read(Subset::Test).is_err());
    }

    #[test]
    fn fixed_fit_returns_final_weights() {
        let tr = toy_data(40, 1);
        let (m, h) = fit_fixed(mlp(0), &tr, RATES, &cfg(2, 1)).unwrap();
        assert_eq!(h.epochs.len(), 2);
        assert!(h.epochs.iter().all(|e| e.val_auc.is_none()));
        assert_ne!(m, mlp(0));
    }
}
