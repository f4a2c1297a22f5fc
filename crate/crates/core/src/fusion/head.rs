//! Classifier heads on small tabular inputs: an FCNN, gradient-boosted trees,
//! a kernel SVM with Platt probabilities, and soft voting.

use std::collections::BTreeMap;

use gbdt::config::Config as GbdtConfig;
use gbdt::decision_tree::{Data, DataVec};
use gbdt::gradient_boost::GBDT;
use linfa::dataset::Pr;
use linfa::prelude::*;
use linfa_svm::Svm;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::roc_auc;
use crate::nn::{sigmoid, Mlp};
use crate::paths::PathConfig;
use crate::rng;
use crate::training::{fit_fixed, Example, ExampleMeta, GroupRates, TrainConfig, Trainable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Fcnn,
    GradientBoostedTrees,
    SupportVectorMachine,
    SoftVote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub fcnn_epochs: usize,
    pub fcnn_learning_rate: f64,
    pub fcnn_batch_size: usize,
    pub gbdt_max_depth: Vec<u32>,
    pub gbdt_iterations: Vec<usize>,
    pub gbdt_shrinkage: Vec<f64>,
    pub svm_c: Vec<f64>,
    /// Gaussian kernel width `w` in `exp(−‖x − y‖² / w)` on standardized inputs.
    pub svm_kernel_width: Vec<f64>,
    pub cv_folds: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            fcnn_epochs: 250,
            fcnn_learning_rate: 1e-3,
            fcnn_batch_size: 16,
            gbdt_max_depth: vec![2, 3],
            gbdt_iterations: vec![50, 100],
            gbdt_shrinkage: vec![0.1],
            svm_c: vec![0.1, 1.0, 10.0],
            svm_kernel_width: vec![1.0, 10.0],
            cv_folds: 3,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fcnn_epochs == 0 || self.fcnn_batch_size == 0 {
            return Err(Error::config("head.fcnn_epochs", "epochs and batch size must be at least 1"));
        }
        if !(self.fcnn_learning_rate > 0.0) {
            return Err(Error::config("head.fcnn_learning_rate", "must be positive"));
        }
        if self.gbdt_max_depth.is_empty() || self.gbdt_iterations.is_empty() || self.gbdt_shrinkage.is_empty() {
            return Err(Error::config("head.gbdt", "grids must not be empty"));
        }
        if self.svm_c.is_empty() || self.svm_kernel_width.is_empty() {
            return Err(Error::config("head.svm", "grids must not be empty"));
        }
        if self.svm_c.iter().chain(&self.svm_kernel_width).any(|&v| !(v > 0.0)) {
            return Err(Error::config("head.svm", "C and kernel width must be positive"));
        }
        if self.cv_folds < 2 {
            return Err(Error::config("head.cv_folds", "must be at least 2"));
        }
        Ok(())
    }
}

/// Fitted gradient-boosted trees. The library model is neither `Clone` nor
/// `Debug`, so both go through its serde form.
#[derive(Serialize, Deserialize)]
pub struct GbdtModel {
    model: GBDT,
}

impl Clone for GbdtModel {
    fn clone(&self) -> Self {
        let json = serde_json::to_string(&self.model).expect("gbdt model serializes");
        GbdtModel {
            model: serde_json::from_str(&json).expect("gbdt model deserializes"),
        }
    }
}

impl std::fmt::Debug for GbdtModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("GbdtModel")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    svm: Svm<f64, Pr>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum HeadState {
    Unfitted,
    SoftVote,
    Fcnn(Mlp),
    Gbdt(GbdtModel),
    Svm(SvmModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadFitReport {
    pub samples: usize,
    pub chosen: BTreeMap<String, f64>,
    /// Pooled out-of-fold AUC of the chosen parameters.
    pub cv_auc: Option<f64>,
    pub calibration: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularHead {
    pub kind: HeadKind,
    pub input_width: usize,
    state: HeadState,
    pub fit_report: Option<HeadFitReport>,
}

type Params = BTreeMap<String, f64>;

fn params(pairs: &[(&str, f64)]) -> Params {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl TabularHead {
    pub fn new(kind: HeadKind, input_width: usize) -> Self {
        TabularHead {
            kind,
            input_width,
            state: if kind == HeadKind::SoftVote {
                HeadState::SoftVote
            } else {
                HeadState::Unfitted
            },
            fit_report: None,
        }
    }

    pub fn is_fitted(&self) -> bool {
        !matches!(self.state, HeadState::Unfitted)
    }

    /// Fits on `x` (rows of `input_width` values) and labels `y`. Tree and
    /// SVM heads pick their hyperparameters by k-fold CV on pooled AUC.
    pub fn fit(&mut self, x: &[Vec<f64>], y: &[bool], paths: &PathConfig, cfg: &HeadConfig, seed: u64) -> Result<()> {
        cfg.validate()?;
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::Validation("head fit needs equally many rows and labels".into()));
        }
        if let Some(r) = x.iter().find(|r| r.len() != self.input_width) {
            return Err(Error::shape("head input", self.input_width, r.len()));
        }
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite head input".into()));
        }
        if !(y.iter().any(|&v| v) && y.iter().any(|&v| !v)) {
            return Err(Error::Validation("head fit needs both classes".into()));
        }
        let (state, chosen, cv_auc, calibration) = match self.kind {
            HeadKind::SoftVote => (HeadState::SoftVote, Params::new(), None, "mean of sigmoids"),
            HeadKind::Fcnn => {
                let mlp = fit_fcnn(x, y, self.input_width, paths, cfg, seed)?;
                (
                    HeadState::Fcnn(mlp),
                    params(&[
                        ("epochs", cfg.fcnn_epochs as f64),
                        ("learning_rate", cfg.fcnn_learning_rate),
                    ]),
                    None,
                    "sigmoid of logit",
                )
            }
            HeadKind::GradientBoostedTrees => {
                let mut grid = Vec::new();
                for &d in &cfg.gbdt_max_depth {
                    for &it in &cfg.gbdt_iterations {
                        for &s in &cfg.gbdt_shrinkage {
                            grid.push(params(&[("max_depth", d as f64), ("iterations", it as f64), ("shrinkage", s)]));
                        }
                    }
                }
                let fit = |p: &Params, xs: &[Vec<f64>], ys: &[bool]| fit_gbdt(xs, ys, p).map(HeadState::Gbdt);
                let (p, auc) = grid_search(&grid, x, y, cfg.cv_folds, seed, &fit)?;
                (fit(&p, x, y)?, p, auc, "logistic link on boosted score")
            }
            HeadKind::SupportVectorMachine => {
                let mut grid = Vec::new();
                for &c in &cfg.svm_c {
                    for &w in &cfg.svm_kernel_width {
                        grid.push(params(&[("c", c), ("kernel_width", w)]));
                    }
                }
                let fit = |p: &Params, xs: &[Vec<f64>], ys: &[bool]| fit_svm(xs, ys, p).map(HeadState::Svm);
                let (p, auc) = grid_search(&grid, x, y, cfg.cv_folds, seed, &fit)?;
                (fit(&p, x, y)?, p, auc, "Platt scaling")
            }
        };
        self.state = state;
        self.fit_report = Some(HeadFitReport {
            samples: x.len(),
            chosen,
            cv_auc,
            calibration: calibration.into(),
        });
        Ok(())
    }

    pub fn predict_proba(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        if let Some(r) = x.iter().find(|r| r.len() != self.input_width) {
            return Err(Error::shape("head input", self.input_width, r.len()));
        }
        state_predict(&self.state, x)
    }
}

fn state_predict(state: &HeadState, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    let out = match state {
        HeadState::Unfitted => return Err(Error::NotFitted("tabular head".into())),
        HeadState::SoftVote => x.iter().map(|r| soft_vote(r)).collect(),
        HeadState::Fcnn(m) => x
            .iter()
            .map(|r| m.logit(r).map(sigmoid))
            .collect::<Result<Vec<f64>>>()?,
        HeadState::Gbdt(g) => {
            let data: DataVec = x.iter().map(|r| Data::new_test_data(to_f32(r), None)).collect();
            g.model.predict(&data).into_iter().map(f64::from).collect()
        }
        HeadState::Svm(s) => x
            .iter()
            .map(|r| {
                let z: Array1<f64> = r
                    .iter()
                    .zip(&s.mean)
                    .zip(&s.std)
                    .map(|((v, m), sd)| (v - m) / sd)
                    .collect();
                f64::from(*s.svm.predict(z))
            })
            .collect(),
    };
    Ok(out.into_iter().map(|p: f64| p.clamp(0.0, 1.0)).collect())
}

/// Mean of the sigmoid-transformed logits.
pub fn soft_vote(logits: &[f64]) -> f64 {
    logits.iter().map(|&z| sigmoid(z)).sum::<f64>() / logits.len() as f64
}

fn to_f32(r: &[f64]) -> Vec<f32> {
    r.iter().map(|&v| v as f32).collect()
}

fn fit_fcnn(x: &[Vec<f64>], y: &[bool], width: usize, paths: &PathConfig, cfg: &HeadConfig, seed: u64) -> Result<Mlp> {
    let mlp = Mlp::new(
        width,
        paths.hidden_width,
        1,
        paths.demographic_standalone_layers,
        paths.negative_slope,
        paths.dropout_rate,
        &mut rng::stream(seed, 0x4643),
    );
    let examples: Vec<Example<Vec<f64>>> = x
        .iter()
        .zip(y)
        .enumerate()
        .map(|(i, (r, &label))| Example {
            meta: ExampleMeta {
                image_id: i.to_string(),
                patient_id: i.to_string(),
                label,
                diabetes: false,
            },
            input: r.clone(),
        })
        .collect();
    let train_cfg = TrainConfig {
        batch_size: cfg.fcnn_batch_size,
        epochs: cfg.fcnn_epochs,
        seed,
        ..Default::default()
    };
    let rate = cfg.fcnn_learning_rate;
    let (mlp, _) = fit_fixed(mlp, &examples, GroupRates { head: rate, backbone: rate }, &train_cfg)?;
    Ok(mlp)
}

fn fit_gbdt(x: &[Vec<f64>], y: &[bool], p: &Params) -> Result<GbdtModel> {
    let mut conf = GbdtConfig::new();
    conf.set_feature_size(x[0].len());
    conf.set_max_depth(p["max_depth"] as u32);
    conf.set_iterations(p["iterations"] as usize);
    conf.set_shrinkage(p["shrinkage"] as f32);
    conf.set_min_leaf_size(1);
    conf.set_data_sample_ratio(1.0);
    conf.set_feature_sample_ratio(1.0);
    conf.set_loss("LogLikelyhood");
    let mut model = GBDT::new(&conf);
    let mut data: DataVec = x
        .iter()
        .zip(y)
        .map(|(r, &l)| Data::new_training_data(to_f32(r), 1.0, if l { 1.0 } else { -1.0 }, None))
        .collect();
    model.fit(&mut data);
    Ok(GbdtModel { model })
}

fn fit_svm(x: &[Vec<f64>], y: &[bool], p: &Params) -> Result<SvmModel> {
    let d = x[0].len();
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 1e-24 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let records = Array2::from_shape_fn((x.len(), d), |(i, j)| (x[i][j] - mean[j]) / std[j]);
    let targets = Array1::from_iter(y.iter().copied());
    let dataset = Dataset::new(records, targets);
    let c = p["c"];
    let svm = Svm::<f64, Pr>::params()
        .pos_neg_weights(c, c)
        .gaussian_kernel(p["kernel_width"])
        .fit(&dataset)
        .map_err(|e| Error::Head(format!("svm: {e}")))?;
    Ok(SvmModel { svm, mean, std })
}

/// Picks the grid entry with the best pooled out-of-fold AUC (first wins ties).
fn grid_search(
    grid: &[Params],
    x: &[Vec<f64>],
    y: &[bool],
    folds: usize,
    seed: u64,
    fit: &dyn Fn(&Params, &[Vec<f64>], &[bool]) -> Result<HeadState>,
) -> Result<(Params, Option<f64>)> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(&mut rng::stream(seed, 0x4356));
    let mut fold_of = vec![0; x.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    let mut best: Option<(Params, f64)> = None;
    for p in grid {
        let mut oof = vec![0.0; x.len()];
        let mut ok = true;
        for f in 0..folds {
            let (tr, te): (Vec<usize>, Vec<usize>) = (0..x.len()).partition(|&i| fold_of[i] != f);
            if te.is_empty() {
                continue;
            }
            let xs: Vec<Vec<f64>> = tr.iter().map(|&i| x[i].clone()).collect();
            let ys: Vec<bool> = tr.iter().map(|&i| y[i]).collect();
            if !(ys.iter().any(|&v| v) && ys.iter().any(|&v| !v)) {
                ok = false;
                break;
            }
            let held: Vec<Vec<f64>> = te.iter().map(|&i| x[i].clone()).collect();
            match fit(p, &xs, &ys).and_then(|s| state_predict(&s, &held)) {
                Ok(pred) => te.iter().zip(pred).for_each(|(&i, v)| oof[i] = v),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        if let Ok(auc) = roc_auc(&oof, y) {
            if best.as_ref().map_or(true, |(_, b)| auc > *b) {
                best = Some((p.clone(), auc));
            }
        }
    }
    match best {
        Some((p, auc)) => Ok((p, Some(auc))),
        None => Ok((grid[0].clone(), None)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn separable(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut r = rng::stream(seed, 0);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let label = i % 2 == 0;
            let z = if label { r.gen_range(1.0..3.0) } else { r.gen_range(-3.0..-1.0) };
            x.push(vec![z, r.gen_range(-1.0..1.0), (i % 3) as f64 / 2.0]);
            y.push(label);
        }
        (x, y)
    }

    fn quick() -> HeadConfig {
        HeadConfig {
            fcnn_epochs: 30,
            fcnn_learning_rate: 1e-2,
            gbdt_iterations: vec![20],
            gbdt_max_depth: vec![2],
            svm_c: vec![1.0],
            svm_kernel_width: vec![2.0],
            ..Default::default()
        }
    }

    fn accuracy(p: &[f64], y: &[bool]) -> f64 {
        p.iter().zip(y).filter(|(&p, &y)| (p >= 0.5) == y).count() as f64 / y.len() as f64
    }

    #[test]
    fn separable_inputs_are_fit_perfectly() {
        let (x, y) = separable(60, 1);
        for kind in [HeadKind::Fcnn, HeadKind::GradientBoostedTrees, HeadKind::SupportVectorMachine] {
            let mut h = TabularHead::new(kind, 3);
            h.fit(&x, &y, &PathConfig::default(), &quick(), 3).unwrap();
            let p = h.predict_proba(&x).unwrap();
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(accuracy(&p, &y), 1.0, "{kind:?}");
            let h2: TabularHead = serde_json::from_str(&serde_json::to_string(&h).unwrap()).unwrap();
            assert_eq!(h2.predict_proba(&x).unwrap(), p, "{kind:?} roundtrip");
        }
    }

    #[test]
    fn fcnn_head_uses_standalone_depth() {
        let (x, y) = separable(20, 1);
        let mut h = TabularHead::new(HeadKind::Fcnn, 3);
        h.fit(&x, &y, &PathConfig::default(), &quick(), 3).unwrap();
        match &h.state {
            HeadState::Fcnn(m) => assert_eq!(m.layers.len(), 4),
            _ => unreachable!(),
        }
    }

    #[test]
    fn unfitted_head_errors() {
        let h = TabularHead::new(HeadKind::GradientBoostedTrees, 3);
        assert!(matches!(h.predict_proba(&[vec![0.0; 3]]), Err(Error::NotFitted(_))));
        let soft = TabularHead::new(HeadKind::SoftVote, 3);
        assert!(soft.is_fitted());
    }

    #[test]
    fn soft_vote_is_the_mean() {
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let v = soft_vote(&[logit(0.2), logit(0.5), logit(0.8)]);
        assert!((v - 0.5).abs() < 1e-15);
        let p = soft_vote(&[logit(0.3); 3]);
        assert!((p - 0.3).abs() < 1e-15);
    }

    #[test]
    fn width_checked() {
        let (x, y) = separable(10, 1);
        let mut h = TabularHead::new(HeadKind::GradientBoostedTrees, 2);
        assert!(matches!(h.fit(&x, &y, &PathConfig::default(), &quick(), 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn deterministic_fit() {
        let (x, y) = separable(40, 2);
        for kind in [HeadKind::GradientBoostedTrees, HeadKind::SupportVectorMachine, HeadKind::Fcnn] {
            let mut a = TabularHead::new(kind, 3);
            let mut b = TabularHead::new(kind, 3);
            a.fit(&x, &y, &PathConfig::default(), &quick(), 9).unwrap();
            b.fit(&x, &y, &PathConfig::default(), &quick(), 9).unwrap();
            assert_eq!(a.predict_proba(&x).unwrap(), b.predict_proba(&x).unwrap());
        }
    }

    #[test]
    fn grid_search_records_choice() {
        let (x, y) = separable(45, 4);
        let cfg = HeadConfig {
            svm_c: vec![0.1, 10.0],
            svm_kernel_width: vec![1.0],
            ..quick()
        };
        let mut h = TabularHead::new(HeadKind::SupportVectorMachine, 3);
        h.fit(&x, &y, &PathConfig::default(), &cfg, 1).unwrap();
        let rep = h.fit_report.unwrap();
        assert!(rep.chosen.contains_key("c"));
        assert!(rep.cv_auc.unwrap() > 0.9);
    }
}
