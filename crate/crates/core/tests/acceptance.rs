//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng as _;

use fundus_fusion::cohort::{
    generate_synthetic_cohort, stratified_patient_split, synthetic_patients, PatientRecord, PreprocessConfig,
    SignalConfig, SplitAssignment, SplitRatios, Subset,
};
use fundus_fusion::evaluation::{
    bootstrap_ci, bootstrap_distribution, confusion_metrics, paired_difference, pr_auc, roc_auc, BootstrapConfig,
    Metric, PredictionRow, PredictionSet,
};
use fundus_fusion::explain::{cam_grid, explain_batch, grad_cam, normalize, upsample_bilinear};
use fundus_fusion::fusion::{
    assemble, soft_vote, FusionSpec, HeadKind, Model, NeuralSystem, Prerequisites, Strategy, System,
    TrainedPrerequisites,
};
use fundus_fusion::nn::{ConvBackbone, Dense, FeatureMap, ParamGroup};
use fundus_fusion::paths::{DemographicInput, DemographicPath, FundusPath, PathConfig};
use fundus_fusion::rng;
use fundus_fusion::training::{
    bce_grad, bce_loss, build_dataset, cosine_lr, train_on, DataAccess, Example, ExampleMeta, GroupRates,
    Phase, PreprocessStats, SystemInput, TrainConfig,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn set(probs: &[f64], labels: &[bool]) -> PredictionSet {
    PredictionSet::new(
        probs
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&p, &y))| PredictionRow {
                image_id: format!("img{i:04}"),
                patient_id: format!("p{i:04}"),
                probability: p,
                label: y as u8,
                diabetes: (i % 2) as u8,
            })
            .collect(),
    )
    .unwrap()
}

fn boot(iterations: usize, seed: u64) -> BootstrapConfig {
    BootstrapConfig {
        iterations,
        seed,
        ..Default::default()
    }
}

// ---------------------------------------------------------------- 1

fn pairwise_auc(p: &[f64], y: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            if y[i] && !y[j] {
                den += 1.0;
                num += if p[i] > p[j] {
                    1.0
                } else if p[i] == p[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

/// Average precision over distinct thresholds, by direct counting.
fn brute_ap(p: &[f64], y: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = p.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pos = y.iter().filter(|&&v| v).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = p.iter().zip(y).filter(|(&s, &l)| s >= t && l).count() as f64;
        let fp = p.iter().zip(y).filter(|(&s, &l)| s >= t && !l).count() as f64;
        let recall = tp / pos;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng::stream(1, 0);
    let mut worst: f64 = 0.0;
    for instance in 0..1000 {
        let n = r.gen_range(2..=50);
        // One decimal so ties are frequent.
        let p: Vec<f64> = (0..n).map(|_| (r.gen_range(0.0..1.0f64) * 10.0).round() / 10.0).collect();
        let mut y: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
        y[0] = true;
        y[1] = false;
        let got = roc_auc(&p, &y).map_err(|e| e.to_string())?;
        let want = pairwise_auc(&p, &y);
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-9, "instance {instance}: auc {got} vs {want}");
        let ap = pr_auc(&p, &y).map_err(|e| e.to_string())?;
        ensure!((ap - brute_ap(&p, &y)).abs() <= 1e-9, "instance {instance}: ap {ap}");
    }

    // probs >= 0.5 are positive: TP = {0.9, 0.6, 0.5}, FP = {0.7}, FN = {0.2, 0.4}, TN = {0.1, 0.3}.
    let s = set(
        &[0.9, 0.6, 0.5, 0.2, 0.4, 0.7, 0.1, 0.3],
        &[true, true, true, true, true, false, false, false],
    );
    let (c, m) = confusion_metrics(&s, 0.5).map_err(|e| e.to_string())?;
    ensure!((c.tp, c.fp, c.tn, c.fn_) == (3.0, 1.0, 2.0, 2.0), "confusion {c:?}");
    let fixtures = [
        (Metric::Precision, 3.0 / 4.0),
        (Metric::Recall, 3.0 / 5.0),
        (Metric::Specificity, 2.0 / 3.0),
        (Metric::Accuracy, 5.0 / 8.0),
        (Metric::F1, 2.0 * 3.0 / (2.0 * 3.0 + 1.0 + 2.0)),
    ];
    for (metric, want) in fixtures {
        let got = m.get(metric).unwrap();
        ensure!((got - want).abs() <= 1e-15, "{}: {got} vs {want}", metric.name());
    }
    // No predicted positives: precision and F1 are defined as 0.
    let (_, m) = confusion_metrics(&set(&[0.1, 0.2, 0.3], &[true, false, true]), 0.5).map_err(|e| e.to_string())?;
    ensure!(m.get(Metric::Precision) == Some(0.0) && m.get(Metric::F1) == Some(0.0), "zero-division fixture");

    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("1000 instances, max |auc error| {worst:.1e}, {elapsed:.2?}"))
}

// ---------------------------------------------------------------- 2

fn f1_weighted(p: &[f64], y: &[bool], w: &[usize]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        let k = w[i] as f64;
        match (p[i] >= 0.5, y[i]) {
            (true, true) => tp += k,
            (true, false) => fp += k,
            (false, true) => fneg += k,
            _ => {}
        }
    }
    let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let rec = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
    if prec + rec > 0.0 {
        2.0 * prec * rec / (prec + rec)
    } else {
        0.0
    }
}

/// Exact 2.5% / 97.5% bounds of an equally weighted discrete distribution.
fn exact_bounds(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len() as f64;
    let lo = v
        .iter()
        .copied()
        .find(|&x| v.iter().filter(|&&u| u <= x).count() as f64 / n >= 0.025)
        .unwrap();
    let hi = v
        .iter()
        .rev()
        .copied()
        .find(|&x| v.iter().filter(|&&u| u >= x).count() as f64 / n >= 0.025)
        .unwrap();
    (lo, hi)
}

fn exhaustive_bootstrap() -> Outcome {
    let start = Instant::now();
    let p = [0.9, 0.3, 0.7, 0.2];
    let y = [true, true, false, false];
    let mut all = Vec::new();
    let mut two_class = Vec::new();
    for code in 0..256usize {
        let mut w = [0usize; 4];
        for d in 0..4 {
            w[(code >> (2 * d)) & 3] += 1;
        }
        let v = f1_weighted(&p, &y, &w);
        all.push(v);
        let has = |cls: bool| (0..4).any(|i| w[i] > 0 && y[i] == cls);
        if has(true) && has(false) {
            two_class.push(v);
        }
    }
    let exact_all = exact_bounds(&all);
    let exact_cond = exact_bounds(&two_class);

    let s = set(&p, &y);
    let cfg = boot(200_000, 11);
    let ci = bootstrap_ci(&s, &[Metric::F1], &cfg).map_err(|e| e.to_string())?;
    let mc = ci.metrics[&Metric::F1];
    for (name, (lo, hi)) in [("all 256", exact_all), ("two-class", exact_cond)] {
        ensure!(
            (mc.ci_lo - lo).abs() <= 0.02 && (mc.ci_hi - hi).abs() <= 0.02,
            "monte carlo [{}, {}] vs exact ({name}) [{lo}, {hi}]",
            mc.ci_lo,
            mc.ci_hi
        );
    }

    // The full resampling distribution also matches the enumerated one.
    let dist = bootstrap_distribution(&s, &[Metric::F1], &cfg).map_err(|e| e.to_string())?;
    let mc_values = dist.of(Metric::F1).unwrap();
    let mut support: Vec<f64> = two_class.clone();
    support.sort_by(|a, b| a.total_cmp(b));
    support.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let mut worst: f64 = 0.0;
    for v in support {
        let exact = two_class.iter().filter(|&&u| (u - v).abs() < 1e-12).count() as f64 / two_class.len() as f64;
        let freq = mc_values.iter().filter(|&&u| (u - v).abs() < 1e-12).count() as f64 / mc_values.len() as f64;
        worst = worst.max((exact - freq).abs());
    }
    ensure!(worst < 0.01, "distribution mismatch {worst}");

    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "F1 CI [{:.3}, {:.3}] vs exact [{:.3}, {:.3}], max mass error {worst:.4}, {elapsed:.2?}",
        mc.ci_lo, mc.ci_hi, exact_cond.0, exact_cond.1
    ))
}

// ---------------------------------------------------------------- 3

fn paired_differences() -> Outcome {
    let mut r = rng::stream(3, 0);
    let n = 120;
    let y: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
    let a: Vec<f64> = y
        .iter()
        .map(|&l| (if l { 0.7 } else { 0.3 } + r.gen_range(-0.35..0.35f64)).clamp(0.0, 1.0))
        .collect();
    let b: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
    let (sa, sb) = (set(&a, &y), set(&b, &y));
    let cfg = boot(2000, 5);
    for m in Metric::ALL {
        let same = paired_difference(&sa, &sa, m, &cfg).map_err(|e| e.to_string())?;
        ensure!(
            same.ci_lo == 0.0 && same.ci_hi == 0.0 && !same.significant,
            "self {}: [{}, {}]",
            m.name(),
            same.ci_lo,
            same.ci_hi
        );
        let ab = paired_difference(&sa, &sb, m, &cfg).map_err(|e| e.to_string())?;
        let ba = paired_difference(&sb, &sa, m, &cfg).map_err(|e| e.to_string())?;
        // Exact equality; a zero difference is +0.0 in both orders, so bit
        // patterns of the negation may differ only in the sign of zero.
        ensure!(
            ab.ci_lo == -ba.ci_hi
                && ab.ci_hi == -ba.ci_lo
                && ab.mean_difference == -ba.mean_difference
                && ab.point_difference == -ba.point_difference
                && ab.significant == ba.significant,
            "swap not antisymmetric for {}",
            m.name()
        );
    }

    // A perfect ranker and classifier strictly dominates a shuffled one.
    let perfect: Vec<f64> = y.iter().map(|&l| if l { 0.8 } else { 0.2 }).collect();
    let sp = set(&perfect, &y);
    let mut shown = Vec::new();
    for m in [Metric::F1, Metric::Auc, Metric::Accuracy] {
        let d = paired_difference(&sp, &sb, m, &cfg).map_err(|e| e.to_string())?;
        ensure!(d.ci_lo > 0.0 && d.significant, "dominance {}: [{}, {}]", m.name(), d.ci_lo, d.ci_hi);
        shown.push(format!("{} {}", m.name(), d.display()));
    }
    Ok(format!("self [0, 0], swap exactly antisymmetric, dominance {}", shown.join(", ")))
}

// ---------------------------------------------------------------- 4

fn recount(records: &[PatientRecord], split: &SplitAssignment) -> Result<(f64, f64), String> {
    let ids: Vec<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
    let mut seen = BTreeMap::new();
    for s in Subset::ALL {
        for p in split.patients(s) {
            ensure!(seen.insert(p.to_string(), s).is_none(), "{p} assigned twice");
        }
    }
    ensure!(seen.len() == ids.len(), "{} assigned of {}", seen.len(), ids.len());
    ensure!(ids.iter().all(|p| seen.contains_key(*p)), "patient missing from split");

    let frac = |rs: &[&PatientRecord]| {
        let htn: Vec<_> = rs.iter().filter(|r| r.hypertension).collect();
        (
            100.0 * htn.len() as f64 / rs.len() as f64,
            100.0 * htn.iter().filter(|r| r.diabetes).count() as f64 / htn.len().max(1) as f64,
        )
    };
    let everyone: Vec<&PatientRecord> = records.iter().collect();
    let (g_htn, g_dm) = frac(&everyone);
    let mut worst = (0.0f64, 0.0f64);
    for s in Subset::ALL {
        let members: Vec<&PatientRecord> = records.iter().filter(|r| seen[&r.patient_id] == s).collect();
        let (h, d) = frac(&members);
        worst.0 = worst.0.max((h - g_htn).abs());
        worst.1 = worst.1.max((d - g_dm).abs());
    }
    Ok(worst)
}

fn split_invariants() -> Outcome {
    let dir = std::path::Path::new("unused");
    let mut worst = (0.0f64, 0.0f64);
    for seed in 0..200u64 {
        let n = 500 + (seed as usize * 37) % 500;
        let records: Vec<PatientRecord> = synthetic_patients(n, &SignalConfig::default(), seed, dir)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|p| p.record)
            .collect();
        let split = stratified_patient_split(&records, SplitRatios::default(), seed).map_err(|e| e.to_string())?;
        let (h, d) = recount(&records, &split).map_err(|e| format!("seed {seed}: {e}"))?;
        ensure!(h <= 2.0, "seed {seed}: HTN prevalence off by {h:.2} points");
        ensure!(d <= 3.0, "seed {seed}: HTN-with-diabetes fraction off by {d:.2} points");
        worst = (worst.0.max(h), worst.1.max(d));
    }

    let records: Vec<PatientRecord> = synthetic_patients(1243, &SignalConfig::default(), 7, dir)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|p| p.record)
        .collect();
    let split = stratified_patient_split(&records, SplitRatios::default(), 7).map_err(|e| e.to_string())?;
    let sizes = (
        split.count(Subset::Train),
        split.count(Subset::Validation),
        split.count(Subset::Test),
    );
    ensure!(sizes == (745, 249, 249), "1243 patients split {sizes:?}");
    recount(&records, &split)?;
    Ok(format!(
        "200 cohorts, worst deviation {:.2} / {:.2} points, 1243 -> 745/249/249",
        worst.0, worst.1
    ))
}

// ---------------------------------------------------------------- 5

const TINY: usize = 8;

fn tiny_example(i: usize, r: &mut rng::Rng) -> Example<SystemInput> {
    let mut img = FeatureMap::zeros(3, TINY, TINY);
    img.data.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
    Example {
        meta: ExampleMeta {
            image_id: format!("i{i:03}"),
            patient_id: format!("p{i:03}"),
            label: i % 2 == 0,
            diabetes: false,
        },
        input: SystemInput {
            image: Some(Arc::new(img)),
            demo: DemographicInput {
                age_std: r.gen_range(-2.0..2.0),
                gender_code: (i % 2) as f64,
            },
        },
    }
}

fn tiny_spec(strategy: Strategy) -> FusionSpec {
    let mut s = FusionSpec::new(strategy);
    s.encoder.image_size = TINY;
    s.encoder.channels = vec![4, 6];
    s
}

fn training_checks() -> Outcome {
    let mut worst: f64 = 0.0;
    for y in [0.0, 1.0] {
        for step in 0..=400 {
            let z = -10.0 + step as f64 * 0.05;
            let h = 1e-5;
            let fd = (bce_loss(z + h, y) - bce_loss(z - h, y)) / (2.0 * h);
            let g = bce_grad(z, y);
            let rel = (fd - g).abs() / g.abs().max(1e-300);
            worst = worst.max(rel);
            ensure!(rel <= 1e-5, "bce gradient at z={z}, y={y}: {g} vs {fd}");
        }
    }

    for (lr_max, lr_min, total) in [(1e-3, 0.0, 100), (0.1, 1e-4, 7), (2.0, 0.5, 1)] {
        let first = cosine_lr(0, total, lr_max, lr_min).map_err(|e| e.to_string())?;
        let last = cosine_lr(total, total, lr_max, lr_min).map_err(|e| e.to_string())?;
        ensure!(first == lr_max && last == lr_min, "cosine endpoints {first} {last}");
    }

    let Model::Neural(model) = assemble(&tiny_spec(Strategy::Intermediate), 4, &TrainedPrerequisites::default())
        .map_err(|e| e.to_string())?
    else {
        return Err("intermediate fusion is not a neural system".into());
    };
    let mut r = rng::stream(5, 0);
    let train_set: Vec<_> = (0..8).map(|i| tiny_example(i, &mut r)).collect();
    let val: Vec<_> = (8..12).map(|i| tiny_example(i, &mut r)).collect();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: train_set.len(),
        optimizer: fundus_fusion::nn::AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let rates = GroupRates {
        head: 1e-3,
        backbone: 1e-3,
    };
    let out = train_on(model.clone(), &train_set, &val, rates, &cfg, None).map_err(|e| e.to_string())?;
    ensure!(out.history.epochs[0].train_loss > 0.0, "zero training loss");
    let mut norms = Vec::new();
    for ((name, before), (_, after)) in model.blocks().into_iter().zip(out.last.blocks()) {
        let delta = before
            .iter()
            .zip(&after)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        ensure!(delta > 0.0, "block {name} unchanged after one step");
        norms.push(format!("{name} {delta:.2e}"));
    }
    ensure!(norms.len() == 3, "expected three blocks, got {}", norms.len());
    Ok(format!(
        "bce max rel error {worst:.1e}, cosine endpoints exact, one-step deltas {}",
        norms.join(", ")
    ))
}

// ---------------------------------------------------------------- 6

fn architecture_contracts() -> Outcome {
    let none = TrainedPrerequisites::default();
    let width = |s: Strategy| -> Result<Option<usize>, String> {
        let m = assemble(&FusionSpec::new(s), 0, &none).map_err(|e| e.to_string())?;
        Ok(m.neural().and_then(|n| n.fusion_width()))
    };
    let inter = width(Strategy::Intermediate)?;
    let pred = width(Strategy::Prediction)?;
    ensure!(inter == Some(40), "intermediate width {inter:?}");
    ensure!(pred == Some(2), "prediction width {pred:?}");

    let fundus = assemble(&tiny_spec(Strategy::UnimodalFundus), 0, &none)
        .map_err(|e| e.to_string())?
        .neural()
        .cloned();
    let demographic = Some(NeuralSystem::Demographic {
        demographic: DemographicPath::standalone(&PathConfig::default(), &mut rng::stream(0, 0))
            .map_err(|e| e.to_string())?,
    });
    let intermediate = assemble(&tiny_spec(Strategy::Intermediate), 0, &none)
        .map_err(|e| e.to_string())?
        .neural()
        .cloned();
    let trained = TrainedPrerequisites {
        fundus,
        demographic,
        intermediate,
    };
    let prereq = Prerequisites {
        fundus: Some("f".into()),
        demographic: Some("d".into()),
        intermediate: Some("i".into()),
    };
    let mut widths = Vec::new();
    for (strategy, kinds) in [
        (
            Strategy::Late,
            vec![HeadKind::Fcnn, HeadKind::GradientBoostedTrees, HeadKind::SupportVectorMachine],
        ),
        (
            Strategy::Voting,
            vec![
                HeadKind::SoftVote,
                HeadKind::Fcnn,
                HeadKind::GradientBoostedTrees,
                HeadKind::SupportVectorMachine,
            ],
        ),
    ] {
        for kind in kinds {
            let mut spec = tiny_spec(strategy);
            spec.head_kind = Some(kind);
            spec.prerequisites = prereq.clone();
            if strategy == Strategy::Late {
                spec.prerequisites.demographic = None;
                spec.prerequisites.intermediate = None;
            }
            let m = assemble(&spec, 0, &trained).map_err(|e| e.to_string())?;
            let w = m.head().map(|h| h.input_width);
            ensure!(w == Some(3), "{} / {kind:?} head width {w:?}", strategy.name());
            widths.push(w);
        }
    }

    let mut r = rng::stream(6, 0);
    for _ in 0..1000 {
        let logits: [f64; 3] = std::array::from_fn(|_| r.gen_range(-8.0..8.0));
        let probs = logits.map(sigmoid);
        let want = (probs[0] + probs[1] + probs[2]) / 3.0;
        let got = soft_vote(&logits);
        ensure!((got - want).abs() <= 4.0 * f64::EPSILON, "soft vote {got} vs mean {want}");
        let lo = probs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ensure!(lo <= got && got <= hi, "soft vote outside [min, max]");
    }
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let v = soft_vote(&[logit(0.2), logit(0.5), logit(0.8)]);
    ensure!((v - 0.5).abs() < 1e-12, "soft vote of 0.2, 0.5, 0.8 gave {v}");
    Ok(format!(
        "intermediate 40, prediction 2, {} late/voting heads of width 3, soft vote is the mean",
        widths.len()
    ))
}

// ---------------------------------------------------------------- 7

struct Trained {
    system: System,
    validation_auc: f64,
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let signal = SignalConfig {
        image_size: 64,
        ..Default::default()
    };
    let cohort = generate_synthetic_cohort(400, &signal, 2024, dir.path()).map_err(|e| e.to_string())?;
    let split = stratified_patient_split(&cohort.records, SplitRatios::default(), 2024).map_err(|e| e.to_string())?;
    let preprocess = PreprocessConfig {
        image_size: 64,
        ..Default::default()
    };
    let stats = PreprocessStats::fit(&cohort.records, &split, &preprocess).map_err(|e| e.to_string())?;
    let data = build_dataset(&cohort.records, &split, &stats, true).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 16,
        seed: 2024,
        ..Default::default()
    };
    let augment = fundus_fusion::cohort::AugmentConfig::default();

    let fit = |strategy: Strategy| -> Result<Trained, String> {
        let mut spec = FusionSpec::new(strategy);
        spec.encoder.image_size = 64;
        let model = assemble(&spec, cfg.seed, &TrainedPrerequisites::default()).map_err(|e| e.to_string())?;
        let mut system = System::new(spec, model, stats.clone()).map_err(|e| e.to_string())?;
        let summary = system.fit(&data, &cfg, Some(&augment)).map_err(|e| e.to_string())?;
        Ok(Trained {
            system,
            validation_auc: summary.validation_auc,
        })
    };
    let fused = fit(Strategy::Intermediate)?;
    let fundus = fit(Strategy::UnimodalFundus)?;
    let demographic = fit(Strategy::UnimodalDemographic)?;
    ensure!(data.test_untouched_in_training(), "test subset read during training");

    data.set_phase(Phase::Evaluation);
    let test = data.read(Subset::Test).map_err(|e| e.to_string())?;
    let predict = |t: &Trained| t.system.predict_proba(test, 1).map_err(|e| e.to_string());
    let (pf, pi, pd) = (predict(&fused)?, predict(&fundus)?, predict(&demographic)?);
    let cfg_b = boot(10_000, 2024);
    let vs_fundus = paired_difference(&pf, &pi, Metric::F1, &cfg_b).map_err(|e| e.to_string())?;
    let vs_demo = paired_difference(&pf, &pd, Metric::F1, &cfg_b).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let detail = format!(
        "val AUC fused {:.3} (fundus {:.3}, demographic {:.3}); F1 diff vs fundus {}, vs demographic {}; {elapsed:.1?}",
        fused.validation_auc,
        fundus.validation_auc,
        demographic.validation_auc,
        vs_fundus.display(),
        vs_demo.display()
    );
    ensure!(fused.validation_auc >= 0.95, "validation AUC below 0.95: {detail}");
    ensure!(vs_fundus.ci_lo > -0.02, "fusion loses to the fundus model: {detail}");
    ensure!(vs_demo.ci_lo > -0.02, "fusion loses to the demographic model: {detail}");
    ensure!(elapsed < Duration::from_secs(600), "too slow: {detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 8

/// One conv channel followed by global pooling and a scalar linear head.
fn toy_fundus(kernel: &[f64], bias: f64, head_w: f64) -> NeuralSystem {
    let mut backbone = ConvBackbone::new(3, &[1], 0.01, &mut rng::stream(0, 0));
    backbone.blocks[0].weight.data = kernel.to_vec();
    backbone.blocks[0].bias.data = vec![bias];
    let mut head = Dense::zeros(1, 1, ParamGroup::Head);
    head.weight.data[0] = head_w;
    head.bias.data[0] = -0.2;
    NeuralSystem::Fundus {
        fundus: FundusPath {
            backbone,
            head: Some(head),
            image_size: TINY,
        },
    }
}

/// Stride-2, padding-1 3x3 convolution followed by leaky ReLU, written out.
fn conv_oracle(img: &FeatureMap, k: &[f64], bias: f64) -> Vec<f64> {
    let o = TINY / 2;
    let mut out = Vec::with_capacity(o * o);
    for oy in 0..o {
        for ox in 0..o {
            let mut s = bias;
            for c in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (y, x) = ((2 * oy + ky) as isize - 1, (2 * ox + kx) as isize - 1);
                        if (0..TINY as isize).contains(&y) && (0..TINY as isize).contains(&x) {
                            s += k[c * 9 + ky * 3 + kx] * img.at(c, y as usize, x as usize);
                        }
                    }
                }
            }
            out.push(if s > 0.0 { s } else { 0.01 * s });
        }
    }
    out
}

fn grad_cam_checks() -> Outcome {
    let mut r = rng::stream(8, 0);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let k: Vec<f64> = (0..27).map(|_| r.gen_range(-0.5..0.5)).collect();
        let bias = r.gen_range(-0.1..0.1);
        let w = r.gen_range(0.5..2.0) * if trial % 2 == 0 { 1.0 } else { -1.0 };
        let sys = toy_fundus(&k, bias, w);
        let ex = tiny_example(trial, &mut r);
        let a = conv_oracle(ex.input.image.as_ref().unwrap(), &k, bias);
        // The pooled logit is w * mean(A), so every gradient entry is w / area.
        let alpha = w / a.len() as f64;
        let cam: Vec<f64> = a.iter().map(|v| (alpha * v).max(0.0)).collect();
        let grid = cam_grid(&sys, &ex.input).map_err(|e| e.to_string())?;
        for (g, c) in grid.data.iter().zip(&cam) {
            worst = worst.max((g - c).abs());
            ensure!((g - c).abs() <= 1e-6, "trial {trial}: rectified map {g} vs {c}");
        }
        let mut want = upsample_bilinear(&cam, TINY / 2, TINY / 2, TINY, TINY);
        normalize(&mut want);
        let map = grad_cam(&sys, &ex).map_err(|e| e.to_string())?;
        for (g, c) in map.grid.iter().zip(&want) {
            worst = worst.max((g - c).abs());
            ensure!((g - c).abs() <= 1e-6, "trial {trial}: saliency {g} vs {c}");
        }
    }

    // Bounds and shape over a default-architecture model and a batch.
    let Model::Neural(sys) = assemble(&tiny_spec(Strategy::Intermediate), 9, &TrainedPrerequisites::default())
        .map_err(|e| e.to_string())?
    else {
        return Err("not neural".into());
    };
    let batch: Vec<_> = (0..12).map(|i| tiny_example(i, &mut r)).collect();
    let maps = explain_batch(&sys, &batch, 6, 1).map_err(|e| e.to_string())?;
    ensure!(maps.len() == 6, "{} maps", maps.len());
    for m in &maps {
        ensure!(
            m.height == TINY && m.width == TINY && m.grid.len() == TINY * TINY,
            "map shape {}x{}",
            m.height,
            m.width
        );
        ensure!(m.grid.iter().all(|v| (0.0..=1.0).contains(v)), "map outside [0, 1]");
    }

    // Positive activations with a negative head weight rectify to zero everywhere.
    let k: Vec<f64> = (0..27).map(|i| 0.02 + 0.01 * i as f64).collect();
    let mut ex = tiny_example(0, &mut r);
    let img = Arc::make_mut(ex.input.image.as_mut().unwrap());
    img.data.iter_mut().for_each(|v| *v = v.abs() + 0.1);
    let sys = toy_fundus(&k, 0.0, -1.0);
    ensure!(cam_grid(&sys, &ex.input).map_err(|e| e.to_string())?.data.iter().all(|&v| v == 0.0), "pre-map not zero");
    let map = grad_cam(&sys, &ex).map_err(|e| e.to_string())?;
    ensure!(map.grid.iter().all(|&v| v == 0.0), "all-zero map was rescaled");
    let mut zeros = vec![0.0; 16];
    normalize(&mut zeros);
    ensure!(zeros.iter().all(|&v| v == 0.0), "normalize changed an all-zero map");
    Ok(format!("20 analytic trials, max error {worst:.1e}; bounds, shape and zero maps hold"))
}

// ---------------------------------------------------------------- 9

fn tiny_cohort() -> Result<(tempfile::TempDir, Vec<PatientRecord>, SplitAssignment, PreprocessStats), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let signal = SignalConfig {
        image_size: 16,
        ..Default::default()
    };
    let cohort = generate_synthetic_cohort(60, &signal, 3, dir.path()).map_err(|e| e.to_string())?;
    let split = stratified_patient_split(&cohort.records, SplitRatios::default(), 3).map_err(|e| e.to_string())?;
    let preprocess = PreprocessConfig {
        image_size: 16,
        ..Default::default()
    };
    let stats = PreprocessStats::fit(&cohort.records, &split, &preprocess).map_err(|e| e.to_string())?;
    Ok((dir, cohort.records, split, stats))
}

fn trained_report(
    records: &[PatientRecord],
    split: &SplitAssignment,
    stats: &PreprocessStats,
    workers: usize,
) -> Result<(String, String), String> {
    let data: DataAccess<SystemInput> = build_dataset(records, split, stats, true).map_err(|e| e.to_string())?;
    let mut spec = FusionSpec::new(Strategy::Intermediate);
    spec.encoder.image_size = 16;
    spec.encoder.channels = vec![4, 8];
    let cfg = TrainConfig {
        epochs: 3,
        seed: 9,
        workers,
        ..Default::default()
    };
    let model = assemble(&spec, cfg.seed, &TrainedPrerequisites::default()).map_err(|e| e.to_string())?;
    let mut system = System::new(spec, model, stats.clone()).map_err(|e| e.to_string())?;
    system
        .fit(&data, &cfg, Some(&Default::default()))
        .map_err(|e| e.to_string())?;
    data.set_phase(Phase::Evaluation);
    let test = data.read(Subset::Test).map_err(|e| e.to_string())?;
    let preds = system.predict_proba(test, workers).map_err(|e| e.to_string())?;
    let report = bootstrap_ci(&preds, &Metric::ALL, &boot(500, 9)).map_err(|e| e.to_string())?;
    let weights = serde_json::to_string(&system.model).map_err(|e| e.to_string())?;
    Ok((weights, serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?))
}

fn determinism() -> Outcome {
    let (_dir, records, split, stats) = tiny_cohort()?;
    let again = stratified_patient_split(&records, SplitRatios::default(), 3).map_err(|e| e.to_string())?;
    ensure!(again == split, "split differs on rerun");

    let (w1, r1) = trained_report(&records, &split, &stats, 1)?;
    let (w2, r2) = trained_report(&records, &split, &stats, 1)?;
    ensure!(w1 == w2, "weights differ between identical runs");
    ensure!(r1 == r2, "metric report differs between identical runs");
    let (w3, r3) = trained_report(&records, &split, &stats, 3)?;
    ensure!(w1 == w3 && r1 == r3, "training with 3 workers changed the result");

    let mut r = rng::stream(10, 0);
    let y: Vec<bool> = (0..200).map(|i| i % 4 != 0).collect();
    let p: Vec<f64> = y.iter().map(|&l| (r.gen_range(0.0..0.7f64) + if l { 0.3 } else { 0.0 }).min(1.0)).collect();
    let q: Vec<f64> = (0..200).map(|_| r.gen_range(0.0..1.0)).collect();
    let (sp, sq) = (set(&p, &y), set(&q, &y));
    let json = |workers: usize| -> Result<String, String> {
        let cfg = BootstrapConfig {
            workers,
            ..boot(3000, 4)
        };
        let ci = bootstrap_ci(&sp, &Metric::ALL, &cfg).map_err(|e| e.to_string())?;
        let diff = paired_difference(&sp, &sq, Metric::F1, &cfg).map_err(|e| e.to_string())?;
        Ok(serde_json::to_string(&(ci, diff)).unwrap())
    };
    let base = json(1)?;
    for workers in [0, 2, 4, 7] {
        ensure!(json(workers)? == base, "bootstrap with {workers} workers differs");
    }
    Ok("training, predictions and reports byte-identical on rerun; bootstrap identical for 0/1/2/4/7 workers".into())
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("metric oracles", metric_oracles),
        ("exhaustive bootstrap equivalence", exhaustive_bootstrap),
        ("paired-difference correctness", paired_differences),
        ("split invariants", split_invariants),
        ("numerical training checks", training_checks),
        ("architecture contracts", architecture_contracts),
        ("end-to-end synthetic analogue", end_to_end),
        ("grad-cam", grad_cam_checks),
        ("determinism", determinism),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  criterion {}: {name} - {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {}: {name} - {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
