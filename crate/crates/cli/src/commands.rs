use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use fundus_fusion::cohort::{
    cohort_summary, generate_synthetic_cohort, load_manifest, stratified_patient_split, PatientRecord,
    SplitAssignment, Subset,
};
use fundus_fusion::evaluation::{
    bootstrap_ci, bootstrap_distribution, curve_band, paired_difference, plot, subgroup_eval, BootstrapResult, CurveBand, CurveKind, Metric, PairedDifferenceResult, PredictionSet, SubgroupReport,
};
use fundus_fusion::evaluation::report::{
    render_comparison_table, render_metric_table, render_subgroup_table, write_band_csv, write_distribution_csv,
};
use fundus_fusion::explain::explain_batch;
use fundus_fusion::fusion::{assemble, HeadKind, Model, Strategy, System, TrainedPrerequisites};
use fundus_fusion::training::{build_dataset, train, DataAccess, GroupRates, Phase, PreprocessStats, SystemInput};
use fundus_fusion::Error;

use crate::config::RunConfig;
use crate::run::{write_json, write_text, Recorder, RunDir};

pub struct Ctx {
    pub config: RunConfig,
    pub run: RunDir,
}

impl Ctx {
    fn manifest_path(&self) -> PathBuf {
        match (&self.config.data.manifest, &self.config.data.synthetic) {
            (Some(m), _) => m.clone(),
            _ => self.run.data().join("manifest.csv"),
        }
    }

    fn records(&self, rec: &mut Recorder) -> anyhow::Result<Vec<PatientRecord>> {
        let path = self.manifest_path();
        rec.input(&path);
        Ok(load_manifest(&path)?)
    }

    fn split(&self, rec: &mut Recorder) -> anyhow::Result<SplitAssignment> {
        let path = self.run.require(self.run.split_csv())?;
        rec.input(&path);
        let s = &self.config.split;
        Ok(SplitAssignment::read_csv(File::open(&path)?, s.seed, s.ratios)?)
    }

    /// Saved systems are looked up by name under the run directory.
    fn load_system(&self, name: &str, rec: &mut Recorder) -> anyhow::Result<System> {
        let dir = self.run.require(self.run.system(name))?;
        rec.input(&dir);
        let sys = System::load(&dir)?;
        if !sys.trained {
            return Err(Error::NotFitted(format!("system `{name}`")).into());
        }
        Ok(sys)
    }

    fn dataset(
        &self,
        records: &[PatientRecord],
        split: &SplitAssignment,
        stats: &PreprocessStats,
        images: bool,
    ) -> anyhow::Result<DataAccess<SystemInput>> {
        Ok(build_dataset(records, split, stats, images)?)
    }
}

pub fn split(ctx: &Ctx) -> anyhow::Result<()> {
    let cfg = &ctx.config;
    let mut rec = Recorder::new("split", cfg);
    if let Some(s) = &cfg.data.synthetic {
        let dir = ctx.run.data();
        eprintln!("generating {} synthetic patients in {}", s.patients, dir.display());
        let cohort = generate_synthetic_cohort(s.patients, &s.signal, s.seed, &dir)?;
        rec.output(cohort.manifest_path);
        rec.output(dir.join("images"));
        rec.lap("generate");
    }
    let records = ctx.records(&mut rec)?;
    let split = stratified_patient_split(&records, cfg.split.ratios, cfg.split.seed)?;
    let out = ctx.run.split_dir();
    std::fs::create_dir_all(&out)?;
    split.write_csv(BufWriter::new(File::create(rec.output(out.join("split.csv")))?))?;
    #[derive(Serialize)]
    struct SplitFile<'a> {
        split: &'a SplitAssignment,
        report: fundus_fusion::cohort::SplitReport,
    }
    write_json(
        &rec.output(out.join("split.json")),
        &SplitFile {
            split: &split,
            report: split.report(&records),
        },
    )?;
    let summary = cohort_summary(&records)?;
    write_text(&rec.output(out.join("cohort_summary.txt")), &summary.render_table())?;
    write_json(&rec.output(out.join("cohort_summary.json")), &summary)?;
    for w in &split.warnings {
        rec.note(w.clone());
    }
    rec.lap("split");
    eprintln!(
        "split {} patients: train {}, validation {}, test {}",
        records.len(),
        split.count(Subset::Train),
        split.count(Subset::Validation),
        split.count(Subset::Test)
    );
    rec.finish(&ctx.run.manifest("split", None))?;
    Ok(())
}

pub struct TrainArgs {
    pub name: Option<String>,
    pub strategy: Option<Strategy>,
    pub head: Option<HeadKind>,
}

/// Relative prerequisite paths name systems in this run directory.
fn resolve_prerequisites(ctx: &Ctx, spec: &mut fundus_fusion::fusion::FusionSpec) {
    let p = &mut spec.prerequisites;
    for slot in [&mut p.fundus, &mut p.demographic, &mut p.intermediate] {
        if let Some(path) = slot {
            if path.is_relative() && !path.exists() {
                *path = ctx.run.system(&path.to_string_lossy());
            }
        }
    }
}

#[derive(Serialize)]
struct TrainReport<'a> {
    name: &'a str,
    strategy: Strategy,
    head: Option<HeadKind>,
    summary: &'a fundus_fusion::fusion::FitSummary,
    head_calibration: Option<String>,
}

pub fn train_cmd(ctx: &Ctx, args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = &ctx.config;
    let mut spec = cfg.fusion.clone();
    if let Some(s) = args.strategy {
        spec.strategy = s;
    }
    if args.head.is_some() {
        spec.head_kind = args.head;
    }
    resolve_prerequisites(ctx, &mut spec);
    spec.validate()?;
    let name = args.name.clone().unwrap_or_else(|| spec.strategy.name().to_string());
    let mut rec = Recorder::new("train", cfg);
    let records = ctx.records(&mut rec)?;
    let split = ctx.split(&mut rec)?;
    let stats = PreprocessStats::fit(&records, &split, &cfg.preprocess)?;
    let data = ctx.dataset(&records, &split, &stats, spec.uses_images())?;
    rec.lap("load");
    for dir in [&spec.prerequisites.fundus, &spec.prerequisites.demographic, &spec.prerequisites.intermediate]
        .into_iter()
        .flatten()
    {
        rec.input(dir);
    }
    let trained = TrainedPrerequisites::load(&spec)?;
    let model = assemble(&spec, cfg.train.seed, &trained)?;
    let mut system = System::new(spec.clone(), model, stats)?;
    eprintln!("training `{name}` ({})", spec.strategy.name());
    let summary = system.fit(&data, &cfg.train, cfg.augment.as_ref())?;
    rec.lap("fit");
    if !data.test_untouched_in_training() {
        return Err(Error::TestSplitAccess {
            phase: Phase::Training.name().into(),
        }
        .into());
    }
    rec.access(data.access_log());
    let dir = ctx.run.system(&name);
    system.save(&dir)?;
    for f in System::files() {
        rec.output(dir.join(f));
    }
    if let Some(h) = &summary.history {
        h.write_csv(BufWriter::new(File::create(rec.output(dir.join("history.csv")))?))?;
    }
    let calibration = summary.head.as_ref().map(|h| h.calibration.clone());
    if let Some(c) = &calibration {
        rec.note(format!("head probabilities: {c}"));
    }
    if let Some(s) = summary.head_fit_subset {
        rec.note(format!("head fitted on the {} subset", s.name()));
    }
    write_json(
        &rec.output(dir.join("fit.json")),
        &TrainReport {
            name: &name,
            strategy: spec.strategy,
            head: spec.resolved_head(),
            summary: &summary,
            head_calibration: calibration,
        },
    )?;
    eprintln!(
        "`{name}`: validation AUC {:.4}{}",
        summary.validation_auc,
        summary.best_epoch.map(|e| format!(" at epoch {e}")).unwrap_or_default()
    );
    rec.finish(&ctx.run.manifest("train", Some(&name)))?;
    Ok(())
}

pub fn sweep_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let cfg = &ctx.config;
    let spec = cfg.fusion.clone();
    if !matches!(
        spec.strategy,
        Strategy::Intermediate | Strategy::Prediction | Strategy::UnimodalFundus
    ) {
        return Err(Error::config("fusion.strategy", "sweeps need an image-based neural strategy").into());
    }
    let grid = cfg.sweep.clone().unwrap_or_default();
    let mut rec = Recorder::new("sweep", cfg);
    let records = ctx.records(&mut rec)?;
    let split = ctx.split(&mut rec)?;
    let mut datasets: BTreeMap<usize, DataAccess<SystemInput>> = BTreeMap::new();
    let mut log = Vec::new();
    let result = fundus_fusion::training::sweep(&grid, |cell| {
        let size = cell.image_size.unwrap_or(cfg.preprocess.image_size);
        if !datasets.contains_key(&size) {
            let mut pre = cfg.preprocess.clone();
            pre.image_size = size;
            let stats = PreprocessStats::fit(&records, &split, &pre)?;
            datasets.insert(size, build_dataset(&records, &split, &stats, true)?);
        }
        let data = &datasets[&size];
        let mut s = spec.clone();
        s.encoder.image_size = size;
        s.encoder.head_learning_rate = cell.head_learning_rate;
        s.encoder.backbone_learning_rate = cell.backbone_learning_rate;
        if let Some(d) = cell.feature_dim {
            s.encoder.fundus_feature_dim = d;
        }
        let Model::Neural(n) = assemble(&s, cfg.train.seed, &TrainedPrerequisites::default())? else {
            unreachable!("sweeps only build neural systems")
        };
        let rates = GroupRates {
            head: cell.head_learning_rate,
            backbone: cell.backbone_learning_rate,
        };
        eprintln!(
            "sweep cell head {:e} backbone {:e} dim {} size {size}",
            cell.head_learning_rate,
            cell.backbone_learning_rate,
            cell.feature_dim.map(|d| d.to_string()).unwrap_or_else(|| "default".into())
        );
        let out = train(n, data, rates, &cfg.train, cfg.augment.as_ref())?;
        log.extend(data.access_log());
        Ok((out.best.metrics.auc, out.best.epoch))
    })?;
    rec.lap("sweep");
    rec.access(log);
    let dir = ctx.run.sweep();
    std::fs::create_dir_all(&dir)?;
    result.write_csv(BufWriter::new(File::create(rec.output(dir.join("sweep.csv")))?))?;
    write_text(&rec.output(dir.join("matrix.txt")), &result.matrix_report())?;
    write_json(&rec.output(dir.join("sweep.json")), &result)?;
    print!("{}", result.matrix_report());
    rec.finish(&ctx.run.manifest("sweep", None))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Bands {
    roc: CurveBand,
    pr: CurveBand,
}

pub fn eval_cmd(ctx: &Ctx, name: &str) -> anyhow::Result<()> {
    let cfg = &ctx.config;
    let ev = &cfg.evaluation;
    let mut rec = Recorder::new("eval", cfg);
    let system = ctx.load_system(name, &mut rec)?;
    let records = ctx.records(&mut rec)?;
    let split = ctx.split(&mut rec)?;
    let data = ctx.dataset(&records, &split, &system.stats, system.model.uses_images())?;
    data.set_phase(Phase::Evaluation);
    let test = data.read(Subset::Test)?;
    let set = system.predict_proba(test, cfg.train.workers)?;
    rec.access(data.access_log());
    rec.lap("predict");
    let dir = ctx.run.eval(name);
    std::fs::create_dir_all(&dir)?;
    set.write_csv(BufWriter::new(File::create(rec.output(dir.join("predictions.csv")))?))?;

    let result = bootstrap_ci(&set, &ev.metrics, &ev.bootstrap)?;
    write_json(&rec.output(dir.join("metrics.json")), &result)?;
    let subgroups = subgroup_eval(&set, &ev.metrics, &ev.bootstrap)?;
    write_json(&rec.output(dir.join("subgroups.json")), &subgroups)?;
    let table = format!(
        "{}\n{}",
        render_metric_table(&[(name.to_string(), &result)]),
        render_subgroup_table(&[(name.to_string(), &subgroups)])
    );
    write_text(&rec.output(dir.join("table.txt")), &table)?;
    rec.lap("bootstrap");

    let dist = bootstrap_distribution(&set, &ev.metrics, &ev.bootstrap)?;
    let series: Vec<(String, &[f64])> = dist
        .metrics
        .iter()
        .zip(&dist.values)
        .map(|(m, v)| (format!("{name}/{}", m.name()), v.as_slice()))
        .collect();
    write_distribution_csv(BufWriter::new(File::create(rec.output(dir.join("distribution.csv")))?), &series)?;
    plot::plot_boxes(
        &rec.output(dir.join("distribution.png")),
        &dist.values.iter().cloned().collect::<Vec<_>>(),
    )?;
    let bands = Bands {
        roc: curve_band(&set, CurveKind::Roc, &ev.bootstrap)?,
        pr: curve_band(&set, CurveKind::Pr, &ev.bootstrap)?,
    };
    write_band_csv(
        BufWriter::new(File::create(rec.output(dir.join("bands.csv")))?),
        &[(name.to_string(), &bands.roc), (name.to_string(), &bands.pr)],
    )?;
    write_json(&rec.output(dir.join("bands.json")), &bands)?;
    for band in [&bands.roc, &bands.pr] {
        plot::plot_curves(
            &rec.output(dir.join(format!("{}.png", band.kind.name()))),
            &[band.median.points.clone()],
            &[band.lower.points.clone(), band.upper.points.clone()],
        )?;
    }
    rec.lap("curves");
    rec.note(format!("{} bootstrap resamples were redrawn", result.redrawn));
    print!("{table}");
    rec.finish(&ctx.run.manifest("eval", Some(name)))?;
    Ok(())
}

fn read_predictions(ctx: &Ctx, name: &str, rec: &mut Recorder) -> anyhow::Result<PredictionSet> {
    let path = ctx.run.require(ctx.run.eval(name).join("predictions.csv"))?;
    rec.input(&path);
    Ok(PredictionSet::read_csv(File::open(&path)?)?)
}

#[derive(Serialize, Deserialize)]
struct Comparison {
    a: String,
    b: String,
    results: Vec<PairedDifferenceResult>,
}

pub fn compare_cmd(ctx: &Ctx, a: &str, b: &str, metrics: Option<Vec<Metric>>) -> anyhow::Result<()> {
    let cfg = &ctx.config;
    let mut rec = Recorder::new("compare", cfg);
    let pa = read_predictions(ctx, a, &mut rec)?;
    let pb = read_predictions(ctx, b, &mut rec)?;
    let metrics = metrics.unwrap_or_else(|| cfg.evaluation.metrics.clone());
    let results = metrics
        .iter()
        .map(|&m| paired_difference(&pa, &pb, m, &cfg.evaluation.bootstrap))
        .collect::<fundus_fusion::Result<Vec<_>>>()?;
    rec.lap("bootstrap");
    let dir = ctx.run.compare(a, b);
    let table = render_comparison_table(a, b, &results);
    write_json(
        &rec.output(dir.join("comparison.json")),
        &Comparison {
            a: a.into(),
            b: b.into(),
            results,
        },
    )?;
    write_text(&rec.output(dir.join("table.txt")), &table)?;
    print!("{table}");
    rec.finish(&ctx.run.manifest("compare", Some(&format!("{a}_vs_{b}"))))?;
    Ok(())
}

pub fn explain_cmd(ctx: &Ctx, name: &str, count: Option<usize>) -> anyhow::Result<()> {
    let cfg = &ctx.config;
    let mut rec = Recorder::new("explain", cfg);
    let system = ctx.load_system(name, &mut rec)?;
    let neural = system
        .model
        .neural()
        .filter(|n| n.uses_images())
        .ok_or_else(|| Error::Validation(format!("system `{name}` has no image encoder to explain")))?;
    let records = ctx.records(&mut rec)?;
    let split = ctx.split(&mut rec)?;
    let data = ctx.dataset(&records, &split, &system.stats, true)?;
    data.set_phase(Phase::Evaluation);
    let test = data.read(Subset::Test)?;
    rec.access(data.access_log());
    let k = count.unwrap_or(cfg.explain.count);
    let maps = explain_batch(neural, test, k, cfg.explain.seed)?;
    let dir = ctx.run.explain(name);
    std::fs::create_dir_all(&dir)?;
    let by_id: BTreeMap<&str, _> = test.iter().map(|e| (e.meta.image_id.as_str(), e)).collect();
    let mut index = Vec::new();
    for m in &maps {
        let img = by_id[m.image_id.as_str()].input.image.as_ref().expect("images were loaded");
        let id = Path::new(&m.image_id);
        let stem = id.with_extension("").to_string_lossy().replace(['/', '\\'], "_");
        m.write_overlay(
            &rec.output(dir.join(format!("{stem}.png"))),
            img,
            &system.stats.preprocess,
            cfg.explain.alpha,
        )?;
        m.write_csv(BufWriter::new(File::create(rec.output(dir.join(format!("{stem}.csv"))))?))?;
        index.push(serde_json::json!({
            "image_id": m.image_id,
            "overlay": format!("{stem}.png"),
            "grid": format!("{stem}.csv"),
            "target_layer": m.target_layer,
            "height": m.height,
            "width": m.width,
        }));
    }
    write_json(&rec.output(dir.join("maps.json")), &index)?;
    rec.lap("explain");
    eprintln!("wrote {} saliency maps to {}", maps.len(), dir.display());
    rec.finish(&ctx.run.manifest("explain", Some(name)))?;
    Ok(())
}

fn sorted_dirs(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn read<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Collects every evaluated model and comparison into combined tables and plots.
pub fn report_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let cfg = &ctx.config;
    let mut rec = Recorder::new("report", cfg);
    let mut results: Vec<(String, BootstrapResult)> = Vec::new();
    let mut groups: Vec<(String, SubgroupReport)> = Vec::new();
    let mut bands: Vec<(String, Bands)> = Vec::new();
    for dir in sorted_dirs(&ctx.run.root.join("eval"))? {
        let name = dir_name(&dir);
        rec.input(&dir);
        results.push((name.clone(), read(&dir.join("metrics.json"))?));
        groups.push((name.clone(), read(&dir.join("subgroups.json"))?));
        bands.push((name, read(&dir.join("bands.json"))?));
    }
    if results.is_empty() {
        return Err(Error::MissingArtifact(ctx.run.root.join("eval")).into());
    }
    let mut text = String::from("Overall\n");
    text.push_str(&render_metric_table(
        &results.iter().map(|(n, r)| (n.clone(), r)).collect::<Vec<_>>(),
    ));
    text.push_str("\nBy diabetes status\n");
    text.push_str(&render_subgroup_table(
        &groups.iter().map(|(n, r)| (n.clone(), r)).collect::<Vec<_>>(),
    ));
    for dir in sorted_dirs(&ctx.run.root.join("compare"))? {
        rec.input(&dir);
        let c: Comparison = read(&dir.join("comparison.json"))?;
        text.push('\n');
        text.push_str(&render_comparison_table(&c.a, &c.b, &c.results));
    }
    let out = ctx.run.report();
    write_text(&rec.output(out.join("report.txt")), &text)?;
    for kind in [CurveKind::Roc, CurveKind::Pr] {
        let pick = |b: &Bands| if kind == CurveKind::Roc { b.roc.clone() } else { b.pr.clone() };
        let medians: Vec<Vec<(f64, f64)>> = bands.iter().map(|(_, b)| pick(b).median.points).collect();
        plot::plot_curves(&rec.output(out.join(format!("{}.png", kind.name()))), &medians, &[])?;
    }
    let legend: Vec<String> = bands
        .iter()
        .enumerate()
        .map(|(i, (n, _))| format!("{n}: rgb{:?}", plot::PALETTE[i % plot::PALETTE.len()]))
        .collect();
    write_text(&rec.output(out.join("legend.txt")), &(legend.join("\n") + "\n"))?;
    print!("{text}");
    rec.finish(&ctx.run.manifest("report", None))?;
    Ok(())
}
