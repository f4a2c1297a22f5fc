//! Text tables and CSV exports for evaluation results.

use std::io::Write;

use super::{BootstrapResult, CurveBand, Metric, MetricInterval, PairedDifferenceResult, SubgroupReport};
use crate::error::Result;

/// `0.771 [0.747, 0.796]`.
pub fn format_interval(m: &MetricInterval) -> String {
    format!("{:.3} [{:.3}, {:.3}]", m.point, m.ci_lo, m.ci_hi)
}

const TABLE_METRICS: [Metric; 7] = [
    Metric::F1,
    Metric::Auc,
    Metric::Pr,
    Metric::Accuracy,
    Metric::Precision,
    Metric::Recall,
    Metric::Specificity,
];

fn header(first: &[&str]) -> String {
    let mut cols: Vec<&str> = first.to_vec();
    cols.extend(TABLE_METRICS.iter().map(|m| m.label()));
    cols.join("\t") + "\n"
}

fn metric_cells(r: &BootstrapResult) -> String {
    TABLE_METRICS
        .iter()
        .map(|m| r.metrics.get(m).map(format_interval).unwrap_or_else(|| "n/a".into()))
        .collect::<Vec<_>>()
        .join("\t")
}

/// One row per model with point estimate and CI per metric.
pub fn render_metric_table(models: &[(String, &BootstrapResult)]) -> String {
    let mut out = header(&["Model"]);
    for (name, r) in models {
        out.push_str(&format!("{name}\t{}\n", metric_cells(r)));
    }
    out
}

/// Per-model rows split by diabetes status, with group sizes.
pub fn render_subgroup_table(models: &[(String, &SubgroupReport)]) -> String {
    let mut out = header(&["Model", "Group"]);
    for (name, rep) in models {
        for g in &rep.groups {
            let label = format!(
                "{} ({} images, {:.0}%)",
                if g.diabetes { "Diabetes" } else { "No diabetes" },
                g.images,
                g.percent
            );
            let cells = match (&g.result, &g.error) {
                (Some(r), _) => metric_cells(r),
                (None, Some(e)) => format!("absent: {e}"),
                (None, None) => "absent".into(),
            };
            out.push_str(&format!("{name}\t{label}\t{cells}\n"));
        }
    }
    out
}

pub fn render_comparison_table(a: &str, b: &str, results: &[PairedDifferenceResult]) -> String {
    let mut out = format!("Metric\t{a} - {b}\tSignificant\n");
    for r in results {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            r.metric.label(),
            r.display(),
            if r.significant { "yes" } else { "no" }
        ));
    }
    out
}

/// `model,iteration,value` rows of a bootstrap distribution (box-plot input).
pub fn write_distribution_csv<W: Write>(writer: W, series: &[(String, &[f64])]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["model", "iteration", "value"])?;
    for (name, vals) in series {
        for (i, v) in vals.iter().enumerate() {
            w.write_record([name.as_str(), &i.to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `model,kind,band,run,area,x,y` rows for median and percentile curves.
pub fn write_band_csv<W: Write>(writer: W, bands: &[(String, &CurveBand)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["model", "kind", "band", "run", "area", "x", "y"])?;
    for (name, band) in bands {
        for (label, curve) in [
            ("median", &band.median),
            ("p2.5", &band.lower),
            ("p97.5", &band.upper),
        ] {
            for (x, y) in &curve.points {
                w.write_record([
                    name.as_str(),
                    band.kind.name(),
                    label,
                    &curve.run.to_string(),
                    &curve.area.to_string(),
                    &x.to_string(),
                    &y.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
