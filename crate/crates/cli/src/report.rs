//! Report persistence: JSON, CSV tables and the SVG figures derived from them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};
use crate::experiment::{CvReport, ExperimentKind};
use crate::plots;

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

fn write(dir: &Path, name: &str, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    written.push(path);
    Ok(())
}

pub fn report_to_json(report: &CvReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

pub fn read_report(path: &Path) -> Result<CvReport> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One row per repeat x fold x extractor x target; pooled repeat values use fold `all`.
pub fn records_csv(report: &CvReport) -> String {
    let mut out = String::from("repeat,fold,extractor,target,metric,value\n");
    for r in &report.records {
        let fold = r.fold.map(|f| f.to_string()).unwrap_or_else(|| "all".into());
        let _ = writeln!(out, "{},{fold},{},{},{},{}", r.repeat, report.extractors[r.extractor], r.target, report.metric, opt(r.value));
    }
    out
}

pub fn summary_csv(report: &CvReport) -> String {
    let mut out = String::from("extractor,metric,mean,sd,repeats\n");
    for e in 0..2 {
        let s = report.summary[e];
        let _ = writeln!(out, "{},{},{:.9},{:.9},{}", report.extractors[e], report.metric, s.mean, s.sd, report.repeat_values[e].len());
    }
    let p = &report.paired;
    let _ = writeln!(out, "\ntest,mean_difference,n_nonzero,w_plus,wilcoxon_p,t_statistic,t_p");
    let _ = writeln!(
        out,
        "{}_minus_{},{:.9},{},{},{:.9e},{:.9},{:.9e}",
        report.extractors[1], report.extractors[0], p.mean_difference, p.n_nonzero, p.w_plus, p.wilcoxon_p, p.t_statistic, p.t_p
    );
    out
}

fn targets_csv(report: &CvReport) -> String {
    let [a, b] = &report.extractors;
    let m = &report.metric;
    let mut out = format!("target,{m}_{a},{m}_{b},p_{a},p_{b},delta\n");
    for t in &report.targets {
        let delta = t.value[0].zip(t.value[1]).map(|(x, y)| y - x);
        let _ = writeln!(out, "{},{},{},{},{},{}", t.name, opt(t.value[0]), opt(t.value[1]), opt(t.p_value[0]), opt(t.p_value[1]), opt(delta));
    }
    out
}

/// Writes every table and figure for `report` into `dir`; returns the files written.
pub fn write_report(report: &CvReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut written = Vec::new();
    write(dir, "report.json", &report_to_json(report)?, &mut written)?;
    write(dir, "records.csv", &records_csv(report), &mut written)?;
    write(dir, "summary.csv", &summary_csv(report), &mut written)?;
    let labels = &report.extractors;

    let means = [Some(report.summary[0].mean)];
    let means_b = [Some(report.summary[1].mean)];
    let sds = [report.summary[0].sd];
    let sds_b = [report.summary[1].sd];
    let lo: f64 = if report.experiment == ExperimentKind::Expression { -1.0 } else { 0.0 };
    let svg = plots::grouped_bars(
        &format!("{} experiment: mean {} over {} repeats", report.experiment.name(), report.metric, report.repeats),
        &report.metric,
        &[format!("p = {:.2e}", report.p_value)],
        [&means, &means_b],
        Some([&sds, &sds_b]),
        labels,
        (lo.min(report.summary[0].mean.min(report.summary[1].mean)), 1.0),
    );
    write(dir, "repeat_means.svg", &svg, &mut written)?;

    if let Some(t) = &report.tissue {
        let mut csv = String::from("class");
        for e in labels {
            let _ = write!(csv, ",accuracy_{e}");
        }
        csv.push('\n');
        for (k, name) in t.class_names.iter().enumerate() {
            let _ = writeln!(csv, "{name},{},{}", opt(t.per_class_accuracy[0][k]), opt(t.per_class_accuracy[1][k]));
        }
        write(dir, "per_class_accuracy.csv", &csv, &mut written)?;
        for (e, label) in labels.iter().enumerate() {
            let mut csv = format!("truth,{}\n", t.class_names.join(","));
            for (k, row) in t.confusion[e].iter().enumerate() {
                let cells: Vec<String> = row.iter().map(u64::to_string).collect();
                let _ = writeln!(csv, "{},{}", t.class_names[k], cells.join(","));
            }
            write(dir, &format!("confusion_{label}.csv"), &csv, &mut written)?;
        }
        let svg = plots::grouped_bars(
            "per-class accuracy",
            "accuracy",
            &t.class_names,
            [&t.per_class_accuracy[0], &t.per_class_accuracy[1]],
            None,
            labels,
            (0.0, 1.0),
        );
        write(dir, "per_class_accuracy.svg", &svg, &mut written)?;
    }

    if !report.targets.is_empty() {
        write(dir, "targets.csv", &targets_csv(report), &mut written)?;
    }

    if report.experiment == ExperimentKind::Expression {
        let deltas: Vec<f64> = report.targets.iter().filter_map(|t| t.value[0].zip(t.value[1]).map(|(a, b)| b - a)).collect();
        let title = match &report.genes {
            Some(g) => format!("correlation change per gene ({} of {} significant genes improved)", g.n_improved, g.n_significant),
            None => "correlation change per gene".into(),
        };
        let svg = plots::histogram(&title, &format!("r({}) - r({})", labels[1], labels[0]), &deltas, 20);
        write(dir, "correlation_delta_hist.svg", &svg, &mut written)?;

        let mut csv = String::from("target,unit,observed");
        for e in labels {
            let _ = write!(csv, ",predicted_{e}");
        }
        csv.push('\n');
        for s in &report.scatter {
            for i in 0..s.observed.len() {
                let _ = writeln!(csv, "{},{i},{:.9},{:.9},{:.9}", s.target, s.observed[i], s.predicted[0][i], s.predicted[1][i]);
            }
        }
        write(dir, "scatter.csv", &csv, &mut written)?;
        let panels: Vec<(String, Vec<f64>, [Vec<f64>; 2])> =
            report.scatter.iter().map(|s| (s.target.clone(), s.observed.clone(), s.predicted.clone())).collect();
        let svg = plots::scatter_panels("observed versus predicted expression (first repeat)", &panels, labels);
        write(dir, "observed_vs_predicted.svg", &svg, &mut written)?;
    }

    if report.experiment == ExperimentKind::Mutation {
        let names: Vec<String> = report.targets.iter().map(|t| t.name.clone()).collect();
        let a: Vec<Option<f64>> = report.targets.iter().map(|t| t.value[0]).collect();
        let b: Vec<Option<f64>> = report.targets.iter().map(|t| t.value[1]).collect();
        let svg = plots::grouped_bars("mean AUC per mutation", "AUC", &names, [&a, &b], None, labels, (0.0, 1.0));
        write(dir, "per_target_auc.svg", &svg, &mut written)?;
    }
    Ok(written)
}
