//! Repeated k-fold comparisons of two feature extractors on the three
//! downstream tasks: tissue classification, expression regression and
//! mutation prediction.

use std::collections::BTreeMap;
use std::path::Path;

use histotune_core::downstream::{
    log_transform_expression, predict_lasso, predict_svc, train_lasso, train_svc, train_svr, LassoFamily, LassoParams,
    Matrix, SvcParams, SvrParams,
};
use histotune_core::eval::{
    accuracy_and_confusion, auc, correlation_p_value, count_improved_genes, make_fold_plan, mean_sd, paired_compare,
    pearson, per_class_accuracy, FoldPlan, PairedTest,
};
use histotune_core::seed::{derive_seed, tag};
use histotune_core::FeatureMatrix;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{PairedTestKind, PipelineConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Tissue,
    Expression,
    Mutation,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Tissue => "tissue",
            ExperimentKind::Expression => "expression",
            ExperimentKind::Mutation => "mutation",
        }
    }

    pub fn metric(self) -> &'static str {
        match self {
            ExperimentKind::Tissue => "accuracy",
            ExperimentKind::Expression => "pearson",
            ExperimentKind::Mutation => "auc",
        }
    }
}

/// One metric value; `fold == None` marks the pooled out-of-fold value of a repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub repeat: usize,
    pub fold: Option<usize>,
    pub extractor: usize,
    pub target: String,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueDetail {
    pub class_names: Vec<String>,
    /// Confusion counts pooled over every repeat, rows = truth.
    pub confusion: [Vec<Vec<u64>>; 2],
    pub per_class_accuracy: [Vec<Option<f64>>; 2],
}

/// Per-gene or per-mutation result: metric averaged over repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub name: String,
    pub value: [Option<f64>; 2],
    /// Correlation p-value (expression only).
    pub p_value: [Option<f64>; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneCounts {
    pub alpha: f64,
    pub n_significant: usize,
    pub n_improved: usize,
}

/// Observed against out-of-fold predicted values of one gene in the first repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterSeries {
    pub target: String,
    pub observed: Vec<f64>,
    pub predicted: [Vec<f64>; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub experiment: ExperimentKind,
    pub metric: String,
    /// Labels of extractor 0 and 1; extractor 1 is the one expected to improve.
    pub extractors: [String; 2],
    pub k: usize,
    pub repeats: usize,
    pub seed: u64,
    pub n_units: usize,
    pub feature_dim: usize,
    pub repeat_values: [Vec<f64>; 2],
    pub summary: [Summary; 2],
    pub paired: PairedTest,
    pub test: PairedTestKind,
    /// p-value of the configured test.
    pub p_value: f64,
    pub records: Vec<MetricRecord>,
    pub tissue: Option<TissueDetail>,
    pub targets: Vec<TargetResult>,
    pub genes: Option<GeneCounts>,
    pub scatter: Vec<ScatterSeries>,
}

/// Feature rows of both extractors aligned on the same unit ids.
pub struct PairedFeatures {
    pub ids: Vec<String>,
    pub x: [Vec<Vec<f64>>; 2],
    pub dim: usize,
}

pub fn pair_features(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<PairedFeatures> {
    if a.dim() != b.dim() {
        return Err(CliError::config(
            "features",
            format!("feature dimensions differ: {} versus {}", a.dim(), b.dim()),
        ));
    }
    let mut ids: Vec<String> = a.ids().to_vec();
    ids.sort();
    let mut missing = ids.iter().filter(|id| b.index_of(id).is_none());
    if let Some(id) = missing.next() {
        return Err(CliError::Data(format!("unit {id} is missing from the second feature file")));
    }
    if b.n_rows() != a.n_rows() {
        return Err(CliError::Data(format!("feature files hold {} and {} rows", a.n_rows(), b.n_rows())));
    }
    Ok(PairedFeatures { x: [a.select_f64(&ids)?, b.select_f64(&ids)?], ids, dim: a.dim() })
}

/// Class names and labels from `CLASS/...` unit ids; classes sort lexicographically.
pub fn labels_from_ids(ids: &[String]) -> Result<(Vec<String>, Vec<usize>)> {
    let prefixes = ids
        .iter()
        .map(|id| {
            id.split_once('/')
                .map(|(c, _)| c.to_string())
                .ok_or_else(|| CliError::Data(format!("tile id {id} has no CLASS/ prefix")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut names = prefixes.clone();
    names.sort();
    names.dedup();
    let labels = prefixes.iter().map(|p| names.binary_search(p).expect("present")).collect();
    Ok((names, labels))
}

/// Patient target table: `patient_id` then one numeric column per target.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTable {
    pub names: Vec<String>,
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl TargetTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = reader.headers()?.clone();
        if header.get(0) != Some("patient_id") || header.len() < 2 {
            return Err(CliError::Data("target table must start with patient_id and hold at least one target".into()));
        }
        let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut rows = BTreeMap::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            let id = rec.get(0).unwrap_or_default().to_string();
            let values = rec
                .iter()
                .skip(1)
                .enumerate()
                .map(|(j, v)| {
                    v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| {
                        CliError::Data(format!("line {}: missing or invalid value for {}", line + 2, names[j]))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if id.is_empty() || rows.insert(id.clone(), values).is_some() {
                return Err(CliError::Data(format!("line {}: empty or duplicate patient id {id:?}", line + 2)));
            }
        }
        Ok(Self { names, rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)
    }
}

fn summarize(values: &[f64]) -> Summary {
    let (mean, sd) = mean_sd(values);
    Summary { mean, sd }
}

fn rows(x: &[Vec<f64>], idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| x[i].clone()).collect()
}

/// Runs `fit_predict(repeat, fold, train, test)` for every fold of every plan in
/// parallel and scatters the held-out predictions back to unit order.
fn out_of_fold<P, F>(plans: &[FoldPlan], n: usize, fit_predict: F) -> Result<Vec<Vec<P>>>
where
    P: Clone + Default + Send,
    F: Fn(usize, usize, &[usize], &[usize]) -> Result<Vec<P>> + Sync,
{
    let jobs: Vec<(usize, usize)> = plans.iter().enumerate().flat_map(|(r, p)| (0..p.k()).map(move |f| (r, f))).collect();
    let preds = jobs
        .par_iter()
        .map(|&(r, f)| fit_predict(r, f, &plans[r].train_indices(f), &plans[r].folds[f]))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![vec![P::default(); n]; plans.len()];
    for (&(r, f), p) in jobs.iter().zip(preds) {
        for (&i, v) in plans[r].folds[f].iter().zip(p) {
            out[r][i] = v;
        }
    }
    Ok(out)
}

fn finish(
    cfg: &PipelineConfig,
    kind: ExperimentKind,
    labels: [String; 2],
    paired: &PairedFeatures,
    seed: u64,
    repeat_values: [Vec<f64>; 2],
    records: Vec<MetricRecord>,
) -> Result<CvReport> {
    let test = paired_compare(&repeat_values[1], &repeat_values[0])?;
    let p_value = match cfg.eval.test {
        PairedTestKind::Wilcoxon => test.wilcoxon_p,
        PairedTestKind::PairedT => test.t_p,
    };
    let summary = [summarize(&repeat_values[0]), summarize(&repeat_values[1])];
    info!(
        "{}: {} {:.4} vs {} {:.4}, p = {:.3e}",
        kind.name(),
        labels[0],
        summary[0].mean,
        labels[1],
        summary[1].mean,
        p_value
    );
    Ok(CvReport {
        experiment: kind,
        metric: kind.metric().to_string(),
        extractors: labels,
        k: cfg.eval.k,
        repeats: cfg.eval.repeats,
        seed,
        n_units: paired.ids.len(),
        feature_dim: paired.dim,
        repeat_values,
        summary,
        paired: test,
        test: cfg.eval.test,
        p_value,
        records,
        tissue: None,
        targets: Vec::new(),
        genes: None,
        scatter: Vec::new(),
    })
}

fn experiment_seed(cfg: &PipelineConfig, kind: ExperimentKind) -> u64 {
    derive_seed(cfg.seed, &[tag("experiment"), tag(kind.name())])
}

/// Multiclass SVC on tile features, folds stratified by tissue class.
pub fn run_tissue(cfg: &PipelineConfig, features: [&FeatureMatrix; 2], labels: [String; 2]) -> Result<CvReport> {
    let paired = pair_features(features[0], features[1])?;
    let (class_names, y) = labels_from_ids(&paired.ids)?;
    let n_classes = class_names.len();
    if n_classes < 2 {
        return Err(CliError::Data("tissue experiment needs at least two classes".into()));
    }
    let seed = experiment_seed(cfg, ExperimentKind::Tissue);
    let plans = make_fold_plan(y.len(), Some(&y), cfg.eval.k, cfg.eval.repeats, seed)?;
    let params = SvcParams { c: cfg.svc.c, tol: cfg.svc.tol, max_passes: cfg.svc.max_passes };

    let mut repeat_values = [Vec::new(), Vec::new()];
    let mut records = Vec::new();
    let mut confusion = [vec![vec![0u64; n_classes]; n_classes], vec![vec![0u64; n_classes]; n_classes]];
    for e in 0..2 {
        let x = &paired.x[e];
        let preds = out_of_fold(&plans, y.len(), |r, f, train, test| {
            let ytr: Vec<usize> = train.iter().map(|&i| y[i]).collect();
            let model = train_svc(&rows(x, train), &ytr, n_classes, &params, derive_seed(seed, &[tag("svc"), r as u64, f as u64]))?;
            Ok(predict_svc(&model, &rows(x, test))?)
        })?;
        for (r, pred) in preds.iter().enumerate() {
            for (f, fold) in plans[r].folds.iter().enumerate() {
                let p: Vec<usize> = fold.iter().map(|&i| pred[i]).collect();
                let t: Vec<usize> = fold.iter().map(|&i| y[i]).collect();
                let (acc, _) = accuracy_and_confusion(&p, &t, n_classes)?;
                records.push(MetricRecord { repeat: r, fold: Some(f), extractor: e, target: "all".into(), value: Some(acc) });
            }
            let (acc, conf) = accuracy_and_confusion(pred, &y, n_classes)?;
            for (row, add) in confusion[e].iter_mut().zip(conf) {
                row.iter_mut().zip(add).for_each(|(c, a)| *c += a);
            }
            records.push(MetricRecord { repeat: r, fold: None, extractor: e, target: "all".into(), value: Some(acc) });
            repeat_values[e].push(acc);
        }
    }
    let per_class = [per_class_accuracy(&confusion[0]), per_class_accuracy(&confusion[1])];
    let mut report = finish(cfg, ExperimentKind::Tissue, labels, &paired, seed, repeat_values, records)?;
    report.tissue = Some(TissueDetail { class_names, confusion, per_class_accuracy: per_class });
    Ok(report)
}

/// Patient feature rows joined with target rows; patients lacking targets are dropped with a warning.
fn join_targets(paired: PairedFeatures, table: &TargetTable) -> Result<(PairedFeatures, Vec<Vec<f64>>)> {
    let keep: Vec<usize> = (0..paired.ids.len()).filter(|&i| table.rows.contains_key(&paired.ids[i])).collect();
    if keep.len() < paired.ids.len() {
        warn!("{} patients have features but no targets", paired.ids.len() - keep.len());
    }
    let n_missing = table.rows.keys().filter(|id| paired.ids.binary_search(id).is_err()).count();
    if n_missing > 0 {
        warn!("{n_missing} patients have targets but no features");
    }
    let ids: Vec<String> = keep.iter().map(|&i| paired.ids[i].clone()).collect();
    let targets: Vec<Vec<f64>> = (0..table.names.len()).map(|j| ids.iter().map(|id| table.rows[id][j]).collect()).collect();
    let x = [rows(&paired.x[0], &keep), rows(&paired.x[1], &keep)];
    Ok((PairedFeatures { ids, x, dim: paired.dim }, targets))
}

/// Per-gene linear SVR on ln(1 + expression), plain folds over patients.
pub fn run_expression(cfg: &PipelineConfig, features: [&FeatureMatrix; 2], table: &TargetTable, labels: [String; 2]) -> Result<CvReport> {
    let (paired, raw) = join_targets(pair_features(features[0], features[1])?, table)?;
    let targets = raw.iter().map(|col| log_transform_expression(col)).collect::<Result<Vec<_>, _>>()?;
    let n = paired.ids.len();
    let seed = experiment_seed(cfg, ExperimentKind::Expression);
    let plans = make_fold_plan(n, None, cfg.eval.k, cfg.eval.repeats, seed)?;
    let params = SvrParams { c: cfg.svr.c, epsilon: cfg.svr.epsilon, passes: cfg.svr.passes };
    let n_genes = targets.len();

    let mut records = Vec::new();
    let mut repeat_values = [Vec::new(), Vec::new()];
    let mut gene_mean: [Vec<Option<f64>>; 2] = [Vec::new(), Vec::new()];
    let mut first_repeat: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    for e in 0..2 {
        let x = &paired.x[e];
        // predictions[r][i] holds every gene's prediction for unit i
        let preds: Vec<Vec<Vec<f64>>> = out_of_fold(&plans, n, |_, _, train, test| {
            let xtr = rows(x, train);
            let xte = Matrix::from_rows(&rows(x, test))?;
            let mut out = vec![vec![0.0; n_genes]; test.len()];
            for (g, t) in targets.iter().enumerate() {
                let ytr: Vec<f64> = train.iter().map(|&i| t[i]).collect();
                let model = train_svr(&xtr, &ytr, &params)?;
                for (o, p) in out.iter_mut().zip(model.predict(&xte)?) {
                    o[g] = p;
                }
            }
            Ok(out)
        })?;
        let mut per_gene: Vec<Vec<f64>> = vec![Vec::new(); n_genes];
        for (r, pred) in preds.iter().enumerate() {
            let mut defined = Vec::new();
            for (g, t) in targets.iter().enumerate() {
                let p: Vec<f64> = pred.iter().map(|row| row[g]).collect();
                for (f, fold) in plans[r].folds.iter().enumerate() {
                    let pf: Vec<f64> = fold.iter().map(|&i| p[i]).collect();
                    let tf: Vec<f64> = fold.iter().map(|&i| t[i]).collect();
                    let value = pearson(&pf, &tf).ok();
                    records.push(MetricRecord { repeat: r, fold: Some(f), extractor: e, target: table.names[g].clone(), value });
                }
                let value = pearson(&p, t).ok();
                records.push(MetricRecord { repeat: r, fold: None, extractor: e, target: table.names[g].clone(), value });
                if let Some(v) = value {
                    defined.push(v);
                    per_gene[g].push(v);
                }
                if r == 0 {
                    first_repeat[e].push(p);
                }
            }
            if defined.is_empty() {
                return Err(CliError::Numerical(format!("no gene has a defined correlation in repeat {r}")));
            }
            repeat_values[e].push(defined.iter().sum::<f64>() / defined.len() as f64);
        }
        gene_mean[e] = per_gene
            .iter()
            .map(|v| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64))
            .collect();
    }

    let p_of = |r: &Option<f64>| r.and_then(|r| correlation_p_value(r, n).ok());
    let p_values: [Vec<Option<f64>>; 2] = [gene_mean[0].iter().map(p_of).collect(), gene_mean[1].iter().map(p_of).collect()];
    let (n_significant, n_improved) = count_improved_genes(&gene_mean[0], &gene_mean[1], &p_values[1], cfg.eval.alpha);
    info!("{n_improved} of {n_significant} significant genes improved");
    let target_results: Vec<TargetResult> = (0..n_genes)
        .map(|g| TargetResult {
            name: table.names[g].clone(),
            value: [gene_mean[0][g], gene_mean[1][g]],
            p_value: [p_values[0][g], p_values[1][g]],
        })
        .collect();

    // scatter the best-predicted genes under extractor 1
    let mut order: Vec<usize> = (0..n_genes).collect();
    order.sort_by(|&a, &b| {
        let key = |g: usize| gene_mean[1][g].unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then(a.cmp(&b))
    });
    let scatter = order
        .iter()
        .take(cfg.eval.scatter_genes)
        .map(|&g| ScatterSeries {
            target: table.names[g].clone(),
            observed: targets[g].clone(),
            predicted: [first_repeat[0][g].clone(), first_repeat[1][g].clone()],
        })
        .collect();

    let mut report = finish(cfg, ExperimentKind::Expression, labels, &paired, seed, repeat_values, records)?;
    report.targets = target_results;
    report.genes = Some(GeneCounts { alpha: cfg.eval.alpha, n_significant, n_improved });
    report.scatter = scatter;
    Ok(report)
}

/// Per-mutation LASSO, folds stratified by the mutation flag.
pub fn run_mutation(cfg: &PipelineConfig, features: [&FeatureMatrix; 2], table: &TargetTable, labels: [String; 2]) -> Result<CvReport> {
    let (paired, targets) = join_targets(pair_features(features[0], features[1])?, table)?;
    let n = paired.ids.len();
    let seed = experiment_seed(cfg, ExperimentKind::Mutation);
    let family = cfg.lasso.family;
    let params = LassoParams {
        n_lambda: cfg.lasso.n_lambda,
        lambda_min_ratio: cfg.lasso.lambda_min_ratio,
        inner_folds: cfg.lasso.inner_folds,
        tol: cfg.lasso.tol,
        max_passes: cfg.lasso.max_passes,
        lambda_grid: None,
    };
    for (name, t) in table.names.iter().zip(&targets) {
        if family == LassoFamily::Logistic && t.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(CliError::Data(format!("mutation {name} has values other than 0 and 1")));
        }
    }

    let mut records = Vec::new();
    let mut per_repeat: [Vec<Vec<f64>>; 2] = [vec![Vec::new(); cfg.eval.repeats], vec![Vec::new(); cfg.eval.repeats]];
    let mut target_results = Vec::new();
    for (m, t) in targets.iter().enumerate() {
        let name = &table.names[m];
        let flags: Vec<bool> = t.iter().map(|&v| v > 0.5).collect();
        let n_pos = flags.iter().filter(|&&b| b).count();
        if n_pos == 0 || n_pos == n {
            warn!("mutation {name} has a single class over all patients; skipped");
            target_results.push(TargetResult { name: name.clone(), value: [None, None], p_value: [None, None] });
            continue;
        }
        let strata: Vec<usize> = flags.iter().map(|&b| usize::from(b)).collect();
        let mseed = derive_seed(seed, &[m as u64]);
        let plans = make_fold_plan(n, Some(&strata), cfg.eval.k, cfg.eval.repeats, mseed)?;
        let mut value = [None, None];
        for e in 0..2 {
            let x = &paired.x[e];
            let preds: Vec<Vec<f64>> = out_of_fold(&plans, n, |r, f, train, test| {
                let ytr: Vec<f64> = train.iter().map(|&i| t[i]).collect();
                let pos = ytr.iter().filter(|&&v| v > 0.5).count();
                if family == LassoFamily::Logistic && (pos == 0 || pos == ytr.len()) {
                    // single-class training fold: constant prevalence score
                    return Ok(vec![pos as f64 / ytr.len() as f64; test.len()]);
                }
                let (model, _) = train_lasso(&rows(x, train), &ytr, family, &params, derive_seed(mseed, &[r as u64, f as u64]))?;
                Ok(predict_lasso(&model, &rows(x, test))?)
            })?;
            let mut defined = Vec::new();
            for (r, pred) in preds.iter().enumerate() {
                for (f, fold) in plans[r].folds.iter().enumerate() {
                    let s: Vec<f64> = fold.iter().map(|&i| pred[i]).collect();
                    let l: Vec<bool> = fold.iter().map(|&i| flags[i]).collect();
                    records.push(MetricRecord { repeat: r, fold: Some(f), extractor: e, target: name.clone(), value: auc(&s, &l).ok() });
                }
                let a = auc(pred, &flags)?;
                records.push(MetricRecord { repeat: r, fold: None, extractor: e, target: name.clone(), value: Some(a) });
                per_repeat[e][r].push(a);
                defined.push(a);
            }
            value[e] = Some(defined.iter().sum::<f64>() / defined.len() as f64);
        }
        target_results.push(TargetResult { name: name.clone(), value, p_value: [None, None] });
    }
    if per_repeat[0][0].is_empty() {
        return Err(CliError::Data("no mutation has both classes present".into()));
    }
    let repeat_values = per_repeat.map(|reps| reps.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect());
    let mut report = finish(cfg, ExperimentKind::Mutation, labels, &paired, seed, repeat_values, records)?;
    report.targets = target_results;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_sorted_prefixes() {
        let ids: Vec<String> = ["TUM/x@1", "ADI/y@2", "TUM/z@3"].iter().map(|s| s.to_string()).collect();
        let (names, labels) = labels_from_ids(&ids).unwrap();
        assert_eq!(names, vec!["ADI", "TUM"]);
        assert_eq!(labels, vec![1, 0, 1]);
        assert!(labels_from_ids(&["nope".to_string()]).is_err());
    }

    #[test]
    fn target_table_rejects_missing_values() {
        let t = TargetTable::parse("patient_id,G1,G2\nP1,1.0,2.0\nP2,3,4\n").unwrap();
        assert_eq!(t.names, vec!["G1", "G2"]);
        assert_eq!(t.rows["P2"], vec![3.0, 4.0]);
        assert!(TargetTable::parse("patient_id,G1\nP1,\n").is_err());
        assert!(TargetTable::parse("patient_id,G1\nP1,1\nP1,2\n").is_err());
        assert!(TargetTable::parse("id,G1\nP1,1\n").is_err());
    }
}
