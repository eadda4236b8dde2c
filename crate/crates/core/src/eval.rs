//! Cross-validation plans, metrics and paired significance tests.

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::seed;

/// One repeat of k-fold cross-validation over units `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub repeat_index: usize,
    pub seed: u64,
    /// Held-out unit indices per fold, each sorted ascending.
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    /// Complement of fold `f`, ascending.
    pub fn train_indices(&self, f: usize) -> Vec<usize> {
        let n = self.folds.iter().map(Vec::len).sum::<usize>();
        let held = &self.folds[f];
        (0..n).filter(|i| held.binary_search(i).is_err()).collect()
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }
}

/// Random k-fold partitions of `n_units` units, optionally stratified by `strata`.
///
/// Stratified plans shuffle each class, concatenate the classes in index order
/// and deal the sequence round-robin, so per-class counts and fold sizes both
/// differ by at most one.
pub fn make_fold_plan(
    n_units: usize,
    strata: Option<&[usize]>,
    k: usize,
    n_repeats: usize,
    seed: u64,
) -> Result<Vec<FoldPlan>> {
    if k < 2 {
        return Err(Error::InvalidPlan(format!("k must be at least 2, got {k}")));
    }
    if n_units < k {
        return Err(Error::InvalidPlan(format!("{n_units} units cannot fill {k} folds")));
    }
    if let Some(s) = strata {
        if s.len() != n_units {
            return Err(Error::InvalidPlan(format!("{} strata labels for {n_units} units", s.len())));
        }
        let n_classes = s.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![0usize; n_classes];
        s.iter().for_each(|&c| counts[c] += 1);
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 && n < k {
                warn!("stratum {c} has {n} members for {k} folds; some folds will lack it");
            }
        }
    }
    let plans = (0..n_repeats)
        .map(|r| {
            let plan_seed = seed::derive_seed(seed, &[seed::tag("folds"), r as u64]);
            let mut rng = seed::rng_from(plan_seed, &[]);
            let order: Vec<usize> = match strata {
                None => {
                    let mut all: Vec<usize> = (0..n_units).collect();
                    all.shuffle(&mut rng);
                    all
                }
                Some(s) => {
                    let n_classes = s.iter().max().map_or(0, |m| m + 1);
                    let mut out = Vec::with_capacity(n_units);
                    for c in 0..n_classes {
                        let mut members: Vec<usize> = (0..n_units).filter(|&i| s[i] == c).collect();
                        members.shuffle(&mut rng);
                        out.extend(members);
                    }
                    out
                }
            };
            let mut folds = vec![Vec::new(); k];
            for (t, u) in order.into_iter().enumerate() {
                folds[t % k].push(u);
            }
            folds.iter_mut().for_each(|f| f.sort_unstable());
            FoldPlan { repeat_index: r, seed: plan_seed, folds }
        })
        .collect();
    Ok(plans)
}

/// Overall accuracy and the confusion matrix (rows = truth, columns = prediction).
pub fn accuracy_and_confusion(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<(f64, Vec<Vec<u64>>)> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "need equal non-empty label vectors, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut conf = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::InvalidInput(format!("label out of range for {n_classes} classes")));
        }
        conf[t][p] += 1;
    }
    let correct: u64 = (0..n_classes).map(|k| conf[k][k]).sum();
    Ok((correct as f64 / pred.len() as f64, conf))
}

/// Row-normalized diagonal; `None` for classes with no truth rows.
pub fn per_class_accuracy(conf: &[Vec<u64>]) -> Vec<Option<f64>> {
    conf.iter()
        .enumerate()
        .map(|(k, row)| {
            let total: u64 = row.iter().sum();
            (total > 0).then(|| row[k] as f64 / total as f64)
        })
        .collect()
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidInput(format!("pearson needs equal lengths >= 2, got {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("correlation with a constant vector".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Two-sided p-value of the correlation t-test with `n - 2` degrees of freedom.
pub fn correlation_p_value(r: f64, n: usize) -> Result<f64> {
    if n < 4 {
        return Err(Error::InvalidInput(format!("correlation test needs n >= 4, got {n}")));
    }
    if !(-1.0..=1.0).contains(&r) {
        return Err(Error::InvalidInput(format!("correlation {r} outside [-1, 1]")));
    }
    if r.abs() == 1.0 {
        return Ok(0.0);
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    Ok(two_sided_t(t, df))
}

fn two_sided_t(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

/// Area under the ROC curve in the Mann-Whitney form: the fraction of
/// (positive, negative) pairs ordered correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney U, kept integral so the result is exact
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let pos_here = idx[i..j].iter().filter(|&&t| labels[t]).count() as u64;
        let neg_here = (j - i) as u64 - pos_here;
        twice_u += pos_here * (2 * neg_below + neg_here);
        neg_below += neg_here;
        i = j;
    }
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Above this many non-zero differences the signed-rank test uses the normal approximation.
pub const EXACT_SIGNED_RANK_MAX: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    /// Mean of `a - b` over all pairs.
    pub mean_difference: f64,
    /// Number of non-zero differences entering the signed-rank test.
    pub n_nonzero: usize,
    /// Sum of the ranks of positive differences.
    pub w_plus: f64,
    pub wilcoxon_p: f64,
    pub t_statistic: f64,
    pub t_p: f64,
}

/// Wilcoxon signed-rank and paired t tests of `a` against `b`.
pub fn paired_compare(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidInput(format!("paired test needs equal non-empty series, got {} and {}", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidInput("non-finite paired values".into()));
    }
    let mean_difference = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let (w_plus, n_nonzero, wilcoxon_p) = signed_rank(&diffs);
    let (t_statistic, t_p) = paired_t(&diffs);
    Ok(PairedTest { mean_difference, n_nonzero, w_plus, wilcoxon_p, t_statistic, t_p })
}

/// Returns `(W+, n_nonzero, two-sided p)`.
fn signed_rank(diffs: &[f64]) -> (f64, usize, f64) {
    let mut nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return (0.0, 0, 1.0);
    }
    nz.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    // doubled mid-ranks stay integral under ties
    let mut twice_ranks = vec![0u64; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && nz[j].abs() == nz[i].abs() {
            j += 1;
        }
        let r2 = (i + 1 + j) as u64; // 2 * average of ranks i+1..=j
        twice_ranks[i..j].iter_mut().for_each(|r| *r = r2);
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let twice_w: u64 = nz.iter().zip(&twice_ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w_plus = twice_w as f64 / 2.0;
    let p = if n <= EXACT_SIGNED_RANK_MAX {
        let total: u64 = twice_ranks.iter().sum();
        // counts[s] = number of sign patterns with doubled W+ equal to s
        let mut counts = vec![0f64; total as usize + 1];
        counts[0] = 1.0;
        let mut reach = 0usize;
        for &r in &twice_ranks {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] != 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let all = 2f64.powi(n as i32);
        let w = twice_w as usize;
        let lower: f64 = counts[..=w].iter().sum::<f64>() / all;
        let upper: f64 = counts[w..].iter().sum::<f64>() / all;
        (2.0 * lower.min(upper)).min(1.0)
    } else {
        let nf = n as f64;
        let mu = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        if var <= 0.0 {
            1.0
        } else {
            let z = ((w_plus - mu).abs() - 0.5).max(0.0) / var.sqrt();
            let normal = Normal::new(0.0, 1.0).expect("standard normal");
            (2.0 * normal.sf(z)).min(1.0)
        }
    };
    (w_plus, n, p)
}

fn paired_t(diffs: &[f64]) -> (f64, f64) {
    let n = diffs.len();
    if n < 2 {
        return (0.0, 1.0);
    }
    let (mean, sd) = mean_sd(diffs);
    if sd == 0.0 {
        return if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
    }
    let t = mean / (sd / (n as f64).sqrt());
    (t, two_sided_t(t, (n - 1) as f64))
}

/// Mean and sample (n - 1) standard deviation; the deviation is 0 for a single value.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Among genes significant under extractor `b` (`p_b < alpha`), count those where
/// `corr_b > corr_a`. Genes with an undefined correlation or p-value are skipped.
/// Returns `(n_significant, n_improved)`.
pub fn count_improved_genes(corr_a: &[Option<f64>], corr_b: &[Option<f64>], p_b: &[Option<f64>], alpha: f64) -> (usize, usize) {
    let mut sig = 0;
    let mut improved = 0;
    for ((a, b), p) in corr_a.iter().zip(corr_b).zip(p_b) {
        if let (Some(a), Some(b), Some(p)) = (a, b, p) {
            if *p < alpha {
                sig += 1;
                if b > a {
                    improved += 1;
                }
            }
        }
    }
    (sig, improved)
}
