//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero on a failing criterion only when `ACCEPTANCE_STRICT=1`.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use histotune::commands::run_all;
use histotune::experiment::{CvReport, ExperimentKind};
use histotune::PipelineConfig;
use histotune_core::downstream::{
    fit_lasso_fixed, lasso_lambda_max, predict_lasso, train_svc, LassoFamily, LassoParams, SvcParams,
};
use histotune_core::eval::{auc, make_fold_plan, paired_compare, FoldPlan};
use histotune_core::finetune::{finetune_step1, finetune_step2, FineTuneConfig};
use histotune_core::nn::{Architecture, NetConfig, NetworkParams};
use histotune_core::seed::rng_from;
use histotune_core::stain::{estimate_stain_basis, normalize_image, rgb_to_od, MacenkoParams, StainBasis};
use histotune_core::tiling::{LabeledDataset, Tile};
use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 1 and 10: desk-scale fine-tuning analog, run twice
// ---------------------------------------------------------------------------

fn pipeline_run(out: &Path) -> CvReport {
    let cfg = PipelineConfig { seed: 0, out: out.to_path_buf(), ..PipelineConfig::default() };
    cfg.validate().expect("default config validates");
    run_all(&cfg, &[ExperimentKind::Tissue]).expect("pipeline run").tissue
}

fn finetuning_analog(report: &CvReport) -> Outcome {
    let [a, b] = [report.summary[0].mean, report.summary[1].mean];
    let p = report.paired.wilcoxon_p;
    check(
        b > a && p < 0.05,
        format!(
            "pretrained {a:.4}, fine-tuned {b:.4}, Wilcoxon p = {p:.3e} (k = {}, {} repeats)",
            report.k, report.repeats
        ),
    )
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn end_to_end_determinism(first: &Path, second: &Path) -> Outcome {
    let a = files_under(first);
    let b = files_under(second);
    if a != b {
        return Err(format!("file trees differ: {} vs {} files", a.len(), b.len()));
    }
    let differing: Vec<&PathBuf> =
        a.iter().filter(|rel| std::fs::read(first.join(rel)).unwrap() != std::fs::read(second.join(rel)).unwrap()).collect();
    let checkpoints = a.iter().filter(|p| p.extension().is_some_and(|e| e == "hfnn")).count();
    let reports = a.iter().filter(|p| p.starts_with("reports")).count();
    check(
        differing.is_empty() && checkpoints >= 2 && reports > 0,
        format!("{} files compared ({checkpoints} checkpoints, {reports} report files), {} differ {:?}", a.len(), differing.len(), differing),
    )
}

// ---------------------------------------------------------------------------
// 2: freeze contracts
// ---------------------------------------------------------------------------

fn freeze_contracts() -> Outcome {
    let mut rng = rng_from(2002, &[]);
    let mut failures = Vec::new();
    for run in 0..20 {
        let classes = rng.random_range(2..5);
        let size = [8, 12][rng.random_range(0..2)];
        let arch = Architecture::mini_xception(&NetConfig {
            input_size: size,
            stem_channels: rng.random_range(2..6),
            block_channels: [rng.random_range(2..7), rng.random_range(2..7)],
            feature_dim: rng.random_range(3..10),
            n_classes: classes,
        })
        .unwrap();
        let per_class = rng.random_range(3..7);
        let mut tiles = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                let img = RgbImage::from_fn(size as u32, size as u32, |_, _| {
                    Rgb([rng.random_range(0..=255), rng.random_range(0..=255), (40 * c) as u8])
                });
                tiles.push(Tile::new(img, format!("c{c}/{i:03}")));
                labels.push(c);
            }
        }
        let names = (0..classes).map(|c| format!("c{c}")).collect();
        let data = LabeledDataset::new(tiles, labels, names).unwrap();
        let cfg = FineTuneConfig {
            lr_step1: rng.random_range(1e-4..1e-2),
            epochs_step1: rng.random_range(1..4),
            lr_step2: rng.random_range(1e-5..1e-3),
            epochs_step2: rng.random_range(1..4),
            batch_size: rng.random_range(1..9),
            seed: rng.random(),
        };
        let mut params: NetworkParams<f32> = NetworkParams::init(&arch, rng.random());
        let a0 = params.checksum_a();
        finetune_step1(&arch, &mut params, &data, &cfg).unwrap();
        let a_ok = params.checksum_a() == a0;
        let b1 = params.checksum_b();
        finetune_step2(&arch, &mut params, &data, &cfg).unwrap();
        let b_ok = params.checksum_b() == b1;
        if !(a_ok && b_ok) {
            failures.push(run);
        }
    }
    check(failures.is_empty(), format!("20 runs, violations in {failures:?}"))
}

// ---------------------------------------------------------------------------
// 3: gradient correctness
// ---------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let mut rng = rng_from(3003, &[]);
    let mut worst = Vec::new();
    for (kind_index, name) in oracles::LAYER_KIND_NAMES.iter().enumerate() {
        let mut w: f64 = 0.0;
        for _ in 0..50 {
            let err = if kind_index < 6 {
                let (kind, shape) = oracles::random_layer(kind_index, &mut rng);
                oracles::layer_gradcheck(&kind, shape, &mut rng, 1e-3)
            } else {
                let c = rng.random_range(2..12);
                oracles::xent_gradcheck(c, &mut rng, 1e-3)
            };
            w = w.max(err);
        }
        worst.push((*name, w));
    }
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let detail: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(max <= 1e-4, format!("max relative error {max:.2e} ({})", detail.join(", ")))
}

// ---------------------------------------------------------------------------
// 4: Macenko recovery
// ---------------------------------------------------------------------------

fn angle_deg(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let cos = oracles::dot(a, b) / (oracles::dot(a, a) * oracles::dot(b, b)).sqrt();
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = oracles::dot(&v, &v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Stain vector perturbed by a random rotation of up to ~10 degrees, kept positive.
fn perturbed(v: [f64; 3], rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let p = unit([
            v[0] + rng.random_range(-0.12..0.12),
            v[1] + rng.random_range(-0.12..0.12),
            v[2] + rng.random_range(-0.12..0.12),
        ]);
        if p.iter().all(|&x| x > 0.02) {
            return p;
        }
    }
}

/// Beer-Lambert forward model: concentrations -> OD -> 8-bit RGB with `I0 = 255`.
fn beer_lambert_image(h: [f64; 3], e: [f64; 3], side: u32, sigma: f64, rng: &mut impl Rng) -> RgbImage {
    let noise = Normal::new(0.0, sigma).unwrap();
    RgbImage::from_fn(side, side, |_, _| {
        let mix: f64 = rng.random();
        let amount = rng.random_range(0.3..1.4);
        let ch = (amount * mix + noise.sample(rng)).max(0.0);
        let ce = (amount * (1.0 - mix) + noise.sample(rng)).max(0.0);
        let mut px = [0u8; 3];
        for k in 0..3 {
            let od = ch * h[k] + ce * e[k];
            px[k] = (255.0 * 10f64.powf(-od) - 1.0).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

fn macenko_recovery() -> Outcome {
    let mut rng = rng_from(4004, &[]);
    let reference = StainBasis::reference();
    let params = MacenkoParams::default();
    let (mut recovered, mut idempotent) = (0, 0);
    let mut worst_angle: f64 = 0.0;
    let mut worst_shift = 0u8;
    for _ in 0..100 {
        let h = perturbed(reference.vectors[0], &mut rng);
        let e = perturbed(reference.vectors[1], &mut rng);
        let img = beer_lambert_image(h, e, 100, 0.05, &mut rng);
        let basis = estimate_stain_basis(&rgb_to_od(&img, 255.0).unwrap(), params.alpha, params.beta).unwrap();
        let angle = angle_deg(&basis.vectors[0], &h).max(angle_deg(&basis.vectors[1], &e));
        worst_angle = worst_angle.max(angle);
        if angle <= 2.0 {
            recovered += 1;
        }
        let once = normalize_image(&img, &reference, &params).unwrap();
        let twice = normalize_image(&once, &reference, &params).unwrap();
        let shift = once.as_raw().iter().zip(twice.as_raw()).map(|(a, b)| a.abs_diff(*b)).max().unwrap();
        worst_shift = worst_shift.max(shift);
        if shift <= 2 {
            idempotent += 1;
        }
    }
    check(
        recovered >= 98 && idempotent == 100,
        format!("{recovered}/100 within 2 deg (worst {worst_angle:.2}), idempotent {idempotent}/100 (worst shift {worst_shift})"),
    )
}

// ---------------------------------------------------------------------------
// 5: LASSO oracles
// ---------------------------------------------------------------------------

/// Sylvester Hadamard matrix of order 8 without its constant column: centered,
/// unit population variance, mutually orthogonal columns.
fn hadamard_columns() -> Vec<Vec<f64>> {
    let mut h = vec![vec![1.0]];
    for _ in 0..3 {
        let n = h.len();
        let mut next = vec![vec![0.0; 2 * n]; 2 * n];
        for i in 0..n {
            for j in 0..n {
                next[i][j] = h[i][j];
                next[i][j + n] = h[i][j];
                next[i + n][j] = h[i][j];
                next[i + n][j + n] = -h[i][j];
            }
        }
        h = next;
    }
    h.into_iter().map(|r| r[1..].to_vec()).collect()
}

fn lasso_oracles() -> Outcome {
    let mut rng = rng_from(5005, &[]);
    let params = LassoParams::default();
    let base = hadamard_columns();
    let mut soft_err: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(2..8);
        let reps = rng.random_range(1..4);
        let cols: Vec<usize> = (0..d).map(|_| rng.random_range(0..7)).collect::<BTreeSet<_>>().into_iter().collect();
        let signs: Vec<f64> = cols.iter().map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let x: Vec<Vec<f64>> = (0..reps)
            .flat_map(|_| base.iter().map(|r| cols.iter().zip(&signs).map(|(&c, s)| s * r[c]).collect::<Vec<f64>>()))
            .collect();
        let y: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lambda = rng.random_range(0.0..1.5);
        let m = fit_lasso_fixed(&x, &y, LassoFamily::Linear, lambda, &params).unwrap();
        let n = x.len() as f64;
        for j in 0..cols.len() {
            let ls = (0..x.len()).map(|i| x[i][j] * y[i]).sum::<f64>() / n;
            soft_err = soft_err.max((m.weights[j] - oracles::soft_threshold(ls, lambda)).abs());
        }
    }

    let mut nonzero_at_max = 0;
    for _ in 0..100 {
        let n = rng.random_range(10..50);
        let d = rng.random_range(2..9);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0] * 0.8 + rng.random_range(-1.0..1.0)).collect();
        let lmax = lasso_lambda_max(&x, &y).unwrap();
        let m = fit_lasso_fixed(&x, &y, LassoFamily::Linear, lmax * rng.random_range(1.0..2.0), &params).unwrap();
        nonzero_at_max += m.weights.iter().filter(|&&w| w != 0.0).count();
    }

    let mut ls_err: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(30..80);
        let d = rng.random_range(2..6);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = x.iter().map(|r| r.iter().enumerate().map(|(j, v)| (j as f64 - 1.0) * v).sum::<f64>() + rng.random_range(-0.2..0.2)).collect();
        let m = fit_lasso_fixed(&x, &y, LassoFamily::Linear, 0.0, &params).unwrap();
        let (beta, intercept) = oracles::normal_equations(&x, &y);
        for j in 0..d {
            ls_err = ls_err.max((m.weights[j] / m.standardizer.std[j] - beta[j]).abs());
        }
        let at_zero = predict_lasso(&m, &[vec![0.0; d]]).unwrap()[0];
        ls_err = ls_err.max((at_zero - intercept).abs());
    }
    check(
        soft_err <= 1e-6 && nonzero_at_max == 0 && ls_err <= 1e-6,
        format!("soft-threshold max err {soft_err:.1e}, nonzero weights at lambda >= lambda_max: {nonzero_at_max}, least-squares max err {ls_err:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 6: SVC oracle
// ---------------------------------------------------------------------------

/// Largest decision-value gap to the brute-force QP over 50 random instances.
fn svc_oracle_error(params: &SvcParams) -> f64 {
    let mut rng = rng_from(6006, &[]);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 50 {
        let n = rng.random_range(6..11);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        let y: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
        let model = train_svc(&x, &labels, 2, params, done).unwrap();
        let (xs, means, stds) = oracles::standardize(&x);
        let theta = oracles::svm_primal_bruteforce(&xs, &y, params.c);
        let probe: Vec<Vec<f64>> =
            x.iter().cloned().chain((0..5).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])).collect();
        for (p, d) in probe.iter().zip(model.decision(&probe).unwrap()) {
            let z: Vec<f64> = (0..2).map(|j| (p[j] - means[j]) / stds[j]).collect();
            let expect = theta[0] * z[0] + theta[1] * z[1] + theta[2];
            worst = worst.max((d[1] - expect).abs());
        }
        done += 1;
    }
    worst
}

fn svc_oracle() -> Outcome {
    let params = SvcParams::default();
    let worst = svc_oracle_error(&params);
    // diagnostic only: the same instances solved to a much smaller duality gap
    let tight = svc_oracle_error(&SvcParams { tol: 1e-8, ..params });
    let mut rng = rng_from(6007, &[]);

    let mut separable_failures = 0;
    for toy in 0..20 {
        let classes = 2 + toy % 3;
        let centers: Vec<[f64; 2]> =
            (0..classes).map(|c| {
                let a = c as f64 * std::f64::consts::TAU / classes as f64;
                [6.0 * a.cos(), 6.0 * a.sin()]
            }).collect();
        let (mut x, mut labels) = (Vec::new(), Vec::new());
        for (c, ctr) in centers.iter().enumerate() {
            for _ in 0..rng.random_range(3..12) {
                x.push(vec![ctr[0] + rng.random_range(-1.0..1.0), ctr[1] + rng.random_range(-1.0..1.0)]);
                labels.push(c);
            }
        }
        let model = train_svc(&x, &labels, classes, &params, toy as u64).unwrap();
        let pred = histotune_core::downstream::predict_svc(&model, &x).unwrap();
        if pred != labels {
            separable_failures += 1;
        }
    }
    check(
        worst <= 1e-3 && separable_failures == 0,
        format!("max decision error {worst:.1e} over 50 instances (gap tol 1e-8: {tight:.1e}), separable toys below 100% training accuracy: {separable_failures}/20"),
    )
}

// ---------------------------------------------------------------------------
// 7: AUC oracle
// ---------------------------------------------------------------------------

fn auc_oracle() -> Outcome {
    let mut rng = rng_from(7007, &[]);
    let mut mismatches = 0;
    let mut tie_heavy = 0;
    let mut done = 0;
    while done < 1000 {
        let n = rng.random_range(2..=200);
        let levels = if done % 2 == 0 { rng.random_range(2..6) } else { 0 };
        let scores: Vec<f64> = (0..n)
            .map(|_| if levels > 0 { rng.random_range(0..levels) as f64 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        tie_heavy += usize::from(levels > 0);
        if auc(&scores, &labels).unwrap() != oracles::auc_pairs(&scores, &labels) {
            mismatches += 1;
        }
        done += 1;
    }
    check(mismatches == 0, format!("1000 instances ({tie_heavy} tie-heavy), {mismatches} mismatches"))
}

// ---------------------------------------------------------------------------
// 8: Wilcoxon exactness
// ---------------------------------------------------------------------------

fn wilcoxon_exactness() -> Outcome {
    let mut rng = rng_from(8008, &[]);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in 1..=12 {
        for case in 0..40 {
            let diffs: Vec<f64> = (0..n)
                .map(|_| match case % 3 {
                    0 => rng.random_range(-1.0..1.0),
                    1 => rng.random_range(-3..=3) as f64,
                    _ => rng.random_range(-2..=4) as f64 * 0.5,
                })
                .collect();
            let zeros = vec![0.0; n];
            let ours = paired_compare(&diffs, &zeros).unwrap().wilcoxon_p;
            worst = worst.max((ours - oracles::signed_rank_enumeration(&diffs)).abs());
            cases += 1;
        }
    }
    check(worst <= 1e-12, format!("{cases} cases with n <= 12, max |p - enumeration| = {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 9: CV plan properties
// ---------------------------------------------------------------------------

fn plan_violation(plan: &FoldPlan, n: usize, strata: Option<&[usize]>) -> Option<&'static str> {
    let mut seen = vec![false; n];
    for fold in &plan.folds {
        if fold.windows(2).any(|w| w[0] >= w[1]) {
            return Some("unsorted fold");
        }
        for &u in fold {
            if u >= n || seen[u] {
                return Some("overlap");
            }
            seen[u] = true;
        }
    }
    if !seen.iter().all(|&s| s) {
        return Some("coverage");
    }
    let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
    if sizes.iter().max().unwrap() - sizes.iter().min().unwrap() > 1 {
        return Some("balance");
    }
    if let Some(s) = strata {
        for c in s.iter().copied().collect::<BTreeSet<_>>() {
            let per: Vec<usize> = plan.folds.iter().map(|f| f.iter().filter(|&&u| s[u] == c).count()).collect();
            if per.iter().max().unwrap() - per.iter().min().unwrap() > 1 {
                return Some("stratification");
            }
        }
    }
    None
}

fn plan_properties() -> Outcome {
    let mut rng = rng_from(9009, &[]);
    let (mut plans, mut violations, mut irreproducible) = (0, 0, 0);
    let mut first = None;
    while plans < 10_000 {
        let k = rng.random_range(2..=10);
        let n = rng.random_range(k..=120);
        let repeats = rng.random_range(1..=8);
        let seed: u64 = rng.random();
        let strata: Option<Vec<usize>> = rng.random_bool(0.5).then(|| {
            let c = rng.random_range(2..=5);
            (0..n).map(|_| rng.random_range(0..c)).collect()
        });
        let s = strata.as_deref();
        let generated = make_fold_plan(n, s, k, repeats, seed).unwrap();
        if generated != make_fold_plan(n, s, k, repeats, seed).unwrap() {
            irreproducible += 1;
        }
        for p in &generated {
            if let Some(v) = plan_violation(p, n, s) {
                violations += 1;
                first.get_or_insert(v);
            }
        }
        plans += generated.len();
    }
    check(
        violations == 0 && irreproducible == 0,
        format!("{plans} plans, {violations} invariant violations{}, {irreproducible} irreproducible draws", first.map(|f| format!(" (first: {f})")).unwrap_or_default()),
    )
}

// ---------------------------------------------------------------------------

struct Runner {
    /// Criterion numbers given on the command line; empty runs everything.
    only: Vec<usize>,
    results: Vec<bool>,
}

impl Runner {
    fn wants(&self, id: usize) -> bool {
        self.only.is_empty() || self.only.contains(&id)
    }

    fn run(&mut self, id: usize, name: &str, f: impl FnOnce() -> Outcome) {
        if !self.wants(id) {
            return;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{status} criterion {id:>2} {name}: {detail} [{secs:.1}s]");
        self.results.push(outcome.is_ok());
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    // cargo forwards harness flags; bare numbers select criteria
    let only = args.iter().filter_map(|a| a.parse().ok()).collect();
    let mut runner = Runner { only, results: Vec::new() };
    runner.run(2, "freeze contracts", freeze_contracts);
    runner.run(3, "gradient correctness", gradient_correctness);
    runner.run(4, "Macenko recovery", macenko_recovery);
    runner.run(5, "LASSO oracles", lasso_oracles);
    runner.run(6, "SVC oracle", svc_oracle);
    runner.run(7, "AUC oracle", auc_oracle);
    runner.run(8, "Wilcoxon exactness", wilcoxon_exactness);
    runner.run(9, "CV plan properties", plan_properties);

    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let mut report = None;
    if runner.wants(1) || runner.wants(10) {
        // criterion 10 compares against the run made for criterion 1
        let only = std::mem::take(&mut runner.only);
        runner.run(1, "desk-scale fine-tuning analog", || {
            let r = pipeline_run(first.path());
            let outcome = finetuning_analog(&r);
            report = Some(r);
            outcome
        });
        runner.run(10, "end-to-end determinism", || {
            if report.is_none() {
                return Err("first run did not complete".into());
            }
            pipeline_run(second.path());
            end_to_end_determinism(first.path(), second.path())
        });
        runner.only = only;
    }

    let passed = runner.results.iter().filter(|&&ok| ok).count();
    println!("{passed}/{} acceptance criteria passed", runner.results.len());
    // failing criteria are reported, not fatal, unless strict mode is asked for
    let strict = std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1");
    if passed == runner.results.len() || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
