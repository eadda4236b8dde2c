mod oracles;

use std::collections::BTreeSet;

use histotune_core::eval::{
    accuracy_and_confusion, auc, correlation_p_value, make_fold_plan, paired_compare, pearson, per_class_accuracy,
    FoldPlan,
};
use histotune_core::seed::rng_from;
use proptest::prelude::*;
use rand::Rng;

fn check_plan(plan: &FoldPlan, n: usize, strata: Option<&[usize]>) {
    let mut seen = vec![false; n];
    for fold in &plan.folds {
        for &u in fold {
            assert!(!seen[u], "unit {u} appears twice");
            seen[u] = true;
        }
    }
    assert!(seen.iter().all(|&s| s));
    let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    if let Some(s) = strata {
        let classes: BTreeSet<usize> = s.iter().copied().collect();
        for c in classes {
            let per: Vec<usize> = plan.folds.iter().map(|f| f.iter().filter(|&&u| s[u] == c).count()).collect();
            assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
        }
    }
}

#[test]
fn plans_are_reproducible_and_balanced() {
    let mut rng = rng_from(1, &[]);
    for i in 0..200 {
        let n = rng.random_range(5..60);
        let k = rng.random_range(2..6.min(n) + 1);
        let strata: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let stratified = i % 2 == 0;
        let s = stratified.then_some(strata.as_slice());
        let plans = make_fold_plan(n, s, k, 3, i).unwrap();
        assert_eq!(plans, make_fold_plan(n, s, k, 3, i).unwrap());
        for p in &plans {
            check_plan(p, n, s);
        }
    }
}

#[test]
fn repeats_differ() {
    let plans = make_fold_plan(100, None, 5, 50, 17).unwrap();
    let distinct: BTreeSet<Vec<Vec<usize>>> = plans.iter().map(|p| p.folds.clone()).collect();
    assert!(distinct.len() >= 49);
}

#[test]
fn hand_counted_confusion() {
    let truth = [0, 0, 0, 1, 1, 1, 2, 2, 2];
    let pred = [0, 1, 0, 1, 1, 2, 2, 0, 2];
    let (acc, conf) = accuracy_and_confusion(&pred, &truth, 3).unwrap();
    assert_eq!(conf, vec![vec![2, 1, 0], vec![0, 2, 1], vec![1, 0, 2]]);
    assert!((acc - 6.0 / 9.0).abs() < 1e-15);
    assert_eq!(per_class_accuracy(&conf)[1], Some(2.0 / 3.0));
}

#[test]
fn pearson_hand_example() {
    // closed form from integer sums: (n Sxy - Sx Sy) / sqrt((n Sxx - Sx^2)(n Syy - Sy^2)) = 15 / sqrt(228)
    let expect = 15.0 / 228f64.sqrt();
    assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 7.0]).unwrap() - expect).abs() < 1e-14);
}

#[test]
fn correlation_p_matches_integrated_t_density() {
    for (r, n) in [(0.5, 20), (0.1, 171), (-0.3, 12), (0.8, 6)] {
        let df = (n - 2) as f64;
        let t = r * (df / (1.0 - r * r)).sqrt();
        let oracle = oracles::t_two_sided_simpson(t, df);
        let p = correlation_p_value(r, n).unwrap();
        assert!((p - oracle).abs() < 1e-9, "r={r} n={n}: {p} vs {oracle}");
    }
}

#[test]
fn signed_rank_all_positive_ten() {
    let a: Vec<f64> = (1..=10).map(|i| i as f64 + 0.5).collect();
    let b: Vec<f64> = (1..=10).map(|i| i as f64 * 0.5).collect();
    let t = paired_compare(&a, &b).unwrap();
    assert_eq!(t.w_plus, 55.0);
    assert_eq!(t.wilcoxon_p, oracles::signed_rank_enumeration(&[1.0; 10]));
    assert!((t.wilcoxon_p - 0.001953125).abs() < 1e-15);
}

#[test]
fn signed_rank_matches_enumeration_with_ties() {
    let mut rng = rng_from(8, &[]);
    for _ in 0..200 {
        let n = rng.random_range(1..13);
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-3i32..4) as f64 * 0.5).collect();
        let zeros = vec![0.0; n];
        let p = paired_compare(&d, &zeros).unwrap().wilcoxon_p;
        assert!((p - oracles::signed_rank_enumeration(&d)).abs() < 1e-12);
    }
}

#[test]
fn large_sample_uses_normal_approximation() {
    let a: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin() + 0.3).collect();
    let b: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin() + (i as f64 * 1.3).cos() * 0.5).collect();
    let t = paired_compare(&a, &b).unwrap();
    assert!(t.wilcoxon_p > 0.0 && t.wilcoxon_p <= 1.0);
    let swapped = paired_compare(&b, &a).unwrap();
    assert_eq!(t.wilcoxon_p, swapped.wilcoxon_p);
    assert_eq!(t.mean_difference, -swapped.mean_difference);
}

proptest! {
    #[test]
    fn auc_equals_pair_count(values in prop::collection::vec((0u8..6, any::<bool>()), 2..120)) {
        let scores: Vec<f64> = values.iter().map(|(s, _)| *s as f64 / 5.0).collect();
        let labels: Vec<bool> = values.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = auc(&scores, &labels).unwrap();
        prop_assert_eq!(a, oracles::auc_pairs(&scores, &labels));
        let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(a, auc(&transformed, &labels).unwrap());
    }

    #[test]
    fn accuracy_invariant_under_relabeling(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..50), shift in 1usize..4) {
        let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let relabel = |v: &[usize]| v.iter().map(|&c| (c + shift) % 4).collect::<Vec<_>>();
        let (a, _) = accuracy_and_confusion(&pred, &truth, 4).unwrap();
        let (b, _) = accuracy_and_confusion(&relabel(&pred), &relabel(&truth), 4).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn paired_p_is_symmetric(pairs in prop::collection::vec((-5i32..5, -5i32..5), 6..40)) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let ab = paired_compare(&a, &b).unwrap();
        let ba = paired_compare(&b, &a).unwrap();
        prop_assert_eq!(ab.wilcoxon_p, ba.wilcoxon_p);
        prop_assert_eq!(ab.mean_difference, -ba.mean_difference);
        prop_assert!((ab.t_p - ba.t_p).abs() < 1e-15);
    }
}
