//! Independent reference computations used by the integration and acceptance tests.
#![allow(dead_code)]

use histotune_core::nn::{ActShape, LayerKind};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Columns centered and divided by their population standard deviation,
/// with the per-column means and deviations used.
pub fn standardize(x: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let n = x.len() as f64;
    let d = x[0].len();
    let mut out = x.to_vec();
    let (mut means, mut stds) = (Vec::new(), Vec::new());
    for j in 0..d {
        let m = x.iter().map(|r| r[j]).sum::<f64>() / n;
        let s = (x.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n).sqrt();
        for r in out.iter_mut() {
            r[j] = (r[j] - m) / s;
        }
        means.push(m);
        stds.push(s);
    }
    (out, means, stds)
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting; `None` when singular.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Ordinary least squares with an intercept: returns `(coefficients, intercept)`.
pub fn normal_equations(x: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
    let d = x[0].len() + 1;
    let aug: Vec<Vec<f64>> = x.iter().map(|r| r.iter().copied().chain([1.0]).collect()).collect();
    let mut xtx = vec![vec![0.0; d]; d];
    let mut xty = vec![0.0; d];
    for (r, &yi) in aug.iter().zip(y) {
        for i in 0..d {
            xty[i] += r[i] * yi;
            for j in 0..d {
                xtx[i][j] += r[i] * r[j];
            }
        }
    }
    let mut beta = solve(xtx, xty).expect("well-conditioned design");
    let b = beta.pop().unwrap();
    (beta, b)
}

pub fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Exact minimizer of `0.5 * |theta|^2 + c * sum max(0, 1 - y_i theta.z_i)` where
/// `z_i` is the row with a trailing 1 (so the last entry of theta is the bias).
///
/// Brute force over point states: every point is either inside the loss region,
/// outside it, or pinned to the margin. Each assignment with at most `dim`
/// margin points yields a stationary candidate in closed form; the smallest
/// primal objective among all candidates is the optimum.
pub fn svm_primal_bruteforce(x: &[Vec<f64>], y: &[f64], c: f64) -> Vec<f64> {
    let n = x.len();
    let z: Vec<Vec<f64>> = x.iter().map(|r| r.iter().copied().chain([1.0]).collect()).collect();
    let dim = z[0].len();
    let objective = |theta: &[f64]| {
        0.5 * dot(theta, theta) + c * (0..n).map(|i| (1.0 - y[i] * dot(theta, &z[i])).max(0.0)).sum::<f64>()
    };
    let mut best = vec![0.0; dim];
    let mut best_obj = objective(&best);
    let total = 3usize.pow(n as u32);
    for code in 0..total {
        let mut states = Vec::with_capacity(n);
        let mut rest = code;
        for _ in 0..n {
            states.push(rest % 3);
            rest /= 3;
        }
        let margin: Vec<usize> = (0..n).filter(|&i| states[i] == 2).collect();
        if margin.len() > dim {
            continue;
        }
        // base = c * sum_{loss} y_i z_i ; theta = base + sum_{margin} mu_j y_j z_j
        let mut base = vec![0.0; dim];
        for i in (0..n).filter(|&i| states[i] == 1) {
            for k in 0..dim {
                base[k] += c * y[i] * z[i][k];
            }
        }
        let theta = if margin.is_empty() {
            base
        } else {
            let m = margin.len();
            let a: Vec<Vec<f64>> = margin
                .iter()
                .map(|&i| margin.iter().map(|&j| y[i] * y[j] * dot(&z[i], &z[j])).collect())
                .collect();
            let rhs: Vec<f64> = margin.iter().map(|&i| 1.0 - y[i] * dot(&base, &z[i])).collect();
            let Some(mu) = solve(a, rhs) else { continue };
            let mut t = base;
            for (q, &j) in margin.iter().enumerate().take(m) {
                for k in 0..dim {
                    t[k] += mu[q] * y[j] * z[j][k];
                }
            }
            t
        };
        let obj = objective(&theta);
        if obj < best_obj {
            best_obj = obj;
            best = theta;
        }
    }
    best
}

/// O(P * N) pair count with ties worth one half.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut twice: u64 = 0;
    let (mut p, mut q) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        p += 1;
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            twice += if scores[i] > scores[j] {
                2
            } else if scores[i] == scores[j] {
                1
            } else {
                0
            };
        }
    }
    for &l in labels {
        if !l {
            q += 1;
        }
    }
    twice as f64 / (2 * p * q) as f64
}

/// Two-sided signed-rank p-value by listing all `2^n` sign patterns of the
/// non-zero differences.
pub fn signed_rank_enumeration(diffs: &[f64]) -> f64 {
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return 1.0;
    }
    // mid-ranks by direct counting
    let ranks: Vec<f64> = nz
        .iter()
        .map(|d| {
            let below = nz.iter().filter(|e| e.abs() < d.abs()).count() as f64;
            let equal = nz.iter().filter(|e| e.abs() == d.abs()).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= observed + 1e-9 {
            le += 1;
        }
        if w >= observed - 1e-9 {
            ge += 1;
        }
    }
    let all = (1u64 << n) as f64;
    (2.0 * (le.min(ge) as f64) / all).min(1.0)
}

/// Two-sided Student-t tail probability by composite Simpson integration of the density.
pub fn t_two_sided_simpson(t: f64, df: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let log_norm = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    let pdf = |x: f64| (log_norm - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
    let steps = 200_000;
    let h = t.abs() / steps as f64;
    let mut s = pdf(0.0) + pdf(t.abs());
    for i in 1..steps {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * s * h / 3.0
}

/// Max relative error between analytic and central-difference gradients of a
/// random linear functional of one layer's output, over weights, bias and input.
pub fn layer_gradcheck(kind: &LayerKind, in_shape: ActShape, rng: &mut ChaCha8Rng, h: f64) -> f64 {
    use histotune_core::nn::layers::{backward_sample, forward_sample};
    let out_shape = kind.output_shape(in_shape).expect("composable shapes");
    let mut input: Vec<f64> = (0..in_shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    if matches!(kind, LayerKind::Relu) {
        // keep every entry well clear of the kink
        for v in input.iter_mut() {
            while v.abs() < 10.0 * h {
                *v = rng.random_range(-1.0..1.0);
            }
        }
    }
    let (ws, bs) = kind.param_shapes().unwrap_or((vec![0], vec![0]));
    let mut weight: Vec<f64> = (0..ws.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut bias: Vec<f64> = (0..bs.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let coef: Vec<f64> = (0..out_shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |inp: &[f64], w: &[f64], b: &[f64]| dot(&coef, &forward_sample(kind, inp, in_shape, out_shape, w, b));

    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; bias.len()];
    let has_params = kind.has_params();
    let gin = backward_sample(
        kind,
        &input,
        in_shape,
        out_shape,
        &weight,
        &coef,
        has_params.then_some((gw.as_mut_slice(), gb.as_mut_slice())),
        true,
    )
    .expect("input gradient requested");

    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
    let mut worst: f64 = 0.0;
    for i in 0..input.len() {
        let orig = input[i];
        input[i] = orig + h;
        let lp = loss(&input, &weight, &bias);
        input[i] = orig - h;
        let lm = loss(&input, &weight, &bias);
        input[i] = orig;
        worst = worst.max(rel(gin[i], (lp - lm) / (2.0 * h)));
    }
    if has_params {
        for i in 0..weight.len() {
            let orig = weight[i];
            weight[i] = orig + h;
            let lp = loss(&input, &weight, &bias);
            weight[i] = orig - h;
            let lm = loss(&input, &weight, &bias);
            weight[i] = orig;
            worst = worst.max(rel(gw[i], (lp - lm) / (2.0 * h)));
        }
        for i in 0..bias.len() {
            let orig = bias[i];
            bias[i] = orig + h;
            let lp = loss(&input, &weight, &bias);
            bias[i] = orig - h;
            let lm = loss(&input, &weight, &bias);
            bias[i] = orig;
            worst = worst.max(rel(gb[i], (lp - lm) / (2.0 * h)));
        }
    }
    worst
}

/// Max relative error of the softmax cross-entropy gradient with respect to the logits.
pub fn xent_gradcheck(n_classes: usize, rng: &mut ChaCha8Rng, h: f64) -> f64 {
    use histotune_core::nn::layers::softmax_xent;
    let mut logits: Vec<f64> = (0..n_classes).map(|_| rng.random_range(-2.0..2.0)).collect();
    let label = rng.random_range(0..n_classes);
    let (_, grad) = softmax_xent(&logits, label);
    let mut worst: f64 = 0.0;
    for i in 0..n_classes {
        let orig = logits[i];
        logits[i] = orig + h;
        let lp = softmax_xent(&logits, label).0;
        logits[i] = orig - h;
        let lm = softmax_xent(&logits, label).0;
        logits[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8));
    }
    worst
}

/// A random layer of the requested kind with a compatible input shape.
pub fn random_layer(kind_index: usize, rng: &mut ChaCha8Rng) -> (LayerKind, ActShape) {
    let h = rng.random_range(3..8);
    let w = rng.random_range(3..8);
    let c = rng.random_range(1..5);
    let co = rng.random_range(1..5);
    let kernel = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..3);
    let padding = rng.random_range(0..2).min(kernel / 2);
    let spatial = ActShape::Spatial { h, w, c };
    match kind_index {
        0 => (LayerKind::Conv2d { in_channels: c, out_channels: co, kernel, stride, padding }, spatial),
        1 => (LayerKind::DepthwiseConv2d { channels: c, kernel, stride, padding }, spatial),
        2 => (LayerKind::PointwiseConv2d { in_channels: c, out_channels: co, stride }, spatial),
        3 => (LayerKind::Relu, spatial),
        4 => (LayerKind::GlobalAvgPool, spatial),
        _ => {
            let d = rng.random_range(1..9);
            (LayerKind::Dense { inputs: d, units: co }, ActShape::Flat(d))
        }
    }
}

pub const LAYER_KIND_NAMES: [&str; 7] =
    ["conv2d", "depthwise_conv2d", "pointwise_conv2d", "relu", "global_avg_pool", "dense", "softmax_xent_head"];
