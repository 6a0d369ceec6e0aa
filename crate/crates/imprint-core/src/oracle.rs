//! Reference implementations used by the test suites. Everything here is
//! written the slow, obvious way (quadratic sums, exhaustive sweeps) and
//! deliberately shares no code with the production kernels it checks.

use ndarray::{Array2, ArrayD, ArrayView2};

use crate::autograd::{Graph, Var};

/// Low-pass window energy by direct O(N^4) DFT summation. The window is the
/// centered k x k block of the shifted spectrum, start index n/2 - k/2.
pub fn lowpass_energy_direct(plane: &ArrayView2<f64>, k: usize) -> f64 {
    let (h, w) = plane.dim();
    let in_window = |n: usize, u: usize| {
        let c0 = n / 2 - k / 2;
        let shifted = (u + n / 2) % n;
        shifted >= c0 && shifted < c0 + k
    };
    let mut acc = 0.0f64;
    for fy in 0..h {
        if !in_window(h, fy) {
            continue;
        }
        for fx in 0..w {
            if !in_window(w, fx) {
                continue;
            }
            let mut re = 0.0f64;
            let mut im = 0.0f64;
            for y in 0..h {
                for x in 0..w {
                    let ang = -2.0 * std::f64::consts::PI
                        * (fy as f64 * y as f64 / h as f64 + fx as f64 * x as f64 / w as f64);
                    re += plane[[y, x]] * ang.cos();
                    im += plane[[y, x]] * ang.sin();
                }
            }
            acc += re * re + im * im;
        }
    }
    acc
}

/// Average precision by exhaustive per-positive counting: each positive
/// contributes the precision of the prefix ending at its tie group.
pub fn average_precision_direct(scores: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l).count();
    assert!(positives > 0 && positives < labels.len(), "one-class input");
    let mut total = 0.0f64;
    for (&s, &l) in scores.iter().zip(labels.iter()) {
        if !l {
            continue;
        }
        let mut tp = 0usize;
        let mut all = 0usize;
        for (&s2, &l2) in scores.iter().zip(labels.iter()) {
            if s2 >= s {
                all += 1;
                if l2 {
                    tp += 1;
                }
            }
        }
        total += tp as f64 / all as f64;
    }
    total / positives as f64
}

/// Threshold calibration by exhaustive sweep over observed real scores:
/// the largest score whose strictly-below fraction stays within the target.
pub fn calibrate_threshold_direct(real_scores: &[f64], far: f64) -> f64 {
    assert!(!real_scores.is_empty());
    let n = real_scores.len() as f64;
    let mut best = f64::NEG_INFINITY;
    for &t in real_scores {
        let below = real_scores.iter().filter(|&&r| r < t).count() as f64;
        if below / n <= far && t > best {
            best = t;
        }
    }
    best
}

/// TDR at the calibrated threshold: fraction of fakes strictly below it.
pub fn tdr_at_far_direct(real_scores: &[f64], fake_scores: &[f64], far: f64) -> f64 {
    let t = calibrate_threshold_direct(real_scores, far);
    let hits = fake_scores.iter().filter(|&&f| f < t).count();
    hits as f64 / fake_scores.len() as f64
}

/// PSNR for peak 1.0 by direct per-pixel MSE.
pub fn psnr_direct(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Softmax cross entropy of one logit row against a class index.
pub fn softmax_ce_direct(logits: &[f64], class: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&v| (v - m).exp()).sum();
    -(logits[class] - m - z.ln())
}

/// A plane orthogonal to `a` under the flat inner product, built by
/// Gram-Schmidt from a deterministic sweep pattern.
pub fn orthogonal_plane(a: &ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    let mut b = Array2::from_shape_fn((h, w), |(y, x)| ((y * w + x) as f64 * 0.37).sin() + 0.1);
    let aa: f64 = a.iter().map(|v| v * v).sum();
    assert!(aa > 0.0, "cannot orthogonalize against zero");
    let ab: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let coeff = ab / aa;
    b.zip_mut_with(a, |bv, &av| *bv -= coeff * av);
    let nb: f64 = b.iter().map(|v| v * v).sum();
    assert!(nb > 1e-12, "degenerate orthogonal construction");
    b
}

/// Worst relative disagreement between analytic and central-difference
/// gradients, normalized per element by max(1, |numeric|).
pub struct GradCheckReport {
    pub max_rel: f64,
    pub max_abs: f64,
    pub grad_scale: f64,
}

/// Checks the gradient of a scalar-valued graph builder with respect to
/// every element of every input, in 64-bit, by central differences.
pub fn grad_check<F>(inputs: &[ArrayD<f64>], step: f64, build: F) -> GradCheckReport
where
    F: Fn(&Graph<f64>, &[Var]) -> Var,
{
    let eval = |arrs: &[ArrayD<f64>]| -> f64 {
        let g = Graph::<f64>::new();
        let vars: Vec<Var> = arrs.iter().map(|a| g.leaf(a.clone())).collect();
        let root = build(&g, &vars);
        g.scalar(root)
    };

    // Analytic pass.
    let g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let root = build(&g, &vars);
    let mut grads = g.backward(root);
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .zip(inputs.iter())
        .map(|(&v, a)| {
            grads
                .take(v)
                .unwrap_or_else(|| ArrayD::from_elem(a.raw_dim(), 0.0))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel: 0.0,
        max_abs: 0.0,
        grad_scale: 0.0,
    };
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (ai, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let orig = work[ai].as_slice().unwrap()[idx];
            work[ai].as_slice_mut().unwrap()[idx] = orig + step;
            let up = eval(&work);
            work[ai].as_slice_mut().unwrap()[idx] = orig - step;
            let down = eval(&work);
            work[ai].as_slice_mut().unwrap()[idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[ai].as_slice().unwrap()[idx];
            let abs = (a - numeric).abs();
            let rel = abs / numeric.abs().max(1.0);
            report.max_abs = report.max_abs.max(abs);
            report.max_rel = report.max_rel.max(rel);
            report.grad_scale = report.grad_scale.max(numeric.abs());
        }
    }
    report
}
