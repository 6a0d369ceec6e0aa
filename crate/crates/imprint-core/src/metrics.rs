//! Quantitative surface: average precision, true-detection rate at a fixed
//! false-alarm rate, threshold calibration, and PSNR.
//!
//! Polarity convention used everywhere: encrypted-real images are the
//! positive class and score high; manipulated images are detected when
//! their score falls strictly below the calibrated threshold.

use ndarray::ArrayViewD;

use crate::real::Real;
use crate::{Error, Result};

/// Area under the precision-recall curve by descending-score sweep. Equal
/// scores form one threshold group: precision is evaluated at the group
/// boundary and credited to every positive inside the group.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::argument(
            "labels",
            "must pair one label with every score",
        ));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::argument(
            "labels",
            "average precision needs both classes",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut ap = 0.0f64;
    let mut seen = 0usize;
    let mut tp = 0usize;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        let mut pos_in_group = 0usize;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos_in_group += 1;
            }
            j += 1;
        }
        seen += j - i;
        tp += pos_in_group;
        ap += pos_in_group as f64 * tp as f64 / seen as f64;
        i = j;
    }
    Ok(ap / positives as f64)
}

/// Largest observed real score `t` whose strictly-below fraction does not
/// exceed `far`; reals under the threshold are the false alarms.
pub fn calibrate_threshold(real_scores: &[f64], far: f64) -> Result<f64> {
    if real_scores.is_empty() {
        return Err(Error::argument("real_scores", "must be nonempty"));
    }
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::argument("far", "must lie strictly inside (0, 1)"));
    }
    let n = real_scores.len() as f64;
    let mut sorted = real_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = sorted[0];
    for (idx, &t) in sorted.iter().enumerate() {
        // `idx` counts scores strictly below t only when t first appears.
        if idx > 0 && sorted[idx - 1] == t {
            continue;
        }
        if idx as f64 / n <= far {
            best = best.max(t);
        }
    }
    Ok(best)
}

/// Fraction of fake scores strictly below the threshold calibrated on the
/// real scores at `far`.
pub fn tdr_at_far(real_scores: &[f64], fake_scores: &[f64], far: f64) -> Result<f64> {
    if fake_scores.is_empty() {
        return Err(Error::argument("fake_scores", "must be nonempty"));
    }
    let t = calibrate_threshold(real_scores, far)?;
    let hits = fake_scores.iter().filter(|&&s| s < t).count();
    Ok(hits as f64 / fake_scores.len() as f64)
}

/// Peak signal-to-noise ratio in decibels for unit peak; identical inputs
/// return the +infinity sentinel.
pub fn psnr<T: Real>(a: &ArrayViewD<'_, T>, b: &ArrayViewD<'_, T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "psnr",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::rng::RngStream;
    use approx::assert_abs_diff_eq;
    use ndarray::ArrayD;
    use proptest::prelude::*;

    #[test]
    fn perfect_separation_scores_ap_one() {
        let ap = average_precision(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn interleaved_ranking_matches_hand_computation() {
        let ap = average_precision(&[0.9, 0.7, 0.5, 0.3], &[true, false, true, false]).unwrap();
        assert_abs_diff_eq!(ap, (1.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn tied_scores_form_one_threshold_group() {
        // Both orderings of a tie must give one answer.
        let ap1 = average_precision(&[0.5, 0.5, 0.1], &[true, false, false]).unwrap();
        let ap2 = average_precision(&[0.5, 0.5, 0.1], &[false, true, false]).unwrap();
        assert_eq!(ap1, ap2);
        assert_abs_diff_eq!(ap1, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn ap_rejects_one_class_input() {
        assert!(average_precision(&[0.4, 0.2], &[true, true]).is_err());
        assert!(average_precision(&[0.4, 0.2], &[false, false]).is_err());
        assert!(average_precision(&[0.4], &[true, false]).is_err());
    }

    #[test]
    fn ap_matches_brute_force_oracle_on_random_inputs() {
        let mut rng = RngStream::new(1);
        for _ in 0..20 {
            let n = 200;
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    // Quantized scores force plenty of exact ties.
                    (rng.unit_f64() * 20.0).floor() / 20.0
                })
                .collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.4)).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            let got = average_precision(&scores, &labels).unwrap();
            let want = oracle::average_precision_direct(&scores, &labels);
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn random_scores_ap_approaches_prevalence() {
        let prevalence = 0.3;
        let mut rng = RngStream::new(2);
        let mut acc = 0.0;
        let rounds = 200;
        for _ in 0..rounds {
            let n = 100;
            let scores: Vec<f64> = (0..n).map(|_| rng.unit_f64()).collect();
            // Labels shuffled independently of scores.
            let fixed: Vec<bool> = (0..n).map(|i| (i as f64) < prevalence * n as f64).collect();
            let perm = rng.permutation(n);
            let labels: Vec<bool> = perm.iter().map(|&i| fixed[i]).collect();
            acc += average_precision(&scores, &labels).unwrap();
        }
        let mean = acc / rounds as f64;
        assert!(
            (mean - prevalence).abs() < 0.03,
            "mean AP {mean} far from prevalence {prevalence}"
        );
    }

    #[test]
    fn calibration_hand_case_picks_the_documented_threshold() {
        let t = calibrate_threshold(&[0.9, 0.8, 0.7, 0.6], 0.25).unwrap();
        assert_eq!(t, 0.7);
    }

    #[test]
    fn calibration_with_tiny_far_returns_the_minimum() {
        let t = calibrate_threshold(&[0.9, 0.8, 0.7, 0.6], 1e-9).unwrap();
        assert_eq!(t, 0.6);
    }

    #[test]
    fn calibration_with_equal_scores_is_that_score() {
        let t = calibrate_threshold(&[0.5, 0.5, 0.5], 0.3).unwrap();
        assert_eq!(t, 0.5);
        // No real falls strictly below it: FAR 0.
        assert_eq!(
            tdr_at_far(&[0.5, 0.5, 0.5], &[0.4], 0.3).unwrap(),
            1.0
        );
    }

    #[test]
    fn calibration_matches_oracle_on_random_inputs() {
        let mut rng = RngStream::new(3);
        for _ in 0..50 {
            let n = 1 + rng.index(40);
            let scores: Vec<f64> = (0..n).map(|_| (rng.unit_f64() * 10.0).round() / 10.0).collect();
            let far = 0.01 + rng.unit_f64() * 0.6;
            let got = calibrate_threshold(&scores, far).unwrap();
            let want = oracle::calibrate_threshold_direct(&scores, far);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn tdr_hand_case() {
        let tdr = tdr_at_far(&[0.9, 0.8, 0.7, 0.6], &[0.65, 0.5], 0.25).unwrap();
        assert_eq!(tdr, 1.0);
    }

    #[test]
    fn tdr_edges() {
        // Perfect separation.
        assert_eq!(tdr_at_far(&[0.9, 0.8], &[0.1, 0.2], 0.25).unwrap(), 1.0);
        // Inverted detector: every fake above every real.
        assert_eq!(tdr_at_far(&[0.2, 0.3], &[0.9, 0.8], 0.25).unwrap(), 0.0);
        assert!(tdr_at_far(&[], &[0.5], 0.1).is_err());
        assert!(tdr_at_far(&[0.5], &[], 0.1).is_err());
    }

    #[test]
    fn tdr_empirical_far_never_exceeds_target() {
        let mut rng = RngStream::new(4);
        for _ in 0..50 {
            let n = 1 + rng.index(60);
            let reals: Vec<f64> = (0..n).map(|_| rng.unit_f64()).collect();
            let far = 0.005 + rng.unit_f64() * 0.4;
            let t = calibrate_threshold(&reals, far).unwrap();
            let observed = reals.iter().filter(|&&s| s < t).count() as f64 / n as f64;
            assert!(observed <= far + 1e-12, "observed {observed} target {far}");
        }
    }

    #[test]
    fn psnr_identical_images_hit_the_sentinel() {
        let a = ArrayD::from_elem(ndarray::IxDyn(&[3, 4, 4]), 0.25f64);
        assert_eq!(psnr(&a.view(), &a.view()).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_uniform_difference_is_twenty_db() {
        let a = ArrayD::from_elem(ndarray::IxDyn(&[3, 8, 8]), 0.5f64);
        let b = ArrayD::from_elem(ndarray::IxDyn(&[3, 8, 8]), 0.6f64);
        assert_abs_diff_eq!(psnr(&a.view(), &b.view()).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn psnr_rejects_shape_mismatch_and_matches_oracle() {
        let a = ArrayD::from_elem(ndarray::IxDyn(&[3, 4, 4]), 0.5f64);
        let b = ArrayD::from_elem(ndarray::IxDyn(&[3, 4, 5]), 0.5f64);
        assert!(psnr(&a.view(), &b.view()).is_err());

        let mut rng = RngStream::new(5);
        for _ in 0..10 {
            let x: Vec<f64> = (0..48).map(|_| rng.unit_f64()).collect();
            let y: Vec<f64> = (0..48).map(|_| rng.unit_f64()).collect();
            let ax = ArrayD::from_shape_vec(ndarray::IxDyn(&[3, 4, 4]), x.clone()).unwrap();
            let ay = ArrayD::from_shape_vec(ndarray::IxDyn(&[3, 4, 4]), y.clone()).unwrap();
            assert_abs_diff_eq!(
                psnr(&ax.view(), &ay.view()).unwrap(),
                oracle::psnr_direct(&x, &y),
                epsilon = 1e-12
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn ap_is_invariant_under_monotonic_transforms(seed in 0u64..500) {
            let mut rng = RngStream::new(seed);
            let n = 12;
            let scores: Vec<f64> = (0..n).map(|_| rng.range_f64(-2.0, 2.0)).collect();
            let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
            let transformed: Vec<f64> = scores.iter().map(|&s| (0.7 * s).exp() + 1.0).collect();
            let a = average_precision(&scores, &labels).unwrap();
            let b = average_precision(&transformed, &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn tdr_is_non_decreasing_in_far(seed in 0u64..200) {
            let mut rng = RngStream::new(seed);
            let reals: Vec<f64> = (0..25).map(|_| rng.unit_f64()).collect();
            let fakes: Vec<f64> = (0..25).map(|_| rng.unit_f64() * 0.8).collect();
            let mut last = -1.0;
            for far in [0.01, 0.05, 0.1, 0.2, 0.4, 0.6] {
                let tdr = tdr_at_far(&reals, &fakes, far).unwrap();
                prop_assert!(tdr + 1e-12 >= last, "tdr dropped at far {far}");
                last = tdr;
            }
        }

        #[test]
        fn psnr_is_symmetric_and_decreasing_in_perturbation(
            delta in 0.01f64..0.4,
            seed in 0u64..100,
        ) {
            let mut rng = RngStream::new(seed);
            let base: Vec<f64> = (0..27).map(|_| rng.unit_f64() * 0.5).collect();
            let a = ArrayD::from_shape_vec(ndarray::IxDyn(&[3, 3, 3]), base.clone()).unwrap();
            let small = a.mapv(|v| v + delta);
            let large = a.mapv(|v| v + delta * 1.5);
            let ab = psnr(&a.view(), &small.view()).unwrap();
            let ba = psnr(&small.view(), &a.view()).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            let al = psnr(&a.view(), &large.view()).unwrap();
            prop_assert!(al < ab);
        }
    }
}
