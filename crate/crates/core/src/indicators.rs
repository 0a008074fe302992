//! Convergence and overfitting indicators computed from a run's loss curve.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest curve the slope windows are defined for.
pub const MIN_SLOPE_EPOCHS: usize = 4;

/// Loss ranges narrower than this count as degenerate.
const DEGENERATE_RANGE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IndicatorError {
    #[error("curve has {0} epochs; at least {MIN_SLOPE_EPOCHS} are needed")]
    CurveTooShort(usize),
    #[error("train and test series differ in length ({train} vs {test})")]
    LengthMismatch { train: usize, test: usize },
    #[error("curve is empty")]
    Empty,
    #[error("non-finite loss at epoch {0}")]
    NonFinite(usize),
}

/// Per-epoch train/test losses; index 0 holds epoch 1.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossCurve {
    pub train: Vec<f64>,
    pub test: Vec<f64>,
}

impl LossCurve {
    pub fn new(train: Vec<f64>, test: Vec<f64>) -> Result<Self, IndicatorError> {
        if train.len() != test.len() {
            return Err(IndicatorError::LengthMismatch {
                train: train.len(),
                test: test.len(),
            });
        }
        if train.is_empty() {
            return Err(IndicatorError::Empty);
        }
        if let Some(i) = train
            .iter()
            .zip(&test)
            .position(|(a, b)| !a.is_finite() || !b.is_finite())
        {
            return Err(IndicatorError::NonFinite(i + 1));
        }
        Ok(LossCurve { train, test })
    }

    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    pub fn append(&mut self, other: &LossCurve) {
        self.train.extend_from_slice(&other.train);
        self.test.extend_from_slice(&other.test);
    }
}

/// How the mean slope over the last epochs is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SlopeConvention {
    /// Two adjacent windows of `m = max(1, ceil(n/20))` epochs; the difference of
    /// their means is divided by `m`, giving a per-epoch slope.
    #[default]
    PerEpoch,
    /// Difference of the two window sums divided by `ceil(n/20)`, with the
    /// inclusive window bounds `[n-ceil(n/20), n]` and
    /// `[n-ceil(n/10), n-ceil(n/20)]`. The finite-difference set then starts
    /// at `n-ceil(n/10)`.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeStats {
    pub mean: f64,
    pub sigma_plus: f64,
    pub sigma_minus: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSet {
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub overfitting: f64,
    pub slope_mean: f64,
    pub slope_sigma_plus: f64,
    pub slope_sigma_minus: f64,
    pub trainability: f64,
    pub runtime_s: f64,
}

fn ceil_div(n: usize, d: usize) -> usize {
    n.div_ceil(d)
}

/// Final train/test gap normalized by the loss range over every epoch of
/// both curves. Zero when that range is degenerate.
pub fn overfitting(c: &LossCurve) -> f64 {
    let n = c.len();
    if n == 0 {
        return 0.0;
    }
    let (lo, hi) = c
        .train
        .iter()
        .chain(&c.test)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    if range < DEGENERATE_RANGE {
        return 0.0;
    }
    (c.test[n - 1] - c.train[n - 1]).abs() / range
}

/// Population standard deviation; zero for empty or singleton sets.
fn population_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn slope_stats(c: &LossCurve) -> Result<SlopeStats, IndicatorError> {
    slope_stats_with(c, SlopeConvention::PerEpoch)
}

pub fn slope_stats_with(c: &LossCurve, convention: SlopeConvention) -> Result<SlopeStats, IndicatorError> {
    let n = c.len();
    if n < MIN_SLOPE_EPOCHS {
        return Err(IndicatorError::CurveTooShort(n));
    }
    let l = &c.train;
    // `at(e)` is the loss at 1-based epoch e.
    let at = |e: usize| l[e - 1];
    let tail = ceil_div(n, 10);
    let (mean, first_k) = match convention {
        SlopeConvention::PerEpoch => {
            let m = ceil_div(n, 20).max(1);
            let recent: f64 = (n - m + 1..=n).map(at).sum::<f64>() / m as f64;
            let previous: f64 = (n - 2 * m + 1..=n - m).map(at).sum::<f64>() / m as f64;
            ((recent - previous) / m as f64, n - tail + 1)
        }
        SlopeConvention::Literal => {
            let m = ceil_div(n, 20);
            let recent: f64 = (n - m..=n).map(at).sum();
            let previous: f64 = (n - tail..=n - m).map(at).sum();
            ((recent - previous) / m as f64, n - tail)
        }
    };
    let slopes: Vec<f64> = (first_k.max(2)..=n).map(|k| at(k) - at(k - 1)).collect();
    let above: Vec<f64> = slopes.iter().copied().filter(|&s| s >= mean).collect();
    let below: Vec<f64> = slopes.iter().copied().filter(|&s| s <= mean).collect();
    Ok(SlopeStats {
        mean,
        sigma_plus: population_std(&above),
        sigma_minus: population_std(&below),
    })
}

/// Sum of the per-epoch training losses.
pub fn trainability(c: &LossCurve) -> f64 {
    c.train.iter().sum()
}

pub fn compute_all(c: &LossCurve, runtime_s: f64) -> Result<IndicatorSet, IndicatorError> {
    compute_all_with(c, runtime_s, SlopeConvention::PerEpoch)
}

pub fn compute_all_with(
    c: &LossCurve,
    runtime_s: f64,
    convention: SlopeConvention,
) -> Result<IndicatorSet, IndicatorError> {
    let slope = slope_stats_with(c, convention)?;
    let n = c.len();
    Ok(IndicatorSet {
        final_train_loss: c.train[n - 1],
        final_test_loss: c.test[n - 1],
        overfitting: overfitting(c),
        slope_mean: slope.mean,
        slope_sigma_plus: slope.sigma_plus,
        slope_sigma_minus: slope.sigma_minus,
        trainability: trainability(c),
        runtime_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn curve(train: &[f64], test: &[f64]) -> LossCurve {
        LossCurve::new(train.to_vec(), test.to_vec()).unwrap()
    }

    #[test]
    fn overfitting_examples() {
        let c = curve(&[1.0, 0.5, 0.2], &[1.1, 0.6, 0.4]);
        assert!((overfitting(&c) - 0.2 / 0.9).abs() < 1e-12);
        let same = curve(&[1.0, 0.5, 0.2], &[1.0, 0.5, 0.2]);
        assert_eq!(overfitting(&same), 0.0);
        let flat = curve(&[0.3; 5], &[0.3; 5]);
        assert_eq!(overfitting(&flat), 0.0);
    }

    #[test]
    fn slope_of_constant_curve() {
        let c = curve(&[2.5; 40], &[2.5; 40]);
        let s = slope_stats(&c).unwrap();
        assert_eq!((s.mean, s.sigma_plus, s.sigma_minus), (0.0, 0.0, 0.0));
    }

    #[test]
    fn slope_of_linear_curve() {
        let train: Vec<f64> = (1..=100).map(|e| 10.0 - 0.01 * e as f64).collect();
        let c = curve(&train, &train);
        let s = slope_stats(&c).unwrap();
        assert!((s.mean + 0.01).abs() < 1e-12, "{}", s.mean);
        assert!(s.sigma_plus < 1e-12 && s.sigma_minus < 1e-12);
    }

    #[test]
    fn sawtooth_tail() {
        // Alternating +-0.1 steps around 1.0 over 40 epochs: window size 2,
        // tail of 4 differences {+0.2, -0.2, +0.2, -0.2} (or the reverse).
        let train: Vec<f64> = (1..=40).map(|e| if e % 2 == 0 { 1.1 } else { 0.9 }).collect();
        let c = curve(&train, &train);
        let s = slope_stats(&c).unwrap();
        assert!(s.mean.abs() < 1e-12);
        // Each half holds two equal differences, so both deviations vanish.
        assert!(s.sigma_plus < 1e-12 && s.sigma_minus < 1e-12);

        // An uneven tail: slopes 0.1, 0.3 above a ~0 mean.
        let mut t2 = vec![1.0; 36];
        t2.extend([1.1, 1.0, 1.3, 1.0]);
        let s2 = slope_stats(&curve(&t2, &t2)).unwrap();
        // Windows {1.3,1.0} and {1.1,1.0}: (1.15-1.05)/2 = 0.05.
        assert!((s2.mean - 0.05).abs() < 1e-12);
        // Slopes k=37..40: 0.1, -0.1, 0.3, -0.3. Above 0.05: {0.1, 0.3}; below: {-0.1, -0.3}.
        assert!((s2.sigma_plus - 0.1).abs() < 1e-12);
        assert!((s2.sigma_minus - 0.1).abs() < 1e-12);
    }

    #[test]
    fn literal_convention_differs_by_window() {
        let train: Vec<f64> = (1..=100).map(|e| 10.0 - 0.01 * e as f64).collect();
        let c = curve(&train, &train);
        let s = slope_stats_with(&c, SlopeConvention::Literal).unwrap();
        // Sums over [95,100] and [90,95] divided by 5.
        let recent: f64 = (95..=100).map(|e| train[e - 1]).sum();
        let previous: f64 = (90..=95).map(|e| train[e - 1]).sum();
        assert!((s.mean - (recent - previous) / 5.0).abs() < 1e-12);
    }

    #[test]
    fn too_short() {
        let c = curve(&[1.0; 3], &[1.0; 3]);
        assert_eq!(slope_stats(&c), Err(IndicatorError::CurveTooShort(3)));
        assert_eq!(compute_all(&c, 1.0), Err(IndicatorError::CurveTooShort(3)));
        let c4 = curve(&[4.0, 3.0, 2.0, 1.0], &[4.0, 3.0, 2.0, 1.0]);
        assert!((slope_stats(&c4).unwrap().mean + 1.0).abs() < 1e-12);
    }

    #[test]
    fn trainability_sums() {
        assert_eq!(trainability(&curve(&[1.0, 0.5, 0.25], &[0.0; 3])), 1.75);
        assert_eq!(trainability(&curve(&[0.5; 8], &[0.0; 8])), 4.0);
    }

    #[test]
    fn bundle() {
        let c = curve(&[1.0, 0.5, 0.2, 0.2], &[1.1, 0.6, 0.4, 0.4]);
        let set = compute_all(&c, 12.5).unwrap();
        assert_eq!(set.final_train_loss, 0.2);
        assert_eq!(set.final_test_loss, 0.4);
        assert!((set.overfitting - 0.2 / 0.9).abs() < 1e-12);
        assert_eq!(set.runtime_s, 12.5);
        let zero = compute_all(&curve(&[0.0; 10], &[0.0; 10]), 3.0).unwrap();
        assert_eq!(
            (zero.overfitting, zero.slope_mean, zero.slope_sigma_plus, zero.trainability),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn curve_validation() {
        assert!(matches!(LossCurve::new(vec![1.0], vec![]), Err(IndicatorError::LengthMismatch { .. })));
        assert_eq!(LossCurve::new(vec![], vec![]), Err(IndicatorError::Empty));
        assert_eq!(
            LossCurve::new(vec![1.0, f64::NAN], vec![1.0, 1.0]),
            Err(IndicatorError::NonFinite(2))
        );
    }

    fn arb_curve() -> impl Strategy<Value = LossCurve> {
        (4usize..120).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.0f64..5.0, n),
                proptest::collection::vec(0.0f64..5.0, n),
            )
                .prop_map(|(a, b)| LossCurve::new(a, b).unwrap())
        })
    }

    proptest! {
        #[test]
        fn scale_covariance(c in arb_curve(), lambda in 0.1f64..10.0) {
            let scaled = LossCurve::new(
                c.train.iter().map(|x| x * lambda).collect(),
                c.test.iter().map(|x| x * lambda).collect(),
            ).unwrap();
            let tol = |x: f64| 1e-9 * (1.0 + x.abs());
            let o = overfitting(&c);
            prop_assert!((overfitting(&scaled) - o).abs() < tol(o));
            let t = trainability(&c) * lambda;
            prop_assert!((trainability(&scaled) - t).abs() < tol(t));
            let s = slope_stats(&c).unwrap();
            let ss = slope_stats(&scaled).unwrap();
            prop_assert!((ss.mean - s.mean * lambda).abs() < tol(s.mean * lambda));
            // The >=/<= partition can shift for slopes tied with the mean
            // up to rounding, so only the untied case is compared.
            let tied = c.train.windows(2).any(|w| ((w[1] - w[0]) - s.mean).abs() < 1e-9);
            if !tied {
                prop_assert!((ss.sigma_plus - s.sigma_plus * lambda).abs() < tol(s.sigma_plus * lambda));
                prop_assert!((ss.sigma_minus - s.sigma_minus * lambda).abs() < tol(s.sigma_minus * lambda));
            }
        }

        #[test]
        fn shift_invariance(c in arb_curve(), shift in -3.0f64..3.0) {
            let shifted = LossCurve::new(
                c.train.iter().map(|x| x + shift).collect(),
                c.test.clone(),
            ).unwrap();
            let s = slope_stats(&c).unwrap();
            let ss = slope_stats(&shifted).unwrap();
            prop_assert!((ss.mean - s.mean).abs() < 1e-9);
            let tied = c.train.windows(2).any(|w| ((w[1] - w[0]) - s.mean).abs() < 1e-9);
            if !tied {
                prop_assert!((ss.sigma_plus - s.sigma_plus).abs() < 1e-9);
                prop_assert!((ss.sigma_minus - s.sigma_minus).abs() < 1e-9);
            }
        }

        #[test]
        fn overfitting_bounded(c in arb_curve()) {
            let o = overfitting(&c);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&o));
            let s = slope_stats(&c).unwrap();
            prop_assert!(s.sigma_plus >= 0.0 && s.sigma_minus >= 0.0);
        }
    }
}
