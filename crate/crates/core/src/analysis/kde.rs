use serde::Serialize;

use super::AnalysisError;

pub const KDE_POINTS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Kde {
    pub bandwidth: f64,
    /// Uniform grid over `[min - 3h, max + 3h]`.
    pub xs: Vec<f64>,
    pub density: Vec<f64>,
}

impl Kde {
    /// Trapezoid rule over the evaluation grid.
    pub fn integral(&self) -> f64 {
        self.xs
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, d)| (x[1] - x[0]) * (d[0] + d[1]) / 2.0)
            .sum()
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `0.9 * min(sigma, IQR / 1.34) * N^(-1/5)` with the sample standard
/// deviation. A zero IQR defers to sigma; no dispersion at all gives
/// `max(1e-3, 1e-3 * |mean|)`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64, AnalysisError> {
    if samples.is_empty() {
        return Err(AnalysisError::EmptySample);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sigma = if samples.len() > 1 {
        (samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = (quantile(&sorted, 0.75) - quantile(&sorted, 0.25)) / 1.34;
    let spread = if iqr > 0.0 { sigma.min(iqr) } else { sigma };
    if spread > 0.0 && spread.is_finite() {
        Ok(0.9 * spread * n.powf(-0.2))
    } else {
        Ok(1e-3f64.max(1e-3 * mean.abs()))
    }
}

pub fn gaussian_kde(samples: &[f64]) -> Result<Kde, AnalysisError> {
    let h = silverman_bandwidth(samples)?;
    let (min, max) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let (lo, hi) = (min - 3.0 * h, max + 3.0 * h);
    let step = (hi - lo) / (KDE_POINTS - 1) as f64;
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let xs: Vec<f64> = (0..KDE_POINTS).map(|i| lo + step * i as f64).collect();
    let density = xs
        .iter()
        .map(|&x| {
            norm * samples
                .iter()
                .map(|&s| {
                    let z = (x - s) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
        })
        .collect();
    Ok(Kde { bandwidth: h, xs, density })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn singleton_uses_fallback_bandwidth() {
        let k = gaussian_kde(&[5.0]).unwrap();
        assert_eq!(k.bandwidth, 5e-3);
        assert_eq!(k.xs.len(), KDE_POINTS);
        let peak = k
            .density
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        // 256 points: the centre falls between grid points 127 and 128.
        assert!(peak.0 == 127 || peak.0 == 128);
        assert!((k.xs[0] - (5.0 - 0.015)).abs() < 1e-12);
        assert_eq!(gaussian_kde(&[0.0]).unwrap().bandwidth, 1e-3);
        assert!(matches!(gaussian_kde(&[]), Err(AnalysisError::EmptySample)));
    }

    #[test]
    fn silverman_reference_value() {
        // sigma = sqrt(2.5), IQR = 2 -> min(1.5811, 1.4925) = 1.4925.
        let h = silverman_bandwidth(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let expected = 0.9 * (2.0 / 1.34) * 5f64.powf(-0.2);
        assert!((h - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_iqr_defers_to_sigma() {
        let s = [1.0, 1.0, 1.0, 1.0, 1.0, 9.0];
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let sigma = (s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((silverman_bandwidth(&s).unwrap() - 0.9 * sigma * n.powf(-0.2)).abs() < 1e-15);
    }

    #[test]
    fn two_clusters_are_bimodal_and_symmetric() {
        let s = [-1.0, -1.01, -0.99, 1.0, 1.01, 0.99];
        let k = gaussian_kde(&s).unwrap();
        for i in 0..KDE_POINTS {
            assert!((k.density[i] - k.density[KDE_POINTS - 1 - i]).abs() < 1e-9);
        }
        let maxima = (1..KDE_POINTS - 1)
            .filter(|&i| k.density[i] > k.density[i - 1] && k.density[i] >= k.density[i + 1])
            .count();
        assert_eq!(maxima, 2);
        let int = k.integral();
        assert!((0.995..=1.0).contains(&int), "{int}");
    }

    proptest! {
        #[test]
        fn density_integrates_to_one(samples in prop::collection::vec(-100.0f64..100.0, 1..40)) {
            let k = gaussian_kde(&samples).unwrap();
            let int = k.integral();
            prop_assert!((0.995..=1.0).contains(&int), "integral {}", int);
            prop_assert!(k.density.iter().all(|d| d.is_finite() && *d >= 0.0));
        }
    }
}
