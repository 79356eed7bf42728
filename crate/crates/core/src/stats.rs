//! Small statistical helpers: compensated means, batch-means standard errors,
//! the normal CDF and the Kolmogorov distribution.

use crate::quad::compensated_sum;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    /// Distance from `target` in standard errors.
    pub fn sigmas_from(&self, target: f64) -> f64 {
        let gap = (self.mean - target).abs();
        if gap == 0.0 {
            return 0.0;
        }
        gap / self.stderr
    }
}

/// Sample mean and `s/√n`, both accumulated in input order.
pub fn mean_stderr(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    let mean = compensated_sum(xs.iter().copied()) / n;
    if xs.len() < 2 {
        return Estimate { mean, stderr: f64::NAN };
    }
    let var = compensated_sum(xs.iter().map(|x| (x - mean) * (x - mean))) / (n - 1.0);
    Estimate { mean, stderr: (var / n).sqrt() }
}

/// Splits `0..n` into `batches` contiguous ranges of near-equal length.
pub fn batch_ranges(n: usize, batches: usize) -> Vec<std::ops::Range<usize>> {
    let b = batches.clamp(1, n.max(1));
    (0..b).map(|i| (i * n / b)..((i + 1) * n / b)).filter(|r| !r.is_empty()).collect()
}

/// Standard error of the mean of `batch_values` (one value per batch).
pub fn batch_stderr(batch_values: &[f64]) -> f64 {
    mean_stderr(batch_values).stderr
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Survival function of the Kolmogorov distribution, `P(K > x)`.
pub fn kolmogorov_survival(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 0.3 {
        // 1 − (√(2π)/x) Σ e^{−(2k−1)²π²/(8x²)}, the small-x form.
        let c = (2.0 * std::f64::consts::PI).sqrt() / x;
        let s: f64 = (1..=6)
            .map(|k| {
                let m = (2 * k - 1) as f64;
                (-(m * m) * std::f64::consts::PI.powi(2) / (8.0 * x * x)).exp()
            })
            .sum();
        return 1.0 - c * s;
    }
    let s: f64 = (1..=100)
        .map(|k| {
            let kf = k as f64;
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            sign * (-2.0 * kf * kf * x * x).exp()
        })
        .sum();
    (2.0 * s).clamp(0.0, 1.0)
}

/// `x` such that `P(K > x) = alpha`, by bisection.
pub fn kolmogorov_critical(alpha: f64) -> f64 {
    let (mut lo, mut hi) = (0.1, 5.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kolmogorov_survival(mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Largest gap between the weighted empirical CDF of `samples` and `cdf`.
/// Weights need not be normalized.
pub fn weighted_ks_distance(samples: &[f64], weights: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.sort_by(|&a, &b| samples[a].total_cmp(&samples[b]).then(a.cmp(&b)));
    let total = compensated_sum(weights.iter().copied());
    let mut acc = 0.0;
    let mut worst: f64 = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let x = samples[idx[i]];
        let f = cdf(x);
        let before = acc / total;
        while i < idx.len() && samples[idx[i]] == x {
            acc += weights[idx[i]];
            i += 1;
        }
        let after = acc / total;
        worst = worst.max((f - before).abs()).max((after - f).abs());
    }
    worst
}

/// Kish effective sample size `(Σw)² / Σw²`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s = compensated_sum(weights.iter().copied());
    let s2 = compensated_sum(weights.iter().map(|w| w * w));
    s * s / s2
}

/// `ln Σ exp(xs)` without overflow.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return m;
    }
    m + compensated_sum(xs.into_iter().map(|x| (x - m).exp())).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kolmogorov_table_values() {
        // Standard asymptotic table: 1.2238 (10%), 1.3581 (5%), 1.6276 (1%).
        assert!((kolmogorov_critical(0.10) - 1.2238).abs() < 1e-4);
        assert!((kolmogorov_critical(0.05) - 1.3581).abs() < 1e-4);
        assert!((kolmogorov_critical(0.01) - 1.6276).abs() < 1e-4);
        // both series agree where they meet
        let a = kolmogorov_survival(0.2999999);
        let b = kolmogorov_survival(0.3);
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn ks_distance_of_exact_quantiles_is_small() {
        let n = 1000;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let w = vec![1.0; n];
        let d = weighted_ks_distance(&xs, &w, |x| x.clamp(0.0, 1.0));
        assert!((d - 0.5 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn ess_of_uniform_weights() {
        assert_eq!(effective_sample_size(&[2.0; 10]), 10.0);
        assert!((effective_sample_size(&[1.0, 0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn batches_cover_range() {
        let r = batch_ranges(1003, 100);
        assert_eq!(r.len(), 100);
        assert_eq!(r.iter().map(|r| r.len()).sum::<usize>(), 1003);
    }

    #[test]
    fn log_sum_exp_large() {
        let v = log_sum_exp([1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
