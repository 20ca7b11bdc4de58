//! Small numeric helpers used throughout: normal distribution functions,
//! moments, and empirical quantiles.

use statrs::distribution::{ContinuousCDF, Normal};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Standard normal CDF Φ(x).
pub fn norm_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

/// Standard normal quantile Φ⁻¹(p), p in (0,1).
pub fn norm_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Log density of N(mean, variance) at x.
pub fn norm_log_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    let z2 = (x - mean) * (x - mean) / variance;
    -0.5 * ((2.0 * std::f64::consts::PI * variance).ln() + z2)
}

/// Two-sided z multiplier for a central interval at `level` (e.g. 1.959964
/// at 0.95).
pub fn z_for_level(level: f64) -> f64 {
    norm_quantile(0.5 + level / 2.0)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (n − 1 divisor); 0 for fewer than 2 points.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Empirical quantile with linear interpolation between order statistics
/// (R type 7). `p` in [0,1]; input need not be sorted.
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    assert!(!xs.is_empty(), "quantile of empty slice");
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN draws"));
    quantile_sorted(&sorted, p)
}

/// As [`quantile`] but assumes `sorted` is ascending.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}
