//! Shared oracles and fixtures for the integration suites. Everything here
//! is computed independently of the library's own numerical paths: the
//! normal CDF is a power series rather than the library's rational
//! approximation, and the posterior/likelihood oracles are dense grids.

#![allow(dead_code)]

use calib_core::controls::{ControlRecord, ControlScope, ControlSet};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

/// Standard normal density.
pub fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF via the all-positive power series
/// Φ(x) = 1/2 + φ(x)·Σ x^(2k+1) / (1·3·…·(2k+1)), absolutely convergent;
/// accurate to ~1e-14 over the |x| ≤ 8 range exercised here.
pub fn phi_series(x: f64) -> f64 {
    if x < 0.0 {
        return 1.0 - phi_series(-x);
    }
    if x > 12.0 {
        return 1.0;
    }
    let mut term = x;
    let mut sum = x;
    let mut k = 0u32;
    while term.abs() > 1e-18 * sum.abs() && k < 500 {
        k += 1;
        term *= x * x / (2 * k + 1) as f64;
        sum += term;
    }
    0.5 + phi_pdf(x) * sum
}

pub fn log_normal_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    let r = x - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * variance).ln() + r * r / variance)
}

/// Build a validated negative-control set from (estimate, se) pairs.
pub fn negative_set(pairs: &[(f64, f64)]) -> ControlSet {
    let records: Vec<ControlRecord> = pairs
        .iter()
        .enumerate()
        .map(|(i, &(est, se))| ControlRecord {
            database_id: "DB".into(),
            target_id: format!("T{i}"),
            comparator_id: format!("C{i}"),
            outcome_id: format!("O{i}"),
            family_id: format!("F{i}"),
            true_effect_size: Some(1.0),
            log_estimate: est,
            se_log_estimate: se,
        })
        .collect();
    ControlSet::from_records(records, ControlScope::default()).unwrap()
}

/// Negative controls with bias ~ N(bias_mean, bias_sd²) and noise sd `tau`.
pub fn synthetic_negatives(
    n: usize,
    bias_mean: f64,
    bias_sd: f64,
    tau: f64,
    seed: u64,
) -> ControlSet {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let bias = Normal::new(bias_mean, bias_sd).unwrap();
    let noise = Normal::new(0.0, tau).unwrap();
    let pairs: Vec<(f64, f64)> = (0..n)
        .map(|_| (bias.sample(&mut rng) + noise.sample(&mut rng), tau))
        .collect();
    negative_set(&pairs)
}

/// Dense grid MLE over (ν, σ²) of the closed-form marginal likelihood of
/// negative-control estimates. Returns (ν, σ², log likelihood).
pub fn grid_null_mle(data: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = data.len() as f64;
    let mean: f64 = data.iter().map(|d| d.0).sum::<f64>() / n;
    let var: f64 =
        data.iter().map(|d| (d.0 - mean) * (d.0 - mean)).sum::<f64>() / (n - 1.0);
    let spread = var.sqrt().max(0.02);

    let ll_at = |nu: f64, sigma2: f64| -> f64 {
        data.iter()
            .map(|&(est, tau2)| log_normal_pdf(est, nu, sigma2 + tau2))
            .sum()
    };
    let mut best = (mean, 0.0, f64::NEG_INFINITY);
    let steps = 600;
    for i in 0..=steps {
        let nu = mean - 4.0 * spread + 8.0 * spread * i as f64 / steps as f64;
        for j in 0..=steps {
            let sigma2 = 3.0 * var * j as f64 / steps as f64;
            let ll = ll_at(nu, sigma2);
            if ll > best.2 {
                best = (nu, sigma2, ll);
            }
        }
    }
    best
}

/// Deterministic 2-D grid posterior for the constant bias model under the
/// paper priors: μ ~ N(0, 50), 1/σ² ~ U(0, 100) (so σ² > 0.01 with density
/// ∝ σ⁻⁴).
pub struct GridPosterior {
    pub mu_grid: Vec<f64>,
    pub sigma2_grid: Vec<f64>,
    /// Normalized cell weights, indexed [mu][sigma2].
    pub weight: Vec<Vec<f64>>,
}

impl GridPosterior {
    pub fn compute(
        bias_hat: &[f64],
        tau2: &[f64],
        mu_range: (f64, f64),
        sigma2_range: (f64, f64),
        resolution: usize,
    ) -> GridPosterior {
        let mu_grid: Vec<f64> = (0..=resolution)
            .map(|i| {
                mu_range.0 + (mu_range.1 - mu_range.0) * i as f64 / resolution as f64
            })
            .collect();
        let sigma2_lo = sigma2_range.0.max(0.01 + 1e-9);
        let sigma2_grid: Vec<f64> = (0..=resolution)
            .map(|j| {
                sigma2_lo + (sigma2_range.1 - sigma2_lo) * j as f64 / resolution as f64
            })
            .collect();

        let mut log_w = vec![vec![0.0f64; sigma2_grid.len()]; mu_grid.len()];
        let mut max_lw = f64::NEG_INFINITY;
        for (i, &mu) in mu_grid.iter().enumerate() {
            for (j, &s2) in sigma2_grid.iter().enumerate() {
                let mut lw = log_normal_pdf(mu, 0.0, 50.0) - 4.0 * s2.sqrt().ln();
                for k in 0..bias_hat.len() {
                    lw += log_normal_pdf(bias_hat[k], mu, s2 + tau2[k]);
                }
                log_w[i][j] = lw;
                max_lw = max_lw.max(lw);
            }
        }
        let mut total = 0.0;
        let mut weight = vec![vec![0.0f64; sigma2_grid.len()]; mu_grid.len()];
        for i in 0..mu_grid.len() {
            for j in 0..sigma2_grid.len() {
                let w = (log_w[i][j] - max_lw).exp();
                weight[i][j] = w;
                total += w;
            }
        }
        for row in weight.iter_mut() {
            for w in row.iter_mut() {
                *w /= total;
            }
        }
        GridPosterior { mu_grid, sigma2_grid, weight }
    }

    fn marginal(&self, which_mu: bool) -> Vec<(f64, f64)> {
        if which_mu {
            self.mu_grid
                .iter()
                .enumerate()
                .map(|(i, &mu)| (mu, self.weight[i].iter().sum()))
                .collect()
        } else {
            self.sigma2_grid
                .iter()
                .enumerate()
                .map(|(j, &s2)| (s2, self.weight.iter().map(|row| row[j]).sum()))
                .collect()
        }
    }

    pub fn mean_mu(&self) -> f64 {
        self.marginal(true).iter().map(|(v, w)| v * w).sum()
    }

    pub fn mean_sigma2(&self) -> f64 {
        self.marginal(false).iter().map(|(v, w)| v * w).sum()
    }

    pub fn quantile_mu(&self, p: f64) -> f64 {
        quantile_of_marginal(&self.marginal(true), p)
    }

    pub fn quantile_sigma2(&self, p: f64) -> f64 {
        quantile_of_marginal(&self.marginal(false), p)
    }

    /// Predictive CDF of the target's true log effect given an estimate and
    /// its standard error: a weighted normal mixture over the grid.
    pub fn predictive_cdf(&self, t: f64, log_estimate: f64, se: f64) -> f64 {
        let mut total = 0.0;
        for (i, &mu) in self.mu_grid.iter().enumerate() {
            for (j, &s2) in self.sigma2_grid.iter().enumerate() {
                let sd = (s2 + se * se).sqrt();
                total += self.weight[i][j] * phi_series((t - (log_estimate - mu)) / sd);
            }
        }
        total
    }

    /// Invert the predictive CDF by bisection.
    pub fn predictive_quantile(&self, p: f64, log_estimate: f64, se: f64) -> f64 {
        let (mut lo, mut hi) = (log_estimate - 10.0, log_estimate + 10.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.predictive_cdf(mid, log_estimate, se) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

fn quantile_of_marginal(marginal: &[(f64, f64)], p: f64) -> f64 {
    let mut acc = 0.0;
    for (i, &(v, w)) in marginal.iter().enumerate() {
        let next = acc + w;
        if next >= p {
            // Linear interpolation inside the cell.
            let frac = if w > 0.0 { (p - acc) / w } else { 0.0 };
            let left = if i > 0 { (marginal[i - 1].0 + v) / 2.0 } else { v };
            let right = if i + 1 < marginal.len() { (v + marginal[i + 1].0) / 2.0 } else { v };
            return left + frac * (right - left);
        }
        acc = next;
    }
    marginal.last().map(|m| m.0).unwrap_or(f64::NAN)
}
