//! Empirical null distribution: fit the bias distribution from negative
//! controls by maximum marginal likelihood and compute calibrated p-values.
//!
//! Negative controls have true log effect 0, so each log estimate is
//! marginally Normal(ν, σ² + τᵢ²) after integrating the per-control bias
//! out of the hierarchy. The fit maximizes that closed-form likelihood over
//! (ν, σ²) with σ² parameterized on the log scale; a boundary optimum is
//! reported as σ̂² = 0.

use crate::controls::ControlSet;
use crate::error::{Error, Result};
use crate::optim::bfgs;
use crate::stats::{mean, norm_cdf, norm_log_pdf, sample_variance};

/// Fitted empirical null (bias) distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NullDistribution {
    /// Mean of the bias distribution.
    pub nu: f64,
    /// Variance of the bias distribution (0 at the boundary optimum).
    pub sigma2: f64,
    pub n_controls: usize,
    pub log_likelihood: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Sidedness {
    #[default]
    TwoSided,
    Greater,
    Less,
}

const SIGMA2_FLOOR: f64 = 1e-10;
const MAX_ITER: usize = 500;

/// Gradient tolerance scaled to the number of controls; likelihood
/// gradients grow linearly with n.
fn grad_tol(n: usize) -> f64 {
    1e-6 * (1.0 + n as f64)
}

pub(crate) fn marginal_log_likelihood(nu: f64, sigma2: f64, data: &[(f64, f64)]) -> f64 {
    data.iter()
        .map(|&(est, tau2)| norm_log_pdf(est, nu, sigma2 + tau2))
        .sum()
}

fn neg_ll_and_grad(params: &[f64], data: &[(f64, f64)]) -> (f64, Vec<f64>) {
    let (nu, gamma) = (params[0], params[1]);
    if gamma < -60.0 || gamma > 60.0 {
        return (f64::INFINITY, vec![0.0, 0.0]);
    }
    let sigma2 = gamma.exp();
    let mut ll = 0.0;
    let mut d_nu = 0.0;
    let mut d_gamma = 0.0;
    for &(est, tau2) in data {
        let v = sigma2 + tau2;
        let resid = est - nu;
        ll += norm_log_pdf(est, nu, v);
        d_nu += resid / v;
        d_gamma += 0.5 * sigma2 * (resid * resid / (v * v) - 1.0 / v);
    }
    (-ll, vec![-d_nu, -d_gamma])
}

/// Precision-weighted mean and its log likelihood at σ² = 0.
fn boundary_fit(data: &[(f64, f64)]) -> (f64, f64) {
    let wsum: f64 = data.iter().map(|&(_, tau2)| 1.0 / tau2).sum();
    let nu = data.iter().map(|&(est, tau2)| est / tau2).sum::<f64>() / wsum;
    (nu, marginal_log_likelihood(nu, 0.0, data))
}

/// Fit the empirical null from negative controls. Requires at least 2
/// records, all with true effect size 1.
pub fn fit_null(negatives: &ControlSet) -> Result<NullDistribution> {
    if negatives.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 negative controls, got {}",
            negatives.len()
        )));
    }
    if let Some(bad) = negatives.records().iter().find(|r| !r.is_negative()) {
        return Err(Error::Data(format!(
            "fit_null accepts only negative controls; outcome {:?} has true effect size {:?}",
            bad.outcome_id, bad.true_effect_size
        )));
    }
    let data: Vec<(f64, f64)> = negatives
        .records()
        .iter()
        .map(|r| (r.log_estimate, r.se_log_estimate * r.se_log_estimate))
        .collect();

    let estimates: Vec<f64> = data.iter().map(|d| d.0).collect();
    let mean_tau2 = mean(&data.iter().map(|d| d.1).collect::<Vec<_>>());
    let var_est = sample_variance(&estimates);
    // Multi-start: method-of-moments and (0, pooled variance).
    let starts = [
        [mean(&estimates), (var_est - mean_tau2).max(1e-4).ln()],
        [0.0, var_est.max(1e-4).ln()],
    ];

    let mut best: Option<(f64, f64, f64)> = None; // (nu, sigma2, ll)
    let mut converged_any = false;
    for start in starts {
        let res = bfgs(&start, MAX_ITER, grad_tol(data.len()), |p| neg_ll_and_grad(p, &data));
        converged_any |= res.converged;
        let cand = (res.x[0], res.x[1].exp(), -res.f);
        if best.map(|b| cand.2 > b.2).unwrap_or(true) {
            best = Some(cand);
        }
    }
    // A boundary candidate: σ² pinned at 0 with the precision-weighted mean.
    let (nu0, ll0) = boundary_fit(&data);
    let (mut nu, mut sigma2, mut ll) = best.expect("at least one start");
    if ll0 >= ll - 1e-12 {
        (nu, sigma2, ll) = (nu0, 0.0, ll0);
        converged_any = true;
    }
    if sigma2 < SIGMA2_FLOOR {
        // Interior optimizer ran into the boundary; report it exactly.
        let (nu_b, ll_b) = boundary_fit(&data);
        (nu, sigma2, ll) = (nu_b, 0.0, ll_b);
        converged_any = true;
    }
    if !converged_any {
        return Err(Error::Numeric(format!(
            "empirical null fit did not converge within {MAX_ITER} iterations"
        )));
    }
    if !ll.is_finite() {
        return Err(Error::Numeric("empirical null likelihood is not finite".into()));
    }
    Ok(NullDistribution { nu, sigma2, n_controls: data.len(), log_likelihood: ll })
}

/// Two-sided calibrated p-value against the fitted null.
pub fn calibrated_p(null: &NullDistribution, log_estimate: f64, se: f64) -> Result<f64> {
    calibrated_p_sided(null, log_estimate, se, Sidedness::TwoSided)
}

/// Calibrated p-value with explicit sidedness.
pub fn calibrated_p_sided(
    null: &NullDistribution,
    log_estimate: f64,
    se: f64,
    sided: Sidedness,
) -> Result<f64> {
    if !(se > 0.0 && se.is_finite()) {
        return Err(Error::InvalidInput(format!("se must be positive, got {se}")));
    }
    let sd = (null.sigma2 + se * se).sqrt();
    let z = (log_estimate - null.nu) / sd;
    Ok(match sided {
        Sidedness::TwoSided => 2.0 * norm_cdf(-z.abs()),
        Sidedness::Greater => norm_cdf(-z),
        Sidedness::Less => norm_cdf(z),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controls::{ControlRecord, ControlScope};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, Normal};

    fn negative_set(pairs: &[(f64, f64)]) -> ControlSet {
        let records: Vec<ControlRecord> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(est, se))| ControlRecord {
                database_id: "DB".into(),
                target_id: "T".into(),
                comparator_id: "C".into(),
                outcome_id: format!("O{i}"),
                family_id: format!("F{i}"),
                true_effect_size: Some(1.0),
                log_estimate: est,
                se_log_estimate: se,
            })
            .collect();
        ControlSet::from_records(records, ControlScope::default()).unwrap()
    }

    fn synthetic_negatives(
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

    /// Dense grid search over (ν, σ²) on the same closed-form likelihood.
    fn grid_mle(data: &[(f64, f64)]) -> (f64, f64, f64) {
        let ests: Vec<f64> = data.iter().map(|d| d.0).collect();
        let m = mean(&ests);
        let spread = sample_variance(&ests).sqrt().max(0.05);
        let mut best = (m, 0.0, f64::NEG_INFINITY);
        for i in 0..=400 {
            let nu = m - 3.0 * spread + 6.0 * spread * i as f64 / 400.0;
            for j in 0..=400 {
                let sigma2 = 4.0 * spread * spread * j as f64 / 400.0;
                let ll = marginal_log_likelihood(nu, sigma2, data);
                if ll > best.2 {
                    best = (nu, sigma2, ll);
                }
            }
        }
        best
    }

    #[test]
    fn all_zero_estimates_hit_boundary() {
        let set = negative_set(&[(0.0, 0.1), (0.0, 0.2), (0.0, 0.15)]);
        let null = fit_null(&set).unwrap();
        assert_abs_diff_eq!(null.nu, 0.0, epsilon = 1e-10);
        assert_eq!(null.sigma2, 0.0);
    }

    #[test]
    fn symmetric_pair_centers_at_zero() {
        let set = negative_set(&[(-0.4, 0.1), (0.4, 0.1)]);
        let null = fit_null(&set).unwrap();
        assert_abs_diff_eq!(null.nu, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn recovers_bias_mean_against_grid_oracle() {
        let set = synthetic_negatives(1000, 0.25, 0.05, 0.1, 11);
        let null = fit_null(&set).unwrap();
        assert_abs_diff_eq!(null.nu, 0.25, epsilon = 0.01);

        let data: Vec<(f64, f64)> =
            set.records().iter().map(|r| (r.log_estimate, r.se_log_estimate.powi(2))).collect();
        let (grid_nu, grid_s2, grid_ll) = grid_mle(&data);
        assert!(
            null.log_likelihood >= grid_ll - 1e-4,
            "optimizer ll {} below grid ll {}",
            null.log_likelihood,
            grid_ll
        );
        assert_abs_diff_eq!(null.nu, grid_nu, epsilon = 0.01);
        assert_abs_diff_eq!(null.sigma2.sqrt(), grid_s2.sqrt(), epsilon = 0.01);
    }

    #[test]
    fn fit_rejects_positives_and_tiny_sets() {
        let mut records = negative_set(&[(0.0, 0.1), (0.1, 0.1)]).records().to_vec();
        records[1].true_effect_size = Some(2.0);
        records[1].family_id = records[0].family_id.clone();
        records[1].target_id = records[0].target_id.clone();
        records[1].comparator_id = records[0].comparator_id.clone();
        let mixed = ControlSet::from_records(records, ControlScope::default()).unwrap();
        assert!(fit_null(&mixed).is_err());

        let single = negative_set(&[(0.0, 0.1)]);
        assert!(fit_null(&single).is_err());
    }

    #[test]
    fn fit_is_order_and_duplication_invariant() {
        let set = synthetic_negatives(200, 0.1, 0.08, 0.12, 3);
        let null = fit_null(&set).unwrap();

        let mut reversed = set.records().to_vec();
        reversed.reverse();
        let rev =
            fit_null(&ControlSet::from_records(reversed, ControlScope::default()).unwrap())
                .unwrap();
        assert_abs_diff_eq!(null.nu, rev.nu, epsilon = 1e-6);
        assert_abs_diff_eq!(null.sigma2, rev.sigma2, epsilon = 1e-6);

        let mut doubled = set.records().to_vec();
        doubled.extend(set.records().iter().cloned().map(|mut r| {
            r.outcome_id = format!("{}-dup", r.outcome_id);
            r
        }));
        let dup =
            fit_null(&ControlSet::from_records(doubled, ControlScope::default()).unwrap())
                .unwrap();
        assert_abs_diff_eq!(null.nu, dup.nu, epsilon = 1e-5);
        assert_abs_diff_eq!(null.sigma2, dup.sigma2, epsilon = 1e-5);
    }

    #[test]
    fn closed_form_matches_quadrature() {
        // Marginal density of one estimate equals ∫ N(est; β, τ²) N(β; ν, σ²) dβ,
        // integrated here by Simpson's rule.
        let cases = [
            (0.3, 0.2, 0.05, 0.1),
            (-0.5, 0.0, 0.2, 0.3),
            (1.2, 0.4, 0.01, 0.05),
        ];
        for &(est, nu, sigma2, tau) in &cases {
            let tau2 = tau * tau;
            let closed = marginal_log_likelihood(nu, sigma2, &[(est, tau2)]).exp();

            let sd = (sigma2 + tau2).sqrt();
            let (lo, hi) = (nu - 12.0 * sd, nu + 12.0 * sd);
            let n = 20_000;
            let h = (hi - lo) / n as f64;
            let integrand = |beta: f64| {
                (norm_log_pdf(est, beta, tau2) + norm_log_pdf(beta, nu, sigma2)).exp()
            };
            let mut sum = integrand(lo) + integrand(hi);
            for k in 1..n {
                let w = if k % 2 == 1 { 4.0 } else { 2.0 };
                sum += w * integrand(lo + k as f64 * h);
            }
            let quad = sum * h / 3.0;
            assert_abs_diff_eq!(closed, quad, epsilon = 1e-8);
        }
    }

    #[test]
    fn p_value_at_wald_quantile() {
        let null = NullDistribution { nu: 0.0, sigma2: 0.0, n_controls: 2, log_likelihood: 0.0 };
        let p = calibrated_p(&null, 1.959964 * 0.25, 0.25).unwrap();
        assert_abs_diff_eq!(p, 0.05, epsilon = 1e-6);
    }

    #[test]
    fn p_value_matches_independent_cdf_oracle() {
        // Oracle: Φ(x) by Simpson integration of the density from −12 (where
        // the tail mass is ~1.8e-33), accurate well past 1e-12 here.
        fn phi_oracle(x: f64) -> f64 {
            let lo = -12.0;
            let n = 40_000;
            let h = (x - lo) / n as f64;
            let dens =
                |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let mut sum = dens(lo) + dens(x);
            for k in 1..n {
                let w = if k % 2 == 1 { 4.0 } else { 2.0 };
                sum += w * dens(lo + k as f64 * h);
            }
            sum * h / 3.0
        }

        let null =
            NullDistribution { nu: 0.1, sigma2: 0.04, n_controls: 10, log_likelihood: 0.0 };
        let p = calibrated_p(&null, 0.5, 0.2).unwrap();
        let z = -0.4 / 0.08_f64.sqrt();
        let expected = 2.0 * phi_oracle(z);
        assert_abs_diff_eq!(p, expected, epsilon = 1e-9);
    }

    #[test]
    fn p_is_one_at_the_null_center() {
        let null =
            NullDistribution { nu: 0.37, sigma2: 0.02, n_controls: 5, log_likelihood: 0.0 };
        assert_abs_diff_eq!(calibrated_p(&null, 0.37, 0.1).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn p_decreases_away_from_center() {
        let null =
            NullDistribution { nu: 0.1, sigma2: 0.05, n_controls: 5, log_likelihood: 0.0 };
        let mut last = 1.0 + 1e-9;
        for k in 0..20 {
            let p = calibrated_p(&null, 0.1 + 0.1 * k as f64, 0.2).unwrap();
            assert!(p < last, "p not decreasing at offset {k}");
            last = p;
        }
    }

    #[test]
    fn degenerate_null_reduces_to_wald_p() {
        let null = NullDistribution { nu: 0.0, sigma2: 0.0, n_controls: 2, log_likelihood: 0.0 };
        for &(est, se) in &[(0.3, 0.1), (-0.2, 0.05), (0.0, 0.4)] {
            let p = calibrated_p(&null, est, se).unwrap();
            let wald = 2.0 * norm_cdf(-(est / se).abs());
            assert_abs_diff_eq!(p, wald, epsilon = 0.0);
        }
    }

    #[test]
    fn one_sided_variants_partition_two_sided() {
        let null =
            NullDistribution { nu: 0.05, sigma2: 0.01, n_controls: 5, log_likelihood: 0.0 };
        let g = calibrated_p_sided(&null, 0.4, 0.2, Sidedness::Greater).unwrap();
        let l = calibrated_p_sided(&null, 0.4, 0.2, Sidedness::Less).unwrap();
        assert_abs_diff_eq!(g + l, 1.0, epsilon = 1e-12);
        let two = calibrated_p(&null, 0.4, 0.2).unwrap();
        assert_abs_diff_eq!(two, 2.0 * g.min(l), epsilon = 1e-12);
    }

    #[test]
    fn se_must_be_positive() {
        let null = NullDistribution { nu: 0.0, sigma2: 0.0, n_controls: 2, log_likelihood: 0.0 };
        assert!(calibrated_p(&null, 0.1, 0.0).is_err());
    }
}
