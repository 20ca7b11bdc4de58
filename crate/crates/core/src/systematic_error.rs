//! Systematic error model: bias mean and variance linear in the true log
//! effect size, fitted on negative and positive controls, with calibrated
//! confidence intervals recovered by inverting the estimate distribution.
//!
//! The bias of control i is modeled as Normal(a + b·θᵢ, c + d·|θᵢ|), so the
//! log estimate is marginally Normal(θᵢ + a + b·θᵢ, c + d·|θᵢ| + τᵢ²).
//! Fitting maximizes that likelihood over (a, b, c, d) with c kept positive
//! via a log parameterization and variance positivity enforced at every
//! fitted control.

use crate::controls::ControlSet;
use crate::error::{Error, Result};
use crate::interval::{BiasModelKind, CalibratedInterval, CalibrationMethod, Provenance};
use crate::optim::bfgs;
use crate::stats::{mean, norm_cdf, norm_log_pdf, sample_variance};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SystematicErrorModel {
    /// Bias-mean intercept.
    pub a: f64,
    /// Bias-mean slope on θ.
    pub b: f64,
    /// Bias-variance intercept (non-negative).
    pub c: f64,
    /// Bias-variance slope on |θ|.
    pub d: f64,
    pub n_controls: usize,
    pub log_likelihood: f64,
    /// Largest |θ| seen in fitting; the variance model is validated on
    /// [0, theta_abs_max].
    pub theta_abs_max: f64,
}

const MAX_ITER: usize = 800;
/// Absolute tolerance for the bisection on interval endpoints.
const ENDPOINT_TOL: f64 = 1e-8;

/// Gradient tolerance scaled to the number of controls.
fn grad_tol(n: usize) -> f64 {
    1e-6 * (1.0 + n as f64)
}

impl SystematicErrorModel {
    /// Model with no systematic error; calibrated intervals reduce to Wald.
    pub fn identity() -> Self {
        SystematicErrorModel {
            a: 0.0,
            b: 0.0,
            c: 0.0,
            d: 0.0,
            n_controls: 0,
            log_likelihood: 0.0,
            theta_abs_max: 0.0,
        }
    }

    /// Mean of the estimate distribution at true log effect θ.
    fn predicted_mean(&self, theta: f64) -> f64 {
        theta + self.a + self.b * theta
    }

    /// Variance of the estimate distribution at true log effect θ, for an
    /// outcome with standard error `se`. None when non-positive.
    fn predicted_variance(&self, theta: f64, se: f64) -> Option<f64> {
        let v = self.c + self.d * theta.abs() + se * se;
        (v > 0.0).then_some(v)
    }
}

/// Per-control data: (log estimate, true log effect, τ²).
fn model_data(controls: &ControlSet) -> Result<Vec<(f64, f64, f64)>> {
    controls
        .records()
        .iter()
        .map(|r| {
            let theta = r.true_log_effect().ok_or_else(|| {
                Error::Data(format!(
                    "systematic error fit requires a true effect size on every record; \
                     outcome {:?} has none",
                    r.outcome_id
                ))
            })?;
            Ok((r.log_estimate, theta, r.se_log_estimate * r.se_log_estimate))
        })
        .collect()
}

fn neg_ll_and_grad(params: &[f64], data: &[(f64, f64, f64)]) -> (f64, Vec<f64>) {
    let (a, b, gamma, d) = (params[0], params[1], params[2], params[3]);
    if !(-60.0..=60.0).contains(&gamma) {
        return (f64::INFINITY, vec![0.0; 4]);
    }
    let c = gamma.exp();
    let mut ll = 0.0;
    let mut g = [0.0; 4];
    for &(est, theta, tau2) in data {
        let abs_t = theta.abs();
        let v = c + d * abs_t + tau2;
        if v <= 0.0 {
            return (f64::INFINITY, vec![0.0; 4]);
        }
        let resid = est - theta - a - b * theta;
        ll += norm_log_pdf(est, theta + a + b * theta, v);
        g[0] += resid / v;
        g[1] += theta * resid / v;
        let dv = 0.5 * (resid * resid / (v * v) - 1.0 / v);
        g[2] += c * dv;
        g[3] += abs_t * dv;
    }
    (-ll, vec![-g[0], -g[1], -g[2], -g[3]])
}

/// Fit the systematic error model by maximum marginal likelihood. Requires
/// at least two distinct true effect sizes, otherwise the slopes b and d
/// are unidentifiable.
pub fn fit_systematic(controls: &ControlSet) -> Result<SystematicErrorModel> {
    let data = model_data(controls)?;
    if data.len() < 2 {
        return Err(Error::Data(format!("need at least 2 controls, got {}", data.len())));
    }
    let mut thetas: Vec<f64> = data.iter().map(|d| d.1).collect();
    thetas.sort_by(|x, y| x.partial_cmp(y).unwrap());
    thetas.dedup();
    if thetas.len() < 2 {
        return Err(Error::Data(
            "systematic error slopes are unidentifiable with a single true effect size; \
             provide controls at two or more effect sizes"
                .into(),
        ));
    }

    let residuals: Vec<f64> = data.iter().map(|&(est, theta, _)| est - theta).collect();
    let mean_tau2 = mean(&data.iter().map(|d| d.2).collect::<Vec<_>>());
    let resid_var = (sample_variance(&residuals) - mean_tau2).max(1e-4);
    let starts = [
        [mean(&residuals), 0.0, resid_var.ln(), 0.0],
        [0.0, 0.0, sample_variance(&residuals).max(1e-4).ln(), 0.0],
    ];

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut converged_any = false;
    for start in starts {
        let res = bfgs(&start, MAX_ITER, grad_tol(data.len()), |p| neg_ll_and_grad(p, &data));
        converged_any |= res.converged;
        if best.as_ref().map(|(_, f)| res.f < *f).unwrap_or(true) {
            best = Some((res.x, res.f));
        }
    }
    if !converged_any {
        return Err(Error::Numeric(format!(
            "systematic error fit did not converge within {MAX_ITER} iterations"
        )));
    }
    let (x, neg_ll) = best.expect("at least one start");
    let (a, b, c, d) = (x[0], x[1], x[2].exp(), x[3]);
    let theta_abs_max = data.iter().map(|d| d.1.abs()).fold(0.0, f64::max);
    // The bias variance itself (without τ²) must stay positive over the
    // fitted range; c + d·|θ| is linear in |θ| so the endpoints suffice.
    if c + d * theta_abs_max <= 0.0 {
        return Err(Error::Numeric(format!(
            "fitted bias variance non-positive at |θ| = {theta_abs_max}: c = {c}, d = {d}"
        )));
    }
    Ok(SystematicErrorModel {
        a,
        b,
        c,
        d,
        n_controls: data.len(),
        log_likelihood: -neg_ll,
        theta_abs_max,
    })
}

/// Calibrated confidence interval at `level`, solved by bracketed bisection
/// on the log scale.
pub fn calibrated_ci(
    model: &SystematicErrorModel,
    log_estimate: f64,
    se: f64,
    level: f64,
) -> Result<CalibratedInterval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level must lie in (0,1), got {level}")));
    }
    if !(se > 0.0 && se.is_finite()) {
        return Err(Error::InvalidInput(format!("se must be positive, got {se}")));
    }
    if 1.0 + model.b <= 0.0 {
        return Err(Error::Numeric(format!(
            "endpoint equation is non-monotone when 1 + b ≤ 0 (b = {}); refusing to \
             report an interval",
            model.b
        )));
    }

    // Upper-tail probability of the estimate exceeding `log_estimate` under
    // candidate θ₀ is monotone increasing in θ₀; the lower bound pins it at
    // (1−level)/2, the upper bound at (1+level)/2.
    let g = |theta0: f64| -> Option<f64> {
        let v = model.predicted_variance(theta0, se)?;
        Some(norm_cdf((log_estimate - model.predicted_mean(theta0)) / v.sqrt()))
    };
    let lower = solve_endpoint(model, log_estimate, se, &g, (1.0 + level) / 2.0)?;
    let upper = solve_endpoint(model, log_estimate, se, &g, (1.0 - level) / 2.0)?;
    Ok(CalibratedInterval {
        lower,
        upper,
        level,
        provenance: Provenance {
            method: CalibrationMethod::Calibrated,
            model: Some(BiasModelKind::Frequentist),
            seed: None,
        },
    })
}

fn solve_endpoint(
    model: &SystematicErrorModel,
    log_estimate: f64,
    se: f64,
    g: &impl Fn(f64) -> Option<f64>,
    target: f64,
) -> Result<f64> {
    // Initial bracket half-width, widened twice before giving up.
    let mut half = 10.0 * (se * se + model.c + model.d.abs() * 10.0).sqrt();
    for _attempt in 0..3 {
        let lo = valid_toward_center(log_estimate, log_estimate - half, g);
        let hi = valid_toward_center(log_estimate, log_estimate + half, g);
        if let (Some((lo, g_lo)), Some((hi, g_hi))) = (lo, hi) {
            let (f_lo, f_hi) = (g_lo - target, g_hi - target);
            if f_lo == 0.0 {
                return Ok(lo);
            }
            if f_hi == 0.0 {
                return Ok(hi);
            }
            if f_lo * f_hi < 0.0 {
                return Ok(bisect(lo, hi, f_lo, g, target));
            }
        }
        half *= 4.0;
    }
    Err(Error::Numeric(format!(
        "no sign change within the root-finding bracket around {log_estimate}; the \
         systematic error model does not extrapolate to this estimate"
    )))
}

/// Walk an invalid bracket endpoint toward the center until the predicted
/// variance is positive. Returns the point and g there.
fn valid_toward_center(
    center: f64,
    mut point: f64,
    g: &impl Fn(f64) -> Option<f64>,
) -> Option<(f64, f64)> {
    for _ in 0..80 {
        if let Some(val) = g(point) {
            return Some((point, val));
        }
        point = 0.5 * (point + center);
    }
    None
}

fn bisect(mut lo: f64, mut hi: f64, f_lo: f64, g: &impl Fn(f64) -> Option<f64>, target: f64) -> f64 {
    let mut sign_lo = f_lo.signum();
    for _ in 0..200 {
        if (hi - lo).abs() <= ENDPOINT_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        // The bracket interior stays valid for a variance linear in |θ|
        // whenever both ends are valid, except for a possible dip between
        // them; a None here means the dip crosses zero and the model has no
        // usable answer, so fall back to narrowing toward lo.
        let f_mid = match g(mid) {
            Some(v) => v - target,
            None => {
                hi = mid;
                continue;
            }
        };
        if f_mid == 0.0 {
            return mid;
        }
        if f_mid.signum() == sign_lo {
            lo = mid;
            sign_lo = f_mid.signum();
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
