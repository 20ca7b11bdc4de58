//! L1-regularized Poisson regression with a log-duration offset, fitted by
//! IRLS with cyclic coordinate descent, and the regularization weight
//! chosen by cross-validated held-out deviance over a geometric grid.

use crate::error::{Error, Result};

use super::SyntheticCohort;

/// Fitted rate model: outcome count ~ Poisson(duration · exp(intercept +
/// covariates·coefficients)). The intercept is never penalized.
#[derive(Clone, Debug, PartialEq)]
pub struct PoissonModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub l1_penalty: f64,
    /// Set when the fit degenerated (for example all-zero outcomes).
    pub notice: Option<String>,
}

impl PoissonModel {
    /// Predicted event count for an entry (rate × duration).
    pub fn predicted_rate(&self, duration_days: u32, covariates: &[f64]) -> f64 {
        let eta: f64 = self.intercept
            + covariates
                .iter()
                .zip(&self.coefficients)
                .map(|(x, w)| x * w)
                .sum::<f64>();
        duration_days as f64 * eta.exp()
    }
}

/// Number of penalty values on the geometric grid.
const GRID_SIZE: usize = 30;
/// Smallest grid penalty as a fraction of the largest.
const GRID_MIN_RATIO: f64 = 1e-4;
/// KKT tolerance is 1e-6 scaled by the total outcome count.
const KKT_TOL: f64 = 1e-6;
const MAX_IRLS: usize = 200;
const MAX_CD: usize = 2000;
const RATE_FLOOR: f64 = 1e-12;

struct Design<'a> {
    y: Vec<f64>,
    log_d: Vec<f64>,
    x: Vec<&'a [f64]>,
    p: usize,
}

impl<'a> Design<'a> {
    fn from_cohort(cohort: &'a SyntheticCohort, keep: &dyn Fn(usize) -> bool) -> Design<'a> {
        let mut y = Vec::new();
        let mut log_d = Vec::new();
        let mut x = Vec::new();
        for (i, e) in cohort.entries.iter().enumerate() {
            if keep(i) {
                y.push(e.outcome_count as f64);
                log_d.push((e.duration_days as f64).ln());
                x.push(e.covariates.as_slice());
            }
        }
        let p = x.first().map(|r| r.len()).unwrap_or(0);
        Design { y, log_d, x, p }
    }

    fn n(&self) -> usize {
        self.y.len()
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

struct FitState {
    intercept: f64,
    coefs: Vec<f64>,
    eta: Vec<f64>, // intercept + x·w (offset excluded)
}

impl FitState {
    fn new(design: &Design) -> FitState {
        let total_y: f64 = design.y.iter().sum();
        let total_d: f64 = design.log_d.iter().map(|l| l.exp()).sum();
        let intercept = ((total_y.max(0.5)) / total_d).ln();
        FitState { intercept, coefs: vec![0.0; design.p], eta: vec![intercept; design.n()] }
    }

    fn rates(&self, design: &Design) -> Vec<f64> {
        (0..design.n())
            .map(|i| (self.eta[i] + design.log_d[i]).exp().max(RATE_FLOOR))
            .collect()
    }
}

/// One penalized fit at a fixed penalty, warm-started from `state`.
fn fit_at_penalty(design: &Design, penalty: f64, state: &mut FitState) -> Result<()> {
    let n = design.n();
    for _irls in 0..MAX_IRLS {
        let intercept_before = state.intercept;
        let coefs_before = state.coefs.clone();
        let rates = state.rates(design);
        // Weighted least squares on the working response.
        let w = rates;
        let z: Vec<f64> = (0..n)
            .map(|i| state.eta[i] + (design.y[i] - w[i]) / w[i])
            .collect();

        let mut max_delta: f64;
        let mut cd_iters = 0;
        loop {
            max_delta = 0.0;
            // Intercept (unpenalized).
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..n {
                num += w[i] * (z[i] - (state.eta[i] - state.intercept));
                den += w[i];
            }
            let new_intercept = num / den;
            let delta0 = new_intercept - state.intercept;
            if delta0 != 0.0 {
                for e in state.eta.iter_mut() {
                    *e += delta0;
                }
                state.intercept = new_intercept;
                max_delta = max_delta.max(delta0.abs());
            }
            // Covariates with soft thresholding.
            for j in 0..design.p {
                let old = state.coefs[j];
                let (mut num, mut den) = (0.0, 0.0);
                for i in 0..n {
                    let xij = design.x[i][j];
                    if xij != 0.0 {
                        let partial = z[i] - state.eta[i] + xij * old;
                        num += w[i] * xij * partial;
                        den += w[i] * xij * xij;
                    }
                }
                if den == 0.0 {
                    continue;
                }
                let new = soft_threshold(num, penalty) / den;
                let delta = new - old;
                if delta != 0.0 {
                    for i in 0..n {
                        let xij = design.x[i][j];
                        if xij != 0.0 {
                            state.eta[i] += xij * delta;
                        }
                    }
                    state.coefs[j] = new;
                    max_delta = max_delta.max(delta.abs());
                }
            }
            cd_iters += 1;
            if max_delta < 1e-11 || cd_iters >= MAX_CD {
                break;
            }
        }

        // Converged when a full reweighting pass stops moving anything and
        // the exact KKT conditions hold.
        let irls_move = state
            .coefs
            .iter()
            .zip(&coefs_before)
            .map(|(a, b)| (a - b).abs())
            .fold((state.intercept - intercept_before).abs(), f64::max);
        if irls_move < 1e-10 && kkt_satisfied(design, state, penalty) {
            return Ok(());
        }
    }
    if kkt_satisfied(design, state, penalty) {
        return Ok(());
    }
    Err(Error::Numeric(format!(
        "poisson coordinate descent did not reach the gradient tolerance at penalty {penalty}"
    )))
}

/// KKT conditions for the L1-penalized Poisson likelihood at gradient
/// tolerance 1e-6 (scaled by total outcome count).
fn kkt_satisfied(design: &Design, state: &FitState, penalty: f64) -> bool {
    let rates = state.rates(design);
    let scale = design.y.iter().sum::<f64>().max(1.0);
    let tol = KKT_TOL * scale;
    let g0: f64 = (0..design.n()).map(|i| design.y[i] - rates[i]).sum();
    if g0.abs() > tol {
        return false;
    }
    for j in 0..design.p {
        let gj: f64 = (0..design.n())
            .map(|i| design.x[i][j] * (design.y[i] - rates[i]))
            .sum();
        let ok = if state.coefs[j] != 0.0 {
            (gj - penalty * state.coefs[j].signum()).abs() <= tol
        } else {
            gj.abs() <= penalty + tol
        };
        if !ok {
            return false;
        }
    }
    true
}

/// Poisson deviance of `design` under `state`'s linear predictor.
fn deviance(design: &Design, intercept: f64, coefs: &[f64]) -> f64 {
    let mut dev = 0.0;
    for i in 0..design.n() {
        let eta: f64 = intercept
            + design.x[i].iter().zip(coefs).map(|(x, w)| x * w).sum::<f64>();
        let mu = (eta + design.log_d[i]).exp().max(RATE_FLOOR);
        let y = design.y[i];
        let term = if y > 0.0 { y * (y / mu).ln() - (y - mu) } else { mu };
        dev += 2.0 * term;
    }
    dev
}

/// Penalty that zeroes every covariate: the largest absolute score at the
/// intercept-only fit.
fn penalty_max(design: &Design) -> f64 {
    let total_y: f64 = design.y.iter().sum();
    let total_d: f64 = design.log_d.iter().map(|l| l.exp()).sum();
    let rate = total_y / total_d;
    let mut max_abs: f64 = 0.0;
    for j in 0..design.p {
        let gj: f64 = (0..design.n())
            .map(|i| design.x[i][j] * (design.y[i] - rate * design.log_d[i].exp()))
            .sum();
        max_abs = max_abs.max(gj.abs());
    }
    max_abs
}

fn penalty_grid(lambda_max: f64) -> Vec<f64> {
    let lambda_max = if lambda_max > 0.0 { lambda_max } else { 1.0 };
    let ratio = GRID_MIN_RATIO.powf(1.0 / (GRID_SIZE - 1) as f64);
    (0..GRID_SIZE).map(|k| lambda_max * ratio.powi(k as i32)).collect()
}

/// Fit along the penalty path (largest penalty first) with warm starts,
/// returning the coefficients at each grid point.
fn fit_path(design: &Design, grid: &[f64]) -> Result<Vec<(f64, Vec<f64>)>> {
    let mut state = FitState::new(design);
    let mut out = Vec::with_capacity(grid.len());
    for &penalty in grid {
        fit_at_penalty(design, penalty, &mut state)?;
        out.push((state.intercept, state.coefs.clone()));
    }
    Ok(out)
}

/// Fit the L1-regularized Poisson outcome model with `folds`-fold
/// cross-validation for the penalty.
pub fn fit_poisson_l1(cohort: &SyntheticCohort, folds: usize) -> Result<PoissonModel> {
    cohort.validate()?;
    if folds < 2 {
        return Err(Error::InvalidInput(format!("folds must be at least 2, got {folds}")));
    }
    if cohort.entries.len() < folds {
        return Err(Error::InvalidInput(format!(
            "cohort has {} entries, fewer than {folds} folds",
            cohort.entries.len()
        )));
    }

    let full = Design::from_cohort(cohort, &|_| true);
    if full.y.iter().sum::<f64>() == 0.0 {
        // Nothing to learn from; rates stay positive via a half-count
        // continuity correction on the intercept.
        let total_d: f64 = full.log_d.iter().map(|l| l.exp()).sum();
        return Ok(PoissonModel {
            intercept: (0.5 / total_d).ln(),
            coefficients: vec![0.0; full.p],
            l1_penalty: 0.0,
            notice: Some("all outcome counts are zero; returned intercept-only model".into()),
        });
    }

    let grid = penalty_grid(penalty_max(&full));

    // Deterministic fold assignment by entry index.
    let mut cv_dev = vec![0.0f64; grid.len()];
    for fold in 0..folds {
        let train = Design::from_cohort(cohort, &|i| i % folds != fold);
        let test = Design::from_cohort(cohort, &|i| i % folds == fold);
        if train.y.iter().sum::<f64>() == 0.0 {
            // A degenerate training fold says nothing about the penalty.
            continue;
        }
        let path = fit_path(&train, &grid)?;
        for (k, (intercept, coefs)) in path.iter().enumerate() {
            cv_dev[k] += deviance(&test, *intercept, coefs);
        }
    }
    let best = cv_dev
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite deviance"))
        .map(|(k, _)| k)
        .expect("non-empty grid");

    let path = fit_path(&full, &grid[..=best])?;
    let (intercept, coefficients) = path.into_iter().last().expect("fitted path");
    Ok(PoissonModel { intercept, coefficients, l1_penalty: grid[best], notice: None })
}

/// Fit at one fixed penalty (no cross-validation).
pub fn fit_poisson_l1_at(cohort: &SyntheticCohort, penalty: f64) -> Result<PoissonModel> {
    cohort.validate()?;
    if !(penalty >= 0.0 && penalty.is_finite()) {
        return Err(Error::InvalidInput(format!("penalty must be non-negative, got {penalty}")));
    }
    let design = Design::from_cohort(cohort, &|_| true);
    let mut state = FitState::new(&design);
    fit_at_penalty(&design, penalty, &mut state)?;
    Ok(PoissonModel {
        intercept: state.intercept,
        coefficients: state.coefs,
        l1_penalty: penalty,
        notice: None,
    })
}
