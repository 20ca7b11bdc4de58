//! Univariate slice sampler (stepping out and shrinkage) used for the
//! non-conjugate variance updates inside the Gibbs sweeps.

use rand::Rng;

const MAX_STEP_OUT: usize = 64;
const MAX_SHRINK: usize = 200;

/// One slice sampler with a tunable initial interval width. The width may
/// be adapted during burn-in and is frozen afterwards.
#[derive(Clone, Debug)]
pub struct SliceSampler {
    width: f64,
}

impl SliceSampler {
    pub fn new(width: f64) -> Self {
        SliceSampler { width: width.max(1e-12) }
    }

    /// One update of `x0` toward `log_target`, restricted to the open
    /// interval `(lo, hi)` (use infinities for an unbounded side). The
    /// target may return `f64::NEG_INFINITY` inside the bounds to encode
    /// additional constraints. `x0` must satisfy the target.
    pub fn step<R: Rng, F: Fn(f64) -> f64>(
        &mut self,
        rng: &mut R,
        x0: f64,
        (lo, hi): (f64, f64),
        log_target: F,
        adapt: bool,
    ) -> f64 {
        let f0 = log_target(x0);
        debug_assert!(f0.is_finite(), "slice sampler started at an invalid state");
        // Slice height: log f(x0) − Exp(1).
        let y = f0 + rng.random::<f64>().max(f64::MIN_POSITIVE).ln();

        // Randomly position an interval of the current width around x0,
        // then step out until both ends leave the slice or hit the bounds.
        let u: f64 = rng.random();
        let mut left = (x0 - u * self.width).max(lo);
        let mut right = (left + self.width).min(hi);
        for _ in 0..MAX_STEP_OUT {
            if left <= lo || log_target(left) <= y {
                break;
            }
            left = (left - self.width).max(lo);
        }
        for _ in 0..MAX_STEP_OUT {
            if right >= hi || log_target(right) <= y {
                break;
            }
            right = (right + self.width).min(hi);
        }

        if adapt {
            // Track the typical slice extent so later steps start close.
            self.width = (0.9 * self.width + 0.1 * (right - left)).max(1e-12);
        }

        // Shrinkage: sample uniformly, collapsing the interval toward x0 on
        // rejection. Terminates because x0 itself lies in the slice.
        let mut shrink_left = left;
        let mut shrink_right = right;
        for _ in 0..MAX_SHRINK {
            let x1 = shrink_left + rng.random::<f64>() * (shrink_right - shrink_left);
            if log_target(x1) > y {
                return x1;
            }
            if x1 < x0 {
                shrink_left = x1;
            } else {
                shrink_right = x1;
            }
        }
        x0
    }
}
