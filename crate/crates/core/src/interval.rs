//! Calibrated interval type shared by the frequentist and Bayesian
//! calibration paths, with provenance labels.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalibrationMethod {
    Calibrated,
    Uncalibrated,
}

impl fmt::Display for CalibrationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalibrationMethod::Calibrated => write!(f, "calibrated"),
            CalibrationMethod::Uncalibrated => write!(f, "uncalibrated"),
        }
    }
}

/// Which bias model produced an interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiasModelKind {
    Constant,
    Linear,
    Frequentist,
}

impl fmt::Display for BiasModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BiasModelKind::Constant => write!(f, "constant"),
            BiasModelKind::Linear => write!(f, "linear"),
            BiasModelKind::Frequentist => write!(f, "frequentist"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Provenance {
    pub method: CalibrationMethod,
    pub model: Option<BiasModelKind>,
    pub seed: Option<u64>,
}

/// Lower/upper bound on the log scale, with how it was produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibratedInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub provenance: Provenance,
}

impl CalibratedInterval {
    /// Closed-interval containment of a log effect size.
    pub fn covers(&self, log_true: f64) -> bool {
        self.lower <= log_true && log_true <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}
