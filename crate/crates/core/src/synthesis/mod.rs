//! Positive-control synthesis: outcome injection on synthetic cohorts via
//! an L1-regularized Poisson outcome model, and a fully synthetic
//! control-universe generator for end-to-end evaluation.

mod poisson;

pub use poisson::{fit_poisson_l1, fit_poisson_l1_at, PoissonModel};

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;

use crate::artifact::ArtifactHeader;
use crate::controls::{ControlRecord, ControlScope, ControlSet};
use crate::error::{Error, Result};

/// One cohort entry: time at risk, observed outcome count, and baseline
/// covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortEntry {
    pub duration_days: u32,
    pub outcome_count: u64,
    pub covariates: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SyntheticCohort {
    pub entries: Vec<CohortEntry>,
}

impl SyntheticCohort {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Data("cohort has no entries".into()));
        }
        let width = self.entries[0].covariates.len();
        for (i, e) in self.entries.iter().enumerate() {
            if e.duration_days == 0 {
                return Err(Error::Data(format!("entry {i}: duration must be positive")));
            }
            if e.covariates.len() != width {
                return Err(Error::Data(format!(
                    "entry {i}: covariate width {} differs from {}",
                    e.covariates.len(),
                    width
                )));
            }
            if e.covariates.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("entry {i}: non-finite covariate")));
            }
        }
        Ok(())
    }

    pub fn total_outcomes(&self) -> u64 {
        self.entries.iter().map(|e| e.outcome_count).sum()
    }

    pub fn total_duration(&self) -> f64 {
        self.entries.iter().map(|e| e.duration_days as f64).sum()
    }

    /// CSV schema: `duration_days,outcome_count,z0,...`; `#` lines skipped.
    pub fn load_csv(path: &Path) -> Result<SyntheticCohort> {
        let file = std::fs::File::open(path)?;
        let mut entries = Vec::new();
        let mut header_seen = false;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            if !header_seen {
                if !line.starts_with("duration_days,outcome_count") {
                    return Err(Error::Data(format!(
                        "cohort header must start with duration_days,outcome_count; got {line:?}"
                    )));
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 2 {
                return Err(Error::Data(format!("row {idx}: too few columns")));
            }
            let duration_days: u32 = fields[0]
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("row {idx}: bad duration {:?}", fields[0])))?;
            let outcome_count: u64 = fields[1]
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("row {idx}: bad count {:?}", fields[1])))?;
            let covariates: std::result::Result<Vec<f64>, _> =
                fields[2..].iter().map(|f| f.trim().parse::<f64>()).collect();
            let covariates =
                covariates.map_err(|_| Error::Data(format!("row {idx}: bad covariate")))?;
            entries.push(CohortEntry { duration_days, outcome_count, covariates });
        }
        let cohort = SyntheticCohort { entries };
        cohort.validate()?;
        Ok(cohort)
    }

    pub fn write_csv(&self, path: &Path, header: &ArtifactHeader) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{}", header.comment_line())?;
        let width = self.entries.first().map(|e| e.covariates.len()).unwrap_or(0);
        let cols: Vec<String> = (0..width).map(|j| format!("z{j}")).collect();
        if cols.is_empty() {
            writeln!(out, "duration_days,outcome_count")?;
        } else {
            writeln!(out, "duration_days,outcome_count,{}", cols.join(","))?;
        }
        for e in &self.entries {
            let z: Vec<String> = e.covariates.iter().map(|x| x.to_string()).collect();
            if z.is_empty() {
                writeln!(out, "{},{}", e.duration_days, e.outcome_count)?;
            } else {
                writeln!(out, "{},{},{}", e.duration_days, e.outcome_count, z.join(","))?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Synthesize a cohort with Bernoulli covariates and Poisson outcomes
    /// at a baseline daily rate. Convenience for tests and demos.
    pub fn synthesize(
        entries: usize,
        covariates: usize,
        prevalence: f64,
        base_daily_rate: f64,
        effects: &[f64],
        seed: u64,
    ) -> Result<SyntheticCohort> {
        if entries == 0 {
            return Err(Error::InvalidInput("entries must be positive".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let out: Vec<CohortEntry> = (0..entries)
            .map(|_| {
                let duration_days = 30 + (rng.random::<u32>() % 336);
                let z: Vec<f64> = (0..covariates)
                    .map(|_| f64::from(rng.random::<f64>() < prevalence))
                    .collect();
                let eta: f64 = z
                    .iter()
                    .zip(effects.iter().chain(std::iter::repeat(&0.0)))
                    .map(|(x, w)| x * w)
                    .sum();
                let mean = duration_days as f64 * base_daily_rate * eta.exp();
                let outcome_count = poisson_draw(&mut rng, mean);
                CohortEntry { duration_days, outcome_count, covariates: z }
            })
            .collect();
        let cohort = SyntheticCohort { entries: out };
        cohort.validate()?;
        Ok(cohort)
    }
}

fn poisson_draw<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    rand_distr::Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

/// Result of one successful (or abandoned) injection run.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionResult {
    /// Outcome counts after injection, aligned with the cohort entries.
    pub modified_counts: Vec<u64>,
    /// Ratio of injected to original outcome rate.
    pub achieved_ratio: f64,
    pub target_theta: f64,
    /// Number of attempts consumed (the accepted attempt included).
    pub iterations: usize,
    pub seed: u64,
}

/// Minimum total outcome count before injection is allowed.
pub const MIN_OUTCOMES_FOR_INJECTION: u64 = 25;

/// Inject simulated outcomes into a cohort until the rate ratio against the
/// unmodified cohort is within `epsilon` of `theta`. Every attempt
/// resamples all additions from scratch: entry i gains a Poisson draw with
/// mean (θ−1)·(fitted rate)ᵢ on top of its original count.
pub fn inject(
    cohort: &SyntheticCohort,
    model: &PoissonModel,
    theta: f64,
    epsilon: f64,
    seed: u64,
    max_iter: usize,
) -> Result<InjectionResult> {
    cohort.validate()?;
    if !(theta > 1.0 && theta.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "target effect size must exceed 1 (a ratio of 1 is the unmodified cohort), got {theta}"
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    if max_iter == 0 {
        return Err(Error::InvalidInput("max_iter must be positive".into()));
    }
    let total_y = cohort.total_outcomes();
    if total_y < MIN_OUTCOMES_FOR_INJECTION {
        return Err(Error::Data(format!(
            "cohort has {total_y} outcomes, below the minimum of \
             {MIN_OUTCOMES_FOR_INJECTION} for positive-control generation"
        )));
    }

    let rates: Vec<f64> = cohort
        .entries
        .iter()
        .map(|e| model.predicted_rate(e.duration_days, &e.covariates))
        .collect();
    if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Numeric("model predicts a non-positive or non-finite rate".into()));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<u64>)> = None;
    for attempt in 1..=max_iter {
        let mut modified = Vec::with_capacity(cohort.entries.len());
        let mut total_mod: u64 = 0;
        for (entry, rate) in cohort.entries.iter().zip(&rates) {
            let extra = poisson_draw(&mut rng, (theta - 1.0) * rate);
            let y_star = entry.outcome_count + extra;
            total_mod += y_star;
            modified.push(y_star);
        }
        // Durations cancel: the cohorts are identical apart from counts.
        let ratio = total_mod as f64 / total_y as f64;
        if (ratio - theta).abs() <= epsilon {
            return Ok(InjectionResult {
                modified_counts: modified,
                achieved_ratio: ratio,
                target_theta: theta,
                iterations: attempt,
                seed,
            });
        }
        if best
            .as_ref()
            .map(|(r, _)| (ratio - theta).abs() < (r - theta).abs())
            .unwrap_or(true)
        {
            best = Some((ratio, modified));
        }
    }
    let (closest, _) = best.expect("at least one attempt");
    Err(Error::Numeric(format!(
        "injection did not reach |ratio − {theta}| ≤ {epsilon} within {max_iter} attempts; \
         closest achieved ratio was {closest}"
    )))
}

/// Configuration for the synthetic control universe.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationSpec {
    pub families: usize,
    /// Per-record standard error drawn uniformly from this range.
    pub se_range: (f64, f64),
    /// Bias ~ Normal(bias_mean + bias_slope·θ, bias_sd²) with θ the true
    /// log effect; slope 0 gives the constant generator.
    pub bias_mean: f64,
    pub bias_sd: f64,
    pub bias_slope: f64,
    pub seed: u64,
    pub database_id: String,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec {
            families: 100,
            se_range: (0.05, 0.3),
            bias_mean: 0.0,
            bias_sd: 0.0,
            bias_slope: 0.0,
            seed: 0,
            database_id: "SYNTH".into(),
        }
    }
}

/// Positive-control target effect sizes derived from every negative
/// control.
pub const POSITIVE_THETAS: [f64; 3] = [1.5, 2.0, 4.0];

/// Generate a schema-valid control universe: one negative control per
/// family plus positives at ratios 1.5, 2 and 4, with estimates equal to
/// the true log effect plus bias plus sampling noise.
pub fn simulate_control_universe(spec: &SimulationSpec) -> Result<ControlSet> {
    if spec.families < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 families, got {}",
            spec.families
        )));
    }
    let (se_lo, se_hi) = spec.se_range;
    if !(se_lo > 0.0 && se_hi >= se_lo && se_hi.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "se range must satisfy 0 < lo ≤ hi, got ({se_lo}, {se_hi})"
        )));
    }
    if spec.bias_sd < 0.0 {
        return Err(Error::InvalidInput("bias sd must be non-negative".into()));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.families * 4);
    for f in 0..spec.families {
        let family_id = format!("FAM-{f:05}");
        for te in std::iter::once(1.0).chain(POSITIVE_THETAS) {
            let theta = te.ln();
            let se = if se_hi > se_lo {
                se_lo + rng.random::<f64>() * (se_hi - se_lo)
            } else {
                se_lo
            };
            let bias_center = spec.bias_mean + spec.bias_slope * theta;
            let bias = if spec.bias_sd > 0.0 {
                rand_distr::Normal::new(bias_center, spec.bias_sd)
                    .expect("positive sd")
                    .sample(&mut rng)
            } else {
                bias_center
            };
            let noise = rand_distr::Normal::new(0.0, se).expect("positive se").sample(&mut rng);
            records.push(ControlRecord {
                database_id: spec.database_id.clone(),
                target_id: format!("T-{f:05}"),
                comparator_id: format!("C-{f:05}"),
                outcome_id: format!("O-{f:05}"),
                family_id: family_id.clone(),
                true_effect_size: Some(te),
                log_estimate: theta + bias + noise,
                se_log_estimate: se,
            });
        }
    }
    ControlSet::from_records(
        records,
        ControlScope { database_id: spec.database_id.clone(), analysis: "simulated".into() },
    )
}
