//! Coverage and RMSE evaluation harness: family-safe train/test split,
//! model fitting per training design, calibration of every held-out
//! record, and plot-ready artifact emission.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::artifact::ArtifactHeader;
use crate::bayes::{self, McmcConfig};
use crate::controls::{ControlSet, SplitPlan};
use crate::error::{Error, Result};
use crate::interval::{
    BiasModelKind, CalibratedInterval, CalibrationMethod, Provenance,
};
use crate::stats::z_for_level;
use crate::systematic_error::{calibrated_ci, fit_systematic, SystematicErrorModel};

/// Nominal coverage target used by the RMSE metric.
pub const NOMINAL_COVERAGE: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainingDesign {
    /// Train on negative and positive controls.
    NegPosTrain,
    /// Train on negative controls only.
    NegOnlyTrain,
}

impl fmt::Display for TrainingDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainingDesign::NegPosTrain => write!(f, "neg+pos"),
            TrainingDesign::NegOnlyTrain => write!(f, "neg-only"),
        }
    }
}

/// Coverage for one true effect size group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoverageGroup {
    /// True effect size on the ratio scale.
    pub theta: f64,
    pub covered: usize,
    pub tested: usize,
}

impl CoverageGroup {
    pub fn coverage(&self) -> f64 {
        self.covered as f64 / self.tested as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageReport {
    /// Groups sorted by effect size.
    pub groups: Vec<CoverageGroup>,
    pub method: CalibrationMethod,
    pub model: BiasModelKind,
    pub training: TrainingDesign,
}

impl CoverageReport {
    pub fn group(&self, theta: f64) -> Option<&CoverageGroup> {
        self.groups.iter().find(|g| g.theta == theta)
    }

    pub fn total_tested(&self) -> usize {
        self.groups.iter().map(|g| g.tested).sum()
    }
}

/// Group intervals by true effect size and count closed-interval
/// containment of the true log effect.
pub fn coverage(
    intervals: &[(CalibratedInterval, f64)],
    method: CalibrationMethod,
    model: BiasModelKind,
    training: TrainingDesign,
) -> Result<CoverageReport> {
    if intervals.is_empty() {
        return Err(Error::InvalidInput("coverage needs at least one interval".into()));
    }
    let mut groups: Vec<CoverageGroup> = Vec::new();
    for &(interval, theta) in intervals {
        let covered = interval.covers(theta.ln());
        match groups.iter_mut().find(|g| g.theta == theta) {
            Some(g) => {
                g.tested += 1;
                g.covered += usize::from(covered);
            }
            None => groups.push(CoverageGroup {
                theta,
                covered: usize::from(covered),
                tested: 1,
            }),
        }
    }
    groups.sort_by(|a, b| a.theta.partial_cmp(&b.theta).expect("finite effect sizes"));
    Ok(CoverageReport { groups, method, model, training })
}

/// Root mean squared deviation of per-group coverage from the nominal
/// level `w`, with every group weighted equally.
pub fn rmse(report: &CoverageReport, w: f64) -> f64 {
    let t = report.groups.len() as f64;
    let sum: f64 = report
        .groups
        .iter()
        .map(|g| {
            let d = g.coverage() - w;
            d * d
        })
        .sum();
    (sum / t).sqrt()
}

/// Per-record outcome of a protocol run.
#[derive(Clone, Debug)]
pub struct RecordEvaluation {
    pub true_effect_size: f64,
    pub log_estimate: f64,
    pub se_log_estimate: f64,
    pub calibrated: CalibratedInterval,
    pub uncalibrated: CalibratedInterval,
}

impl RecordEvaluation {
    pub fn covered_calibrated(&self) -> bool {
        self.calibrated.covers(self.true_effect_size.ln())
    }

    pub fn covered_uncalibrated(&self) -> bool {
        self.uncalibrated.covers(self.true_effect_size.ln())
    }
}

#[derive(Clone, Debug)]
pub struct ProtocolResult {
    pub calibrated: CoverageReport,
    pub uncalibrated: CoverageReport,
    pub calibrated_rmse: f64,
    pub uncalibrated_rmse: f64,
    pub records: Vec<RecordEvaluation>,
    pub split: SplitPlan,
    pub level: f64,
}

/// Dispatchable calibrator fitted on the training side.
enum FittedCalibrator {
    Bayes(bayes::PosteriorSamples),
    Frequentist(SystematicErrorModel),
}

impl FittedCalibrator {
    fn calibrate(&self, log_estimate: f64, se: f64, level: f64) -> Result<CalibratedInterval> {
        match self {
            FittedCalibrator::Bayes(samples) => {
                bayes::calibrate_posterior(samples, log_estimate, se, level)
            }
            FittedCalibrator::Frequentist(model) => calibrated_ci(model, log_estimate, se, level),
        }
    }
}

/// Run the evaluation protocol: split by family, fit the chosen model on
/// the training design, calibrate every test record, and report calibrated
/// and uncalibrated (Wald) coverage with their RMSE against 95%.
///
/// The linear model cannot be trained on negative controls alone and that
/// combination is rejected.
pub fn run_protocol(
    universe: &ControlSet,
    design: TrainingDesign,
    model: BiasModelKind,
    config: &McmcConfig,
    fraction: f64,
    seed: u64,
) -> Result<ProtocolResult> {
    if model == BiasModelKind::Linear && design == TrainingDesign::NegOnlyTrain {
        return Err(Error::InvalidInput(
            "the linear bias model cannot be evaluated with negative-only training; \
             its slopes need positive controls"
                .into(),
        ));
    }
    let level = NOMINAL_COVERAGE;
    let split = universe.split_by_family(fraction, seed)?;
    let train_all = universe.subset_by_families(&split.train_families);
    let test = universe.subset_by_families(&split.test_families);
    let train = match design {
        TrainingDesign::NegPosTrain => train_all,
        TrainingDesign::NegOnlyTrain => train_all.negatives_only()?,
    };

    let calibrator = match model {
        BiasModelKind::Constant => FittedCalibrator::Bayes(bayes::fit_constant(&train, config)?),
        BiasModelKind::Linear => FittedCalibrator::Bayes(bayes::fit_linear(&train, config)?),
        BiasModelKind::Frequentist => match design {
            TrainingDesign::NegPosTrain => {
                FittedCalibrator::Frequentist(fit_systematic(&train)?)
            }
            TrainingDesign::NegOnlyTrain => {
                // Negatives identify only the intercept terms; the empirical
                // null supplies them with the slopes pinned at zero.
                let null = crate::empirical_null::fit_null(&train)?;
                FittedCalibrator::Frequentist(SystematicErrorModel {
                    a: null.nu,
                    b: 0.0,
                    c: null.sigma2,
                    d: 0.0,
                    n_controls: null.n_controls,
                    log_likelihood: null.log_likelihood,
                    theta_abs_max: 0.0,
                })
            }
        },
    };

    let z = z_for_level(level);
    let records: Result<Vec<RecordEvaluation>> = test
        .records()
        .par_iter()
        .map(|r| {
            let theta = r.true_effect_size.ok_or_else(|| {
                Error::Data(format!(
                    "test record {:?} has no true effect size; the protocol needs labeled \
                     controls",
                    r.outcome_id
                ))
            })?;
            let calibrated = calibrator.calibrate(r.log_estimate, r.se_log_estimate, level)?;
            let half = z * r.se_log_estimate;
            let uncalibrated = CalibratedInterval {
                lower: r.log_estimate - half,
                upper: r.log_estimate + half,
                level,
                provenance: Provenance {
                    method: CalibrationMethod::Uncalibrated,
                    model: None,
                    seed: None,
                },
            };
            Ok(RecordEvaluation {
                true_effect_size: theta,
                log_estimate: r.log_estimate,
                se_log_estimate: r.se_log_estimate,
                calibrated,
                uncalibrated,
            })
        })
        .collect();
    let records = records?;

    let cal_pairs: Vec<(CalibratedInterval, f64)> =
        records.iter().map(|r| (r.calibrated, r.true_effect_size)).collect();
    let uncal_pairs: Vec<(CalibratedInterval, f64)> =
        records.iter().map(|r| (r.uncalibrated, r.true_effect_size)).collect();
    let calibrated = coverage(&cal_pairs, CalibrationMethod::Calibrated, model, design)?;
    let uncalibrated = coverage(&uncal_pairs, CalibrationMethod::Uncalibrated, model, design)?;
    let calibrated_rmse = rmse(&calibrated, NOMINAL_COVERAGE);
    let uncalibrated_rmse = rmse(&uncalibrated, NOMINAL_COVERAGE);
    Ok(ProtocolResult {
        calibrated,
        uncalibrated,
        calibrated_rmse,
        uncalibrated_rmse,
        records,
        split,
        level,
    })
}

fn theta_tag(theta: f64) -> String {
    format!("{theta}")
}

/// Write coverage, RMSE, and per-effect-size scatter CSVs (plus simple SVG
/// figures when `render_svg` is set) under `out_dir`. Returns the paths
/// written.
pub fn emit_figures(
    result: &ProtocolResult,
    out_dir: &Path,
    render_svg: bool,
    header: &ArtifactHeader,
) -> Result<Vec<PathBuf>> {
    if result.records.is_empty() {
        return Err(Error::InvalidInput("nothing to emit: no evaluated records".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let coverage_path = out_dir.join("coverage.csv");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&coverage_path)?);
        writeln!(out, "{}", header.comment_line())?;
        writeln!(out, "method,model,training,effect_size,tested,covered,coverage")?;
        for report in [&result.calibrated, &result.uncalibrated] {
            for g in &report.groups {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    report.method,
                    report.model,
                    report.training,
                    g.theta,
                    g.tested,
                    g.covered,
                    g.coverage()
                )?;
            }
        }
    }
    written.push(coverage_path);

    let rmse_path = out_dir.join("rmse.csv");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&rmse_path)?);
        writeln!(out, "{}", header.comment_line())?;
        writeln!(out, "method,model,training,rmse,nominal")?;
        for (report, value) in [
            (&result.calibrated, result.calibrated_rmse),
            (&result.uncalibrated, result.uncalibrated_rmse),
        ] {
            writeln!(
                out,
                "{},{},{},{},{}",
                report.method, report.model, report.training, value, NOMINAL_COVERAGE
            )?;
        }
    }
    written.push(rmse_path);

    for g in &result.calibrated.groups {
        let path = out_dir.join(format!("scatter_{}.csv", theta_tag(g.theta)));
        let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(out, "{}", header.comment_line())?;
        writeln!(
            out,
            "log_estimate,se_log_estimate,cal_lower,cal_upper,covered_calibrated,\
             covered_uncalibrated"
        )?;
        for r in result.records.iter().filter(|r| r.true_effect_size == g.theta) {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.log_estimate,
                r.se_log_estimate,
                r.calibrated.lower,
                r.calibrated.upper,
                r.covered_calibrated(),
                r.covered_uncalibrated()
            )?;
        }
        out.flush()?;
        written.push(path);
    }

    if render_svg {
        let fig_dir = out_dir.join("figures");
        std::fs::create_dir_all(&fig_dir)?;
        let rmse_svg = fig_dir.join("rmse.svg");
        std::fs::write(
            &rmse_svg,
            rmse_bars_svg(result, header),
        )?;
        written.push(rmse_svg);
        for g in &result.calibrated.groups {
            let path = fig_dir.join(format!("scatter_{}.svg", theta_tag(g.theta)));
            std::fs::write(&path, scatter_svg(result, g.theta, header))?;
            written.push(path);
        }
    }

    Ok(written)
}

fn svg_header(width: f64, height: f64, header: &ArtifactHeader) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n<!-- {} -->\n",
        header.comment_line()
    )
}

fn rmse_bars_svg(result: &ProtocolResult, header: &ArtifactHeader) -> String {
    let (w, h) = (360.0, 240.0);
    let mut svg = svg_header(w, h, header);
    let max = result.calibrated_rmse.max(result.uncalibrated_rmse).max(1e-6);
    let bars = [
        ("calibrated", result.calibrated_rmse, "#4477aa"),
        ("uncalibrated", result.uncalibrated_rmse, "#cc6677"),
    ];
    for (i, (label, value, color)) in bars.iter().enumerate() {
        let bar_h = 160.0 * value / max;
        let x = 60.0 + i as f64 * 140.0;
        let y = 200.0 - bar_h;
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"80\" height=\"{bar_h}\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"218\" font-size=\"12\" text-anchor=\"middle\">{label}</text>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{value:.3}</text>\n",
            x + 40.0,
            x + 40.0,
            y - 4.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn scatter_svg(result: &ProtocolResult, theta: f64, header: &ArtifactHeader) -> String {
    let (w, h) = (360.0, 280.0);
    let mut svg = svg_header(w, h, header);
    let rows: Vec<&RecordEvaluation> = result
        .records
        .iter()
        .filter(|r| r.true_effect_size == theta)
        .collect();
    let (mut min_x, mut max_x, mut max_se) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for r in &rows {
        min_x = min_x.min(r.log_estimate);
        max_x = max_x.max(r.log_estimate);
        max_se = max_se.max(r.se_log_estimate);
    }
    let span = (max_x - min_x).max(1e-6);
    for r in &rows {
        let px = 20.0 + 320.0 * (r.log_estimate - min_x) / span;
        let py = 250.0 - 220.0 * r.se_log_estimate / max_se.max(1e-6);
        let color = if r.covered_calibrated() { "#4477aa" } else { "#cc6677" };
        svg.push_str(&format!("<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"2\" fill=\"{color}\"/>\n"));
    }
    let true_px = 20.0 + 320.0 * (theta.ln() - min_x) / span;
    svg.push_str(&format!(
        "<line x1=\"{true_px:.2}\" y1=\"20\" x2=\"{true_px:.2}\" y2=\"250\" \
         stroke=\"#333\" stroke-dasharray=\"4 3\"/>\n\
         <text x=\"{}\" y=\"270\" font-size=\"12\" text-anchor=\"middle\">effect size {theta}\
         </text>\n",
        w / 2.0
    ));
    svg.push_str("</svg>\n");
    svg
}
