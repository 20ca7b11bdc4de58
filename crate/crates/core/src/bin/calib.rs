//! Command-line front end: one binary, one subcommand per operation.
//! Logs go to stderr, data goes to files, and every artifact carries a
//! provenance header with tool version, subcommand, and seed.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use calib_core::artifact::ArtifactHeader;
use calib_core::bayes::{self, McmcConfig, PosteriorSamples};
use calib_core::controls::{ControlSet, CSV_COLUMNS};
use calib_core::empirical_null::{self, NullDistribution, Sidedness};
use calib_core::error::{Error, Result};
use calib_core::evaluation::{self, TrainingDesign};
use calib_core::interval::BiasModelKind;
use calib_core::synthesis::{self, SimulationSpec, SyntheticCohort};
use calib_core::systematic_error::{self, SystematicErrorModel};

/// Environment variable consulted when --seed is not given.
const SEED_ENV: &str = "CALIB_SEED";

#[derive(Parser, Debug)]
#[command(name = "calib", version)]
#[command(about = "Calibrate effect-size estimates against negative and positive controls")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the empirical null distribution from negative controls.
    FitNull(FitNullArgs),
    /// Append calibrated p-values to an estimates CSV.
    CalibratePvalue(CalibratePvalueArgs),
    /// Fit the systematic error model on negative and positive controls.
    FitSystematic(FitSystematicArgs),
    /// Append calibrated confidence intervals to an estimates CSV.
    CalibrateCi(CalibrateCiArgs),
    /// Sample the Bayesian bias-model posterior by MCMC.
    BayesFit(BayesFitArgs),
    /// Append Bayesian calibrated posterior intervals to an estimates CSV.
    BayesCalibrate(BayesCalibrateArgs),
    /// Inject simulated outcomes into a cohort to a target rate ratio.
    Inject(InjectArgs),
    /// Simulate a synthetic control universe.
    Simulate(SimulateArgs),
    /// Run the coverage/RMSE evaluation protocol on a control universe.
    Evaluate(EvaluateArgs),
    /// Convergence diagnostics and plot-ready series for a draws file.
    Diagnostics(DiagnosticsArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SidedArg {
    TwoSided,
    Greater,
    Less,
}

impl From<SidedArg> for Sidedness {
    fn from(v: SidedArg) -> Sidedness {
        match v {
            SidedArg::TwoSided => Sidedness::TwoSided,
            SidedArg::Greater => Sidedness::Greater,
            SidedArg::Less => Sidedness::Less,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BayesModelArg {
    Constant,
    Linear,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalModelArg {
    Constant,
    Linear,
    Frequentist,
}

impl From<EvalModelArg> for BiasModelKind {
    fn from(v: EvalModelArg) -> BiasModelKind {
        match v {
            EvalModelArg::Constant => BiasModelKind::Constant,
            EvalModelArg::Linear => BiasModelKind::Linear,
            EvalModelArg::Frequentist => BiasModelKind::Frequentist,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DesignArg {
    NegPos,
    NegOnly,
}

impl From<DesignArg> for TrainingDesign {
    fn from(v: DesignArg) -> TrainingDesign {
        match v {
            DesignArg::NegPos => TrainingDesign::NegPosTrain,
            DesignArg::NegOnly => TrainingDesign::NegOnlyTrain,
        }
    }
}

#[derive(Args, Debug)]
struct FitNullArgs {
    /// Control estimates CSV; non-negative controls are filtered out.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct CalibratePvalueArgs {
    /// Estimates CSV (control schema; true_effect_size may be empty).
    #[arg(long)]
    input: PathBuf,
    /// Null distribution file written by fit-null.
    #[arg(long)]
    null: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = SidedArg::TwoSided)]
    sided: SidedArg,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct FitSystematicArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct CalibrateCiArgs {
    #[arg(long)]
    input: PathBuf,
    /// Model file written by fit-systematic.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct BayesFitArgs {
    #[arg(long)]
    input: PathBuf,
    /// Draws CSV: chain,iter,mu,sigma2[,slope_mean,slope_var].
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum)]
    model: BayesModelArg,
    #[arg(long, default_value_t = 3)]
    chains: usize,
    #[arg(long = "burn-in", default_value_t = 1000)]
    burn_in: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    thin: usize,
    /// Train on negative controls only (valid for the constant model).
    #[arg(long = "negatives-only", default_value_t = false)]
    negatives_only: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct BayesCalibrateArgs {
    #[arg(long)]
    input: PathBuf,
    /// Draws CSV written by bayes-fit.
    #[arg(long)]
    draws: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct InjectArgs {
    /// Cohort CSV: duration_days,outcome_count,z0,...
    #[arg(long)]
    input: PathBuf,
    /// Modified cohort CSV with injected outcome counts.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    theta: f64,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    #[arg(long = "max-iter", default_value_t = 10_000)]
    max_iter: usize,
    /// Cross-validation folds for the outcome model.
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    families: usize,
    #[arg(long = "bias-mean", default_value_t = 0.0)]
    bias_mean: f64,
    #[arg(long = "bias-sd", default_value_t = 0.0)]
    bias_sd: f64,
    #[arg(long = "bias-slope", default_value_t = 0.0)]
    bias_slope: f64,
    #[arg(long = "se-min", default_value_t = 0.05)]
    se_min: f64,
    #[arg(long = "se-max", default_value_t = 0.3)]
    se_max: f64,
    #[arg(long = "database-id", default_value = "SYNTH")]
    database_id: String,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    #[arg(long, value_enum)]
    design: DesignArg,
    #[arg(long, value_enum)]
    model: EvalModelArg,
    #[arg(long, default_value_t = 0.8)]
    fraction: f64,
    #[arg(long, default_value_t = 3)]
    chains: usize,
    #[arg(long = "burn-in", default_value_t = 1000)]
    burn_in: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    thin: usize,
    /// Also render static SVG figures.
    #[arg(long, default_value_t = false)]
    svg: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DiagnosticsArgs {
    #[arg(long)]
    draws: PathBuf,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0)
}

/// Write a small key/value text file with the provenance header.
fn write_kv(path: &Path, header: &ArtifactHeader, pairs: &[(&str, String)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", header.comment_line())?;
    for (k, v) in pairs {
        writeln!(out, "{k} = {v}")?;
    }
    out.flush()?;
    Ok(())
}

fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let file = std::fs::File::open(path)?;
    let mut pairs = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Data(format!("expected `key = value` lines, got {line:?}"))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn kv_f64(pairs: &[(String, String)], key: &str, path: &Path) -> Result<f64> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .ok_or_else(|| Error::Data(format!("{} is missing key {key}", path.display())))?
        .1
        .parse()
        .map_err(|_| Error::Data(format!("{}: key {key} is not a number", path.display())))
}

/// Copy the input estimate rows and append extra columns computed per row.
fn append_columns(
    set: &ControlSet,
    output: &Path,
    header: &ArtifactHeader,
    extra_names: &[&str],
    mut extra: impl FnMut(&calib_core::controls::ControlRecord) -> Result<Vec<f64>>,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(output)?);
    writeln!(out, "{}", header.comment_line())?;
    writeln!(out, "{},{}", CSV_COLUMNS.join(","), extra_names.join(","))?;
    for r in set.records() {
        let values = extra(r)?;
        let extras: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.database_id,
            r.target_id,
            r.comparator_id,
            r.outcome_id,
            r.family_id,
            r.true_effect_size.map(|t| t.to_string()).unwrap_or_default(),
            r.log_estimate,
            r.se_log_estimate,
            extras.join(",")
        )?;
    }
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitNull(args) => {
            let seed = resolve_seed(args.seed);
            let header = ArtifactHeader::new("fit-null", seed);
            let set = ControlSet::load_csv(&args.input)?;
            let negatives = set.negatives_only()?;
            let null = empirical_null::fit_null(&negatives)?;
            write_kv(
                &args.output,
                &header,
                &[
                    ("nu", null.nu.to_string()),
                    ("sigma2", null.sigma2.to_string()),
                    ("n_controls", null.n_controls.to_string()),
                    ("log_likelihood", null.log_likelihood.to_string()),
                ],
            )?;
            eprintln!(
                "fit-null: {} negative controls, nu = {:.6}, sigma2 = {:.6}",
                null.n_controls, null.nu, null.sigma2
            );
        }
        Command::CalibratePvalue(args) => {
            let seed = resolve_seed(args.seed);
            let header = ArtifactHeader::new("calibrate-pvalue", seed);
            let set = ControlSet::load_csv(&args.input)?;
            let pairs = read_kv(&args.null)?;
            let null = NullDistribution {
                nu: kv_f64(&pairs, "nu", &args.null)?,
                sigma2: kv_f64(&pairs, "sigma2", &args.null)?,
                n_controls: kv_f64(&pairs, "n_controls", &args.null)? as usize,
                log_likelihood: kv_f64(&pairs, "log_likelihood", &args.null)?,
            };
            let sided: Sidedness = args.sided.into();
            append_columns(&set, &args.output, &header, &["cal_p"], |r| {
                Ok(vec![empirical_null::calibrated_p_sided(
                    &null,
                    r.log_estimate,
                    r.se_log_estimate,
                    sided,
                )?])
            })?;
            eprintln!("calibrate-pvalue: wrote {} rows", set.len());
        }
        Command::FitSystematic(args) => {
            let seed = resolve_seed(args.seed);
            let header = ArtifactHeader::new("fit-systematic", seed);
            let set = ControlSet::load_csv(&args.input)?;
            let model = systematic_error::fit_systematic(&set)?;
            write_kv(
                &args.output,
                &header,
                &[
                    ("a", model.a.to_string()),
                    ("b", model.b.to_string()),
                    ("c", model.c.to_string()),
                    ("d", model.d.to_string()),
                    ("n_controls", model.n_controls.to_string()),
                    ("log_likelihood", model.log_likelihood.to_string()),
                    ("theta_abs_max", model.theta_abs_max.to_string()),
                ],
            )?;
            eprintln!(
                "fit-systematic: a = {:.6}, b = {:.6}, c = {:.6}, d = {:.6}",
                model.a, model.b, model.c, model.d
            );
        }
        Command::CalibrateCi(args) => {
            let seed = resolve_seed(args.seed);
            let header = ArtifactHeader::new("calibrate-ci", seed);
            let set = ControlSet::load_csv(&args.input)?;
            let pairs = read_kv(&args.model)?;
            let model = SystematicErrorModel {
                a: kv_f64(&pairs, "a", &args.model)?,
                b: kv_f64(&pairs, "b", &args.model)?,
                c: kv_f64(&pairs, "c", &args.model)?,
                d: kv_f64(&pairs, "d", &args.model)?,
                n_controls: kv_f64(&pairs, "n_controls", &args.model)? as usize,
                log_likelihood: kv_f64(&pairs, "log_likelihood", &args.model)?,
                theta_abs_max: kv_f64(&pairs, "theta_abs_max", &args.model)?,
            };
            append_columns(&set, &args.output, &header, &["cal_lower", "cal_upper"], |r| {
                let iv = systematic_error::calibrated_ci(
                    &model,
                    r.log_estimate,
                    r.se_log_estimate,
                    args.level,
                )?;
                Ok(vec![iv.lower, iv.upper])
            })?;
            eprintln!("calibrate-ci: wrote {} rows at level {}", set.len(), args.level);
        }
        Command::BayesFit(args) => {
            let seed = resolve_seed(args.seed);
            let header = ArtifactHeader::new("bayes-fit", seed);
            let set = ControlSet::load_csv(&args.input)?;
            let train = if args.negatives_only { set.negatives_only()? } else { set };
            let config = McmcConfig {
                chains: args.chains,
                burn_in: args.burn_in,
                samples: args.samples,
                thinning: args.thin,
                seed,
            };
            let samples = match args.model {
                BayesModelArg::Constant => bayes::fit_constant(&train, &config)?,
                BayesModelArg::Linear => bayes::fit_linear(&train, &config)?,
            };
            samples.write_draws_csv(&args.output, &header)?;
            for warning in &samples.warnings {
                eprintln!("bayes-fit: warning: {warning}");
            }
            eprintln!(
                "bayes-fit: {} retained draws across {} chains",
                samples.n_retained(),
                config.chains
            );
        }
        Command::BayesCalibrate(args) => {
            let seed = resolve_seed(args.seed);
            let header = ArtifactHeader::new("bayes-calibrate", seed);
            let set = ControlSet::load_csv(&args.input)?;
            let samples = PosteriorSamples::read_draws_csv(&args.draws)?;
            for warning in &samples.warnings {
                eprintln!("bayes-calibrate: warning: {warning}");
            }
            append_columns(&set, &args.output, &header, &["cal_lower", "cal_upper"], |r| {
                let iv = bayes::calibrate_posterior(
                    &samples,
                    r.log_estimate,
                    r.se_log_estimate,
                    args.level,
                )?;
                Ok(vec![iv.lower, iv.upper])
            })?;
            eprintln!("bayes-calibrate: wrote {} rows at level {}", set.len(), args.level);
        }
        Command::Inject(args) => {
            let seed = resolve_seed(args.seed);
            let header = ArtifactHeader::new("inject", seed);
            let cohort = SyntheticCohort::load_csv(&args.input)?;
            let model = synthesis::fit_poisson_l1(&cohort, args.folds)?;
            if let Some(notice) = &model.notice {
                eprintln!("inject: notice: {notice}");
            }
            let result = synthesis::inject(
                &cohort,
                &model,
                args.theta,
                args.epsilon,
                seed,
                args.max_iter,
            )?;
            let modified = SyntheticCohort {
                entries: cohort
                    .entries
                    .iter()
                    .zip(&result.modified_counts)
                    .map(|(e, &count)| synthesis::CohortEntry {
                        duration_days: e.duration_days,
                        outcome_count: count,
                        covariates: e.covariates.clone(),
                    })
                    .collect(),
            };
            // Keep the run summary in the artifact itself as extra comments.
            let mut out = std::io::BufWriter::new(std::fs::File::create(&args.output)?);
            writeln!(out, "{}", header.comment_line())?;
            writeln!(
                out,
                "# achieved_ratio={} target_theta={} iterations={}",
                result.achieved_ratio, result.target_theta, result.iterations
            )?;
            let width = modified.entries.first().map(|e| e.covariates.len()).unwrap_or(0);
            let cols: Vec<String> = (0..width).map(|j| format!("z{j}")).collect();
            if cols.is_empty() {
                writeln!(out, "duration_days,outcome_count")?;
            } else {
                writeln!(out, "duration_days,outcome_count,{}", cols.join(","))?;
            }
            for e in &modified.entries {
                let z: Vec<String> = e.covariates.iter().map(|x| x.to_string()).collect();
                if z.is_empty() {
                    writeln!(out, "{},{}", e.duration_days, e.outcome_count)?;
                } else {
                    writeln!(out, "{},{},{}", e.duration_days, e.outcome_count, z.join(","))?;
                }
            }
            out.flush()?;
            eprintln!(
                "inject: achieved ratio {:.4} (target {}) in {} attempt(s)",
                result.achieved_ratio, result.target_theta, result.iterations
            );
        }
        Command::Simulate(args) => {
            let seed = resolve_seed(args.seed);
            let header = ArtifactHeader::new("simulate", seed);
            let spec = SimulationSpec {
                families: args.families,
                se_range: (args.se_min, args.se_max),
                bias_mean: args.bias_mean,
                bias_sd: args.bias_sd,
                bias_slope: args.bias_slope,
                seed,
                database_id: args.database_id,
            };
            let universe = synthesis::simulate_control_universe(&spec)?;
            universe.write_csv(&args.output, &header)?;
            eprintln!(
                "simulate: {} records across {} families",
                universe.len(),
                args.families
            );
        }
        Command::Evaluate(args) => {
            let seed = resolve_seed(args.seed);
            let header = ArtifactHeader::new("evaluate", seed);
            let universe = ControlSet::load_csv(&args.input)?;
            let config = McmcConfig {
                chains: args.chains,
                burn_in: args.burn_in,
                samples: args.samples,
                thinning: args.thin,
                seed,
            };
            let result = evaluation::run_protocol(
                &universe,
                args.design.into(),
                args.model.into(),
                &config,
                args.fraction,
                seed,
            )?;
            let written = evaluation::emit_figures(&result, &args.out_dir, args.svg, &header)?;
            eprintln!(
                "evaluate: calibrated rmse {:.4}, uncalibrated rmse {:.4}, {} artifacts",
                result.calibrated_rmse,
                result.uncalibrated_rmse,
                written.len()
            );
        }
        Command::Diagnostics(args) => {
            let seed = resolve_seed(args.seed);
            let header = ArtifactHeader::new("diagnostics", seed);
            let samples = PosteriorSamples::read_draws_csv(&args.draws)?;
            let report = bayes::diagnostics(&samples);
            for notice in &report.notices {
                eprintln!("diagnostics: {notice}");
            }
            let written = report.write_artifacts(&samples, &args.out_dir, &header)?;
            eprintln!("diagnostics: wrote {} artifacts", written.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = match err.exit_code() {
                2 => "usage",
                3 => "data",
                4 => "numerical",
                _ => "io",
            };
            eprintln!("calib: {category} error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
