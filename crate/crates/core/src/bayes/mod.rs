//! Bayesian posterior-interval calibration via hierarchical bias models.
//!
//! Controls carry an estimated bias (log estimate minus log true effect)
//! with known sampling noise. Bias is modeled either as
//!
//! - constant: biasᵢ ~ Normal(μ, σ²), or
//! - linear in the true log effect θᵢ: biasᵢ ~ Normal(μ + c·θᵢ, σ² + d·|θᵢ|),
//!
//! with priors μ ~ N(0, 50), 1/σ² ~ Uniform(0, 100) and, for the linear
//! model, c ~ N(0, 50), d ~ N(0, 50). Sampling integrates the per-control
//! bias out in closed form and alternates conjugate Normal updates for the
//! mean parameters with slice-sampling updates for the variance parameters,
//! the latter restricted to the uniform prior's support. An explicit
//! (non-marginalized) sampler for the constant model is kept as an
//! independent route for consistency checks.
//!
//! Calibration of an outcome of interest propagates the posterior
//! uncertainty in the bias parameters into a predictive distribution for
//! the true log effect and reports equal-tailed quantiles.

mod diagnostics;
mod slice;

pub use diagnostics::{
    autocorrelation, diagnostics, effective_sample_size, potential_scale_reduction, total_ess,
    DiagnosticReport, ParamDiagnostics, MAX_LAG, RHAT_WARN,
};
pub use slice::SliceSampler;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::artifact::ArtifactHeader;
use crate::controls::ControlSet;
use crate::error::{Error, Result};
use crate::interval::{BiasModelKind, CalibratedInterval, CalibrationMethod, Provenance};
use crate::stats::quantile_sorted;

/// Normal prior parameterized by mean and variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalPrior {
    pub mean: f64,
    pub variance: f64,
}

/// Uniform prior on an open interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformPrior {
    pub lo: f64,
    pub hi: f64,
}

/// Constant bias model: priors on (μ, 1/σ²).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantBiasModel {
    pub prior_mu: NormalPrior,
    pub prior_precision: UniformPrior,
}

impl Default for ConstantBiasModel {
    fn default() -> Self {
        ConstantBiasModel {
            prior_mu: NormalPrior { mean: 0.0, variance: 50.0 },
            prior_precision: UniformPrior { lo: 0.0, hi: 100.0 },
        }
    }
}

/// Linear bias model: additionally priors on the mean slope and the
/// variance slope on |θ|.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearBiasModel {
    pub prior_mu: NormalPrior,
    pub prior_precision: UniformPrior,
    pub prior_slope_mean: NormalPrior,
    pub prior_slope_var: NormalPrior,
}

impl Default for LinearBiasModel {
    fn default() -> Self {
        LinearBiasModel {
            prior_mu: NormalPrior { mean: 0.0, variance: 50.0 },
            prior_precision: UniformPrior { lo: 0.0, hi: 100.0 },
            prior_slope_mean: NormalPrior { mean: 0.0, variance: 50.0 },
            prior_slope_var: NormalPrior { mean: 0.0, variance: 50.0 },
        }
    }
}

/// Prior used for the latent true log effect of the outcome of interest in
/// the linear-model calibration, where it cannot be integrated out.
const THETA0_PRIOR: NormalPrior = NormalPrior { mean: 0.0, variance: 50.0 };

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McmcConfig {
    pub chains: usize,
    pub burn_in: usize,
    pub samples: usize,
    pub thinning: usize,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig { chains: 3, burn_in: 1000, samples: 1000, thinning: 1, seed: 0 }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains < 1 || self.samples < 1 || self.thinning < 1 {
            return Err(Error::InvalidInput(format!(
                "chains, samples and thinning must all be at least 1 \
                 (got {}, {}, {})",
                self.chains, self.samples, self.thinning
            )));
        }
        if self.samples % self.thinning != 0 {
            return Err(Error::InvalidInput(format!(
                "samples ({}) must be divisible by thinning ({})",
                self.samples, self.thinning
            )));
        }
        Ok(())
    }

    /// Retained draws per chain.
    pub fn retained_per_chain(&self) -> usize {
        self.samples / self.thinning
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Constant,
    Linear,
}

impl ModelKind {
    pub fn bias_model_kind(self) -> BiasModelKind {
        match self {
            ModelKind::Constant => BiasModelKind::Constant,
            ModelKind::Linear => BiasModelKind::Linear,
        }
    }
}

/// Retained draws of one chain.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChainDraws {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub slope_mean: Option<Vec<f64>>,
    pub slope_var: Option<Vec<f64>>,
}

/// MCMC output: per-chain draws with convergence diagnostics attached.
#[derive(Clone, Debug)]
pub struct PosteriorSamples {
    pub model: ModelKind,
    pub chains: Vec<ChainDraws>,
    pub seed: u64,
    pub diagnostics: DiagnosticReport,
    pub warnings: Vec<String>,
}

impl PosteriorSamples {
    /// Assemble samples from raw chains (validating shape and support) and
    /// attach diagnostics. Sampler output always has σ² > 0; hand-built
    /// degenerate draws with σ² = 0 are accepted for reduction checks.
    pub fn from_chains(model: ModelKind, chains: Vec<ChainDraws>, seed: u64) -> Result<Self> {
        if chains.is_empty() {
            return Err(Error::InvalidInput("no chains supplied".into()));
        }
        for (c, chain) in chains.iter().enumerate() {
            if chain.mu.len() != chain.sigma2.len() || chain.mu.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "chain {c}: mu and sigma2 draws must be non-empty and equal length"
                )));
            }
            if chain.sigma2.iter().any(|s| !s.is_finite() || *s < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "chain {c}: sigma2 draws must be finite and non-negative"
                )));
            }
            let is_linear = matches!(model, ModelKind::Linear);
            if is_linear != (chain.slope_mean.is_some() && chain.slope_var.is_some()) {
                return Err(Error::InvalidInput(format!(
                    "chain {c}: slope draws must be present exactly for the linear model"
                )));
            }
        }
        let mut samples =
            PosteriorSamples { model, chains, seed, diagnostics: DiagnosticReport::default(), warnings: Vec::new() };
        samples.diagnostics = diagnostics::diagnostics(&samples);
        samples.warnings = samples.diagnostics.notices.clone();
        Ok(samples)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["mu".to_string(), "sigma2".to_string()];
        if self.model == ModelKind::Linear {
            names.push("slope_mean".to_string());
            names.push("slope_var".to_string());
        }
        names
    }

    /// Per-chain slices of a named parameter (empty for unknown names).
    pub fn param_chains(&self, name: &str) -> Vec<&[f64]> {
        self.chains
            .iter()
            .filter_map(|c| match name {
                "mu" => Some(c.mu.as_slice()),
                "sigma2" => Some(c.sigma2.as_slice()),
                "slope_mean" => c.slope_mean.as_deref(),
                "slope_var" => c.slope_var.as_deref(),
                _ => None,
            })
            .collect()
    }

    /// Draws pooled across chains in chain order.
    pub fn pooled(&self, name: &str) -> Vec<f64> {
        self.param_chains(name).into_iter().flatten().copied().collect()
    }

    pub fn n_retained(&self) -> usize {
        self.chains.iter().map(|c| c.mu.len()).sum()
    }

    /// Write draws as CSV: `chain,iter,mu,sigma2[,slope_mean,slope_var]`.
    pub fn write_draws_csv(&self, path: &Path, header: &ArtifactHeader) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{}", header.comment_line())?;
        match self.model {
            ModelKind::Constant => writeln!(out, "chain,iter,mu,sigma2")?,
            ModelKind::Linear => writeln!(out, "chain,iter,mu,sigma2,slope_mean,slope_var")?,
        }
        for (c, chain) in self.chains.iter().enumerate() {
            for i in 0..chain.mu.len() {
                match self.model {
                    ModelKind::Constant => {
                        writeln!(out, "{c},{i},{},{}", chain.mu[i], chain.sigma2[i])?
                    }
                    ModelKind::Linear => writeln!(
                        out,
                        "{c},{i},{},{},{},{}",
                        chain.mu[i],
                        chain.sigma2[i],
                        chain.slope_mean.as_ref().expect("linear")[i],
                        chain.slope_var.as_ref().expect("linear")[i]
                    )?,
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Read draws written by [`write_draws_csv`]. The model is inferred
    /// from the columns and the seed from the provenance header.
    pub fn read_draws_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut seed = None;
        let mut header_cols: Option<Vec<String>> = None;
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.starts_with('#') {
                seed = seed.or_else(|| ArtifactHeader::parse_seed(&line));
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if header_cols.is_none() {
                header_cols = Some(line.split(',').map(|s| s.trim().to_string()).collect());
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let chain: usize = fields[0]
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("bad chain index {:?}", fields[0])))?;
            let values: std::result::Result<Vec<f64>, _> =
                fields[2..].iter().map(|f| f.trim().parse::<f64>()).collect();
            let values =
                values.map_err(|_| Error::Data(format!("bad draw row: {line:?}")))?;
            rows.push((chain, values));
        }
        let cols = header_cols.ok_or_else(|| Error::Data("draws file has no header".into()))?;
        let model = match cols.len() {
            4 => ModelKind::Constant,
            6 => ModelKind::Linear,
            n => return Err(Error::Data(format!("unexpected draws column count {n}"))),
        };
        let n_chains = rows.iter().map(|(c, _)| c + 1).max().unwrap_or(0);
        if n_chains == 0 {
            return Err(Error::Data("draws file has no rows".into()));
        }
        let mut chains = vec![ChainDraws::default(); n_chains];
        if model == ModelKind::Linear {
            for c in &mut chains {
                c.slope_mean = Some(Vec::new());
                c.slope_var = Some(Vec::new());
            }
        }
        for (c, values) in rows {
            let chain = &mut chains[c];
            chain.mu.push(values[0]);
            chain.sigma2.push(values[1]);
            if model == ModelKind::Linear {
                chain.slope_mean.as_mut().expect("linear").push(values[2]);
                chain.slope_var.as_mut().expect("linear").push(values[3]);
            }
        }
        let seed = seed.ok_or_else(|| {
            Error::Data("draws file is missing its provenance header with the seed".into())
        })?;
        Self::from_chains(model, chains, seed)
    }
}

/// Per-control training data: estimated bias, sampling variance, true log
/// effect.
struct TrainData {
    bias_hat: Vec<f64>,
    tau2: Vec<f64>,
    theta: Vec<f64>,
}

fn train_data(train: &ControlSet) -> Result<TrainData> {
    if train.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 training controls, got {}",
            train.len()
        )));
    }
    let mut bias_hat = Vec::with_capacity(train.len());
    let mut tau2 = Vec::with_capacity(train.len());
    let mut theta = Vec::with_capacity(train.len());
    for r in train.records() {
        let bias = r.estimated_bias().ok_or_else(|| {
            Error::Data(format!(
                "training requires a true effect size on every record; outcome {:?} has none",
                r.outcome_id
            ))
        })?;
        bias_hat.push(bias);
        tau2.push(r.se_log_estimate * r.se_log_estimate);
        theta.push(r.true_log_effect().expect("checked above"));
    }
    Ok(TrainData { bias_hat, tau2, theta })
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64 + 1);
    rng
}

fn normal_draw<R: Rng>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mean;
    }
    use rand_distr::Distribution;
    rand_distr::Normal::new(mean, sd).expect("valid sd").sample(rng)
}

/// Conjugate Normal update for a mean parameter with Normal prior: the
/// likelihood contributes total precision `sum_inv_v` and precision-weighted
/// sum `sum_obs_over_v`.
fn draw_conjugate_mean<R: Rng>(
    rng: &mut R,
    prior: &NormalPrior,
    sum_inv_v: f64,
    sum_obs_over_v: f64,
) -> f64 {
    let prec = 1.0 / prior.variance + sum_inv_v;
    let mean = (prior.mean / prior.variance + sum_obs_over_v) / prec;
    normal_draw(rng, mean, (1.0 / prec).sqrt())
}

/// Initial precision drawn with mean 0 and variance 1, folded into the
/// uniform prior's support.
fn init_precision<R: Rng>(rng: &mut R, prior: &UniformPrior) -> f64 {
    let z: f64 = normal_draw(rng, 0.0, 1.0);
    z.abs().clamp(prior.lo + 1e-2, prior.hi - 1e-2)
}

/// Fit the constant bias model with paper-default priors.
pub fn fit_constant(train: &ControlSet, config: &McmcConfig) -> Result<PosteriorSamples> {
    fit_constant_with(&ConstantBiasModel::default(), train, config)
}

/// Fit the constant bias model using the marginalized likelihood
/// biasᵢ ~ Normal(μ, σ² + τᵢ²).
pub fn fit_constant_with(
    model: &ConstantBiasModel,
    train: &ControlSet,
    config: &McmcConfig,
) -> Result<PosteriorSamples> {
    config.validate()?;
    let data = train_data(train)?;
    let model = *model;
    let chains: Vec<ChainDraws> = (0..config.chains)
        .into_par_iter()
        .map(|chain_idx| run_constant_chain(&model, &data, config, chain_idx))
        .collect();
    PosteriorSamples::from_chains(ModelKind::Constant, chains, config.seed)
}

fn run_constant_chain(
    model: &ConstantBiasModel,
    data: &TrainData,
    config: &McmcConfig,
    chain_idx: usize,
) -> ChainDraws {
    let mut rng = chain_rng(config.seed, chain_idx);
    let mut mu = normal_draw(&mut rng, 0.0, 1.0);
    let mut lambda = init_precision(&mut rng, &model.prior_precision);
    let mut slice = SliceSampler::new(5.0);

    let retained = config.retained_per_chain();
    let mut draws = ChainDraws {
        mu: Vec::with_capacity(retained),
        sigma2: Vec::with_capacity(retained),
        slope_mean: None,
        slope_var: None,
    };

    let total = config.burn_in + config.samples;
    for iter in 0..total {
        let in_burn_in = iter < config.burn_in;
        // 1/σ² | μ: slice sample within the uniform prior support.
        lambda = slice.step(
            &mut rng,
            lambda,
            (model.prior_precision.lo, model.prior_precision.hi),
            |lam| {
                if lam <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let s2 = 1.0 / lam;
                let mut ll = 0.0;
                for i in 0..data.bias_hat.len() {
                    let v = s2 + data.tau2[i];
                    let r = data.bias_hat[i] - mu;
                    ll += -0.5 * v.ln() - r * r / (2.0 * v);
                }
                ll
            },
            in_burn_in,
        );

        // μ | σ²: conjugate Normal.
        let sigma2 = 1.0 / lambda;
        let mut sum_inv = 0.0;
        let mut sum_obs = 0.0;
        for i in 0..data.bias_hat.len() {
            let v = sigma2 + data.tau2[i];
            sum_inv += 1.0 / v;
            sum_obs += data.bias_hat[i] / v;
        }
        mu = draw_conjugate_mean(&mut rng, &model.prior_mu, sum_inv, sum_obs);

        if !in_burn_in && (iter - config.burn_in + 1) % config.thinning == 0 {
            draws.mu.push(mu);
            draws.sigma2.push(1.0 / lambda);
        }
    }
    draws
}

/// Fit the constant bias model keeping every per-control bias as explicit
/// latent state (the non-marginalized route). Used to cross-check the
/// marginalized sampler; both target the same posterior for (μ, σ²).
pub fn fit_constant_explicit(train: &ControlSet, config: &McmcConfig) -> Result<PosteriorSamples> {
    fit_constant_explicit_with(&ConstantBiasModel::default(), train, config)
}

pub fn fit_constant_explicit_with(
    model: &ConstantBiasModel,
    train: &ControlSet,
    config: &McmcConfig,
) -> Result<PosteriorSamples> {
    config.validate()?;
    let data = train_data(train)?;
    let model = *model;
    let chains: Vec<ChainDraws> = (0..config.chains)
        .into_par_iter()
        .map(|chain_idx| run_explicit_chain(&model, &data, config, chain_idx))
        .collect();
    PosteriorSamples::from_chains(ModelKind::Constant, chains, config.seed)
}

fn run_explicit_chain(
    model: &ConstantBiasModel,
    data: &TrainData,
    config: &McmcConfig,
    chain_idx: usize,
) -> ChainDraws {
    let m = data.bias_hat.len();
    let mut rng = chain_rng(config.seed, chain_idx);
    let mut mu = normal_draw(&mut rng, 0.0, 1.0);
    let mut lambda = init_precision(&mut rng, &model.prior_precision);
    let mut betas: Vec<f64> = (0..m).map(|_| normal_draw(&mut rng, 0.0, 1.0)).collect();
    let mut slice = SliceSampler::new(5.0);

    let retained = config.retained_per_chain();
    let mut draws = ChainDraws {
        mu: Vec::with_capacity(retained),
        sigma2: Vec::with_capacity(retained),
        slope_mean: None,
        slope_var: None,
    };

    let total = config.burn_in + config.samples;
    for iter in 0..total {
        let in_burn_in = iter < config.burn_in;
        // βᵢ | μ, σ², data: conjugate Normal per control.
        for i in 0..m {
            let prec = lambda + 1.0 / data.tau2[i];
            let mean = (lambda * mu + data.bias_hat[i] / data.tau2[i]) / prec;
            betas[i] = normal_draw(&mut rng, mean, (1.0 / prec).sqrt());
        }
        // μ | β, σ².
        let sum_betas: f64 = betas.iter().sum();
        mu = draw_conjugate_mean(&mut rng, &model.prior_mu, m as f64 * lambda, lambda * sum_betas);
        // 1/σ² | β, μ: truncated Gamma within the uniform prior support.
        let s: f64 = betas.iter().map(|b| (b - mu) * (b - mu)).sum();
        lambda = draw_truncated_gamma_precision(
            &mut rng,
            &mut slice,
            m as f64 / 2.0 + 1.0,
            s / 2.0,
            &model.prior_precision,
            lambda,
            in_burn_in,
        );

        if !in_burn_in && (iter - config.burn_in + 1) % config.thinning == 0 {
            draws.mu.push(mu);
            draws.sigma2.push(1.0 / lambda);
        }
    }
    draws
}

/// Draw from Gamma(shape, rate) truncated to the prior support, by inverse
/// CDF when well conditioned, falling back to a slice step otherwise.
fn draw_truncated_gamma_precision<R: Rng>(
    rng: &mut R,
    slice: &mut SliceSampler,
    shape: f64,
    rate: f64,
    support: &UniformPrior,
    current: f64,
    adapt: bool,
) -> f64 {
    if rate > 1e-290 {
        if let Ok(gamma) = Gamma::new(shape, rate) {
            let f_lo = gamma.cdf(support.lo);
            let f_hi = gamma.cdf(support.hi);
            if f_hi - f_lo > 1e-12 {
                let u: f64 = rng.random();
                let draw = gamma.inverse_cdf(f_lo + u * (f_hi - f_lo));
                if draw.is_finite() {
                    return draw.clamp(support.lo + 1e-12, support.hi);
                }
            }
        }
    } else {
        // Rate ~ 0: density ∝ λ^(shape−1) on (lo, hi); invert its CDF.
        let u: f64 = rng.random();
        let lo_p = support.lo.max(1e-12).powf(shape);
        let hi_p = support.hi.powf(shape);
        return (lo_p + u * (hi_p - lo_p)).powf(1.0 / shape);
    }
    // Mass concentrated outside the numerically resolvable region; a slice
    // step on the log target keeps the chain valid.
    slice.step(
        rng,
        current,
        (support.lo, support.hi),
        |lam| {
            if lam <= 0.0 {
                return f64::NEG_INFINITY;
            }
            (shape - 1.0) * lam.ln() - rate * lam
        },
        adapt,
    )
}

/// Fit the linear bias model with paper-default priors.
pub fn fit_linear(train: &ControlSet, config: &McmcConfig) -> Result<PosteriorSamples> {
    fit_linear_with(&LinearBiasModel::default(), train, config)
}

/// Fit the linear bias model: biasᵢ ~ Normal(μ + c·θᵢ, σ² + d·|θᵢ|),
/// marginalized over per-control bias. States with a non-positive realized
/// variance at any control are rejected.
pub fn fit_linear_with(
    model: &LinearBiasModel,
    train: &ControlSet,
    config: &McmcConfig,
) -> Result<PosteriorSamples> {
    config.validate()?;
    let data = train_data(train)?;
    let mut distinct = data.theta.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if distinct.len() < 2 {
        return Err(Error::Data(
            "linear bias model is unidentifiable with a single true effect size; \
             training needs both negative and positive controls"
                .into(),
        ));
    }
    let model = *model;
    let chains: Vec<ChainDraws> = (0..config.chains)
        .into_par_iter()
        .map(|chain_idx| run_linear_chain(&model, &data, config, chain_idx))
        .collect();
    PosteriorSamples::from_chains(ModelKind::Linear, chains, config.seed)
}

fn run_linear_chain(
    model: &LinearBiasModel,
    data: &TrainData,
    config: &McmcConfig,
    chain_idx: usize,
) -> ChainDraws {
    let m = data.bias_hat.len();
    let abs_theta: Vec<f64> = data.theta.iter().map(|t| t.abs()).collect();
    let mut rng = chain_rng(config.seed, chain_idx);
    let mut mu = normal_draw(&mut rng, 0.0, 1.0);
    let mut slope_mean = normal_draw(&mut rng, 0.0, 1.0);
    let mut lambda = init_precision(&mut rng, &model.prior_precision);
    let mut slope_var = normal_draw(&mut rng, 0.0, 1.0);
    // The initial state must satisfy positivity of every per-control
    // variance; fall back to a flat bias variance if the draw does not.
    {
        let s2 = 1.0 / lambda;
        let ok = (0..m).all(|i| s2 + slope_var * abs_theta[i] + data.tau2[i] > 0.0);
        if !ok {
            slope_var = 0.0;
        }
    }
    let mut lambda_slice = SliceSampler::new(5.0);
    let mut slope_var_slice = SliceSampler::new(0.5);

    let retained = config.retained_per_chain();
    let mut draws = ChainDraws {
        mu: Vec::with_capacity(retained),
        sigma2: Vec::with_capacity(retained),
        slope_mean: Some(Vec::with_capacity(retained)),
        slope_var: Some(Vec::with_capacity(retained)),
    };

    let variances = |lam: f64, sv: f64, out: &mut Vec<f64>| {
        out.clear();
        let s2 = 1.0 / lam;
        for i in 0..m {
            out.push(s2 + sv * abs_theta[i] + data.tau2[i]);
        }
    };
    let mut v = Vec::with_capacity(m);

    let total = config.burn_in + config.samples;
    for iter in 0..total {
        let in_burn_in = iter < config.burn_in;

        // 1/σ² | rest (slice within the uniform support, rejecting states
        // with non-positive realized variance).
        let loglik_given =
            |lam: f64, sv: f64| -> f64 {
                if lam <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let s2 = 1.0 / lam;
                let mut ll = 0.0;
                for i in 0..m {
                    let vi = s2 + sv * abs_theta[i] + data.tau2[i];
                    if vi <= 0.0 {
                        return f64::NEG_INFINITY;
                    }
                    let r = data.bias_hat[i] - mu - slope_mean * data.theta[i];
                    ll += -0.5 * vi.ln() - r * r / (2.0 * vi);
                }
                ll
            };
        lambda = lambda_slice.step(
            &mut rng,
            lambda,
            (model.prior_precision.lo, model.prior_precision.hi),
            |lam| loglik_given(lam, slope_var),
            in_burn_in,
        );

        // slope_var | rest (slice on the real line with its Normal prior).
        let prior_sv = model.prior_slope_var;
        slope_var = slope_var_slice.step(
            &mut rng,
            slope_var,
            (f64::NEG_INFINITY, f64::INFINITY),
            |sv| {
                let ll = loglik_given(lambda, sv);
                if ll == f64::NEG_INFINITY {
                    return ll;
                }
                let r = sv - prior_sv.mean;
                ll - r * r / (2.0 * prior_sv.variance)
            },
            in_burn_in,
        );

        variances(lambda, slope_var, &mut v);

        // μ | rest (conjugate).
        let mut sum_inv = 0.0;
        let mut sum_obs = 0.0;
        for i in 0..m {
            sum_inv += 1.0 / v[i];
            sum_obs += (data.bias_hat[i] - slope_mean * data.theta[i]) / v[i];
        }
        mu = draw_conjugate_mean(&mut rng, &model.prior_mu, sum_inv, sum_obs);

        // slope_mean | rest (conjugate).
        let mut sum_inv_c = 0.0;
        let mut sum_obs_c = 0.0;
        for i in 0..m {
            sum_inv_c += data.theta[i] * data.theta[i] / v[i];
            sum_obs_c += data.theta[i] * (data.bias_hat[i] - mu) / v[i];
        }
        slope_mean = draw_conjugate_mean(&mut rng, &model.prior_slope_mean, sum_inv_c, sum_obs_c);

        if !in_burn_in && (iter - config.burn_in + 1) % config.thinning == 0 {
            draws.mu.push(mu);
            draws.sigma2.push(1.0 / lambda);
            draws.slope_mean.as_mut().expect("linear").push(slope_mean);
            draws.slope_var.as_mut().expect("linear").push(slope_var);
        }
    }
    draws
}

/// Predictive draws for the target's true log effect (and the implied bias)
/// given fitted posterior samples.
#[derive(Clone, Debug)]
pub struct TargetDraws {
    pub theta0: Vec<f64>,
    pub beta0: Vec<f64>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut state = 0x243F6A8885A308D3u64;
    let mut out = 0u64;
    for &p in parts {
        state ^= p;
        out = splitmix64(&mut state);
    }
    out
}

/// Number of Metropolis steps on the latent θ₀ per retained parameter draw
/// in the linear-model calibration.
const THETA0_MH_STEPS: usize = 8;

/// Draw the target's predictive distribution. For the constant model each
/// retained draw (μ, σ²) yields bias₀ ~ N(μ, σ²) and
/// θ₀ ~ N(estimate − bias₀, se²). For the linear model the bias mean and
/// variance depend on θ₀ itself, so θ₀ is updated by Metropolis steps under
/// a diffuse Normal(0, 50) reference prior.
pub fn target_draws(
    samples: &PosteriorSamples,
    log_estimate: f64,
    se: f64,
) -> Result<TargetDraws> {
    if !(se > 0.0 && se.is_finite()) {
        return Err(Error::InvalidInput(format!("se must be positive, got {se}")));
    }
    // Noise streams are keyed by (fit seed, estimate, se) so repeated runs
    // of the same pipeline are byte-identical while distinct targets get
    // independent streams.
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(&[
        samples.seed,
        log_estimate.to_bits(),
        se.to_bits(),
    ]));
    let n = samples.n_retained();
    let mut theta0 = Vec::with_capacity(n);
    let mut beta0 = Vec::with_capacity(n);

    match samples.model {
        ModelKind::Constant => {
            for chain in &samples.chains {
                for i in 0..chain.mu.len() {
                    let b0 = normal_draw(&mut rng, chain.mu[i], chain.sigma2[i].sqrt());
                    let t0 = normal_draw(&mut rng, log_estimate - b0, se);
                    beta0.push(b0);
                    theta0.push(t0);
                }
            }
        }
        ModelKind::Linear => {
            let tau2 = se * se;
            let mut theta = log_estimate;
            for chain in &samples.chains {
                let slope_mean = chain.slope_mean.as_ref().expect("linear");
                let slope_var = chain.slope_var.as_ref().expect("linear");
                for i in 0..chain.mu.len() {
                    let (mu, s2, cm, cv) =
                        (chain.mu[i], chain.sigma2[i], slope_mean[i], slope_var[i]);
                    let log_post = |t: f64| -> f64 {
                        let v = s2 + cv * t.abs() + tau2;
                        if v <= 0.0 {
                            return f64::NEG_INFINITY;
                        }
                        let r = log_estimate - mu - (1.0 + cm) * t;
                        let rp = t - THETA0_PRIOR.mean;
                        -0.5 * v.ln() - r * r / (2.0 * v)
                            - rp * rp / (2.0 * THETA0_PRIOR.variance)
                    };
                    if log_post(theta) == f64::NEG_INFINITY {
                        theta = 0.0;
                    }
                    let mut lp = log_post(theta);
                    let prop_sd = 2.4 * (s2 + tau2 + cv.max(0.0) * log_estimate.abs()).sqrt();
                    for _ in 0..THETA0_MH_STEPS {
                        let prop = normal_draw(&mut rng, theta, prop_sd);
                        let lp_prop = log_post(prop);
                        if lp_prop > f64::NEG_INFINITY
                            && rng.random::<f64>().max(f64::MIN_POSITIVE).ln() < lp_prop - lp
                        {
                            theta = prop;
                            lp = lp_prop;
                        }
                    }
                    theta0.push(theta);
                    beta0.push(log_estimate - theta);
                }
            }
        }
    }
    Ok(TargetDraws { theta0, beta0 })
}

/// Equal-tailed posterior interval for the target's true log effect.
pub fn calibrate_posterior(
    samples: &PosteriorSamples,
    log_estimate: f64,
    se: f64,
    level: f64,
) -> Result<CalibratedInterval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level must lie in (0,1), got {level}")));
    }
    let draws = target_draws(samples, log_estimate, se)?;
    let mut sorted = draws.theta0;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
    let lower = quantile_sorted(&sorted, (1.0 - level) / 2.0);
    let upper = quantile_sorted(&sorted, (1.0 + level) / 2.0);
    Ok(CalibratedInterval {
        lower,
        upper,
        level,
        provenance: Provenance {
            method: CalibrationMethod::Calibrated,
            model: Some(samples.model.bias_model_kind()),
            seed: Some(samples.seed),
        },
    })
}
