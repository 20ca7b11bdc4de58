//! Convergence diagnostics for the MCMC output: potential scale reduction,
//! effective sample size, autocorrelations, and plot-ready series (trace,
//! histogram, ECDF) written as CSV artifacts.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::artifact::ArtifactHeader;
use crate::error::Result;
use crate::stats::{mean, sample_variance};

use super::PosteriorSamples;

/// Autocorrelations are reported up to this lag.
pub const MAX_LAG: usize = 50;
/// Threshold above which a potential-scale-reduction value is flagged.
pub const RHAT_WARN: f64 = 1.1;

#[derive(Clone, Debug)]
pub struct ParamDiagnostics {
    pub name: String,
    /// Potential scale reduction; `None` with fewer than 2 chains.
    pub rhat: Option<f64>,
    pub ess: f64,
    /// Autocorrelation of the first chain at lags 0..=MAX_LAG.
    pub autocorr: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    /// Monte Carlo standard error of the posterior mean (sd / √ess).
    pub mcse: f64,
}

#[derive(Clone, Debug, Default)]
pub struct DiagnosticReport {
    pub params: Vec<ParamDiagnostics>,
    pub notices: Vec<String>,
}

impl DiagnosticReport {
    pub fn param(&self, name: &str) -> Option<&ParamDiagnostics> {
        self.params.iter().find(|p| p.name == name)
    }

    /// True when every computed scale-reduction value is at most
    /// [`RHAT_WARN`].
    pub fn converged(&self) -> bool {
        self.params
            .iter()
            .filter_map(|p| p.rhat)
            .all(|r| r <= RHAT_WARN)
    }

    /// Write summary plus plot-ready trace/histogram/ECDF/autocorrelation
    /// series under `out_dir`. Returns the paths written.
    pub fn write_artifacts(
        &self,
        samples: &PosteriorSamples,
        out_dir: &Path,
        header: &ArtifactHeader,
    ) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(out_dir)?;
        let mut written = Vec::new();

        let summary = out_dir.join("summary.csv");
        {
            let mut out = std::io::BufWriter::new(std::fs::File::create(&summary)?);
            writeln!(out, "{}", header.comment_line())?;
            writeln!(out, "parameter,mean,sd,ess,mcse,rhat")?;
            for p in &self.params {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    p.name,
                    p.mean,
                    p.sd,
                    p.ess,
                    p.mcse,
                    p.rhat.map(|r| r.to_string()).unwrap_or_default()
                )?;
            }
        }
        written.push(summary);

        let trace = out_dir.join("trace.csv");
        {
            let mut out = std::io::BufWriter::new(std::fs::File::create(&trace)?);
            writeln!(out, "{}", header.comment_line())?;
            writeln!(out, "parameter,chain,iter,value")?;
            for name in samples.param_names() {
                for (c, chain) in samples.param_chains(&name).iter().enumerate() {
                    for (i, v) in chain.iter().enumerate() {
                        writeln!(out, "{name},{c},{i},{v}")?;
                    }
                }
            }
        }
        written.push(trace);

        let hist = out_dir.join("histogram.csv");
        {
            let mut out = std::io::BufWriter::new(std::fs::File::create(&hist)?);
            writeln!(out, "{}", header.comment_line())?;
            writeln!(out, "parameter,bin_lo,bin_hi,count")?;
            for name in samples.param_names() {
                let pooled = samples.pooled(&name);
                for (lo, hi, count) in histogram(&pooled, 40) {
                    writeln!(out, "{name},{lo},{hi},{count}")?;
                }
            }
        }
        written.push(hist);

        let ecdf = out_dir.join("ecdf.csv");
        {
            let mut out = std::io::BufWriter::new(std::fs::File::create(&ecdf)?);
            writeln!(out, "{}", header.comment_line())?;
            writeln!(out, "parameter,value,fraction")?;
            for name in samples.param_names() {
                let mut pooled = samples.pooled(&name);
                pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let n = pooled.len() as f64;
                for (i, v) in pooled.iter().enumerate() {
                    writeln!(out, "{name},{v},{}", (i + 1) as f64 / n)?;
                }
            }
        }
        written.push(ecdf);

        let auto = out_dir.join("autocorr.csv");
        {
            let mut out = std::io::BufWriter::new(std::fs::File::create(&auto)?);
            writeln!(out, "{}", header.comment_line())?;
            writeln!(out, "parameter,chain,lag,rho")?;
            for name in samples.param_names() {
                for (c, chain) in samples.param_chains(&name).iter().enumerate() {
                    for lag in 0..=MAX_LAG.min(chain.len().saturating_sub(1)) {
                        writeln!(out, "{name},{c},{lag},{}", autocorrelation(chain, lag))?;
                    }
                }
            }
        }
        written.push(auto);

        Ok(written)
    }
}

/// Basic Gelman–Rubin potential scale reduction across chains. Returns
/// `None` with fewer than 2 chains. Chains are trimmed to the shortest.
pub fn potential_scale_reduction(chains: &[&[f64]]) -> Option<f64> {
    if chains.len() < 2 {
        return None;
    }
    let n = chains.iter().map(|c| c.len()).min()?;
    if n < 2 {
        return None;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let vars: Vec<f64> = chains.iter().map(|c| sample_variance(&c[..n])).collect();
    let var_between = n as f64 * sample_variance(&means);
    let var_within = mean(&vars);
    if var_within == 0.0 {
        return Some(if var_between == 0.0 { 1.0 } else { f64::INFINITY });
    }
    Some(((var_between / var_within + n as f64 - 1.0) / n as f64).sqrt())
}

/// Lag-`k` autocorrelation with population normalization (exactly 1 at lag
/// 0).
pub fn autocorrelation(chain: &[f64], lag: usize) -> f64 {
    let n = chain.len();
    if lag >= n {
        return 0.0;
    }
    let m = mean(chain);
    let var: f64 = chain.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return if lag == 0 { 1.0 } else { 0.0 };
    }
    let cov: f64 = (0..n - lag)
        .map(|i| (chain[i] - m) * (chain[i + lag] - m))
        .sum::<f64>()
        / n as f64;
    cov / var
}

/// Effective sample size of one chain: n / (1 + 2 Σ ρ_k), summing positive
/// autocorrelations until they drop below 0.05.
pub fn effective_sample_size(chain: &[f64]) -> f64 {
    let n = chain.len();
    if n < 2 {
        return n as f64;
    }
    if sample_variance(chain) == 0.0 {
        return n as f64;
    }
    let mut sum_rho = 0.0;
    for k in 1..=n / 2 {
        let rho = autocorrelation(chain, k);
        if rho < 0.05 {
            break;
        }
        sum_rho += rho;
    }
    n as f64 / (1.0 + 2.0 * sum_rho)
}

/// Total effective sample size across chains.
pub fn total_ess(chains: &[&[f64]]) -> f64 {
    chains.iter().map(|c| effective_sample_size(c)).sum()
}

fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    if values.is_empty() {
        return Vec::new();
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return vec![(lo, hi, values.len())];
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}

/// Compute the full per-parameter report for a set of posterior samples.
pub fn diagnostics(samples: &PosteriorSamples) -> DiagnosticReport {
    let mut report = DiagnosticReport::default();
    let single_chain = samples.chains.len() < 2;
    if single_chain {
        report
            .notices
            .push("single chain: potential scale reduction omitted".to_string());
    }
    for name in samples.param_names() {
        let chains = samples.param_chains(&name);
        let slices: Vec<&[f64]> = chains.to_vec();
        let pooled = samples.pooled(&name);
        let rhat = potential_scale_reduction(&slices);
        let ess = total_ess(&slices);
        let m = mean(&pooled);
        let sd = sample_variance(&pooled).sqrt();
        let mcse = if ess > 0.0 { sd / ess.sqrt() } else { f64::INFINITY };
        let first = slices.first().copied().unwrap_or(&[]);
        let autocorr = (0..=MAX_LAG.min(first.len().saturating_sub(1)))
            .map(|lag| autocorrelation(first, lag))
            .collect();
        if let Some(r) = rhat {
            if r > RHAT_WARN {
                report
                    .notices
                    .push(format!("potential scale reduction {r:.4} exceeds {RHAT_WARN} for {name}"));
            }
        }
        report.params.push(ParamDiagnostics { name, rhat, ess, autocorr, mean: m, sd, mcse });
    }
    report
}
