//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with the measured values. Tolerances are pinned in the
//! assertions, not configurable.

mod common;

use std::time::Instant;

use calib_core::bayes::{
    calibrate_posterior, fit_constant, fit_constant_explicit, ChainDraws, McmcConfig,
    ModelKind, PosteriorSamples,
};
use calib_core::controls::{ControlScope, ControlSet};
use calib_core::empirical_null::fit_null;
use calib_core::evaluation::{
    coverage, rmse, run_protocol, CoverageReport, TrainingDesign,
};
use calib_core::interval::{BiasModelKind, CalibrationMethod};
use calib_core::stats::{quantile_sorted, z_for_level};
use calib_core::synthesis::{
    fit_poisson_l1, inject, simulate_control_universe, CohortEntry, SimulationSpec,
    SyntheticCohort,
};
use calib_core::systematic_error::{calibrated_ci, SystematicErrorModel};

fn pass(name: &str, detail: &str) {
    println!("ACCEPTANCE PASS {name}: {detail}");
}

/// The simulation universe used by the coverage-restoration criteria:
/// 500 families, bias ~ Normal(0.2, 0.05²), standard errors in
/// [0.05, 0.3].
fn biased_universe() -> ControlSet {
    simulate_control_universe(&SimulationSpec {
        families: 500,
        se_range: (0.05, 0.3),
        bias_mean: 0.2,
        bias_sd: 0.05,
        bias_slope: 0.0,
        seed: 20240,
        database_id: "SYNTH".into(),
    })
    .unwrap()
}

fn biased_protocol() -> calib_core::evaluation::ProtocolResult {
    let config = McmcConfig { chains: 3, burn_in: 1000, samples: 1000, thinning: 1, seed: 11 };
    run_protocol(
        &biased_universe(),
        TrainingDesign::NegPosTrain,
        BiasModelKind::Constant,
        &config,
        0.8,
        17,
    )
    .unwrap()
}

#[test]
fn coverage_restoration() {
    let start = Instant::now();
    let result = biased_protocol();
    let elapsed = start.elapsed();

    let uncal_at_1 = result.uncalibrated.group(1.0).unwrap().coverage();
    assert!(
        uncal_at_1 <= 0.85,
        "uncalibrated coverage at effect size 1 is {uncal_at_1}, expected ≤ 0.85"
    );
    let mut cal_values = Vec::new();
    for theta in [1.0, 1.5, 2.0, 4.0] {
        let w = result.calibrated.group(theta).unwrap().coverage();
        assert!(
            (0.92..=0.98).contains(&w),
            "calibrated coverage at effect size {theta} is {w}, outside [0.92, 0.98]"
        );
        cal_values.push(format!("{theta}:{w:.3}"));
    }
    assert!(
        elapsed.as_secs() <= 600,
        "protocol took {}s, over the 10 minute budget",
        elapsed.as_secs()
    );
    pass(
        "coverage-restoration",
        &format!(
            "uncalibrated@1 {uncal_at_1:.3}, calibrated [{}], runtime {:.1}s",
            cal_values.join(", "),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn rmse_ordering() {
    let result = biased_protocol();
    assert!(
        result.calibrated_rmse < 0.06,
        "calibrated rmse {} not below 0.06",
        result.calibrated_rmse
    );
    assert!(
        result.uncalibrated_rmse > 0.3,
        "uncalibrated rmse {} not above 0.3",
        result.uncalibrated_rmse
    );
    pass(
        "rmse-ordering",
        &format!(
            "calibrated {:.4} < 0.06, uncalibrated {:.4} > 0.3",
            result.calibrated_rmse, result.uncalibrated_rmse
        ),
    );
}

#[test]
fn rmse_arithmetic_exactness() {
    let groups = [(1.0, 90usize), (1.5, 95), (2.0, 95), (4.0, 95)];
    let pairs: Vec<(calib_core::interval::CalibratedInterval, f64)> = groups
        .iter()
        .flat_map(|&(theta, covered)| {
            (0..100).map(move |i| {
                let iv = if i < covered {
                    wide_interval()
                } else {
                    empty_interval()
                };
                (iv, theta)
            })
        })
        .collect();
    let report: CoverageReport = coverage(
        &pairs,
        CalibrationMethod::Calibrated,
        BiasModelKind::Constant,
        TrainingDesign::NegPosTrain,
    )
    .unwrap();
    let value = rmse(&report, 0.95);
    assert!(
        (value - 0.025).abs() <= 1e-12,
        "rmse for coverages (0.90, 0.95, 0.95, 0.95) is {value}, expected 0.025"
    );
    pass("rmse-arithmetic", &format!("rmse = {value:.15} (|Δ| ≤ 1e-12)"));
}

fn wide_interval() -> calib_core::interval::CalibratedInterval {
    calib_core::interval::CalibratedInterval {
        lower: -1e30,
        upper: 1e30,
        level: 0.95,
        provenance: calib_core::interval::Provenance {
            method: CalibrationMethod::Calibrated,
            model: None,
            seed: None,
        },
    }
}

fn empty_interval() -> calib_core::interval::CalibratedInterval {
    calib_core::interval::CalibratedInterval {
        lower: 100.0,
        upper: 101.0,
        level: 0.95,
        provenance: calib_core::interval::Provenance {
            method: CalibrationMethod::Calibrated,
            model: None,
            seed: None,
        },
    }
}

#[test]
fn constant_model_oracle_equivalence() {
    // 200 controls with bias ~ Normal(0.3, 0.1²) and τ = 0.05; 3000
    // retained draws against a dense 2-D grid posterior.
    let set = common::synthetic_negatives(200, 0.3, 0.1, 0.05, 31);
    let config = McmcConfig { chains: 3, burn_in: 1000, samples: 1000, thinning: 1, seed: 13 };
    let samples = fit_constant(&set, &config).unwrap();
    assert_eq!(samples.n_retained(), 3000);

    let bias_hat: Vec<f64> =
        set.records().iter().map(|r| r.estimated_bias().unwrap()).collect();
    let tau2: Vec<f64> =
        set.records().iter().map(|r| r.se_log_estimate.powi(2)).collect();
    let m = bias_hat.iter().sum::<f64>() / bias_hat.len() as f64;
    let v = bias_hat.iter().map(|b| (b - m) * (b - m)).sum::<f64>()
        / (bias_hat.len() - 1) as f64;
    let post_sd = (v / bias_hat.len() as f64).sqrt();
    let grid = common::GridPosterior::compute(
        &bias_hat,
        &tau2,
        (m - 12.0 * post_sd, m + 12.0 * post_sd),
        (0.01, 3.0 * v),
        400,
    );

    let mu = samples.diagnostics.param("mu").unwrap();
    let s2 = samples.diagnostics.param("sigma2").unwrap();
    assert!(
        (mu.mean - grid.mean_mu()).abs() <= 3.0 * mu.mcse,
        "posterior mean of μ {} vs grid {} (3 MCSE = {})",
        mu.mean,
        grid.mean_mu(),
        3.0 * mu.mcse
    );
    assert!(
        (s2.mean - grid.mean_sigma2()).abs() <= 3.0 * s2.mcse,
        "posterior mean of σ² {} vs grid {} (3 MCSE = {})",
        s2.mean,
        grid.mean_sigma2(),
        3.0 * s2.mcse
    );

    let mut mu_draws = samples.pooled("mu");
    mu_draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut s2_draws = samples.pooled("sigma2");
    s2_draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for (p, name, draws, grid_q) in [
        (0.025, "μ", &mu_draws, grid.quantile_mu(0.025)),
        (0.975, "μ", &mu_draws, grid.quantile_mu(0.975)),
        (0.025, "σ²", &s2_draws, grid.quantile_sigma2(0.025)),
        (0.975, "σ²", &s2_draws, grid.quantile_sigma2(0.975)),
    ] {
        let q = quantile_sorted(draws, p);
        assert!(
            (q - grid_q).abs() <= 0.01,
            "{name} quantile {p}: sampler {q} vs grid {grid_q}"
        );
    }
    pass(
        "constant-oracle-equivalence",
        &format!(
            "μ mean {:.4} (grid {:.4}), σ² mean {:.5} (grid {:.5}), quantiles within 0.01",
            mu.mean,
            grid.mean_mu(),
            s2.mean,
            grid.mean_sigma2()
        ),
    );
}

#[test]
fn marginalization_consistency() {
    let set = common::synthetic_negatives(100, 0.2, 0.12, 0.1, 51);
    let config = McmcConfig { chains: 3, burn_in: 1000, samples: 1500, thinning: 1, seed: 29 };
    let marginal = fit_constant(&set, &config).unwrap();
    let explicit = fit_constant_explicit(&set, &config).unwrap();

    for param in ["mu", "sigma2"] {
        let a = marginal.diagnostics.param(param).unwrap();
        let b = explicit.diagnostics.param(param).unwrap();
        let tol = 3.0 * (a.mcse.powi(2) + b.mcse.powi(2)).sqrt();
        assert!(
            (a.mean - b.mean).abs() <= tol,
            "{param}: marginalized {} vs explicit {} exceeds 3 combined MCSE {tol}",
            a.mean,
            b.mean
        );
    }
    pass(
        "marginalization-consistency",
        &format!(
            "μ: {:.4} vs {:.4}; σ²: {:.5} vs {:.5}",
            marginal.diagnostics.param("mu").unwrap().mean,
            explicit.diagnostics.param("mu").unwrap().mean,
            marginal.diagnostics.param("sigma2").unwrap().mean,
            explicit.diagnostics.param("sigma2").unwrap().mean
        ),
    );
}

#[test]
fn frequentist_mle_recovery() {
    let set = common::synthetic_negatives(1000, 0.25, 0.05, 0.1, 11);
    let null = fit_null(&set).unwrap();
    assert!(
        (null.nu - 0.25).abs() <= 0.01,
        "recovered ν {} not within ±0.01 of 0.25",
        null.nu
    );
    assert!(
        (null.sigma2.sqrt() - 0.05).abs() <= 0.02,
        "recovered σ {} not within ±0.02 of 0.05",
        null.sigma2.sqrt()
    );

    let data: Vec<(f64, f64)> = set
        .records()
        .iter()
        .map(|r| (r.log_estimate, r.se_log_estimate.powi(2)))
        .collect();
    let (grid_nu, grid_s2, grid_ll) = common::grid_null_mle(&data);
    assert!(
        null.log_likelihood >= grid_ll - 1e-4,
        "fit log likelihood {} below grid optimum {} (ν {}, σ² {})",
        null.log_likelihood,
        grid_ll,
        grid_nu,
        grid_s2
    );
    pass(
        "frequentist-mle-recovery",
        &format!(
            "ν {:.4} (target 0.25), σ {:.4} (target 0.05), ll {:.4} ≥ grid {:.4} − 1e-4",
            null.nu,
            null.sigma2.sqrt(),
            null.log_likelihood,
            grid_ll
        ),
    );
}

#[test]
fn wald_reduction() {
    // Frequentist route with an identity model.
    let model = SystematicErrorModel::identity();
    let (est, se) = (0.6931, 0.1);
    let iv = calibrated_ci(&model, est, se, 0.95).unwrap();
    let half = 1.959964 * se;
    assert!(
        (iv.lower - (est - half)).abs() <= 1e-6 && (iv.upper - (est + half)).abs() <= 1e-6,
        "frequentist interval [{}, {}] vs Wald [{}, {}]",
        iv.lower,
        iv.upper,
        est - half,
        est + half
    );

    // Bayesian route with degenerate draws at μ = 0, σ² = 0.
    let samples = PosteriorSamples::from_chains(
        ModelKind::Constant,
        vec![ChainDraws {
            mu: vec![0.0; 3000],
            sigma2: vec![0.0; 3000],
            slope_mean: None,
            slope_var: None,
        }],
        123,
    )
    .unwrap();
    let biv = calibrate_posterior(&samples, est, se, 0.95).unwrap();
    let z = z_for_level(0.95);
    let lower_err = (biv.lower - (est - z * se)).abs();
    let upper_err = (biv.upper - (est + z * se)).abs();
    assert!(
        lower_err <= 0.005 && upper_err <= 0.005,
        "bayes interval [{}, {}] vs Wald, errors ({lower_err}, {upper_err})",
        biv.lower,
        biv.upper
    );
    pass(
        "wald-reduction",
        &format!(
            "frequentist within 1e-6; bayes endpoint errors ({lower_err:.4}, {upper_err:.4}) \
             ≤ 0.005 at 3000 draws"
        ),
    );
}

#[test]
fn injection_fidelity() {
    // 1000-entry cohort with 200 outcomes total.
    let mut entries = Vec::with_capacity(1000);
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(77);
    for i in 0..1000 {
        entries.push(CohortEntry {
            duration_days: 50 + (rng.random::<u32>() % 250),
            outcome_count: u64::from(i % 5 == 0),
            covariates: (0..3).map(|_| f64::from(rng.random::<bool>())).collect(),
        });
    }
    let cohort = SyntheticCohort { entries };
    assert_eq!(cohort.total_outcomes(), 200);
    let model = fit_poisson_l1(&cohort, 10).unwrap();

    for theta in [1.5, 2.0, 4.0] {
        let mut ratios = Vec::with_capacity(100);
        for seed in 0..100 {
            let result = inject(&cohort, &model, theta, 0.01, seed, 10_000).unwrap();
            assert!(
                (result.achieved_ratio - theta).abs() <= 0.01,
                "seed {seed}: achieved ratio {} misses {theta} by more than 0.01",
                result.achieved_ratio
            );
            ratios.push(result.achieved_ratio);
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(
            (mean - theta).abs() <= 0.02,
            "seed-averaged ratio {mean} not within ±0.02 of {theta}"
        );
        pass(
            "injection-fidelity",
            &format!("θ {theta}: all 100 seeds within ±0.01, seed average {mean:.4}"),
        );
    }
}

#[test]
fn protocol_guard_linear_negative_only() {
    let universe = simulate_control_universe(&SimulationSpec {
        families: 20,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let err = run_protocol(
        &universe,
        TrainingDesign::NegOnlyTrain,
        BiasModelKind::Linear,
        &McmcConfig::default(),
        0.8,
        1,
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2, "expected a usage-class rejection, got {err}");
    pass("protocol-guard", &format!("rejected with: {err}"));
}

#[test]
fn pipeline_determinism() {
    use std::process::Command;

    let bin = env!("CARGO_BIN_EXE_calib");
    let run_pipeline = |dir: &std::path::Path| {
        let universe = dir.join("universe.csv");
        let draws = dir.join("draws.csv");
        let calibrated = dir.join("calibrated.csv");
        let eval_dir = dir.join("eval");
        let steps: Vec<Vec<String>> = vec![
            vec![
                "simulate".into(),
                "--output".into(),
                universe.display().to_string(),
                "--families".into(),
                "40".into(),
                "--bias-mean".into(),
                "0.15".into(),
                "--bias-sd".into(),
                "0.04".into(),
                "--seed".into(),
                "5".into(),
            ],
            vec![
                "bayes-fit".into(),
                "--input".into(),
                universe.display().to_string(),
                "--output".into(),
                draws.display().to_string(),
                "--model".into(),
                "constant".into(),
                "--chains".into(),
                "2".into(),
                "--burn-in".into(),
                "200".into(),
                "--samples".into(),
                "300".into(),
                "--seed".into(),
                "5".into(),
            ],
            vec![
                "bayes-calibrate".into(),
                "--input".into(),
                universe.display().to_string(),
                "--draws".into(),
                draws.display().to_string(),
                "--output".into(),
                calibrated.display().to_string(),
            ],
            vec![
                "evaluate".into(),
                "--input".into(),
                universe.display().to_string(),
                "--out-dir".into(),
                eval_dir.display().to_string(),
                "--design".into(),
                "neg-pos".into(),
                "--model".into(),
                "constant".into(),
                "--chains".into(),
                "2".into(),
                "--burn-in".into(),
                "200".into(),
                "--samples".into(),
                "300".into(),
                "--svg".into(),
                "--seed".into(),
                "5".into(),
            ],
        ];
        for step in steps {
            let status = Command::new(bin)
                .args(&step)
                .status()
                .expect("spawn calib");
            assert!(status.success(), "step {:?} failed", step[0]);
        }
    };

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_pipeline(dir_a.path());
    run_pipeline(dir_b.path());

    let mut compared = 0;
    let mut walk = vec![std::path::PathBuf::new()];
    while let Some(rel) = walk.pop() {
        let abs_a = dir_a.path().join(&rel);
        for entry in std::fs::read_dir(&abs_a).unwrap() {
            let entry = entry.unwrap();
            let rel_child = rel.join(entry.file_name());
            if entry.file_type().unwrap().is_dir() {
                walk.push(rel_child);
            } else {
                let a = std::fs::read(dir_a.path().join(&rel_child)).unwrap();
                let b = std::fs::read(dir_b.path().join(&rel_child)).unwrap();
                assert_eq!(
                    a,
                    b,
                    "artifact {:?} differs between identical runs",
                    rel_child
                );
                compared += 1;
            }
        }
    }
    assert!(compared >= 8, "only {compared} artifacts compared");
    pass(
        "pipeline-determinism",
        &format!("{compared} artifacts byte-identical across two seeded runs"),
    );
}
