//! End-to-end gate suite. Each test exercises one shipped guarantee at
//! desk scale and prints a single `ACCEPTANCE <n> (<name>): PASS|FAIL`
//! line (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! The coverage gates (4–8) run entire Monte Carlo experiments through
//! `run_experiment`, sharing one fig2 run between the gates that need it.

use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use adaptz::adaptz::{adaptz_glm, adaptz_pl, glm_direction, pl_direction};
use adaptz::datagen::{gen_linear_adaptive, BetaSpec, GenConfig};
use adaptz::glmweights::{glm_cov, glm_cov_inverse_closed};
use adaptz::harness::{
    check_identities, preset, run_experiment, write_outputs, EstimatorKind, ExperimentConfig,
    ExperimentReport, EstimatorSummary,
};
use adaptz::linalg::{gauss_jordan_invert, sym_eigen};
use adaptz::model::{ArmDraw, LinkKind, Sample};
use adaptz::pilot::{fit_pilot, lasso_fit, logistic_mle, PilotKind};
use adaptz::probvec::{cov_sqrt, SelectionProbs};
use adaptz::rng::{standard_normal, stream_rng, Stream};

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {n} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "ACCEPTANCE {n} ({name}) failed: {detail}");
}

fn summary_for(report: &ExperimentReport, kind: EstimatorKind) -> &EstimatorSummary {
    report
        .summaries
        .iter()
        .find(|s| s.estimator == kind)
        .unwrap_or_else(|| panic!("{kind} missing from the report"))
}

fn level_index(levels: &[f64], level: f64) -> usize {
    levels
        .iter()
        .position(|l| (l - level).abs() < 1e-9)
        .unwrap_or_else(|| panic!("level {level} missing from the grid {levels:?}"))
}

// ---------------------------------------------------------------------------
// 1. Exact finite-sum identities on random probability vectors.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_1_exact_identities() {
    let start = Instant::now();
    let checks = check_identities(1000, 20260816);
    let secs = start.elapsed().as_secs_f64();
    let mut detail = format!("{secs:.2}s;");
    let mut pass = secs < 5.0;
    for check in &checks {
        pass &= check.pass();
        detail.push_str(&format!(
            " {}: {:.2e} (tol {:.0e});",
            check.name, check.worst, check.tol
        ));
    }
    verdict(1, "exact identities", pass, &detail);
}

// ---------------------------------------------------------------------------
// 2. Identity-link reduction: the generalized estimators collapse to the
//    partial-linear ones, and the weights collapse to (π, Σ^{-1/2}).
// ---------------------------------------------------------------------------

#[test]
fn acceptance_2_identity_link_reduction() {
    let mut rng = stream_rng(102, 0, Stream::Params);
    let mut worst_theta = 0.0_f64;
    let mut worst_dir = 0.0_f64;
    let mut worst_m = 0.0_f64;
    let mut worst_omega = 0.0_f64;
    for instance in 0..100 {
        let d0 = rng.gen_range(1..=3usize);
        let d1 = rng.gen_range(1..=4usize);
        let n = rng.gen_range(60..=120usize);
        let cfg = GenConfig {
            d0,
            d1,
            n,
            n1: n / 4,
            c_ucb: 2.0,
            t: 0.2,
            link: LinkKind::Identity { noise_sd: 1.0 },
            pilot_kind: PilotKind::Ols,
            ar_gamma: 0.0,
            sparsity: 0,
            refit_every: 1,
            theta_star: (0..d0).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            beta_star: BetaSpec::Fixed((0..d1).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        };
        let (dataset, _, _) = gen_linear_adaptive(&cfg, 7000 + instance).expect("generation");
        let pilot =
            fit_pilot(PilotKind::Ols, dataset.fold1(), cfg.link, None, None).expect("pilot");

        let pl = adaptz_pl(&dataset, &pilot, 1.0).expect("partial-linear fit");
        let glm = adaptz_glm(&dataset, &pilot, cfg.link).expect("generalized fit");
        assert!(glm.converged, "identity-link Newton must converge");
        worst_theta = worst_theta.max((&glm.theta - &pl.theta).amax());

        let mut u = DVector::from_fn(d0, |_, _| rng.gen_range(-1.0..1.0));
        if u.norm() < 1e-3 {
            u[0] = 1.0;
        }
        u /= u.norm();
        let pl_dir = pl_direction(&dataset, &u, &pilot).expect("direction fit");
        let glm_dir = glm_direction(&dataset, &u, &pilot, cfg.link).expect("direction fit");
        worst_dir = worst_dir.max((glm_dir.theta_u - pl_dir.theta_u).abs());

        // Weight reduction at a random interior probability vector.
        let raw: Vec<f64> = (0..=d0).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let probs =
            SelectionProbs::new(raw[0] / total, raw[1..].iter().map(|v| v / total).collect())
                .expect("valid probabilities");
        let theta = DVector::from_fn(d0, |_, _| rng.gen_range(-1.0..1.0));
        let weights =
            glm_cov(&probs, &theta, rng.gen_range(-1.0..1.0), cfg.link).expect("weights");
        worst_m = worst_m.max((&weights.m - probs.arm_vector()).amax());
        let inv_sqrt = gauss_jordan_invert(&cov_sqrt(&probs)).expect("invertible root");
        worst_omega = worst_omega.max((&weights.omega - &inv_sqrt).amax());
    }
    let pass =
        worst_theta <= 1e-8 && worst_dir <= 1e-8 && worst_m <= 1e-10 && worst_omega <= 1e-10;
    let detail = format!(
        "worst vector gap {worst_theta:.2e} (tol 1e-8), direction gap {worst_dir:.2e} \
         (tol 1e-8), mean-vector gap {worst_m:.2e} (tol 1e-10), whitening gap \
         {worst_omega:.2e} (tol 1e-10)"
    );
    verdict(2, "identity-link reduction", pass, &detail);
}

// ---------------------------------------------------------------------------
// 3. Solver oracles: lasso vs proximal gradient + KKT, likelihood
//    stationarity, closed-form weighted-covariance inverse.
// ---------------------------------------------------------------------------

/// (1/(2n))·‖y − Qb‖² + λ‖b‖₁, the objective `lasso_fit` minimizes.
fn lasso_objective(q: &DMatrix<f64>, y: &DVector<f64>, b: &DVector<f64>, lambda: f64) -> f64 {
    let resid = y - q * b;
    resid.norm_squared() / (2.0 * y.len() as f64) + lambda * b.iter().map(|v| v.abs()).sum::<f64>()
}

/// Independent proximal-gradient (ISTA) reference solver.
fn ista_lasso(q: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let n = y.len() as f64;
    let gram = q.transpose() * q / n;
    let (values, _) = sym_eigen(&gram);
    let step = 1.0 / values.max();
    let soft = |x: f64, t: f64| {
        if x > t {
            x - t
        } else if x < -t {
            x + t
        } else {
            0.0
        }
    };
    let mut b = DVector::zeros(q.ncols());
    for _ in 0..200_000 {
        let grad = q.transpose() * (q * &b - y) / n;
        let mut moved = 0.0_f64;
        for j in 0..b.len() {
            let new = soft(b[j] - step * grad[j], step * lambda);
            moved = moved.max((new - b[j]).abs());
            b[j] = new;
        }
        if moved < 1e-13 {
            break;
        }
    }
    b
}

fn random_probs(rng: &mut impl Rng, d0: usize) -> SelectionProbs {
    let raw: Vec<f64> = (0..=d0).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    SelectionProbs::new(raw[0] / total, raw[1..].iter().map(|v| v / total).collect())
        .expect("valid probabilities")
}

#[test]
fn acceptance_3_solver_oracles() {
    let mut rng = stream_rng(103, 0, Stream::Params);
    let probs_dummy = SelectionProbs::new(0.25, vec![0.25, 0.25, 0.25]).expect("valid");

    // Lasso against the proximal-gradient oracle on 20×8 designs.
    let mut worst_obj_gap = f64::NEG_INFINITY;
    let mut worst_kkt = 0.0_f64;
    for _ in 0..50 {
        let (d0, d1, n) = (3usize, 5usize, 20usize);
        let samples: Vec<Sample> = (0..n)
            .map(|_| Sample {
                arm: ArmDraw { index: rng.gen_range(0..=d0) },
                z: DVector::from_fn(d1, |_, _| standard_normal(&mut rng)),
                y: standard_normal(&mut rng) * 1.5,
                probs: probs_dummy.clone(),
            })
            .collect();
        let lambda = rng.gen_range(0.05..0.5);
        let fit = lasso_fit(&samples, lambda).expect("lasso fit");
        assert!(fit.converged, "coordinate descent must converge on a 20x8 design");

        let p = d0 + d1;
        let mut q = DMatrix::zeros(n, p);
        let mut y = DVector::zeros(n);
        for (i, s) in samples.iter().enumerate() {
            let x = s.covariate();
            for k in 0..d0 {
                q[(i, k)] = x[k];
            }
            for k in 0..d1 {
                q[(i, d0 + k)] = s.z[k];
            }
            y[i] = s.y;
        }
        let mut b = DVector::zeros(p);
        b.rows_mut(0, d0).copy_from(&fit.theta_hat);
        b.rows_mut(d0, d1).copy_from(&fit.beta_hat);

        let oracle = ista_lasso(&q, &y, lambda);
        worst_obj_gap = worst_obj_gap
            .max(lasso_objective(&q, &y, &b, lambda) - lasso_objective(&q, &y, &oracle, lambda));

        let grad = q.transpose() * (&q * &b - &y) / n as f64;
        for j in 0..p {
            let slack = if b[j] != 0.0 {
                (grad[j] + lambda * b[j].signum()).abs()
            } else {
                (grad[j].abs() - lambda).max(0.0)
            };
            worst_kkt = worst_kkt.max(slack);
        }
    }

    // Likelihood stationarity on well-posed logistic designs.
    let mut worst_grad = 0.0_f64;
    for _ in 0..50 {
        let (d0, d1, n) = (2usize, 6usize, 200usize);
        let probs_dummy = SelectionProbs::new(0.4, vec![0.3, 0.3]).expect("valid");
        let theta = DVector::from_fn(d0, |_, _| rng.gen_range(-0.8..0.8));
        let beta = DVector::from_fn(d1, |_, _| rng.gen_range(-0.8..0.8));
        let samples: Vec<Sample> = (0..n)
            .map(|_| {
                let arm = rng.gen_range(0..=d0);
                let z = DVector::from_fn(d1, |_, _| standard_normal(&mut rng));
                let eta = if arm > 0 { theta[arm - 1] } else { 0.0 } + beta.dot(&z);
                let mean = 1.0 / (1.0 + (-eta).exp());
                Sample {
                    arm: ArmDraw { index: arm },
                    z,
                    y: if rng.gen::<f64>() < mean { 1.0 } else { 0.0 },
                    probs: probs_dummy.clone(),
                }
            })
            .collect();
        let fit = logistic_mle(&samples).expect("likelihood fit");
        assert!(fit.converged, "Newton must converge on a well-posed 200x8 design");
        let mut grad = DVector::zeros(d0 + d1);
        for s in &samples {
            let eta = fit.eta(s.arm.index, &s.z);
            let mean = 1.0 / (1.0 + (-eta).exp());
            let x = s.covariate();
            let mut qrow = DVector::zeros(d0 + d1);
            qrow.rows_mut(0, d0).copy_from(&x);
            qrow.rows_mut(d0, d1).copy_from(&s.z);
            grad.axpy(mean - s.y, &qrow, 1.0);
        }
        grad /= n as f64;
        worst_grad = worst_grad.max(grad.amax());
    }

    // Closed-form inverse of the variance-weighted covariance.
    let mut worst_inv = 0.0_f64;
    for _ in 0..50 {
        let d0 = rng.gen_range(1..=6usize);
        let probs = random_probs(&mut rng, d0);
        let theta = DVector::from_fn(d0, |_, _| rng.gen_range(-1.5..1.5));
        let h = rng.gen_range(-1.5..1.5);
        let weights = glm_cov(&probs, &theta, h, LinkKind::Logistic).expect("weights");
        let closed =
            glm_cov_inverse_closed(&probs, &theta, h, LinkKind::Logistic).expect("closed form");
        let gj = gauss_jordan_invert(&weights.sigma_glm).expect("invertible covariance");
        worst_inv = worst_inv.max((&closed - &gj).amax());
    }

    let pass = worst_obj_gap <= 1e-8 && worst_kkt <= 1e-8 && worst_grad < 1e-8 && worst_inv <= 1e-8;
    let detail = format!(
        "objective gap {worst_obj_gap:.2e} (tol 1e-8), KKT slack {worst_kkt:.2e} (tol 1e-8), \
         likelihood gradient {worst_grad:.2e} (tol 1e-8), closed-inverse gap {worst_inv:.2e} \
         (tol 1e-8)"
    );
    verdict(3, "solver oracles", pass, &detail);
}

// ---------------------------------------------------------------------------
// 4/7/8. Linear coverage experiment, shared between three gates.
// ---------------------------------------------------------------------------

/// fig2 with 0.95 merged into the level grid (the default grid steps by
/// 0.02 and skips it) and a pinned worker count.
fn fig2_config(workers: usize) -> ExperimentConfig {
    let mut cfg = preset("fig2").expect("preset exists");
    cfg.levels.push(0.95);
    cfg.levels.sort_by(|a, b| a.total_cmp(b));
    cfg.workers = workers;
    cfg
}

static FIG2_FIRST: OnceLock<(ExperimentReport, f64)> = OnceLock::new();
static FIG2_SECOND: OnceLock<ExperimentReport> = OnceLock::new();

fn fig2_first() -> &'static (ExperimentReport, f64) {
    FIG2_FIRST.get_or_init(|| {
        let start = Instant::now();
        let report = run_experiment(&fig2_config(4)).expect("fig2 run");
        (report, start.elapsed().as_secs_f64())
    })
}

fn fig2_second() -> &'static ExperimentReport {
    FIG2_SECOND.get_or_init(|| run_experiment(&fig2_config(2)).expect("fig2 rerun"))
}

#[test]
fn acceptance_4_linear_coverage_and_normality() {
    let (report, secs) = fig2_first();
    let dir = summary_for(report, EstimatorKind::PlDirection);
    let unw = summary_for(report, EstimatorKind::UnweightedZ);
    let dir_cov = dir.coverage.as_ref().expect("direction coverage");
    let unw_cov = unw.coverage.as_ref().expect("unweighted coverage");
    let i95 = level_index(&dir_cov.levels, 0.95);

    let two_sided = dir_cov.cov_two[i95];
    let ks = dir_cov.ks_normal;
    let lower_gap = dir_cov.cov_lower[i95] - unw_cov.cov_lower[i95];
    let pass = !report.unreliable
        && *secs < 300.0
        && (0.925..=0.975).contains(&two_sided)
        && ks < 0.07
        && lower_gap >= 0.005;
    let detail = format!(
        "{secs:.1}s (limit 300); two-sided 95% coverage {two_sided:.4} (band [0.925, 0.975]); \
         normality distance {ks:.4} (tol 0.07); lower-tail coverage {:.4} reweighted vs {:.4} \
         unweighted, gap {lower_gap:.4} (need ≥ 0.005)",
        dir_cov.cov_lower[i95], unw_cov.cov_lower[i95]
    );
    verdict(4, "linear coverage and normality", pass, &detail);
}

#[test]
fn acceptance_7_chi2_region_calibration() {
    let (report, _) = fig2_first();
    let vec_summary = summary_for(report, EstimatorKind::AdaptzPl);
    let reject = vec_summary.chi2_reject_rate_95.expect("vector estimator records the rate");
    let pass = (0.025..=0.075).contains(&reject);
    let detail = format!("rejection rate {reject:.4} at the 95% quantile (band [0.025, 0.075])");
    verdict(7, "confidence region calibration", pass, &detail);
}

#[test]
fn acceptance_8_worker_count_determinism() {
    let (first, _) = fig2_first();
    let second = fig2_second();

    let dir_a = tempfile::tempdir().expect("temp dir");
    let dir_b = tempfile::tempdir().expect("temp dir");
    let mut a = first.clone();
    a.config.output_dir = dir_a.path().to_path_buf();
    let mut b = second.clone();
    b.config.output_dir = dir_b.path().to_path_buf();
    let written_a = write_outputs(&a, false).expect("artifacts");
    let written_b = write_outputs(&b, false).expect("artifacts");

    let csvs =
        |paths: &[std::path::PathBuf]| -> Vec<std::path::PathBuf> {
            paths.iter().filter(|p| p.extension().is_some_and(|e| e == "csv")).cloned().collect()
        };
    let (csv_a, csv_b) = (csvs(&written_a), csvs(&written_b));
    let mut pass = first.workers_used != second.workers_used && csv_a.len() == csv_b.len();
    let mut mismatches = Vec::new();
    for (pa, pb) in csv_a.iter().zip(&csv_b) {
        assert_eq!(pa.file_name(), pb.file_name(), "artifact sets must line up");
        let (bytes_a, bytes_b) =
            (std::fs::read(pa).expect("read"), std::fs::read(pb).expect("read"));
        if bytes_a != bytes_b {
            pass = false;
            mismatches.push(pa.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    let detail = format!(
        "{} workers vs {}; {} CSV files compared; mismatches: {:?}",
        first.workers_used,
        second.workers_used,
        csv_a.len(),
        mismatches
    );
    verdict(8, "worker-count determinism", pass, &detail);
}

// ---------------------------------------------------------------------------
// 5. Downward bias of the unweighted first coordinate at lasso scale.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_5_unweighted_bias() {
    let start = Instant::now();
    let cfg = preset("fig1-scaled").expect("preset exists");
    let report = run_experiment(&cfg).expect("bias run");
    let secs = start.elapsed().as_secs_f64();

    let unw = summary_for(&report, EstimatorKind::UnweightedZ);
    let cov = unw.coverage.as_ref().expect("unweighted coverage");
    let t_stat = cov.std_error_mean / (cov.std_error_sd / (cov.replications as f64).sqrt());
    let pass = secs < 600.0 && cov.std_error_mean < 0.0 && t_stat < -2.0;
    let detail = format!(
        "{secs:.1}s (limit 600); mean standardized error {:.4} over {} replications, \
         one-sided t {:.2} (need < -2)",
        cov.std_error_mean, cov.replications, t_stat
    );
    verdict(5, "unweighted downward bias", pass, &detail);
}

// ---------------------------------------------------------------------------
// 6. Logistic coverage and Newton reliability at desk scale.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_6_logistic_coverage() {
    let start = Instant::now();
    let cfg = preset("fig4-scaled").expect("preset exists");
    let report = run_experiment(&cfg).expect("logistic run");
    let secs = start.elapsed().as_secs_f64();

    let dir = summary_for(&report, EstimatorKind::GlmDirection);
    let dir_cov = dir.coverage.as_ref().expect("direction coverage");
    let i90 = level_index(&dir_cov.levels, 0.90);
    let two_sided = dir_cov.cov_two[i90];

    let glm = summary_for(&report, EstimatorKind::AdaptzGlm);
    let successes = cfg.reps - glm.failures;
    let converged_share = glm.convergence_rate * successes as f64 / cfg.reps as f64;

    let pass = secs < 600.0
        && (0.85..=0.95).contains(&two_sided)
        && converged_share >= 0.99;
    let detail = format!(
        "{secs:.1}s (limit 600); two-sided 90% coverage {two_sided:.4} (band [0.85, 0.95]); \
         Newton converged on {converged_share:.4} of replications (need ≥ 0.99)"
    );
    verdict(6, "logistic coverage", pass, &detail);
}
