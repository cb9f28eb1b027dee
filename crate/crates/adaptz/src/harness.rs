//! Experiment runner and command-line interface.
//!
//! Drives T replications of an adaptive data-generating process across a
//! worker pool, applies the selected estimators and baselines to each
//! replication, aggregates coverage reports, and writes CSV/JSON/SVG
//! artifacts. Every run is bit-reproducible for a fixed (config, seed)
//! pair regardless of worker count: replication r is seeded with
//! `base_seed + r` and results are merged by replication index.

use std::fmt;
use std::fs;
use std::io::{BufReader, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::adaptz::{
    adaptz_glm, adaptz_pl, glm_direction, glm_score, pl_direction, pl_score, DirSolution,
};
use crate::datagen::{
    gen_linear_adaptive, gen_logistic_adaptive, resolve_beta, universal_lambda,
    unweighted_z_baseline, BetaSpec, GenConfig,
};
use crate::error::{Error, Result};
use crate::glmweights::glm_cov;
use crate::inference::{
    chi2_quantile, chi2_region_stat, coverage_stats, default_level_grid, dir_interval,
    write_coverage_csv, write_std_errors_csv, CoverageReport, Interval, IntervalKind,
};
use crate::linalg::{gauss_jordan_invert, sym_eigen};
use crate::model::{
    covariate_vector, link_eval, read_csv, write_csv, Dataset, LinkKind, Sample,
};
use crate::pilot::{fit_pilot, logistic_mle, PilotFit, PilotKind};
use crate::probvec::{cov_inverse_explicit, cov_matrix, cov_sqrt, direction_weight, SelectionProbs};
use crate::rng::{stream_rng, Stream};

// ---------------------------------------------------------------------------
// Estimator selection.
// ---------------------------------------------------------------------------

/// The estimators and baselines the runner knows how to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Reweighted two-stage partial-linear estimator (full vector).
    AdaptzPl,
    /// Reweighted fixed-direction partial-linear estimator (scalar).
    PlDirection,
    /// Reweighted two-stage generalized-linear estimator (full vector).
    AdaptzGlm,
    /// Reweighted fixed-direction generalized-linear estimator (scalar).
    GlmDirection,
    /// Two-stage Z-estimator without the probability reweighting.
    UnweightedZ,
    /// Full-sample ordinary least squares with i.i.d.-theory intervals.
    Ols,
    /// Full-sample maximum likelihood with i.i.d.-theory intervals.
    Mle,
}

const ESTIMATOR_NAMES: [(EstimatorKind, &str); 7] = [
    (EstimatorKind::AdaptzPl, "adaptz-pl"),
    (EstimatorKind::PlDirection, "pl-direction"),
    (EstimatorKind::AdaptzGlm, "adaptz-glm"),
    (EstimatorKind::GlmDirection, "glm-direction"),
    (EstimatorKind::UnweightedZ, "unweighted-z"),
    (EstimatorKind::Ols, "ols"),
    (EstimatorKind::Mle, "mle"),
];

impl EstimatorKind {
    /// Whether this estimator targets ⟨u, θ*⟩ rather than the vector θ*.
    pub fn is_direction(self) -> bool {
        matches!(self, EstimatorKind::PlDirection | EstimatorKind::GlmDirection)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = ESTIMATOR_NAMES.iter().find(|(k, _)| k == self).map(|(_, n)| *n).unwrap();
        f.write_str(name)
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ESTIMATOR_NAMES
            .iter()
            .find(|(_, n)| *n == s)
            .map(|(k, _)| *k)
            .ok_or_else(|| {
                let names: Vec<&str> = ESTIMATOR_NAMES.iter().map(|(_, n)| *n).collect();
                Error::Usage(format!("unknown estimator {s:?}; choose from {}", names.join(", ")))
            })
    }
}

// ---------------------------------------------------------------------------
// Experiment configuration.
// ---------------------------------------------------------------------------

/// Full description of one coverage experiment: the data-generating
/// process, how many replications, which estimators, and where the
/// artifacts go.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub gen: GenConfig,
    /// Number of replications T.
    pub reps: usize,
    pub estimators: Vec<EstimatorKind>,
    /// Direction u for the fixed-direction estimators; must be unit-norm
    /// when one of them is selected.
    pub direction: Vec<f64>,
    /// Confidence levels (ascending, each in (0,1)).
    pub levels: Vec<f64>,
    /// Replication r draws its data with seed `base_seed + r`.
    pub base_seed: u64,
    /// Worker threads; 0 picks the machine's parallelism. The
    /// `ADAPTZ_THREADS` environment variable overrides either.
    pub workers: usize,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        if self.reps == 0 {
            return Err(Error::Config("need at least one replication".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("select at least one estimator".into()));
        }
        for (i, e) in self.estimators.iter().enumerate() {
            if self.estimators[..i].contains(e) {
                return Err(Error::Config(format!("estimator {e} selected twice")));
            }
        }
        if self.levels.is_empty() {
            return Err(Error::Config("need at least one confidence level".into()));
        }
        for pair in self.levels.windows(2) {
            if !(pair[0] < pair[1]) {
                return Err(Error::Config(format!(
                    "levels must be strictly increasing, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        if self.levels.iter().any(|&l| !(0.0 < l && l < 1.0)) {
            return Err(Error::Config("levels must lie strictly inside (0,1)".into()));
        }
        if self.estimators.iter().any(|e| e.is_direction()) {
            if self.direction.len() != self.gen.d0 {
                return Err(Error::Config(format!(
                    "direction has {} entries but d0 = {}",
                    self.direction.len(),
                    self.gen.d0
                )));
            }
            let norm: f64 = self.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "direction must be unit-norm for direction estimators, got ‖u‖ = {norm}"
                )));
            }
        }
        Ok(())
    }

    /// Worker count after applying the `ADAPTZ_THREADS` override and the
    /// `0 = auto` rule.
    pub fn effective_workers(&self) -> usize {
        if let Ok(v) = std::env::var("ADAPTZ_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n >= 1 {
                    return n;
                }
            }
        }
        if self.workers >= 1 {
            return self.workers;
        }
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

/// Named parameter sets for the shipped experiments. `fig2`/`fig3` are the
/// linear coverage studies, `fig4` the logistic one; the `-scaled`
/// variants shrink the bias-demonstration and logistic studies to
/// desk-scale runtimes.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let linear = |noise_sd: f64| LinkKind::Identity { noise_sd };
    let base = ExperimentConfig {
        gen: GenConfig {
            d0: 2,
            d1: 5,
            n: 500,
            n1: 125,
            c_ucb: 2.0,
            t: 0.2,
            link: linear(1.0),
            pilot_kind: PilotKind::Ols,
            ar_gamma: 0.0,
            sparsity: 0,
            refit_every: 1,
            theta_star: vec![2.0, 2.0],
            beta_star: BetaSpec::Draw,
        },
        reps: 1000,
        estimators: vec![
            EstimatorKind::PlDirection,
            EstimatorKind::AdaptzPl,
            EstimatorKind::UnweightedZ,
            EstimatorKind::Ols,
        ],
        direction: vec![1.0, 0.0],
        levels: default_level_grid(),
        base_seed: 17,
        workers: 0,
        output_dir: PathBuf::from("out/fig2"),
    };
    let mut cfg = base.clone();
    match name {
        "fig2" => {}
        "fig3" => {
            cfg.gen.d1 = 1000;
            cfg.gen.n = 950;
            cfg.gen.n1 = 475;
            cfg.gen.c_ucb = 16.0;
            cfg.gen.pilot_kind = PilotKind::Lasso;
            cfg.gen.sparsity = 2;
            cfg.gen.refit_every = 25;
            cfg.estimators =
                vec![EstimatorKind::PlDirection, EstimatorKind::AdaptzPl, EstimatorKind::UnweightedZ];
            cfg.output_dir = PathBuf::from("out/fig3");
        }
        "fig1-scaled" => {
            cfg.gen.d1 = 200;
            cfg.gen.n = 400;
            cfg.gen.n1 = 200;
            // Desk-scale surrogate of the high-dimensional bias demo. At
            // this reduced n the full-scale exploration constant C = 16
            // makes the UCB bonus dominate the reward-estimate noise, so
            // the allocation barely reacts to realized rewards and the
            // downward bias of the unweighted estimator fades below
            // detectability at 200 replications; C = 4 with a slightly
            // faster-decaying floor (t = 0.24) keeps the policy
            // reward-driven while still exploring every arm.
            cfg.gen.c_ucb = 4.0;
            cfg.gen.t = 0.24;
            cfg.gen.pilot_kind = PilotKind::Lasso;
            cfg.gen.sparsity = 2;
            cfg.gen.refit_every = 25;
            cfg.reps = 200;
            cfg.estimators = vec![EstimatorKind::AdaptzPl, EstimatorKind::UnweightedZ];
            cfg.output_dir = PathBuf::from("out/fig1-scaled");
        }
        "fig4" | "fig4-scaled" => {
            cfg.gen.d1 = 20;
            cfg.gen.n = 2000;
            cfg.gen.n1 = 1000;
            cfg.gen.c_ucb = 8.0;
            cfg.gen.t = 0.1;
            cfg.gen.link = LinkKind::Logistic;
            cfg.gen.pilot_kind = PilotKind::LogisticMle;
            cfg.gen.ar_gamma = 0.5;
            cfg.estimators = vec![
                EstimatorKind::GlmDirection,
                EstimatorKind::AdaptzGlm,
                EstimatorKind::Mle,
            ];
            cfg.output_dir = PathBuf::from("out/fig4");
            if name == "fig4-scaled" {
                cfg.gen.n = 1000;
                cfg.gen.n1 = 500;
                cfg.reps = 300;
                cfg.output_dir = PathBuf::from("out/fig4-scaled");
            }
        }
        other => {
            return Err(Error::Usage(format!(
                "unknown preset {other:?}; choose from fig2, fig3, fig4, fig1-scaled, fig4-scaled"
            )));
        }
    }
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Config file parsing (flat key=value lines).
// ---------------------------------------------------------------------------

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("key {key}: cannot parse {value:?}")))
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse_num(key, v)).collect()
}

/// Applies flat `key = value` lines (`#` or `;` starts a comment) on top of
/// a base configuration. Unknown keys are rejected.
pub fn parse_config_text(text: &str, base: &ExperimentConfig) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    // noise_sd interacts with link; stash it and apply after the link is
    // settled so the two keys work in either order.
    let mut noise_sd: Option<f64> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Parse(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "d0" => cfg.gen.d0 = parse_num(key, value)?,
            "d1" => cfg.gen.d1 = parse_num(key, value)?,
            "n" => cfg.gen.n = parse_num(key, value)?,
            "n1" => cfg.gen.n1 = parse_num(key, value)?,
            "c_ucb" => cfg.gen.c_ucb = parse_num(key, value)?,
            "t" => cfg.gen.t = parse_num(key, value)?,
            "link" => {
                cfg.gen.link = match value {
                    "identity" => LinkKind::Identity { noise_sd: 1.0 },
                    "logistic" => LinkKind::Logistic,
                    other => {
                        return Err(Error::Parse(format!(
                            "key link: expected identity or logistic, got {other:?}"
                        )))
                    }
                };
            }
            "noise_sd" => noise_sd = Some(parse_num(key, value)?),
            "pilot" => cfg.gen.pilot_kind = value.parse()?,
            "ar_gamma" => cfg.gen.ar_gamma = parse_num(key, value)?,
            "sparsity" => cfg.gen.sparsity = parse_num(key, value)?,
            "refit_every" => cfg.gen.refit_every = parse_num(key, value)?,
            "theta_star" => cfg.gen.theta_star = parse_f64_list(key, value)?,
            "beta_star" => {
                cfg.gen.beta_star = if value == "draw" {
                    BetaSpec::Draw
                } else {
                    BetaSpec::Fixed(parse_f64_list(key, value)?)
                };
            }
            "reps" => cfg.reps = parse_num(key, value)?,
            "estimators" => {
                cfg.estimators =
                    value.split(',').map(|v| v.trim().parse()).collect::<Result<_>>()?;
            }
            "direction" => cfg.direction = parse_f64_list(key, value)?,
            "levels" => cfg.levels = parse_f64_list(key, value)?,
            "seed" => cfg.base_seed = parse_num(key, value)?,
            "workers" => cfg.workers = parse_num(key, value)?,
            "output_dir" => cfg.output_dir = PathBuf::from(value),
            other => return Err(Error::Parse(format!("unknown config key {other:?}"))),
        }
    }
    if let Some(sd) = noise_sd {
        match cfg.gen.link {
            LinkKind::Identity { .. } => cfg.gen.link = LinkKind::Identity { noise_sd: sd },
            LinkKind::Logistic => {
                return Err(Error::Parse("noise_sd only applies to the identity link".into()))
            }
        }
    }
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Running one replication.
// ---------------------------------------------------------------------------

/// One estimator's output on one replication.
#[derive(Debug, Clone)]
pub struct EstimatorOutcome {
    /// The scalar the coverage accounting targets: θ̂₁ for vector
    /// estimators, ⟨u, θ̂⟩ for direction estimators.
    pub estimate: f64,
    /// Standardized error (estimate − truth)/se on the same scale the
    /// intervals use; `None` when the truth is unknown (the `estimate`
    /// subcommand).
    pub std_error: Option<f64>,
    /// ‖√n₂·S·(θ̂ − θ*)‖²/σ² for vector estimators.
    pub chi2_stat: Option<f64>,
    pub newton_iters: usize,
    pub converged: bool,
    /// Three intervals (two-sided, upper, lower) per level, in level
    /// order.
    pub intervals: Vec<Interval>,
}

/// Wald-marginal view of a vector solution: the first coordinate with its
/// asymptotic variance σ²·(S⁻²)₁₁/n₂ read off the inverse of the squared
/// scaling matrix, packaged so `dir_interval` applies unchanged.
fn marginal_dir_solution(
    theta1: f64,
    scaling: &DMatrix<f64>,
    n2: usize,
) -> Result<DirSolution> {
    let inv = gauss_jordan_invert(&(scaling * scaling))
        .map_err(|e| Error::DegenerateDesign(format!("scaling matrix is singular ({e})")))?;
    let v11 = inv[(0, 0)];
    if !(v11 > 0.0) {
        return Err(Error::DegenerateDesign(format!(
            "marginal variance came out non-positive ({v11})"
        )));
    }
    Ok(DirSolution { theta_u: theta1, scale_bar: 1.0 / v11.sqrt(), n2 })
}

/// Builds the (two-sided, upper, lower) interval triple at every level.
fn intervals_from(sol: &DirSolution, sigma: f64, levels: &[f64]) -> Result<Vec<Interval>> {
    let kinds =
        [IntervalKind::TwoSided, IntervalKind::UpperOneSided, IntervalKind::LowerOneSided];
    let mut out = Vec::with_capacity(levels.len() * kinds.len());
    for &level in levels {
        for kind in kinds {
            out.push(dir_interval(sol, sigma, 1.0 - level, kind)?);
        }
    }
    Ok(out)
}

/// Interval triple grid for an estimate with a directly known standard
/// error (the i.i.d.-theory baselines): a unit-scale solution at n₂ = 1
/// turns the σ argument of `dir_interval` into the literal standard error.
fn intervals_from_se(center: f64, se: f64, levels: &[f64]) -> Result<Vec<Interval>> {
    intervals_from(&DirSolution { theta_u: center, scale_bar: 1.0, n2: 1 }, se, levels)
}

fn stacked(s: &Sample, d0: usize) -> DVector<f64> {
    let x = s.covariate();
    let d1 = s.z.len();
    let mut q = DVector::zeros(d0 + d1);
    q.rows_mut(0, d0).copy_from(&x);
    q.rows_mut(d0, d1).copy_from(&s.z);
    q
}

/// Full-sample ordinary least squares on the stacked covariates, with the
/// classical known-σ standard error σ·√((QᵀQ)⁻¹₁₁). Valid for i.i.d.
/// data; under adaptive sampling its intervals are the natural naive
/// baseline.
fn ols_baseline(dataset: &Dataset, sigma: f64) -> Result<(f64, f64)> {
    let d0 = dataset.d0();
    let d = d0 + dataset.d1();
    if dataset.n() < d {
        return Err(Error::DegenerateDesign(format!(
            "{} rounds cannot identify {d} coefficients; the normal equations are singular",
            dataset.n()
        )));
    }
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    for s in dataset.samples() {
        let q = stacked(s, d0);
        gram.ger(1.0, &q, &q, 1.0);
        rhs.axpy(s.y, &q, 1.0);
    }
    let inv = gauss_jordan_invert(&gram).map_err(|e| {
        Error::DegenerateDesign(format!("full-sample normal equations are singular ({e})"))
    })?;
    let coef = &inv * &rhs;
    let v11 = inv[(0, 0)];
    if !(v11 > 0.0) {
        return Err(Error::DegenerateDesign(format!(
            "least-squares variance came out non-positive ({v11})"
        )));
    }
    Ok((coef[0], sigma * v11.sqrt()))
}

/// Full-sample logistic maximum likelihood with the observed-information
/// standard error √((Qᵀ W Q)⁻¹₁₁), W = diag(g′(η̂_i)).
fn mle_baseline(dataset: &Dataset) -> Result<(f64, f64, usize, bool)> {
    let d0 = dataset.d0();
    let d = d0 + dataset.d1();
    if dataset.n() < d {
        return Err(Error::DegenerateDesign(format!(
            "{} rounds cannot identify {d} coefficients; the information matrix is singular",
            dataset.n()
        )));
    }
    let fit = logistic_mle(dataset.samples())?;
    let mut info = DMatrix::<f64>::zeros(d, d);
    for s in dataset.samples() {
        let q = stacked(s, d0);
        let w = link_eval(LinkKind::Logistic, fit.eta(s.arm.index, &s.z)).1;
        info.ger(w, &q, &q, 1.0);
    }
    let inv = gauss_jordan_invert(&info).map_err(|e| {
        Error::DegenerateDesign(format!("observed information is singular ({e})"))
    })?;
    let v11 = inv[(0, 0)];
    if !(v11 > 0.0) {
        return Err(Error::DegenerateDesign(format!(
            "likelihood variance came out non-positive ({v11})"
        )));
    }
    Ok((fit.theta_hat[0], v11.sqrt(), fit.iterations, fit.converged))
}

/// Applies one estimator to one replication's data. `truth` is the true
/// target vector when known (simulations); without it the standardized
/// error and χ² statistic are left empty.
#[allow(clippy::too_many_arguments)]
fn run_estimator(
    kind: EstimatorKind,
    dataset: &Dataset,
    pilot: &PilotFit,
    sigma: f64,
    link: LinkKind,
    u: &DVector<f64>,
    truth: Option<&DVector<f64>>,
    levels: &[f64],
) -> Result<EstimatorOutcome> {
    // First-coordinate standardized error of a vector solution, on the
    // same marginal scale its intervals use: (θ̂₁ − θ*₁)/se₁ with
    // se₁ = σ/(√n₂·s̄). The full-vector standardization would mix the
    // coordinates' errors through the off-diagonal of the scaling matrix,
    // hiding exactly the per-coordinate bias this diagnostic watches for.
    let marginal_std_error = |dsol: &DirSolution, star1: f64, noise: f64| -> f64 {
        (dsol.theta_u - star1) * (dsol.n2 as f64).sqrt() * dsol.scale_bar / noise
    };
    match kind {
        EstimatorKind::AdaptzPl | EstimatorKind::UnweightedZ => {
            let sol = if kind == EstimatorKind::AdaptzPl {
                adaptz_pl(dataset, pilot, sigma)?
            } else {
                unweighted_z_baseline(dataset, pilot, sigma)?
            };
            let dsol = marginal_dir_solution(sol.theta[0], &sol.scaling, sol.n2)?;
            Ok(EstimatorOutcome {
                estimate: sol.theta[0],
                std_error: truth.map(|star| marginal_std_error(&dsol, star[0], sigma)),
                chi2_stat: truth.map(|star| chi2_region_stat(&sol, star)),
                newton_iters: 0,
                converged: true,
                intervals: intervals_from(&dsol, sigma, levels)?,
            })
        }
        EstimatorKind::AdaptzGlm => {
            let sol = adaptz_glm(dataset, pilot, link)?;
            // The generalized-linear scaling absorbs the response
            // variance, so the standardization runs at unit noise.
            let dsol = marginal_dir_solution(sol.theta[0], &sol.scaling, sol.n2)?;
            Ok(EstimatorOutcome {
                estimate: sol.theta[0],
                std_error: truth.map(|star| marginal_std_error(&dsol, star[0], 1.0)),
                chi2_stat: truth.map(|star| chi2_region_stat(&sol, star)),
                newton_iters: sol.newton_iters,
                converged: sol.converged,
                intervals: intervals_from(&dsol, 1.0, levels)?,
            })
        }
        EstimatorKind::PlDirection | EstimatorKind::GlmDirection => {
            let (sol, noise) = if kind == EstimatorKind::PlDirection {
                (pl_direction(dataset, u, pilot)?, sigma)
            } else {
                (glm_direction(dataset, u, pilot, link)?, 1.0)
            };
            let std_error = truth.map(|star| {
                (sol.theta_u - u.dot(star)) * (sol.n2 as f64).sqrt() * sol.scale_bar / noise
            });
            Ok(EstimatorOutcome {
                estimate: sol.theta_u,
                std_error,
                chi2_stat: None,
                newton_iters: 0,
                converged: true,
                intervals: intervals_from(&sol, noise, levels)?,
            })
        }
        EstimatorKind::Ols => {
            let (est, se) = ols_baseline(dataset, sigma)?;
            Ok(EstimatorOutcome {
                estimate: est,
                std_error: truth.map(|star| (est - star[0]) / se),
                chi2_stat: None,
                newton_iters: 0,
                converged: true,
                intervals: intervals_from_se(est, se, levels)?,
            })
        }
        EstimatorKind::Mle => {
            let (est, se, iters, converged) = mle_baseline(dataset)?;
            Ok(EstimatorOutcome {
                estimate: est,
                std_error: truth.map(|star| (est - star[0]) / se),
                chi2_stat: None,
                newton_iters: iters,
                converged,
                intervals: intervals_from_se(est, se, levels)?,
            })
        }
    }
}

/// Generation failure or per-estimator outcomes for one replication;
/// errors are carried as strings so they can cross the worker boundary
/// into the report's failure log.
type RepOutcomes = std::result::Result<Vec<std::result::Result<EstimatorOutcome, String>>, String>;

fn run_replication(gen_cfg: &GenConfig, cfg: &ExperimentConfig, r: u64) -> RepOutcomes {
    let seed = cfg.base_seed.wrapping_add(r);
    let generate = match gen_cfg.link {
        LinkKind::Identity { .. } => gen_linear_adaptive,
        LinkKind::Logistic => gen_logistic_adaptive,
    };
    let (dataset, model, _) = generate(gen_cfg, seed).map_err(|e| e.to_string())?;
    let sigma = match gen_cfg.link {
        LinkKind::Identity { noise_sd } => noise_sd,
        LinkKind::Logistic => 1.0,
    };
    let lambda = match gen_cfg.pilot_kind {
        PilotKind::Lasso | PilotKind::GlmLasso => {
            Some(universal_lambda(dataset.n1(), gen_cfg.d0, gen_cfg.d1))
        }
        _ => None,
    };
    let pilot = fit_pilot(gen_cfg.pilot_kind, dataset.fold1(), gen_cfg.link, lambda, None)
        .map_err(|e| format!("pilot fit failed: {e}"))?;
    let u = DVector::from_column_slice(&cfg.direction);
    let outcomes = cfg
        .estimators
        .iter()
        .map(|&kind| {
            run_estimator(
                kind,
                &dataset,
                &pilot,
                sigma,
                gen_cfg.link,
                &u,
                Some(&model.theta_star),
                &cfg.levels,
            )
            .map_err(|e| e.to_string())
        })
        .collect();
    Ok(outcomes)
}

// ---------------------------------------------------------------------------
// Aggregation across replications.
// ---------------------------------------------------------------------------

/// One successful (replication, estimator) cell.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateRow {
    pub replication: usize,
    pub estimator: EstimatorKind,
    pub estimate: f64,
    /// Standardized error (estimate − truth)/se.
    pub std_error: f64,
    pub chi2_stat: Option<f64>,
    pub newton_iters: usize,
    pub converged: bool,
}

/// Aggregated results for one estimator.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorSummary {
    pub estimator: EstimatorKind,
    /// Coverage/normality aggregation over the successful replications;
    /// absent when every replication failed.
    pub coverage: Option<CoverageReport>,
    pub failures: usize,
    /// Fraction of successful replications whose inner solver converged
    /// (1 for non-iterative estimators).
    pub convergence_rate: f64,
    pub mean_newton_iters: f64,
    /// Fraction of replications whose χ² region statistic at θ* exceeds
    /// the 95% quantile; vector estimators only.
    pub chi2_reject_rate_95: Option<f64>,
}

/// Everything `run_experiment` produces. The per-replication rows stay in
/// memory for downstream analysis; `report.json` carries the config echo,
/// failure accounting, runtimes, and coverage summaries.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    /// The nuisance coefficients shared by every replication.
    pub beta_star: Vec<f64>,
    pub summaries: Vec<EstimatorSummary>,
    #[serde(skip_serializing)]
    pub rows: Vec<EstimateRow>,
    pub failure_log: Vec<String>,
    /// Set when any estimator failed on more than 5% of replications.
    pub unreliable: bool,
    pub workers_used: usize,
    pub wall_clock_secs: f64,
}

/// Runs T replications across a worker pool and aggregates them.
///
/// The nuisance coefficients are resolved once at the base seed and shared
/// by every replication; replication r then draws its own contexts, arms,
/// and noise from seed `base_seed + r`. Results are merged by replication
/// index, so the output is byte-identical for any worker count.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let started = Instant::now();
    let beta = resolve_beta(&cfg.gen, cfg.base_seed)?;
    let mut gen_cfg = cfg.gen.clone();
    gen_cfg.beta_star = BetaSpec::Fixed(beta.iter().copied().collect());

    let t = cfg.reps;
    let workers = cfg.effective_workers().min(t);
    let slots: Vec<OnceLock<RepOutcomes>> = (0..t).map(|_| OnceLock::new()).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let r = next.fetch_add(1, Ordering::Relaxed);
                if r >= t {
                    break;
                }
                let outcome = run_replication(&gen_cfg, cfg, r as u64);
                let _ = slots[r].set(outcome);
            });
        }
    });

    // Per-estimator accumulators, in the configured estimator order.
    struct Agg {
        intervals: Vec<Vec<Interval>>,
        std_errors: Vec<f64>,
        chi2: Vec<f64>,
        iters: usize,
        converged: usize,
        failures: usize,
    }
    let mut aggs: Vec<Agg> = cfg
        .estimators
        .iter()
        .map(|_| Agg {
            intervals: Vec::new(),
            std_errors: Vec::new(),
            chi2: Vec::new(),
            iters: 0,
            converged: 0,
            failures: 0,
        })
        .collect();
    let mut rows = Vec::new();
    let mut failure_log = Vec::new();

    for (r, slot) in slots.into_iter().enumerate() {
        let outcome = slot.into_inner().expect("worker pool covered every replication");
        match outcome {
            Err(msg) => {
                failure_log.push(format!("replication {r}: {msg}"));
                for agg in &mut aggs {
                    agg.failures += 1;
                }
            }
            Ok(outcomes) => {
                for ((&kind, agg), est_outcome) in
                    cfg.estimators.iter().zip(&mut aggs).zip(outcomes)
                {
                    match est_outcome {
                        Err(msg) => {
                            failure_log.push(format!("replication {r}, {kind}: {msg}"));
                            agg.failures += 1;
                        }
                        Ok(o) => {
                            let std_error =
                                o.std_error.expect("simulations always know the truth");
                            agg.intervals.push(o.intervals);
                            agg.std_errors.push(std_error);
                            if let Some(c) = o.chi2_stat {
                                agg.chi2.push(c);
                            }
                            agg.iters += o.newton_iters;
                            agg.converged += o.converged as usize;
                            rows.push(EstimateRow {
                                replication: r,
                                estimator: kind,
                                estimate: o.estimate,
                                std_error,
                                chi2_stat: o.chi2_stat,
                                newton_iters: o.newton_iters,
                                converged: o.converged,
                            });
                        }
                    }
                }
            }
        }
    }

    let theta_star = DVector::from_column_slice(&cfg.gen.theta_star);
    let u = DVector::from_column_slice(&cfg.direction);
    let chi2_cut = chi2_quantile(0.95, cfg.gen.d0)?;
    let mut summaries = Vec::with_capacity(cfg.estimators.len());
    let mut unreliable = false;
    for (&kind, agg) in cfg.estimators.iter().zip(&aggs) {
        let successes = agg.std_errors.len();
        let truth =
            if kind.is_direction() { u.dot(&theta_star) } else { theta_star[0] };
        let coverage = if successes == 0 {
            None
        } else {
            Some(coverage_stats(truth, &agg.intervals, &agg.std_errors)?)
        };
        let chi2_reject_rate_95 = (!agg.chi2.is_empty()).then(|| {
            agg.chi2.iter().filter(|&&c| c > chi2_cut).count() as f64 / agg.chi2.len() as f64
        });
        if agg.failures * 20 > t {
            unreliable = true;
        }
        summaries.push(EstimatorSummary {
            estimator: kind,
            coverage,
            failures: agg.failures,
            convergence_rate: if successes == 0 {
                0.0
            } else {
                agg.converged as f64 / successes as f64
            },
            mean_newton_iters: if successes == 0 {
                0.0
            } else {
                agg.iters as f64 / successes as f64
            },
            chi2_reject_rate_95,
        });
    }

    Ok(ExperimentReport {
        config: cfg.clone(),
        beta_star: beta.iter().copied().collect(),
        summaries,
        rows,
        failure_log,
        unreliable,
        workers_used: workers,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Artifact writing.
// ---------------------------------------------------------------------------

/// Writes `coverage_<estimator>.csv` and `stderrs_<estimator>.csv` for each
/// estimator, `report.json`, and optionally `coverage.svg`, into the
/// configured output directory. Returns the paths written.
pub fn write_outputs(report: &ExperimentReport, svg: bool) -> Result<Vec<PathBuf>> {
    let dir = &report.config.output_dir;
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for summary in &report.summaries {
        let Some(coverage) = &summary.coverage else { continue };
        let mut buf = Vec::new();
        write_coverage_csv(coverage, &mut buf)?;
        let path = dir.join(format!("coverage_{}.csv", summary.estimator));
        fs::write(&path, buf)?;
        written.push(path);

        let mut buf = Vec::new();
        write_std_errors_csv(coverage, &mut buf)?;
        let path = dir.join(format!("stderrs_{}.csv", summary.estimator));
        fs::write(&path, buf)?;
        written.push(path);
    }
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(report).map_err(io_from_json)?)?;
    written.push(path);
    if svg {
        let series: Vec<(String, Vec<(f64, f64)>)> = report
            .summaries
            .iter()
            .filter_map(|s| {
                let cov = s.coverage.as_ref()?;
                Some((
                    s.estimator.to_string(),
                    cov.levels.iter().copied().zip(cov.cov_two.iter().copied()).collect(),
                ))
            })
            .collect();
        let mut buf = Vec::new();
        write_coverage_svg(&series, &mut buf)?;
        let path = dir.join("coverage.svg");
        fs::write(&path, buf)?;
        written.push(path);
    }
    Ok(written)
}

fn io_from_json(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// Minimal self-contained SVG line chart: empirical two-sided coverage
/// against the nominal level, with a dashed y = x reference.
pub fn write_coverage_svg<W: IoWrite>(
    series: &[(String, Vec<(f64, f64)>)],
    out: &mut W,
) -> Result<()> {
    const PALETTE: [&str; 7] =
        ["#1b6ca8", "#c0392b", "#27ae60", "#8e44ad", "#e67e22", "#16606e", "#7f8c8d"];
    let (width, height) = (640.0, 440.0);
    let (left, right, top, bottom) = (70.0, 170.0, 30.0, 50.0);
    let all: Vec<f64> = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().flat_map(|&(x, y)| [x, y]))
        .filter(|v| v.is_finite())
        .collect();
    let lo = (all.iter().copied().fold(f64::INFINITY, f64::min) - 0.02).max(0.0);
    let hi = (all.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 0.02).min(1.02);
    let (lo, hi) = if lo < hi { (lo, hi) } else { (0.0, 1.0) };
    let px = |v: f64| left + (v - lo) / (hi - lo) * (width - left - right);
    let py = |v: f64| (height - bottom) - (v - lo) / (hi - lo) * (height - top - bottom);

    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"12\">"
    )?;
    writeln!(out, "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>")?;
    // Axes.
    writeln!(
        out,
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\
         <line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>",
        l = left,
        r = width - right,
        t = top,
        b = height - bottom,
    )?;
    // Ticks every 0.05 inside the range.
    let mut tick = (lo / 0.05).ceil() * 0.05;
    while tick <= hi + 1e-9 {
        writeln!(
            out,
            "<line x1=\"{x}\" y1=\"{b}\" x2=\"{x}\" y2=\"{b2}\" stroke=\"black\"/>\
             <text x=\"{x}\" y=\"{ty}\" text-anchor=\"middle\">{tick:.2}</text>",
            x = px(tick),
            b = height - bottom,
            b2 = height - bottom + 5.0,
            ty = height - bottom + 18.0,
        )?;
        writeln!(
            out,
            "<line x1=\"{l}\" y1=\"{y}\" x2=\"{l2}\" y2=\"{y}\" stroke=\"black\"/>\
             <text x=\"{tx}\" y=\"{ty}\" text-anchor=\"end\">{tick:.2}</text>",
            l = left,
            l2 = left - 5.0,
            y = py(tick),
            tx = left - 8.0,
            ty = py(tick) + 4.0,
        )?;
        tick += 0.05;
    }
    writeln!(
        out,
        "<text x=\"{x}\" y=\"{y}\" text-anchor=\"middle\">nominal level</text>",
        x = (left + width - right) / 2.0,
        y = height - 12.0,
    )?;
    writeln!(
        out,
        "<text x=\"16\" y=\"{y}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {y})\">\
         empirical coverage</text>",
        y = (top + height - bottom) / 2.0,
    )?;
    // y = x reference.
    writeln!(
        out,
        "<line x1=\"{x1}\" y1=\"{y1}\" x2=\"{x2}\" y2=\"{y2}\" stroke=\"#999\" \
         stroke-dasharray=\"5,4\"/>",
        x1 = px(lo),
        y1 = py(lo),
        x2 = px(hi),
        y2 = py(hi),
    )?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> =
            pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>",
            path.join(" ")
        )?;
        writeln!(
            out,
            "<text x=\"{x}\" y=\"{y}\" fill=\"{color}\">{name}</text>",
            x = width - right + 10.0,
            y = top + 16.0 * (i as f64 + 1.0),
        )?;
    }
    writeln!(out, "</svg>")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// One-shot estimation on an external dataset (the `estimate` subcommand).
// ---------------------------------------------------------------------------

/// Inputs for estimating on a CSV dataset produced by `gen` (or any file
/// in the same schema).
#[derive(Debug, Clone)]
pub struct EstimateRequest {
    pub data: PathBuf,
    pub estimator: EstimatorKind,
    /// Fold split; defaults to half the rows.
    pub split: Option<usize>,
    pub pilot: PilotKind,
    pub link: LinkKind,
    /// Response noise scale for the partial-linear estimators.
    pub sigma: f64,
    /// Direction u; defaults to the first coordinate axis.
    pub direction: Option<Vec<f64>>,
}

/// What `estimate` reports: the point estimate with its 95% two-sided
/// interval.
#[derive(Debug, Clone)]
pub struct EstimateSummary {
    pub estimator: EstimatorKind,
    pub estimate: f64,
    pub interval95: Interval,
    pub n: usize,
    pub n2: usize,
    pub newton_iters: usize,
    pub converged: bool,
}

/// Reads the dataset, fits the fold-1 pilot, and applies one estimator.
pub fn estimate_on_file(req: &EstimateRequest) -> Result<EstimateSummary> {
    let file = fs::File::open(&req.data)?;
    let probe = read_csv(BufReader::new(file), 1)?;
    let n = probe.n();
    let split = req.split.unwrap_or(n / 2);
    let dataset = probe.with_split(split)?;

    let lambda = match req.pilot {
        PilotKind::Lasso | PilotKind::GlmLasso => {
            Some(universal_lambda(dataset.n1(), dataset.d0(), dataset.d1()))
        }
        _ => None,
    };
    let pilot = fit_pilot(req.pilot, dataset.fold1(), req.link, lambda, None)?;
    let u = match &req.direction {
        Some(v) => DVector::from_column_slice(v),
        None => covariate_vector(1, dataset.d0())?,
    };
    let outcome = run_estimator(
        req.estimator,
        &dataset,
        &pilot,
        req.sigma,
        req.link,
        &u,
        None,
        &[0.95],
    )?;
    Ok(EstimateSummary {
        estimator: req.estimator,
        estimate: outcome.estimate,
        interval95: outcome.intervals[0],
        n,
        n2: dataset.n2(),
        newton_iters: outcome.newton_iters,
        converged: outcome.converged,
    })
}

// ---------------------------------------------------------------------------
// Exact-identity self-checks (the `check` subcommand).
// ---------------------------------------------------------------------------

/// One named identity with its worst observed deviation and tolerance.
#[derive(Debug, Clone)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
}

impl IdentityCheck {
    pub fn pass(&self) -> bool {
        self.worst <= self.tol
    }
}

/// Validates the finite-sum identities the estimators rest on, over
/// `draws` random probability vectors with d0 ∈ {1..10}: the closed-form
/// covariance inverse and square root, zero-mean scores at the truth, the
/// weighted-centering (Neyman) identity, the unit second moment of the
/// direction weight, and the covariance eigenvalue lower bound.
pub fn check_identities(draws: usize, seed: u64) -> Vec<IdentityCheck> {
    let mut rng = stream_rng(seed, 0, Stream::Params);
    let mut checks = [
        IdentityCheck { name: "closed-form covariance inverse", worst: 0.0, tol: 1e-10 },
        IdentityCheck { name: "covariance square root", worst: 0.0, tol: 1e-10 },
        IdentityCheck { name: "zero-mean partial-linear score", worst: 0.0, tol: 1e-12 },
        IdentityCheck { name: "zero-mean generalized-linear score", worst: 0.0, tol: 1e-12 },
        IdentityCheck { name: "weighted centering identity", worst: 0.0, tol: 1e-12 },
        IdentityCheck { name: "unit direction second moment", worst: 0.0, tol: 1e-12 },
        IdentityCheck { name: "covariance eigenvalue lower bound", worst: 0.0, tol: 1e-12 },
    ];
    for _ in 0..draws {
        let d0 = rng.gen_range(1..=10);
        let raw: Vec<f64> = (0..=d0).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let probs =
            SelectionProbs::new(raw[0] / total, raw[1..].iter().map(|v| v / total).collect())
                .expect("normalized draws form a valid probability vector");
        let sigma = cov_matrix(&probs);

        let explicit = cov_inverse_explicit(&probs);
        let gj = gauss_jordan_invert(&sigma).expect("random covariance is invertible");
        checks[0].worst = checks[0].worst.max((&explicit - &gj).amax());

        let root = cov_sqrt(&probs);
        checks[1].worst = checks[1].worst.max((&root * &root - &sigma).amax());

        // Zero-mean scores at the truth. Partial-linear: a constant noise
        // offset c cancels across arms because E[X] = π. Generalized
        // (logistic): summing the score over y ∈ {0,1} with the Bernoulli
        // weights kills each arm's residual.
        let theta = DVector::from_fn(d0, |_, _| rng.gen_range(-1.0..1.0));
        let h: f64 = rng.gen_range(-1.0..1.0);
        let offset: f64 = rng.gen_range(-1.0..1.0);
        let z = DVector::zeros(1);
        let mut pl_mean = DVector::zeros(d0);
        for arm in 0..=d0 {
            let x = covariate_vector(arm, d0).expect("arm index in range");
            let sample = Sample {
                arm: crate::model::ArmDraw { index: arm },
                z: z.clone(),
                y: theta.dot(&x) + h + offset,
                probs: probs.clone(),
            };
            pl_mean += probs.prob_of(arm) * pl_score(&sample, &theta, h);
        }
        checks[2].worst = checks[2].worst.max(pl_mean.amax());

        let weights = glm_cov(&probs, &theta, h, LinkKind::Logistic)
            .expect("interior probabilities give valid weights");
        let mut glm_mean = DVector::zeros(d0);
        for arm in 0..=d0 {
            let x = covariate_vector(arm, d0).expect("arm index in range");
            let mean_y = link_eval(LinkKind::Logistic, theta.dot(&x) + h).0;
            for (y, w) in [(1.0, mean_y), (0.0, 1.0 - mean_y)] {
                let sample = Sample {
                    arm: crate::model::ArmDraw { index: arm },
                    z: z.clone(),
                    y,
                    probs: probs.clone(),
                };
                glm_mean += probs.prob_of(arm)
                    * w
                    * glm_score(&sample, &weights, &theta, h, LinkKind::Logistic);
            }
        }
        checks[3].worst = checks[3].worst.max(glm_mean.amax());

        let mut centering = DVector::zeros(d0);
        for arm in 0..=d0 {
            let x = covariate_vector(arm, d0).expect("arm index in range");
            let gprime = link_eval(LinkKind::Logistic, theta.dot(&x) + h).1;
            centering += probs.prob_of(arm) * gprime * (x - &weights.m);
        }
        checks[4].worst = checks[4].worst.max(centering.amax());

        let mut u = DVector::from_fn(d0, |_, _| rng.gen_range(-1.0..1.0));
        if u.norm() < 1e-3 {
            u[0] = 1.0;
        }
        u /= u.norm();
        let (w, _) = direction_weight(&probs, &u).expect("interior probabilities");
        let pi = probs.arm_vector();
        let mut second_moment = 0.0;
        for arm in 0..=d0 {
            let x = covariate_vector(arm, d0).expect("arm index in range");
            let dot = w.dot(&(x - &pi));
            second_moment += probs.prob_of(arm) * dot * dot;
        }
        checks[5].worst = checks[5].worst.max((second_moment - 1.0).abs());

        let (eigenvalues, _) = sym_eigen(&sigma);
        let lambda_min = eigenvalues.min();
        let p_min = (0..=d0).map(|k| probs.prob_of(k)).fold(f64::INFINITY, f64::min);
        let shortfall = p_min / (d0 + 2) as f64 - lambda_min;
        checks[6].worst = checks[6].worst.max(shortfall.max(0.0));
    }
    checks.to_vec()
}

// ---------------------------------------------------------------------------
// Command-line interface.
// ---------------------------------------------------------------------------

const USAGE: &str = "\
adaptz — adaptively weighted two-stage Z-estimation with a simulation harness

USAGE:
  adaptz run [--preset NAME] [--config FILE] [overrides] [--svg]
  adaptz gen [--preset NAME] [--config FILE] [--seed N] [--out FILE.csv]
  adaptz estimate --data FILE.csv [--estimator NAME] [--split N]
                  [--pilot ols|lasso|mle|glm-lasso] [--link identity|logistic]
                  [--sigma X] [--direction CSV]
  adaptz check [--draws N] [--seed N]

RUN OVERRIDES:
  --reps N           replications
  --seed N           base seed (replication r draws with seed + r)
  --workers N        worker threads (0 = all cores; env ADAPTZ_THREADS wins)
  --output-dir PATH  artifact directory
  --estimators CSV   subset of: adaptz-pl, pl-direction, adaptz-glm,
                     glm-direction, unweighted-z, ols, mle
  --direction CSV    unit-norm target direction, e.g. 1,0
  --levels CSV       confidence levels in (0,1)
  --svg              also draw coverage.svg

PRESETS: fig2, fig3, fig4, fig1-scaled, fig4-scaled. Flags override config
file values, which override the preset; without --preset, fig2 supplies
the defaults.

CONFIG FILE: flat key=value lines, `#` comments. Keys: d0, d1, n, n1,
c_ucb, t, link, noise_sd, pilot, ar_gamma, sparsity, refit_every,
theta_star, beta_star (comma list or `draw`), reps, estimators, direction,
levels, seed, workers, output_dir.
";

/// Finds `--name value` in the argument list.
fn flag_value<'a>(args: &'a [String], name: &str) -> Result<Option<&'a str>> {
    for (i, arg) in args.iter().enumerate() {
        if arg == name {
            return match args.get(i + 1) {
                Some(v) => Ok(Some(v.as_str())),
                None => Err(Error::Usage(format!("flag {name} needs a value"))),
            };
        }
    }
    Ok(None)
}

fn flag_parsed<T: FromStr>(args: &[String], name: &str) -> Result<Option<T>> {
    match flag_value(args, name)? {
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::Usage(format!("flag {name}: cannot parse {v:?}"))),
        None => Ok(None),
    }
}

fn has_flag(args: &[String], name: &str) -> bool {
    args.iter().any(|a| a == name)
}

/// Rejects `--flags` outside the allowed set (values following flags are
/// skipped, so negative numbers in values stay legal).
fn reject_unknown_flags(args: &[String], allowed: &[&str]) -> Result<()> {
    for arg in args {
        if arg.starts_with("--") && !allowed.contains(&arg.as_str()) {
            return Err(Error::Usage(format!("unknown flag {arg}")));
        }
    }
    Ok(())
}

/// Assembles an experiment config from `--preset`, `--config`, and the
/// shared override flags.
fn config_from_args(args: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = match flag_value(args, "--preset")? {
        Some(name) => preset(name)?,
        None => preset("fig2")?,
    };
    if let Some(path) = flag_value(args, "--config")? {
        let text = fs::read_to_string(path)?;
        cfg = parse_config_text(&text, &cfg)?;
    }
    if let Some(reps) = flag_parsed(args, "--reps")? {
        cfg.reps = reps;
    }
    if let Some(seed) = flag_parsed(args, "--seed")? {
        cfg.base_seed = seed;
    }
    if let Some(workers) = flag_parsed(args, "--workers")? {
        cfg.workers = workers;
    }
    if let Some(dir) = flag_value(args, "--output-dir")? {
        cfg.output_dir = PathBuf::from(dir);
    }
    if let Some(v) = flag_value(args, "--estimators")? {
        cfg.estimators = v.split(',').map(|e| e.trim().parse()).collect::<Result<_>>()?;
    }
    if let Some(v) = flag_value(args, "--direction")? {
        cfg.direction = parse_f64_list("--direction", v)?;
    }
    if let Some(v) = flag_value(args, "--levels")? {
        cfg.levels = parse_f64_list("--levels", v)?;
    }
    Ok(cfg)
}

fn cmd_run(args: &[String]) -> Result<()> {
    reject_unknown_flags(
        args,
        &[
            "--preset",
            "--config",
            "--reps",
            "--seed",
            "--workers",
            "--output-dir",
            "--estimators",
            "--direction",
            "--levels",
            "--svg",
        ],
    )?;
    let cfg = config_from_args(args)?;
    let report = run_experiment(&cfg)?;
    let written = write_outputs(&report, has_flag(args, "--svg"))?;
    for summary in &report.summaries {
        match &summary.coverage {
            Some(cov) => {
                let closest = cov
                    .levels
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        (a.1 - 0.95).abs().total_cmp(&(b.1 - 0.95).abs())
                    })
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                println!(
                    "{}: {} replications, {} failures, {:.0}% two-sided coverage {:.3}, \
                     normality distance {:.3}",
                    summary.estimator,
                    cov.replications,
                    summary.failures,
                    cov.levels[closest] * 100.0,
                    cov.cov_two[closest],
                    cov.ks_normal,
                );
            }
            None => println!("{}: every replication failed", summary.estimator),
        }
    }
    if report.unreliable {
        println!("warning: more than 5% of replications failed; results are unreliable");
    }
    println!("wall clock: {:.1}s with {} workers", report.wall_clock_secs, report.workers_used);
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_gen(args: &[String]) -> Result<()> {
    reject_unknown_flags(args, &["--preset", "--config", "--seed", "--out"])?;
    let cfg = config_from_args(args)?;
    cfg.validate()?;
    let out = flag_value(args, "--out")?.unwrap_or("dataset.csv");
    let generate = match cfg.gen.link {
        LinkKind::Identity { .. } => gen_linear_adaptive,
        LinkKind::Logistic => gen_logistic_adaptive,
    };
    let (dataset, model, diagnostics) = generate(&cfg.gen, cfg.base_seed)?;
    let mut buf = Vec::new();
    write_csv(&dataset, &mut buf)?;
    if let Some(parent) = Path::new(out).parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, buf)?;
    let meta = serde_json::json!({
        "config": cfg.gen,
        "seed": cfg.base_seed,
        "theta_star": cfg.gen.theta_star,
        "beta_star": model.beta_star.iter().copied().collect::<Vec<f64>>(),
        "diagnostics": diagnostics,
    });
    let meta_path = format!("{out}.meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta).map_err(io_from_json)?)?;
    println!("wrote {out} ({} rounds) and {meta_path}", dataset.n());
    Ok(())
}

fn cmd_estimate(args: &[String]) -> Result<()> {
    reject_unknown_flags(
        args,
        &["--data", "--estimator", "--split", "--pilot", "--link", "--sigma", "--direction"],
    )?;
    let data = flag_value(args, "--data")?
        .ok_or_else(|| Error::Usage("estimate needs --data FILE.csv".into()))?;
    let estimator: EstimatorKind =
        flag_parsed(args, "--estimator")?.unwrap_or(EstimatorKind::AdaptzPl);
    let link = match flag_value(args, "--link")? {
        Some("identity") => LinkKind::Identity { noise_sd: 1.0 },
        Some("logistic") => LinkKind::Logistic,
        Some(other) => {
            return Err(Error::Usage(format!(
                "flag --link: expected identity or logistic, got {other:?}"
            )))
        }
        // Binary-response estimators default to the logistic link.
        None => match estimator {
            EstimatorKind::AdaptzGlm | EstimatorKind::GlmDirection | EstimatorKind::Mle => {
                LinkKind::Logistic
            }
            _ => LinkKind::Identity { noise_sd: 1.0 },
        },
    };
    let pilot: PilotKind = match flag_value(args, "--pilot")? {
        Some(v) => v.parse()?,
        None => match link {
            LinkKind::Identity { .. } => PilotKind::Ols,
            LinkKind::Logistic => PilotKind::LogisticMle,
        },
    };
    let direction = match flag_value(args, "--direction")? {
        Some(v) => Some(parse_f64_list("--direction", v)?),
        None => None,
    };
    let req = EstimateRequest {
        data: PathBuf::from(data),
        estimator,
        split: flag_parsed(args, "--split")?,
        pilot,
        link,
        sigma: flag_parsed(args, "--sigma")?.unwrap_or(1.0),
        direction,
    };
    let summary = estimate_on_file(&req)?;
    println!("estimator: {}", summary.estimator);
    println!("rounds: {} ({} in the estimation fold)", summary.n, summary.n2);
    println!("estimate: {}", summary.estimate);
    println!("95% two-sided interval: [{}, {}]", summary.interval95.lo, summary.interval95.hi);
    if summary.newton_iters > 0 {
        println!(
            "solver: {} iterations, {}",
            summary.newton_iters,
            if summary.converged { "converged" } else { "did not converge" }
        );
    }
    Ok(())
}

fn cmd_check(args: &[String]) -> Result<bool> {
    reject_unknown_flags(args, &["--draws", "--seed"])?;
    let draws = flag_parsed(args, "--draws")?.unwrap_or(1000);
    let seed = flag_parsed(args, "--seed")?.unwrap_or(2024);
    let checks = check_identities(draws, seed);
    let mut all_pass = true;
    for check in &checks {
        all_pass &= check.pass();
        println!(
            "{}: {} (worst deviation {:.2e}, tolerance {:.0e})",
            if check.pass() { "PASS" } else { "FAIL" },
            check.name,
            check.worst,
            check.tol,
        );
    }
    Ok(all_pass)
}

/// Mistakes in how we were invoked exit 1; runtime failures exit 2.
fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Usage(_) | Error::Parse(_) | Error::Config(_) | Error::Parameter(_) => 1,
        _ => 2,
    }
}

/// Entry point shared by the binary and the tests. `args` excludes the
/// program name.
pub fn cli_main(args: &[String]) -> i32 {
    if args.iter().any(|a| a == "--help" || a == "-h") {
        print!("{USAGE}");
        return 0;
    }
    let result = match args.first().map(String::as_str) {
        Some("run") => cmd_run(&args[1..]),
        Some("gen") => cmd_gen(&args[1..]),
        Some("estimate") => cmd_estimate(&args[1..]),
        Some("check") => match cmd_check(&args[1..]) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: identity self-checks failed");
                return 2;
            }
            Err(err) => Err(err),
        },
        Some(other) => Err(Error::Usage(format!("unknown subcommand {other:?}"))),
        None => Err(Error::Usage("no subcommand given".into())),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            let code = exit_code_for(&err);
            eprintln!("error: {err}");
            if code == 1 {
                eprintln!();
                eprintln!("{USAGE}");
            }
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::inv_normal_cdf;

    fn tiny_linear() -> ExperimentConfig {
        let mut cfg = preset("fig2").unwrap();
        cfg.gen.d1 = 3;
        cfg.gen.n = 80;
        cfg.gen.n1 = 20;
        cfg.reps = 12;
        cfg.levels = vec![0.9, 0.95];
        cfg.base_seed = 5;
        cfg.workers = 1;
        cfg.output_dir = PathBuf::from("unused");
        cfg
    }

    fn tiny_logistic() -> ExperimentConfig {
        let mut cfg = preset("fig4").unwrap();
        cfg.gen.d1 = 2;
        cfg.gen.n = 120;
        cfg.gen.n1 = 40;
        cfg.reps = 8;
        cfg.levels = vec![0.9];
        cfg.base_seed = 3;
        cfg.workers = 1;
        cfg
    }

    #[test]
    fn estimator_names_round_trip() {
        for (kind, name) in ESTIMATOR_NAMES {
            assert_eq!(kind.to_string(), name);
            assert_eq!(name.parse::<EstimatorKind>().unwrap(), kind);
            // serde uses the same spelling as Display.
            assert_eq!(serde_json::to_string(&kind).unwrap(), format!("\"{name}\""));
        }
        assert!("adaptz".parse::<EstimatorKind>().is_err());
    }

    #[test]
    fn presets_carry_their_parameters() {
        let fig2 = preset("fig2").unwrap();
        assert_eq!(
            (fig2.gen.d0, fig2.gen.d1, fig2.gen.n, fig2.gen.n1),
            (2, 5, 500, 125)
        );
        assert_eq!((fig2.gen.c_ucb, fig2.gen.t), (2.0, 0.2));
        assert_eq!(fig2.reps, 1000);
        assert_eq!(fig2.levels.len(), 10);
        fig2.validate().unwrap();

        let fig3 = preset("fig3").unwrap();
        assert_eq!((fig3.gen.d1, fig3.gen.n, fig3.gen.n1), (1000, 950, 475));
        assert_eq!(fig3.gen.c_ucb, 16.0);
        assert_eq!(fig3.gen.pilot_kind, PilotKind::Lasso);
        assert_eq!(fig3.gen.refit_every, 25);
        fig3.validate().unwrap();

        let fig4 = preset("fig4").unwrap();
        assert_eq!((fig4.gen.d1, fig4.gen.n, fig4.gen.n1), (20, 2000, 1000));
        assert_eq!((fig4.gen.c_ucb, fig4.gen.t, fig4.gen.ar_gamma), (8.0, 0.1, 0.5));
        assert_eq!(fig4.gen.link, LinkKind::Logistic);
        fig4.validate().unwrap();

        let scaled = preset("fig4-scaled").unwrap();
        assert_eq!((scaled.gen.n, scaled.gen.n1, scaled.reps), (1000, 500, 300));

        let fig1 = preset("fig1-scaled").unwrap();
        assert_eq!((fig1.gen.d1, fig1.gen.n, fig1.gen.n1, fig1.reps), (200, 400, 200, 200));
        assert_eq!(fig1.gen.refit_every, 25);
        assert_eq!((fig1.gen.c_ucb, fig1.gen.t), (4.0, 0.24));

        assert!(matches!(preset("fig9"), Err(Error::Usage(_))));
    }

    #[test]
    fn config_text_overrides_every_key() {
        let base = preset("fig2").unwrap();
        let text = "\
# comment line
d0 = 3
d1 = 7
n = 200         ; trailing comment
n1 = 50
c_ucb = 4.5
t = 0.1
noise_sd = 2.0  # applies to the identity link set below
link = identity
pilot = lasso
ar_gamma = 0.3
sparsity = 2
refit_every = 5
theta_star = 1.0, 2.0, 3.0
beta_star = draw
reps = 40
estimators = adaptz-pl, unweighted-z
direction = 1, 0, 0
levels = 0.8, 0.9, 0.95
seed = 99
workers = 2
output_dir = /tmp/somewhere
";
        let cfg = parse_config_text(text, &base).unwrap();
        assert_eq!((cfg.gen.d0, cfg.gen.d1, cfg.gen.n, cfg.gen.n1), (3, 7, 200, 50));
        assert_eq!(cfg.gen.link, LinkKind::Identity { noise_sd: 2.0 });
        assert_eq!(cfg.gen.pilot_kind, PilotKind::Lasso);
        assert_eq!(cfg.gen.theta_star, vec![1.0, 2.0, 3.0]);
        assert_eq!(cfg.gen.beta_star, BetaSpec::Draw);
        assert_eq!(cfg.reps, 40);
        assert_eq!(cfg.estimators, vec![EstimatorKind::AdaptzPl, EstimatorKind::UnweightedZ]);
        assert_eq!(cfg.levels, vec![0.8, 0.9, 0.95]);
        assert_eq!(cfg.base_seed, 99);
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/somewhere"));
        cfg.validate().unwrap();

        assert!(parse_config_text("mystery = 5", &base).is_err());
        assert!(parse_config_text("d0 three", &base).is_err());
        assert!(parse_config_text("d0 = three", &base).is_err());
        assert!(parse_config_text("link = logistic\nnoise_sd = 1.0", &base).is_err());
    }

    #[test]
    fn validation_rejects_bad_experiment_configs() {
        let mut cfg = tiny_linear();
        cfg.reps = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_linear();
        cfg.estimators.clear();
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_linear();
        cfg.estimators = vec![EstimatorKind::Ols, EstimatorKind::Ols];
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_linear();
        cfg.levels = vec![0.9, 0.9];
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_linear();
        cfg.levels = vec![0.9, 1.0];
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_linear();
        cfg.direction = vec![1.0, 1.0];
        assert!(cfg.validate().is_err(), "non-unit direction must be rejected");

        // …but only when a direction estimator is selected.
        cfg.estimators = vec![EstimatorKind::AdaptzPl];
        cfg.validate().unwrap();
    }

    #[test]
    fn wald_marginal_reads_off_diagonal_scaling() {
        // Diagonal scaling S = diag(s₁, s₂): the marginal scale for the
        // first coordinate is exactly s₁.
        let scaling = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 0.5]);
        let dsol = marginal_dir_solution(1.7, &scaling, 25).unwrap();
        assert!((dsol.scale_bar - 3.0).abs() < 1e-12);
        assert_eq!(dsol.n2, 25);

        // se = σ/(√n₂·s₁); check through the interval half-width.
        let iv = dir_interval(&dsol, 2.0, 0.05, IntervalKind::TwoSided).unwrap();
        let q = inv_normal_cdf(0.975).unwrap();
        assert!((iv.width() / 2.0 - q * 2.0 / (5.0 * 3.0)).abs() < 1e-12);

        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(marginal_dir_solution(0.0, &singular, 5).is_err());
    }

    #[test]
    fn baseline_se_matches_hand_inverse() {
        // Fixed tiny design: the OLS baseline must reproduce the
        // closed-form (QᵀQ)⁻¹-based standard error.
        let probs = SelectionProbs::new(0.4, vec![0.3, 0.3]).unwrap();
        let samples: Vec<Sample> = (0..12)
            .map(|i| Sample {
                arm: crate::model::ArmDraw { index: i % 3 },
                z: DVector::from_column_slice(&[(i as f64 * 0.37).sin()]),
                y: (i as f64 * 0.71).cos(),
                probs: probs.clone(),
            })
            .collect();
        let ds = Dataset::new(samples.clone(), 4).unwrap();
        let (est, se) = ols_baseline(&ds, 1.3).unwrap();

        let d = 3;
        let mut gram = DMatrix::<f64>::zeros(d, d);
        let mut rhs = DVector::<f64>::zeros(d);
        for s in &samples {
            let q = stacked(s, 2);
            gram += &q * q.transpose();
            rhs += &q * s.y;
        }
        let inv = gauss_jordan_invert(&gram).unwrap();
        let coef = &inv * &rhs;
        assert!((est - coef[0]).abs() < 1e-10);
        assert!((se - 1.3 * inv[(0, 0)].sqrt()).abs() < 1e-12);
    }

    #[test]
    fn tiny_linear_experiment_accounts_for_every_row() {
        let cfg = tiny_linear();
        let report = run_experiment(&cfg).unwrap();
        let failures: usize = report.summaries.iter().map(|s| s.failures).sum();
        assert_eq!(report.rows.len(), cfg.reps * cfg.estimators.len() - failures);
        assert!(report.wall_clock_secs > 0.0);
        assert_eq!(report.beta_star.len(), cfg.gen.d1);

        // Rows arrive sorted by replication, then configured estimator
        // order.
        let mut last = (0usize, 0usize);
        for row in &report.rows {
            let pos = cfg.estimators.iter().position(|e| *e == row.estimator).unwrap();
            assert!((row.replication, pos) >= last);
            last = (row.replication, pos);
            assert!(row.std_error.is_finite());
        }

        for summary in &report.summaries {
            let cov = summary.coverage.as_ref().expect("tiny run has successes");
            assert_eq!(cov.replications + summary.failures, cfg.reps);
            assert_eq!(cov.levels, cfg.levels);
            // Vector estimators carry a χ² rejection rate, directions and
            // baselines do not.
            match summary.estimator {
                EstimatorKind::AdaptzPl | EstimatorKind::UnweightedZ => {
                    assert!(summary.chi2_reject_rate_95.is_some())
                }
                _ => assert!(summary.chi2_reject_rate_95.is_none()),
            }
        }
    }

    #[test]
    fn tiny_logistic_experiment_runs_newton_estimators() {
        let cfg = tiny_logistic();
        let report = run_experiment(&cfg).unwrap();
        let glm = report
            .summaries
            .iter()
            .find(|s| s.estimator == EstimatorKind::AdaptzGlm)
            .unwrap();
        assert!(glm.coverage.is_some());
        assert!(glm.mean_newton_iters > 0.0);
        assert!(glm.convergence_rate > 0.5);
        let mle = report.summaries.iter().find(|s| s.estimator == EstimatorKind::Mle).unwrap();
        assert!(mle.coverage.is_some());
    }

    #[test]
    fn reports_are_bitwise_identical_across_worker_counts() {
        let mut cfg = tiny_linear();
        cfg.workers = 1;
        let a = run_experiment(&cfg).unwrap();
        cfg.workers = 4;
        let b = run_experiment(&cfg).unwrap();

        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.estimate.to_bits(), rb.estimate.to_bits());
            assert_eq!(ra.std_error.to_bits(), rb.std_error.to_bits());
        }
        for (sa, sb) in a.summaries.iter().zip(&b.summaries) {
            let (ca, cb) = (sa.coverage.as_ref().unwrap(), sb.coverage.as_ref().unwrap());
            let mut csv_a = Vec::new();
            let mut csv_b = Vec::new();
            write_coverage_csv(ca, &mut csv_a).unwrap();
            write_coverage_csv(cb, &mut csv_b).unwrap();
            assert_eq!(csv_a, csv_b);
            let mut err_a = Vec::new();
            let mut err_b = Vec::new();
            write_std_errors_csv(ca, &mut err_a).unwrap();
            write_std_errors_csv(cb, &mut err_b).unwrap();
            assert_eq!(err_a, err_b);
        }
    }

    #[test]
    fn hopeless_estimator_marks_run_unreliable() {
        // d1 > n makes the full-sample normal equations singular, so the
        // least-squares baseline fails on every replication while the
        // lasso-pilot estimators stay alive.
        let mut cfg = tiny_linear();
        cfg.gen.d1 = 50;
        cfg.gen.n = 30;
        cfg.gen.n1 = 10;
        cfg.gen.pilot_kind = PilotKind::Lasso;
        cfg.gen.sparsity = 2;
        cfg.reps = 4;
        cfg.estimators = vec![EstimatorKind::AdaptzPl, EstimatorKind::Ols];
        let report = run_experiment(&cfg).unwrap();
        assert!(report.unreliable);
        let ols = report.summaries.iter().find(|s| s.estimator == EstimatorKind::Ols).unwrap();
        assert_eq!(ols.failures, 4);
        assert!(ols.coverage.is_none());
        assert_eq!(report.failure_log.len(), 4);
        let pl =
            report.summaries.iter().find(|s| s.estimator == EstimatorKind::AdaptzPl).unwrap();
        assert!(pl.coverage.is_some());
    }

    #[test]
    fn identity_checks_pass_on_random_draws() {
        for check in check_identities(60, 7) {
            assert!(
                check.pass(),
                "{} deviated by {} (tolerance {})",
                check.name,
                check.worst,
                check.tol
            );
        }
    }

    #[test]
    fn estimate_on_file_round_trips_the_in_process_result() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_linear();
        let (dataset, _, _) = gen_linear_adaptive(&cfg.gen, 42).unwrap();
        let path = dir.path().join("data.csv");
        let mut buf = Vec::new();
        write_csv(&dataset, &mut buf).unwrap();
        fs::write(&path, buf).unwrap();

        let pilot =
            fit_pilot(PilotKind::Ols, dataset.fold1(), cfg.gen.link, None, None).unwrap();
        let direct = adaptz_pl(&dataset, &pilot, 1.0).unwrap();

        let req = EstimateRequest {
            data: path,
            estimator: EstimatorKind::AdaptzPl,
            split: Some(dataset.n1()),
            pilot: PilotKind::Ols,
            link: cfg.gen.link,
            sigma: 1.0,
            direction: None,
        };
        let summary = estimate_on_file(&req).unwrap();
        assert!((summary.estimate - direct.theta[0]).abs() <= 1e-12);
        assert_eq!(summary.n2, dataset.n2());

        let dsol = marginal_dir_solution(direct.theta[0], &direct.scaling, direct.n2).unwrap();
        let iv = dir_interval(&dsol, 1.0, 0.05, IntervalKind::TwoSided).unwrap();
        assert!((summary.interval95.lo - iv.lo).abs() <= 1e-12);
        assert!((summary.interval95.hi - iv.hi).abs() <= 1e-12);
    }

    #[test]
    fn svg_writer_emits_series_and_reference() {
        let series = vec![
            ("adaptz-pl".to_string(), vec![(0.8, 0.79), (0.9, 0.91), (0.95, 0.93)]),
            ("ols".to_string(), vec![(0.8, 0.62), (0.9, 0.70), (0.95, 0.77)]),
        ];
        let mut buf = Vec::new();
        write_coverage_svg(&series, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("<svg"));
        assert_eq!(text.matches("<polyline").count(), 2);
        assert!(text.contains("adaptz-pl"));
        assert!(text.contains("stroke-dasharray"));
        assert!(text.contains("</svg>"));
    }

    #[test]
    fn cli_exit_codes_follow_the_contract() {
        let to_args = |parts: &[&str]| parts.iter().map(|s| s.to_string()).collect::<Vec<_>>();

        assert_eq!(cli_main(&to_args(&["--help"])), 0);
        assert_eq!(cli_main(&[]), 1);
        assert_eq!(cli_main(&to_args(&["frobnicate"])), 1);
        assert_eq!(cli_main(&to_args(&["run", "--preset", "fig9"])), 1);
        assert_eq!(cli_main(&to_args(&["run", "--frobnicate"])), 1);
        assert_eq!(cli_main(&to_args(&["estimate"])), 1);
        assert_eq!(
            cli_main(&to_args(&["estimate", "--data", "/definitely/not/here.csv"])),
            2
        );
        assert_eq!(cli_main(&to_args(&["check", "--draws", "20"])), 0);
    }

    #[test]
    fn cli_run_and_gen_write_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out_dir = dir.path().join("run");
        let config_path = dir.path().join("tiny.cfg");
        fs::write(
            &config_path,
            "d1 = 3\nn = 60\nn1 = 15\nreps = 5\nlevels = 0.9\nestimators = adaptz-pl, ols\n",
        )
        .unwrap();
        let args: Vec<String> = [
            "run",
            "--config",
            config_path.to_str().unwrap(),
            "--seed",
            "9",
            "--workers",
            "2",
            "--output-dir",
            out_dir.to_str().unwrap(),
            "--svg",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        assert_eq!(cli_main(&args), 0);
        assert!(out_dir.join("coverage_adaptz-pl.csv").is_file());
        assert!(out_dir.join("stderrs_adaptz-pl.csv").is_file());
        assert!(out_dir.join("coverage_ols.csv").is_file());
        assert!(out_dir.join("report.json").is_file());
        assert!(out_dir.join("coverage.svg").is_file());
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap())
                .unwrap();
        assert_eq!(report["config"]["reps"], 5);
        assert!(report["wall_clock_secs"].as_f64().unwrap() > 0.0);

        let data_path = dir.path().join("gen/data.csv");
        let args: Vec<String> = [
            "gen",
            "--config",
            config_path.to_str().unwrap(),
            "--seed",
            "11",
            "--out",
            data_path.to_str().unwrap(),
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        assert_eq!(cli_main(&args), 0);
        assert!(data_path.is_file());
        let meta: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(format!("{}.meta.json", data_path.display())).unwrap(),
        )
        .unwrap();
        assert_eq!(meta["seed"], 11);
        assert_eq!(meta["beta_star"].as_array().unwrap().len(), 3);
    }
}
