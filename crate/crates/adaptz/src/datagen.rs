//! Adaptive data-generating processes for the simulation studies.
//!
//! Two bandit environments: a linear model with i.i.d. Gaussian contexts
//! and an OLS- or lasso-guided UCB policy, and a logistic model with AR(1)
//! contexts and a likelihood-guided policy. Both record, in every sample,
//! the exact selection probabilities the arm draw used — the quantity the
//! reweighted estimators rely on.
//!
//! Also home to the unweighted two-stage baseline, which solves the same
//! estimating equation *without* the known-probability reweighting; its
//! miscoverage under adaptive sampling is the phenomenon the simulations
//! document.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adaptz::PLSolution;
use crate::error::{Error, Result};
use crate::linalg::{sym_sqrt_floored, SumGrid};
use crate::model::{ArmDraw, Dataset, LinkKind, Sample, TrueModel};
use crate::pilot::{
    glm_lasso_policy_fit, lasso_policy_fit, logistic_mle_policy, ols_fit, FitNote, PilotFit,
    PilotKind,
};
use crate::probvec::{cov_matrix, SelectionProbs};
use crate::rng::{sample_categorical, standard_normal, stream_rng, Stream};

/// Nuisance coefficient specification: a fixed vector, or "draw once per
/// experiment" from N(0, I) (respecting the configured sparsity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSpec {
    Fixed(Vec<f64>),
    Draw,
}

/// Configuration of one adaptive data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Number of non-reference arms.
    pub d0: usize,
    /// Nuisance dimension.
    pub d1: usize,
    /// Total rounds.
    pub n: usize,
    /// Pilot-fold size used by the estimators (recorded as the dataset's
    /// split point).
    pub n1: usize,
    /// UCB exploration constant C in the bonus √(C·ln n / n_k).
    pub c_ucb: f64,
    /// Exploration-decay exponent t in the probability floor 1/(2i^{2t}).
    pub t: f64,
    pub link: LinkKind,
    /// Fitter the *policy* runs on its growing history (distinct from the
    /// estimation-side pilot, which the harness fits on fold 1).
    pub pilot_kind: PilotKind,
    /// AR(1) coefficient for the logistic environment's contexts; the
    /// linear environment draws contexts i.i.d. and ignores this.
    pub ar_gamma: f64,
    /// Number of leading nonzero nuisance coordinates when β* is drawn
    /// (0 = dense).
    pub sparsity: usize,
    /// Policy refit cadence: the history fit is refreshed every this many
    /// rounds (1 = every round).
    pub refit_every: usize,
    pub theta_star: Vec<f64>,
    pub beta_star: BetaSpec,
}

impl GenConfig {
    /// Validates field ranges and cross-field consistency.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d0 == 0 || self.d1 == 0 {
            return fail(format!("need d0 ≥ 1 and d1 ≥ 1, got ({}, {})", self.d0, self.d1));
        }
        if self.n < 2 {
            return fail(format!("need n ≥ 2 rounds, got {}", self.n));
        }
        if self.n1 == 0 || self.n1 >= self.n {
            return fail(format!("pilot fold n1 = {} must satisfy 1 ≤ n1 < n = {}", self.n1, self.n));
        }
        if !(self.c_ucb > 0.0) {
            return fail(format!("UCB constant C = {} must be positive", self.c_ucb));
        }
        if !(0.0..0.5).contains(&self.t) {
            return fail(format!("exploration exponent t = {} must lie in [0, 1/2)", self.t));
        }
        if !(0.0..1.0).contains(&self.ar_gamma) {
            return fail(format!("AR coefficient γ = {} must lie in [0, 1)", self.ar_gamma));
        }
        if self.refit_every == 0 {
            return fail("refit cadence must be at least 1".into());
        }
        if self.theta_star.len() != self.d0 {
            return fail(format!(
                "theta_star has {} entries but d0 = {}",
                self.theta_star.len(),
                self.d0
            ));
        }
        if self.sparsity > self.d1 {
            return fail(format!("sparsity {} exceeds d1 = {}", self.sparsity, self.d1));
        }
        if let BetaSpec::Fixed(b) = &self.beta_star {
            if b.len() != self.d1 {
                return fail(format!("beta_star has {} entries but d1 = {}", b.len(), self.d1));
            }
        }
        Ok(())
    }
}

/// Times each non-reference arm has been pulled so far.
#[derive(Debug, Clone)]
pub struct ArmCounts {
    pub counts: Vec<usize>,
}

impl ArmCounts {
    pub fn new(d0: usize) -> Self {
        Self { counts: vec![0; d0] }
    }

    /// Records a realized pull; the reference arm is not counted.
    pub fn record(&mut self, arm: usize) {
        if arm > 0 {
            self.counts[arm - 1] += 1;
        }
    }
}

/// UCB arm choice: argmax over k of θ̂_k + √(C·ln n / n_k), with an
/// unexplored arm (n_k = 0) getting an infinite bonus and ties broken by
/// the smallest index. Returns an arm in 1..=d0.
pub fn ucb_select(theta_hat: &DVector<f64>, counts: &ArmCounts, c: f64, n: usize) -> usize {
    assert!(n >= 2, "UCB bonus needs n ≥ 2");
    assert_eq!(theta_hat.len(), counts.counts.len());
    let mut best = 1;
    let mut best_score = f64::NEG_INFINITY;
    for (k, &pulls) in counts.counts.iter().enumerate() {
        let bonus =
            if pulls == 0 { f64::INFINITY } else { (c * (n as f64).ln() / pulls as f64).sqrt() };
        let score = theta_hat[k] + bonus;
        if score > best_score {
            best_score = score;
            best = k + 1;
        }
    }
    best
}

/// Selection probabilities for round `i` when the policy favors arm
/// `k_star`: the reference arm keeps 0.2, every other arm gets the
/// exploration floor min{1/(2i^{2t}), 0.4/d0}, and the favored arm absorbs
/// the rest.
pub fn assemble_probs(k_star: usize, i: usize, t: f64, d0: usize) -> Result<SelectionProbs> {
    if k_star == 0 || k_star > d0 {
        return Err(Error::Usage(format!("favored arm {k_star} out of range 1..={d0}")));
    }
    assert!(i >= 1, "rounds are 1-indexed");
    let floor = (1.0 / (2.0 * (i as f64).powf(2.0 * t))).min(0.4 / d0 as f64);
    let others: f64 = floor * (d0 - 1) as f64;
    let chosen = 1.0 - 0.2 - others;
    if chosen <= 0.0 {
        return Err(Error::Config(format!(
            "favored-arm probability {chosen} is not positive at round {i} (d0 = {d0}, t = {t})"
        )));
    }
    let p: Vec<f64> = (1..=d0).map(|k| if k == k_star { chosen } else { floor }).collect();
    SelectionProbs::new(0.2, p)
}

/// What happened inside a generator run: how often the policy refit its
/// history model, and the rounds where the fit failed and the policy fell
/// back to a zero pilot.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GenDiagnostics {
    pub refits: usize,
    pub fallback_rounds: Vec<usize>,
}

/// Resolves the nuisance coefficients: a `Fixed` vector is validated and
/// returned; `Draw` samples them once from the seed's parameter stream,
/// dense N(0,1) or with only the first `sparsity` coordinates nonzero.
///
/// Callers running many replications resolve the draw once (at the base
/// seed) and pass the result back as `Fixed`, so β* is shared by all
/// replications.
pub fn resolve_beta(cfg: &GenConfig, seed: u64) -> Result<DVector<f64>> {
    cfg.validate()?;
    match &cfg.beta_star {
        BetaSpec::Fixed(b) => Ok(DVector::from_column_slice(b)),
        BetaSpec::Draw => {
            let mut rng = stream_rng(seed, 0, Stream::Params);
            let nonzero = if cfg.sparsity == 0 { cfg.d1 } else { cfg.sparsity };
            let mut beta = DVector::zeros(cfg.d1);
            for j in 0..nonzero {
                beta[j] = standard_normal(&mut rng);
            }
            Ok(beta)
        }
    }
}

/// Practical lasso penalty: the universal threshold √(2·ln(d0+d1)/m) at
/// sample size m. Used both for the policy's in-history refits and for
/// the estimation-side fold-1 pilot. The theory-rate penalty exposed by
/// the pilot module is far more conservative; at the simulated scales it
/// zeroes the arm coefficients, leaving the policy blind to its own
/// reward estimates and the pilot blind to the signal.
pub fn universal_lambda(m: usize, d0: usize, d1: usize) -> f64 {
    (2.0 * ((d0 + d1) as f64).ln() / m as f64).sqrt()
}

/// Refit-or-fallback for the policy's history model: a fit that errors,
/// fails to converge, or flags a pathology is replaced by the zero pilot
/// for this round's arm choice, and the round is recorded.
fn pilot_or_fallback(
    fit: Result<PilotFit>,
    cfg: &GenConfig,
    round: usize,
    diagnostics: &mut GenDiagnostics,
) -> PilotFit {
    match fit {
        Ok(f) if f.converged && f.note != Some(FitNote::Separation) => f,
        _ => {
            diagnostics.fallback_rounds.push(round);
            PilotFit::zero(cfg.d0, cfg.d1, cfg.pilot_kind)
        }
    }
}

/// The shared simulation engine. Contexts are i.i.d. N(0, I) under the
/// identity link and AR(1) with coefficient `ar_gamma` under the logistic
/// link (γ = 0 recovers i.i.d.); responses add N(0, σ) noise or draw a
/// Bernoulli with the link mean. Deterministic given (cfg, seed).
fn generate(cfg: &GenConfig, seed: u64) -> Result<(Dataset, TrueModel, GenDiagnostics)> {
    cfg.validate()?;
    let beta_star = resolve_beta(cfg, seed)?;
    let model = TrueModel {
        theta_star: DVector::from_column_slice(&cfg.theta_star),
        beta_star,
        link: cfg.link,
    };

    let mut ctx_rng = stream_rng(seed, 0, Stream::Contexts);
    let mut arm_rng = stream_rng(seed, 0, Stream::Arms);
    let mut noise_rng = stream_rng(seed, 0, Stream::Noise);

    let mut diagnostics = GenDiagnostics::default();
    let mut samples: Vec<Sample> = Vec::with_capacity(cfg.n);
    let mut counts = ArmCounts::new(cfg.d0);
    let mut pilot = PilotFit::zero(cfg.d0, cfg.d1, cfg.pilot_kind);
    // Warm start for the iterative refitters. Kept separate from `pilot`:
    // a stalled (bounded, non-separated) fit is useless to the policy for
    // this round, but its coefficients are most of the way to the optimum
    // on nearly the same data, so the next refit resumes from them instead
    // of restarting cold and stalling identically.
    let mut warm = pilot.stacked();
    let mut z_prev = DVector::zeros(cfg.d1);

    for i in 1..=cfg.n {
        let z = {
            let w = DVector::from_fn(cfg.d1, |_, _| standard_normal(&mut ctx_rng));
            match cfg.link {
                LinkKind::Identity { .. } => w,
                LinkKind::Logistic => cfg.ar_gamma * &z_prev + w,
            }
        };

        let history = i - 1;
        if history >= 1 && history % cfg.refit_every == 0 {
            // Penalized refits leave the arm block unpenalized (see
            // `lasso_policy_fit`): shrinking the reward estimates toward
            // zero at a per-arm rate of λ·history/n_k would freeze the
            // policy onto the early leader.
            let fit = match cfg.pilot_kind {
                PilotKind::Lasso => lasso_policy_fit(
                    &samples,
                    universal_lambda(history, cfg.d0, cfg.d1),
                    Some(&warm),
                ),
                PilotKind::GlmLasso => glm_lasso_policy_fit(
                    &samples,
                    cfg.link,
                    universal_lambda(history, cfg.d0, cfg.d1),
                    Some(&warm),
                ),
                PilotKind::Ols => ols_fit(&samples),
                PilotKind::LogisticMle => logistic_mle_policy(&samples, Some(&warm)),
            };
            diagnostics.refits += 1;
            if let Ok(f) = &fit {
                if f.note != Some(FitNote::Separation) {
                    warm = f.stacked();
                }
            }
            pilot = pilot_or_fallback(fit, cfg, i, &mut diagnostics);
        }

        let k_star = ucb_select(&pilot.theta_hat, &counts, cfg.c_ucb, cfg.n);
        let probs = assemble_probs(k_star, i, cfg.t, cfg.d0)?;
        let arm = sample_categorical(&mut arm_rng, probs.p0(), probs.arm_probs());
        counts.record(arm);

        let mean = model.mean(arm, &z);
        let y = match cfg.link {
            LinkKind::Identity { noise_sd } => mean + noise_sd * standard_normal(&mut noise_rng),
            LinkKind::Logistic => {
                use rand::Rng;
                if noise_rng.gen::<f64>() < mean {
                    1.0
                } else {
                    0.0
                }
            }
        };

        z_prev = z.clone();
        samples.push(Sample { arm: ArmDraw { index: arm }, z, y, probs });
    }

    Ok((Dataset::new(samples, cfg.n1)?, model, diagnostics))
}

/// Linear adaptive environment: i.i.d. N(0, I) contexts, UCB policy guided
/// by OLS or lasso refits on the growing history, Gaussian responses.
pub fn gen_linear_adaptive(
    cfg: &GenConfig,
    seed: u64,
) -> Result<(Dataset, TrueModel, GenDiagnostics)> {
    if !matches!(cfg.link, LinkKind::Identity { .. }) {
        return Err(Error::Config("the linear environment needs the identity link".into()));
    }
    generate(cfg, seed)
}

/// Logistic adaptive environment: AR(1) contexts Z_i = γ·Z_{i−1} + W_i
/// from Z_0 = 0, likelihood-guided UCB policy, Bernoulli responses. A
/// policy refit that separates falls back to the zero pilot for that
/// round (recorded in the diagnostics).
pub fn gen_logistic_adaptive(
    cfg: &GenConfig,
    seed: u64,
) -> Result<(Dataset, TrueModel, GenDiagnostics)> {
    if cfg.link != LinkKind::Logistic {
        return Err(Error::Config("the logistic environment needs the logistic link".into()));
    }
    generate(cfg, seed)
}

/// The unweighted two-stage baseline: same sample splitting and the same
/// fold-2 estimating equation as the reweighted estimator, but with the
/// raw score (X − π)·(Y − ⟨X, θ⟩ − ĥ). Its nominal scaling
/// Ê[(X−π)(X−π)ᵀ]^{1/2} is computed from the recorded probabilities; under
/// adaptive sampling the resulting intervals undercover on the lower tail,
/// which is what the simulations demonstrate.
pub fn unweighted_z_baseline(
    dataset: &Dataset,
    pilot: &PilotFit,
    sigma_noise: f64,
) -> Result<PLSolution> {
    let fold2 = dataset.fold2();
    let d0 = dataset.d0();
    let n2 = fold2.len();

    let mut a_grid = SumGrid::new(d0 * d0, n2);
    let mut b_grid = SumGrid::new(d0, n2);
    let mut v_grid = SumGrid::new(d0 * d0, n2);
    for s in fold2 {
        let x = s.covariate();
        let centered = &x - s.probs.arm_vector();
        let resid_const = s.y - pilot.nuisance(&s.z);
        let cov = cov_matrix(&s.probs);
        for j in 0..d0 {
            for k in 0..d0 {
                a_grid.push(j * d0 + k, centered[j] * x[k]);
                v_grid.push(j * d0 + k, cov[(j, k)]);
            }
            b_grid.push(j, centered[j] * resid_const);
        }
    }
    let n2f = n2 as f64;
    let a = DMatrix::from_row_iterator(d0, d0, a_grid.sums().into_iter().map(|v| v / n2f));
    let b = DVector::from_iterator(d0, b_grid.sums().into_iter().map(|v| v / n2f));
    let mean_cov = DMatrix::from_row_iterator(d0, d0, v_grid.sums().into_iter().map(|v| v / n2f));

    let solve = crate::linalg::gauss_jordan_solve(&a, &b).map_err(|e| {
        Error::DegenerateDesign(format!("unweighted fold-2 system is singular ({e})"))
    })?;
    Ok(PLSolution {
        theta: solve.x,
        scaling: sym_sqrt_floored(&mean_cov, 0.0),
        n2,
        sigma_noise,
    })
}
