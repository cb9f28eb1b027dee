//! Pilot-fold nuisance estimators.
//!
//! The two-stage estimators need only crude consistent estimates of the arm
//! effects and the nuisance function from the pilot fold — the weighting on
//! the inference fold does the heavy lifting. Four fitters cover the
//! regimes exercised by the simulations: ordinary least squares and an
//! L1-penalized variant for the identity link (the latter for
//! high-dimensional nuisance covariates), and maximum likelihood plus an
//! L1-penalized variant for the logistic link.
//!
//! All fitters regress the response on the stacked vector (x, z) of arm
//! indicator and nuisance covariates, with no intercept: the reference arm
//! plays that role.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{link_eval, LinkKind, Sample};

/// Which pilot fitter to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PilotKind {
    Ols,
    Lasso,
    LogisticMle,
    GlmLasso,
}

impl FromStr for PilotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ols" => Ok(PilotKind::Ols),
            "lasso" => Ok(PilotKind::Lasso),
            "mle" => Ok(PilotKind::LogisticMle),
            "glm-lasso" => Ok(PilotKind::GlmLasso),
            other => Err(Error::Usage(format!(
                "unknown pilot `{other}` (expected ols, lasso, mle, or glm-lasso)"
            ))),
        }
    }
}

/// Noteworthy conditions hit during a fit, surfaced for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitNote {
    /// The Gram matrix was rank-deficient; the minimum-norm solution was
    /// returned.
    SingularGram,
    /// Likelihood maximization ran off to infinity, the signature of
    /// (quasi-)separated binary data.
    Separation,
}

/// Result of a pilot fit: arm effects, nuisance coefficients, and how the
/// fit went.
#[derive(Debug, Clone)]
pub struct PilotFit {
    pub theta_hat: DVector<f64>,
    pub beta_hat: DVector<f64>,
    pub method: PilotKind,
    pub iterations: usize,
    pub converged: bool,
    pub note: Option<FitNote>,
}

impl PilotFit {
    /// All-zero fit, used as a fallback when a fitter fails outright
    /// (e.g. separation on an early refit).
    pub fn zero(d0: usize, d1: usize, method: PilotKind) -> Self {
        Self {
            theta_hat: DVector::zeros(d0),
            beta_hat: DVector::zeros(d1),
            method,
            iterations: 0,
            converged: false,
            note: None,
        }
    }

    /// Fitted nuisance value ĥ(z) = ⟨β̂, z⟩.
    pub fn nuisance(&self, z: &DVector<f64>) -> f64 {
        self.beta_hat.dot(z)
    }

    /// Fitted linear predictor for an arm (0 is the reference arm).
    pub fn eta(&self, arm: usize, z: &DVector<f64>) -> f64 {
        let arm_effect = if arm == 0 { 0.0 } else { self.theta_hat[arm - 1] };
        arm_effect + self.nuisance(z)
    }

    /// The stacked (θ̂, β̂) coefficient vector, the warm-start format of
    /// the iterative fitters.
    pub fn stacked(&self) -> DVector<f64> {
        let mut b = DVector::zeros(self.theta_hat.len() + self.beta_hat.len());
        b.rows_mut(0, self.theta_hat.len()).copy_from(&self.theta_hat);
        b.rows_mut(self.theta_hat.len(), self.beta_hat.len())
            .copy_from(&self.beta_hat);
        b
    }
}

/// Builds the design matrix of stacked (x, z) rows and the response vector.
fn design(samples: &[Sample]) -> Result<(DMatrix<f64>, DVector<f64>, usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Usage("pilot fit needs at least one sample".into()))?;
    let d0 = first.probs.d0();
    let d1 = first.z.len();
    let n = samples.len();
    let mut q = DMatrix::zeros(n, d0 + d1);
    let mut y = DVector::zeros(n);
    for (i, s) in samples.iter().enumerate() {
        if s.arm.index > 0 {
            q[(i, s.arm.index - 1)] = 1.0;
        }
        for j in 0..d1 {
            q[(i, d0 + j)] = s.z[j];
        }
        y[i] = s.y;
    }
    Ok((q, y, d0, d1))
}

fn split_coefs(b: &DVector<f64>, d0: usize, d1: usize) -> (DVector<f64>, DVector<f64>) {
    (b.rows(0, d0).into_owned(), b.rows(d0, d1).into_owned())
}

/// Ordinary least squares on the stacked design. Rank-deficient designs
/// (e.g. an arm never pulled in the pilot fold) fall back to the
/// minimum-norm solution and are flagged.
pub fn ols_fit(samples: &[Sample]) -> Result<PilotFit> {
    let (q, y, d0, d1) = design(samples)?;
    let (coef, rank_deficient) = linalg::min_norm_least_squares(&q, &y)?;
    let (theta_hat, beta_hat) = split_coefs(&coef, d0, d1);
    Ok(PilotFit {
        theta_hat,
        beta_hat,
        method: PilotKind::Ols,
        iterations: 1,
        converged: true,
        note: rank_deficient.then_some(FitNote::SingularGram),
    })
}

fn penalty_level(
    n1: usize,
    nu: f64,
    b_bound: f64,
    d0: usize,
    d1: usize,
    t: f64,
    s_guess: usize,
    exponent_offset: f64,
) -> Result<f64> {
    if !(0.0..0.25).contains(&t) {
        return Err(Error::Parameter(format!(
            "probability decay exponent t = {t} must lie in [0, 1/4)"
        )));
    }
    if n1 == 0 || d0 == 0 {
        return Err(Error::Parameter("need n1 ≥ 1 and d0 ≥ 1 for the penalty level".into()));
    }
    let n1f = n1 as f64;
    let dims = (d0 + d1) as f64;
    let delta = ((s_guess + d0) as f64 * n1f.powf(2.0 * t - exponent_offset)).min(1.0 / dims);
    if delta <= 0.0 {
        return Err(Error::Parameter(format!("confidence budget delta = {delta} must be positive")));
    }
    Ok(2.0 * nu * (b_bound + 1.0) * (2.0 * ((2.0 / delta).ln() + dims.ln()) / n1f).sqrt())
}

/// Theory-driven penalty level for the squared-error lasso: with noise
/// scale ν and covariate bound B, λ = 2ν(B+1)·√(2[ln(2/δ) + ln(d0+d1)]/n1)
/// where the failure budget δ shrinks like min{(s+d0)·n1^{2t−1/2},
/// 1/(d0+d1)} in the sparsity guess s and the exploration decay t.
pub fn lasso_lambda(
    n1: usize,
    nu: f64,
    b_bound: f64,
    d0: usize,
    d1: usize,
    t: f64,
    s_guess: usize,
) -> Result<f64> {
    penalty_level(n1, nu, b_bound, d0, d1, t, s_guess, 0.5)
}

/// Penalty level for the logistic-link lasso; identical to [`lasso_lambda`]
/// except the failure budget decays like n1^{2t−1/4}.
pub fn glm_lasso_lambda(
    n1: usize,
    nu: f64,
    b_bound: f64,
    d0: usize,
    d1: usize,
    t: f64,
    s_guess: usize,
) -> Result<f64> {
    penalty_level(n1, nu, b_bound, d0, d1, t, s_guess, 0.25)
}

fn soft_threshold(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

/// L1-penalized least squares, minimizing
/// (1/(2·n))·Σ (y_i − ⟨q_i, b⟩)² + λ‖b‖₁ by cyclic coordinate descent.
pub fn lasso_fit(samples: &[Sample], lambda: f64) -> Result<PilotFit> {
    lasso_fit_warm(samples, lambda, None)
}

/// [`lasso_fit`] with an optional warm start (stacked coefficient vector),
/// used when refitting on a growing history.
pub fn lasso_fit_warm(
    samples: &[Sample],
    lambda: f64,
    start: Option<&DVector<f64>>,
) -> Result<PilotFit> {
    lasso_core(samples, lambda, true, start)
}

/// Partially penalized variant for the bandit policy's running fit: the λ
/// applies to the nuisance coordinates only, and the arm effects are left
/// free. Penalizing an arm indicator shrinks its coefficient by λ·n/n_k —
/// a penalty that grows as the arm is dropped — so a fully penalized
/// running fit locks onto the early leader and stops reacting to reward
/// noise; leaving the (low-dimensional) arm block unpenalized keeps the
/// policy's reward estimates live, matching how the OLS-guided policy
/// treats them.
pub fn lasso_policy_fit(
    samples: &[Sample],
    lambda: f64,
    start: Option<&DVector<f64>>,
) -> Result<PilotFit> {
    lasso_core(samples, lambda, false, start)
}

fn lasso_core(
    samples: &[Sample],
    lambda: f64,
    penalize_arms: bool,
    start: Option<&DVector<f64>>,
) -> Result<PilotFit> {
    if lambda < 0.0 {
        return Err(Error::Parameter(format!("penalty level {lambda} must be nonnegative")));
    }
    let (q, y, d0, d1) = design(samples)?;
    let n = samples.len() as f64;
    let p = d0 + d1;

    let mut b = match start {
        Some(b0) if b0.len() == p => b0.clone(),
        _ => DVector::zeros(p),
    };
    // Per-coordinate curvature (1/n)·Σ q_ij²; a zero entry means the
    // column is identically zero and its coefficient stays put at zero.
    let curvature: Vec<f64> = (0..p).map(|j| q.column(j).norm_squared() / n).collect();
    if start.is_some() {
        for j in 0..p {
            if curvature[j] == 0.0 {
                b[j] = 0.0;
            }
        }
    }
    let penalty = |j: usize| if penalize_arms || j >= d0 { lambda } else { 0.0 };
    let mut resid = &y - &q * &b;

    let max_sweeps = 10_000;
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut max_update = 0.0_f64;
        for j in 0..p {
            if curvature[j] == 0.0 {
                continue;
            }
            let col = q.column(j);
            let rho = col.dot(&resid) / n + curvature[j] * b[j];
            let new = soft_threshold(rho, penalty(j)) / curvature[j];
            let delta = new - b[j];
            if delta != 0.0 {
                resid -= delta * col;
                b[j] = new;
            }
            max_update = max_update.max(delta.abs());
        }
        if max_update < 1e-10 {
            converged = true;
            break;
        }
    }

    let (theta_hat, beta_hat) = split_coefs(&b, d0, d1);
    Ok(PilotFit {
        theta_hat,
        beta_hat,
        method: PilotKind::Lasso,
        iterations: sweeps,
        converged,
        note: None,
    })
}

/// Numerically stable ln(1 + e^eta).
fn log1pexp(eta: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p()
}

/// Average negative log-likelihood of a logistic model at coefficients b.
fn logistic_nll(q: &DMatrix<f64>, y: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let eta = q * b;
    let n = y.len() as f64;
    eta.iter()
        .zip(y.iter())
        .map(|(&e, &yi)| log1pexp(e) - yi * e)
        .sum::<f64>()
        / n
}

/// Logistic maximum likelihood by damped Newton iteration.
///
/// Stops when the gradient's max-norm falls below 1e-8 (converged) or after
/// 100 iterations. Coefficients running past 1e4 in magnitude are treated
/// as separation: the fit stops and is flagged rather than polished to a
/// non-existent maximizer.
pub fn logistic_mle(samples: &[Sample]) -> Result<PilotFit> {
    logistic_mle_warm(samples, None)
}

/// [`logistic_mle`] with an optional warm start (stacked coefficients).
pub fn logistic_mle_warm(samples: &[Sample], start: Option<&DVector<f64>>) -> Result<PilotFit> {
    logistic_newton(samples, start, 1e-8)
}

/// Policy-grade variant for the bandit's running refits: same damped
/// Newton, but stationarity to 1e-5. The policy only ranks arm effects, so
/// parameter error at that tolerance is orders of magnitude below the
/// reward noise it feeds; insisting on 1e-8 makes mid-history fits (near
/// separation, correlated contexts) stall at the iteration cap round after
/// round and fall back to a zero pilot that is far worse than the
/// near-stationary point being discarded.
pub fn logistic_mle_policy(samples: &[Sample], start: Option<&DVector<f64>>) -> Result<PilotFit> {
    logistic_newton(samples, start, 1e-5)
}

fn logistic_newton(
    samples: &[Sample],
    start: Option<&DVector<f64>>,
    grad_tol: f64,
) -> Result<PilotFit> {
    let (q, y, d0, d1) = design(samples)?;
    let n = samples.len() as f64;
    let p = d0 + d1;

    let mut b = match start {
        Some(b0) if b0.len() == p => b0.clone(),
        _ => DVector::zeros(p),
    };
    // Gradient of the mean negative log-likelihood, built by matrix ops.
    let mean_grad = |b: &DVector<f64>| -> DVector<f64> {
        let eta = &q * b;
        let resid = DVector::from_fn(y.len(), |i, _| {
            let (mu, _, _) = link_eval(LinkKind::Logistic, eta[i]);
            y[i] - mu
        });
        q.tr_mul(&resid) / n
    };
    let mut loss = logistic_nll(&q, &y, &b);
    let mut iterations = 0;
    let mut converged = false;
    let mut note = None;

    while iterations < 100 {
        if b.amax() > 1e4 {
            note = Some(FitNote::Separation);
            break;
        }
        iterations += 1;
        let eta = &q * &b;
        let mut weighted = q.clone();
        let mut resid = DVector::zeros(y.len());
        for i in 0..y.len() {
            let (mu, w, _) = link_eval(LinkKind::Logistic, eta[i]);
            resid[i] = y[i] - mu;
            weighted.row_mut(i).scale_mut(w / n);
        }
        let grad = q.tr_mul(&resid) / n;
        if grad.amax() < grad_tol {
            converged = true;
            break;
        }
        let mut hess = q.tr_mul(&weighted);
        // Ridge jitter keeps the Newton system solvable when the weights
        // collapse in the tails.
        for j in 0..p {
            hess[(j, j)] += 1e-8;
        }
        let step = linalg::gauss_jordan_solve(&hess, &grad)?.x;

        let mut scale = 1.0;
        let mut advanced = false;
        for _ in 0..30 {
            let candidate = &b + scale * &step;
            let candidate_loss = logistic_nll(&q, &y, &candidate);
            if candidate_loss <= loss {
                b = candidate;
                loss = candidate_loss;
                advanced = true;
                break;
            }
            scale *= 0.5;
        }
        if !advanced {
            break;
        }
    }

    // Re-check stationarity at the final point so a warm start that is
    // already at the optimum reports convergence.
    if !converged && note.is_none() {
        converged = mean_grad(&b).amax() < grad_tol;
    }

    let (theta_hat, beta_hat) = split_coefs(&b, d0, d1);
    Ok(PilotFit {
        theta_hat,
        beta_hat,
        method: PilotKind::LogisticMle,
        iterations,
        converged,
        note,
    })
}

/// L1-penalized generalized-linear fit by proximal gradient descent with
/// backtracking, minimizing (1/n)·Σ [G(η_i) − y_i·η_i] + λ‖b‖₁ where G is
/// the cumulant of the link (η²/2 for the identity link at unit dispersion,
/// ln(1+e^η) for the logistic link). With the identity link this coincides
/// with [`lasso_fit`]'s objective.
pub fn glm_lasso_fit(samples: &[Sample], link: LinkKind, lambda: f64) -> Result<PilotFit> {
    glm_lasso_fit_warm(samples, link, lambda, None)
}

/// [`glm_lasso_fit`] with an optional warm start (stacked coefficients).
pub fn glm_lasso_fit_warm(
    samples: &[Sample],
    link: LinkKind,
    lambda: f64,
    start: Option<&DVector<f64>>,
) -> Result<PilotFit> {
    glm_lasso_core(samples, link, lambda, true, start)
}

/// Partially penalized GLM lasso for the bandit policy's running fit: the
/// arm block is unpenalized, for the reasons given at [`lasso_policy_fit`].
pub fn glm_lasso_policy_fit(
    samples: &[Sample],
    link: LinkKind,
    lambda: f64,
    start: Option<&DVector<f64>>,
) -> Result<PilotFit> {
    glm_lasso_core(samples, link, lambda, false, start)
}

fn glm_lasso_core(
    samples: &[Sample],
    link: LinkKind,
    lambda: f64,
    penalize_arms: bool,
    start: Option<&DVector<f64>>,
) -> Result<PilotFit> {
    if lambda < 0.0 {
        return Err(Error::Parameter(format!("penalty level {lambda} must be nonnegative")));
    }
    let (q, y, d0, d1) = design(samples)?;
    let n = samples.len() as f64;
    let p = d0 + d1;

    let smooth = |b: &DVector<f64>| -> f64 {
        let eta = &q * b;
        let total: f64 = eta
            .iter()
            .zip(y.iter())
            .map(|(&e, &yi)| match link {
                LinkKind::Identity { .. } => 0.5 * e * e - yi * e,
                LinkKind::Logistic => log1pexp(e) - yi * e,
            })
            .sum();
        total / n
    };
    let gradient = |b: &DVector<f64>| -> DVector<f64> {
        let eta = &q * b;
        let mut resid = DVector::zeros(samples.len());
        for i in 0..samples.len() {
            let mu = match link {
                LinkKind::Identity { .. } => eta[i],
                LinkKind::Logistic => link_eval(LinkKind::Logistic, eta[i]).0,
            };
            resid[i] = mu - y[i];
        }
        q.transpose() * resid / n
    };

    let mut b = match start {
        Some(b0) if b0.len() == p => b0.clone(),
        _ => DVector::zeros(p),
    };
    let mut f_val = smooth(&b);
    let mut step = 1.0_f64;
    let max_iters = 20_000;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters {
        iterations += 1;
        let grad = gradient(&b);
        // Backtrack until the quadratic upper model at this step size holds.
        let mut accepted = None;
        for _ in 0..60 {
            let mut candidate = DVector::zeros(p);
            for j in 0..p {
                let pen = if penalize_arms || j >= d0 { lambda } else { 0.0 };
                candidate[j] = soft_threshold(b[j] - step * grad[j], step * pen);
            }
            let diff = &candidate - &b;
            let f_candidate = smooth(&candidate);
            let model = f_val + grad.dot(&diff) + diff.norm_squared() / (2.0 * step);
            if f_candidate <= model + 1e-15 {
                accepted = Some((candidate, diff, f_candidate));
                break;
            }
            step *= 0.5;
        }
        let Some((candidate, diff, f_candidate)) = accepted else {
            break;
        };
        let map_norm = diff.amax() / step;
        b = candidate;
        f_val = f_candidate;
        if map_norm < 1e-8 {
            converged = true;
            break;
        }
        // Cautious step recovery so one flat region does not freeze the
        // step size forever.
        step = (step * 1.2).min(1e3);
    }

    let (theta_hat, beta_hat) = split_coefs(&b, d0, d1);
    Ok(PilotFit {
        theta_hat,
        beta_hat,
        method: PilotKind::GlmLasso,
        iterations,
        converged,
        note: None,
    })
}

/// Dispatches to the fitter selected by `kind`, warm-starting iterative
/// fitters from `previous` when given. `lambda` is required by the
/// penalized fitters and ignored by the rest.
pub fn fit_pilot(
    kind: PilotKind,
    samples: &[Sample],
    link: LinkKind,
    lambda: Option<f64>,
    previous: Option<&PilotFit>,
) -> Result<PilotFit> {
    let start = previous.map(|f| f.stacked());
    match kind {
        PilotKind::Ols => ols_fit(samples),
        PilotKind::Lasso => {
            let lambda = lambda
                .ok_or_else(|| Error::Usage("lasso pilot requires a penalty level".into()))?;
            lasso_fit_warm(samples, lambda, start.as_ref())
        }
        PilotKind::LogisticMle => logistic_mle_warm(samples, start.as_ref()),
        PilotKind::GlmLasso => {
            let lambda = lambda
                .ok_or_else(|| Error::Usage("glm-lasso pilot requires a penalty level".into()))?;
            glm_lasso_fit_warm(samples, link, lambda, start.as_ref())
        }
    }
}
