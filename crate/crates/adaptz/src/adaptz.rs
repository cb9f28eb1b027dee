//! The adaptively weighted two-stage estimators.
//!
//! Each estimator consumes the inference fold of a [`Dataset`] plus a pilot
//! fit from the other fold, and solves an estimating equation whose
//! per-sample score is reweighted by that round's recorded selection
//! probabilities. The weighting makes the score terms a martingale
//! difference sequence with *known* conditional covariance, which is what
//! restores asymptotic normality under adaptive sampling and hands the
//! confidence intervals their scale for free.
//!
//! Four estimators:
//! - [`adaptz_pl`]: the full arm-effect vector under the identity link.
//! - [`pl_direction`]: a single linear functional ⟨u, θ⟩, identity link.
//! - [`adaptz_glm`]: the full vector under a generalized link.
//! - [`glm_direction`]: a linear functional under a generalized link.
//!
//! All estimating equations are symmetric sums over fold-2 samples, and all
//! sums here are accumulated canonically, so results are bitwise invariant
//! to sample order.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::glmweights::{glm_cov, glm_direction_weight, GlmWeights};
use crate::linalg::{canonical_sum, gauss_jordan_solve, SumGrid};
use crate::model::{link_eval, Dataset, LinkKind, Sample};
use crate::pilot::PilotFit;
use crate::probvec::{cov_inverse_sqrt, cov_sqrt, direction_weight};

/// Condition-estimate threshold past which the fold-2 linear system is
/// treated as degenerate rather than solved.
const COND_LIMIT: f64 = 1e12;

/// Solution of the full-vector partial-linear estimating equation.
#[derive(Debug, Clone)]
pub struct PLSolution {
    pub theta: DVector<f64>,
    /// Fold-2 average of the per-round covariance square roots Σ_i^{1/2};
    /// the matrix that standardizes √n₂·(θ̂ − θ*) to N(0, σ²I).
    pub scaling: DMatrix<f64>,
    pub n2: usize,
    /// Response noise standard deviation used by interval construction.
    pub sigma_noise: f64,
}

/// Solution of a fixed-direction (scalar) estimating equation.
#[derive(Debug, Clone)]
pub struct DirSolution {
    pub theta_u: f64,
    /// Fold-2 average of the per-round scalar scale (1/√(uᵀΣ_i⁻¹u) for the
    /// partial-linear score, the weighted Jacobian for the GLM score); the
    /// quantity that standardizes √n₂·(θ̂_u − θ*_u).
    pub scale_bar: f64,
    pub n2: usize,
}

/// Solution of the full-vector generalized-linear estimating equation.
#[derive(Debug, Clone)]
pub struct GLMSolution {
    pub theta: DVector<f64>,
    /// Fold-2 average of Ω̂(X−m̂)·g′(⟨X,θ̂⟩+ĥ)·(X−m̂)ᵀ at the pilot values;
    /// standardizes √n₂·(θ̂ − θ*) to N(0, I).
    pub scaling: DMatrix<f64>,
    pub n2: usize,
    pub newton_iters: usize,
    pub converged: bool,
}

/// Per-sample partial-linear score Σ^{-1/2}·(X − π)·(Y − ⟨X, θ⟩ − h), with
/// Σ^{-1/2} the symmetric root of the closed-form covariance inverse.
pub fn pl_score(sample: &Sample, theta: &DVector<f64>, h_val: f64) -> DVector<f64> {
    let inv_sqrt = cov_inverse_sqrt(&sample.probs);
    let x = sample.covariate();
    let centered = &x - sample.probs.arm_vector();
    let resid = sample.y - x.dot(theta) - h_val;
    inv_sqrt * centered * resid
}

/// Per-sample generalized-linear score Ω·(X − m)·(Y − g(⟨X, θ⟩ + h)), with
/// the weights (m, Ω) supplied by the caller — evaluated at pilot values,
/// not at θ.
pub fn glm_score(
    sample: &Sample,
    weights: &GlmWeights,
    theta: &DVector<f64>,
    h_val: f64,
    link: LinkKind,
) -> DVector<f64> {
    let x = sample.covariate();
    let (mean, _, _) = link_eval(link, x.dot(theta) + h_val);
    let centered = x - &weights.m;
    &weights.omega * centered * (sample.y - mean)
}

/// Formats fold-2 pull counts, fewest first, for degenerate-design errors.
fn underexplored_arms(fold2: &[Sample], d0: usize) -> String {
    let mut counts = vec![0usize; d0 + 1];
    for s in fold2 {
        counts[s.arm.index] += 1;
    }
    let mut arms: Vec<usize> = (0..=d0).collect();
    arms.sort_by_key(|&k| counts[k]);
    let list: Vec<String> = arms.iter().map(|&k| format!("arm {k}: {} pulls", counts[k])).collect();
    list.join(", ")
}

/// Full-vector partial-linear estimator.
///
/// The score is linear in θ, so the fold-2 estimating equation is the d0×d0
/// linear system Ê[Σ^{-1/2}(X−π)Xᵀ]·θ = Ê[Σ^{-1/2}(X−π)(Y−ĥ)], solved by
/// Gauss–Jordan elimination with partial pivoting. Only the pilot's
/// nuisance coefficients enter; its arm effects are never read.
/// `sigma_noise` is the known response noise level carried into interval
/// construction (see [`plugin_noise_sd`] for a data-driven substitute).
pub fn adaptz_pl(dataset: &Dataset, pilot: &PilotFit, sigma_noise: f64) -> Result<PLSolution> {
    let fold2 = dataset.fold2();
    let d0 = dataset.d0();
    let n2 = fold2.len();

    let mut a_grid = SumGrid::new(d0 * d0, n2);
    let mut b_grid = SumGrid::new(d0, n2);
    let mut s_grid = SumGrid::new(d0 * d0, n2);
    for s in fold2 {
        let inv_sqrt = cov_inverse_sqrt(&s.probs);
        let sqrt = cov_sqrt(&s.probs);
        let x = s.covariate();
        let centered = &x - s.probs.arm_vector();
        let w = inv_sqrt * centered;
        let resid_const = s.y - pilot.nuisance(&s.z);
        for j in 0..d0 {
            for k in 0..d0 {
                a_grid.push(j * d0 + k, w[j] * x[k]);
                s_grid.push(j * d0 + k, sqrt[(j, k)]);
            }
            b_grid.push(j, w[j] * resid_const);
        }
    }
    let n2f = n2 as f64;
    let a = DMatrix::from_row_iterator(d0, d0, a_grid.sums().into_iter().map(|v| v / n2f));
    let b = DVector::from_iterator(d0, b_grid.sums().into_iter().map(|v| v / n2f));
    let scaling = DMatrix::from_row_iterator(d0, d0, s_grid.sums().into_iter().map(|v| v / n2f));

    let degenerate = |detail: String| {
        Error::DegenerateDesign(format!(
            "fold-2 estimating equation is numerically singular ({detail}); \
             inference-fold coverage: {}",
            underexplored_arms(fold2, d0)
        ))
    };
    let solve = gauss_jordan_solve(&a, &b).map_err(|e| degenerate(e.to_string()))?;
    if solve.cond_estimate > COND_LIMIT {
        return Err(degenerate(format!("condition estimate {:.3e}", solve.cond_estimate)));
    }
    Ok(PLSolution { theta: solve.x, scaling, n2, sigma_noise })
}

/// Plug-in response noise level: the root of the mean squared pilot-fold
/// residual Y − ⟨X, θ̂⟩ − ĥ(Z). A substitute for [`adaptz_pl`]'s
/// `sigma_noise` when the true noise level is unknown.
pub fn plugin_noise_sd(dataset: &Dataset, pilot: &PilotFit) -> f64 {
    let fold1 = dataset.fold1();
    let mut terms: Vec<f64> = fold1
        .iter()
        .map(|s| {
            let r = s.y - s.covariate().dot(&pilot.theta_hat) - pilot.nuisance(&s.z);
            r * r
        })
        .collect();
    (canonical_sum(&mut terms) / fold1.len() as f64).sqrt()
}

/// Fixed-direction partial-linear estimator for the scalar ⟨u, θ*⟩.
///
/// The score projects the centered covariate onto the per-round direction
/// weight w̃ = Σ⁻¹u/√(uᵀΣ⁻¹u); components of θ orthogonal to u are pinned
/// at the pilot's values, so the equation is scalar and linear.
pub fn pl_direction(dataset: &Dataset, u: &DVector<f64>, pilot: &PilotFit) -> Result<DirSolution> {
    let fold2 = dataset.fold2();
    let n2 = fold2.len();
    let u_dot_pilot = u.dot(&pilot.theta_hat);

    let mut num_terms = Vec::with_capacity(n2);
    let mut den_terms = Vec::with_capacity(n2);
    let mut scale_terms = Vec::with_capacity(n2);
    for s in fold2 {
        let (w, scale) = direction_weight(&s.probs, u)?;
        let x = s.covariate();
        let projected = w.dot(&(&x - s.probs.arm_vector()));
        // Xᵀ(I − uuᵀ)θ̂: the pilot's contribution orthogonal to u.
        let off_direction = x.dot(&pilot.theta_hat) - x.dot(u) * u_dot_pilot;
        num_terms.push(projected * (s.y - off_direction - pilot.nuisance(&s.z)));
        den_terms.push(projected * x.dot(u));
        scale_terms.push(scale);
    }
    let num = canonical_sum(&mut num_terms);
    let den = canonical_sum(&mut den_terms);
    if den == 0.0 {
        return Err(Error::DegenerateDesign(format!(
            "the direction never loads on any pulled arm (all score terms \
             vanish); inference-fold coverage: {}",
            underexplored_arms(fold2, dataset.d0())
        )));
    }
    let scale_bar = canonical_sum(&mut scale_terms) / n2 as f64;
    Ok(DirSolution { theta_u: num / den, scale_bar, n2 })
}

/// Per-round cached quantities for the GLM estimators.
struct GlmRound {
    /// Ω̂·(X − m̂), the weighted centered covariate.
    weighted: DVector<f64>,
    /// X − m̂.
    centered: DVector<f64>,
    /// Arm index (0 = reference).
    arm: usize,
    /// Pilot nuisance value ĥ(Z).
    h_val: f64,
    /// Pilot linear predictor ⟨X, θ̂⟩ + ĥ(Z).
    eta_pilot: f64,
    y: f64,
}

/// Evaluates weights at the pilot for every fold-2 round.
fn glm_rounds(dataset: &Dataset, pilot: &PilotFit, link: LinkKind) -> Result<Vec<GlmRound>> {
    dataset
        .fold2()
        .iter()
        .map(|s| {
            let h_val = pilot.nuisance(&s.z);
            let weights = glm_cov(&s.probs, &pilot.theta_hat, h_val, link)?;
            let x = s.covariate();
            let centered = &x - &weights.m;
            Ok(GlmRound {
                weighted: &weights.omega * &centered,
                centered,
                arm: s.arm.index,
                h_val,
                eta_pilot: x.dot(&pilot.theta_hat) + h_val,
                y: s.y,
            })
        })
        .collect()
}

/// Full-vector generalized-linear estimator.
///
/// Solves Ê[Ω̂(X−m̂){Y − g(⟨X,θ⟩+ĥ)}] = 0 by Newton's method from the
/// pilot's arm effects, with the analytic Jacobian −Ê[Ω̂(X−m̂)g′(·)Xᵀ] and
/// step-halving on the residual norm. Weights stay fixed at the pilot
/// throughout. Non-convergence returns the best iterate with
/// `converged = false`; a singular Jacobian is an error.
pub fn adaptz_glm(dataset: &Dataset, pilot: &PilotFit, link: LinkKind) -> Result<GLMSolution> {
    let d0 = dataset.d0();
    let rounds = glm_rounds(dataset, pilot, link)?;
    let n2 = rounds.len();
    let n2f = n2 as f64;

    let mut f_grid = SumGrid::new(d0, n2);
    let mut eval_f = |theta: &DVector<f64>| -> DVector<f64> {
        f_grid.clear();
        for r in &rounds {
            let eta = if r.arm > 0 { theta[r.arm - 1] + r.h_val } else { r.h_val };
            let (mean, _, _) = link_eval(link, eta);
            for j in 0..d0 {
                f_grid.push(j, r.weighted[j] * (r.y - mean));
            }
        }
        DVector::from_iterator(d0, f_grid.sums().into_iter().map(|v| v / n2f))
    };
    let mut j_grid = SumGrid::new(d0 * d0, n2);
    let mut eval_jacobian = |theta: &DVector<f64>| -> DMatrix<f64> {
        j_grid.clear();
        for r in &rounds {
            let eta = if r.arm > 0 { theta[r.arm - 1] + r.h_val } else { r.h_val };
            let (_, g_prime, _) = link_eval(link, eta);
            for j in 0..d0 {
                for k in 0..d0 {
                    let xk = if r.arm == k + 1 { 1.0 } else { 0.0 };
                    j_grid.push(j * d0 + k, -r.weighted[j] * g_prime * xk);
                }
            }
        }
        DMatrix::from_row_iterator(d0, d0, j_grid.sums().into_iter().map(|v| v / n2f))
    };

    // Theorem scaling at the pilot values, independent of the Newton path.
    let mut s_grid = SumGrid::new(d0 * d0, n2);
    for r in &rounds {
        let (_, g_prime, _) = link_eval(link, r.eta_pilot);
        for j in 0..d0 {
            for k in 0..d0 {
                s_grid.push(j * d0 + k, r.weighted[j] * g_prime * r.centered[k]);
            }
        }
    }
    let scaling = DMatrix::from_row_iterator(d0, d0, s_grid.sums().into_iter().map(|v| v / n2f));

    let mut theta = pilot.theta_hat.clone();
    let mut f = eval_f(&theta);
    let mut res = f.amax();
    let mut newton_iters = 0;
    let mut converged = res < 1e-10;

    while !converged && newton_iters < 100 {
        newton_iters += 1;
        let jac = eval_jacobian(&theta);
        let step = gauss_jordan_solve(&jac, &f).map_err(|e| {
            Error::DegenerateDesign(format!(
                "estimating-equation Jacobian is singular ({e}); \
                 inference-fold coverage: {}",
                underexplored_arms(dataset.fold2(), d0)
            ))
        })?;

        let mut scale = 1.0;
        let mut advanced = false;
        for _ in 0..=30 {
            let candidate = &theta - scale * &step.x;
            let f_candidate = eval_f(&candidate);
            if f_candidate.amax() < res {
                theta = candidate;
                f = f_candidate;
                res = f.amax();
                advanced = true;
                break;
            }
            scale *= 0.5;
        }
        if !advanced {
            break;
        }
        converged = res < 1e-10;
    }

    Ok(GLMSolution { theta, scaling, n2, newton_iters, converged })
}

/// Fixed-direction generalized-linear estimator for ⟨u, θ*⟩.
///
/// The scalar estimating equation is solved by bracketing — the bracket
/// expands geometrically from the pilot's value until the score changes
/// sign (radius capped at 1e3) — followed by a safeguarded Newton
/// iteration that falls back to bisection, down to a bracket width of
/// 1e-12.
pub fn glm_direction(
    dataset: &Dataset,
    u: &DVector<f64>,
    pilot: &PilotFit,
    link: LinkKind,
) -> Result<DirSolution> {
    let fold2 = dataset.fold2();
    let n2 = fold2.len();
    let n2f = n2 as f64;
    let u_dot_pilot = u.dot(&pilot.theta_hat);

    // Per-round scalars: the projected weight c, the direction loading a,
    // the frozen offset b (off-direction pilot effects plus nuisance), and
    // the v_cov term.
    struct Round {
        c: f64,
        a: f64,
        b: f64,
        y: f64,
    }
    let mut rounds = Vec::with_capacity(n2);
    let mut vcov_terms = Vec::with_capacity(n2);
    for s in fold2 {
        let h_val = pilot.nuisance(&s.z);
        let weights = glm_cov(&s.probs, &pilot.theta_hat, h_val, link)?;
        let (w, _) = glm_direction_weight(&weights, u)?;
        let x = s.covariate();
        let centered = &x - &weights.m;
        let c = w.dot(&centered);
        let a = x.dot(u);
        let off_direction = x.dot(&pilot.theta_hat) - a * u_dot_pilot;
        let (_, g_prime_pilot, _) = link_eval(link, x.dot(&pilot.theta_hat) + h_val);
        vcov_terms.push(c * g_prime_pilot * centered.dot(u));
        rounds.push(Round { c, a, b: off_direction + h_val, y: s.y });
    }
    let scale_bar = canonical_sum(&mut vcov_terms) / n2f;
    if !(scale_bar > 0.0) {
        return Err(Error::DegenerateDesign(format!(
            "direction scaling v = {scale_bar} is not positive; \
             inference-fold coverage: {}",
            underexplored_arms(fold2, dataset.d0())
        )));
    }

    let mut buf = Vec::with_capacity(n2);
    let mut score = |v: f64| -> f64 {
        buf.clear();
        for r in &rounds {
            let (mean, _, _) = link_eval(link, r.a * v + r.b);
            buf.push(r.c * (r.y - mean));
        }
        canonical_sum(&mut buf) / n2f
    };
    let mut dbuf = Vec::with_capacity(n2);
    let mut score_deriv = |v: f64| -> f64 {
        dbuf.clear();
        for r in &rounds {
            let (_, g_prime, _) = link_eval(link, r.a * v + r.b);
            dbuf.push(-r.c * r.a * g_prime);
        }
        canonical_sum(&mut dbuf) / n2f
    };

    // Geometric bracket expansion around the pilot's directional value.
    let center = u_dot_pilot;
    let mut bracket = None;
    let mut radius = 1.0;
    loop {
        let (lo, hi) = (center - radius, center + radius);
        let (f_lo, f_hi) = (score(lo), score(hi));
        if f_lo == 0.0 {
            return Ok(DirSolution { theta_u: lo, scale_bar, n2 });
        }
        if f_hi == 0.0 {
            return Ok(DirSolution { theta_u: hi, scale_bar, n2 });
        }
        if f_lo.signum() != f_hi.signum() {
            bracket = Some((lo, hi, f_lo));
            break;
        }
        if radius >= 1e3 {
            break;
        }
        radius = (radius * 2.0).min(1e3);
    }
    let Some((mut lo, mut hi, mut f_lo)) = bracket else {
        return Err(Error::RootBracketing(format!(
            "estimating equation has no sign change within radius 1e3 of \
             the pilot value {center}"
        )));
    };

    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        if hi - lo < 1e-12 {
            break;
        }
        let fx = score(x);
        if fx == 0.0 {
            return Ok(DirSolution { theta_u: x, scale_bar, n2 });
        }
        if fx.signum() == f_lo.signum() {
            lo = x;
            f_lo = fx;
        } else {
            hi = x;
        }
        let d = score_deriv(x);
        let newton = x - fx / d;
        x = if d != 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    Ok(DirSolution { theta_u: x, scale_bar, n2 })
}
