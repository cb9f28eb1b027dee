//! Weighting quantities for the generalized-linear estimator.
//!
//! For a nonlinear link the right centering of the covariate vector is no
//! longer its selection mean: it is the derivative-weighted mean
//! m = E[X·g′(η)] / E[g′(η)], which makes the score orthogonal to the
//! nuisance direction. The matching whitening matrix Ω is the inverse
//! symmetric square root of the variance-weighted covariance of X − m.
//! Both are functions of the selection probabilities and the (pilot)
//! parameter values only, so they can be formed per round in closed form
//! from the d0+1 covariate atoms.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{link_eval, LinkKind};
use crate::probvec::SelectionProbs;

/// Per-round GLM weighting quantities: the derivative-weighted covariate
/// mean m, the whitening matrix Ω, and the matrix Σ it whitens
/// (Ω·Σ·Ω = I).
#[derive(Debug, Clone)]
pub struct GlmWeights {
    pub m: DVector<f64>,
    pub omega: DMatrix<f64>,
    pub sigma_glm: DMatrix<f64>,
}

/// Linear predictor at covariate atom `arm` (0 is the reference arm), for
/// arm effects `theta` and nuisance value `h`.
fn atom_eta(theta: &DVector<f64>, h: f64, arm: usize) -> f64 {
    if arm == 0 {
        h
    } else {
        theta[arm - 1] + h
    }
}

/// Derivative-weighted covariate mean, in closed form over the atoms:
/// m_j = p_j·g′(θ_j + h) / Σ_{k=0}^{d0} p_k·g′(θ_k + h).
pub fn glm_mean_vector(
    probs: &SelectionProbs,
    theta: &DVector<f64>,
    h: f64,
    link: LinkKind,
) -> DVector<f64> {
    let d0 = probs.d0();
    let mut denom = 0.0;
    let mut m = DVector::zeros(d0);
    for arm in 0..=d0 {
        let (_, g_prime, _) = link_eval(link, atom_eta(theta, h, arm));
        let weight = probs.prob_of(arm) * g_prime;
        denom += weight;
        if arm > 0 {
            m[arm - 1] = weight;
        }
    }
    m / denom
}

/// Variance-weighted covariance of the centered covariate and its
/// whitening: Σ = Σ_{k=0}^{d0} p_k·v_k·(x_k − m)(x_k − m)ᵀ with v_k the
/// conditional response variance at atom k, and Ω = Σ^{-1/2}.
///
/// Fails with a degenerate-probability error when Σ is numerically
/// singular (eigenvalue below 1e-12), which happens when the response
/// variance collapses at the atoms — e.g. logistic means saturating at
/// 0 or 1.
pub fn glm_cov(
    probs: &SelectionProbs,
    theta: &DVector<f64>,
    h: f64,
    link: LinkKind,
) -> Result<GlmWeights> {
    let d0 = probs.d0();
    let m = glm_mean_vector(probs, theta, h, link);
    let mut sigma = DMatrix::zeros(d0, d0);
    for arm in 0..=d0 {
        let (_, _, var) = link_eval(link, atom_eta(theta, h, arm));
        let mut x = DVector::zeros(d0);
        if arm > 0 {
            x[arm - 1] = 1.0;
        }
        let centered = x - &m;
        sigma.syger(probs.prob_of(arm) * var, &centered, &centered, 1.0);
    }
    sigma.fill_upper_triangle_with_lower_triangle();

    let (values, vectors) = linalg::sym_eigen(&sigma);
    let lambda_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if lambda_min < 1e-12 {
        return Err(Error::DegenerateProbability(format!(
            "weighted covariate covariance is numerically singular \
             (min eigenvalue {lambda_min:.3e}); response variance has \
             collapsed at some covariate atom"
        )));
    }
    let omega = linalg::sym_from_eigen(&values, &vectors, |l| 1.0 / l.sqrt());
    Ok(GlmWeights { m, omega, sigma_glm: sigma })
}

/// Closed-form inverse of the matrix Σ from [`glm_cov`], via a rank-two
/// update of a diagonal: writing v_k for the response variance and
/// m̄_k = g′(η_k)/Σ_l p_l·g′(η_l), Σ = diag(p_k·v_k) plus a rank-two
/// correction in the directions (p_k·v_k) and m, so its inverse is
/// diag(1/(p_k·v_k)) + W·M·Wᵀ/denom with 2-column W of rows
/// (1, m̄_k/v_k), M = [[S, p₀m̄₀], [p₀m̄₀, −p₀v₀]], S = Σ_k p_k·m̄_k²/v_k,
/// and denom = S·p₀·v₀ + p₀²·m̄₀².
pub fn glm_cov_inverse_closed(
    probs: &SelectionProbs,
    theta: &DVector<f64>,
    h: f64,
    link: LinkKind,
) -> Result<DMatrix<f64>> {
    let d0 = probs.d0();
    let mut g_prime = vec![0.0; d0 + 1];
    let mut var = vec![0.0; d0 + 1];
    for arm in 0..=d0 {
        let (_, gp, v) = link_eval(link, atom_eta(theta, h, arm));
        g_prime[arm] = gp;
        var[arm] = v;
    }
    let denom_gp: f64 = (0..=d0).map(|arm| probs.prob_of(arm) * g_prime[arm]).sum();
    let m_bar: Vec<f64> = g_prime.iter().map(|gp| gp / denom_gp).collect();

    if var.iter().any(|&v| v <= 0.0) {
        return Err(Error::DegenerateProbability(
            "response variance vanished at a covariate atom".into(),
        ));
    }
    let p0 = probs.p0();
    let s: f64 = (1..=d0)
        .map(|k| probs.prob_of(k) * m_bar[k] * m_bar[k] / var[k])
        .sum();
    let denom = s * p0 * var[0] + (p0 * m_bar[0]).powi(2);
    if denom <= f64::MIN_POSITIVE {
        return Err(Error::DegenerateProbability(format!(
            "rank-two inversion pivot {denom:.3e} is not positive"
        )));
    }

    let mut w = DMatrix::zeros(d0, 2);
    for k in 1..=d0 {
        w[(k - 1, 0)] = 1.0;
        w[(k - 1, 1)] = m_bar[k] / var[k];
    }
    let m_core = DMatrix::from_row_slice(
        2,
        2,
        &[s, p0 * m_bar[0], p0 * m_bar[0], -p0 * var[0]],
    );
    let mut inv = &w * m_core * w.transpose() / denom;
    for k in 1..=d0 {
        inv[(k - 1, k - 1)] += 1.0 / (probs.prob_of(k) * var[k]);
    }
    Ok(inv)
}

/// Fixed-direction weight for the GLM score: w = Ω²u / √(uᵀΩ²u), together
/// with the scalar 1/√(uᵀΩ²u). Normalized so the variance-weighted second
/// moment of ⟨w, X − m⟩ over the atoms is 1.
pub fn glm_direction_weight(
    weights: &GlmWeights,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    if u.len() != weights.m.len() {
        return Err(Error::Usage(format!(
            "direction has length {} but there are {} arms",
            u.len(),
            weights.m.len()
        )));
    }
    if (u.norm() - 1.0).abs() > 1e-10 {
        return Err(Error::Parameter(format!(
            "direction must be unit-norm, got ‖u‖ = {}",
            u.norm()
        )));
    }
    let omega_sq_u = &weights.omega * (&weights.omega * u);
    let quad = u.dot(&omega_sq_u);
    if !(quad > 0.0) {
        return Err(Error::DegenerateProbability(format!(
            "direction quadratic form {quad} is not positive"
        )));
    }
    let scale = 1.0 / quad.sqrt();
    Ok((omega_sq_u * scale, scale))
}
