//! Selection-probability algebra for the partial-linear estimator.
//!
//! With covariates supported on the atoms {0, e_1, …, e_d0}, the per-round
//! conditional covariance of the covariate vector is the multinomial matrix
//! Σ = diag(p) − p pᵀ. This module provides Σ, its canonical symmetric
//! square root, its closed-form inverse, and the fixed-direction weight
//! vector built from the inverse — the quantities every weighted score in
//! this crate is assembled from.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance on the simplex constraint `p0 + Σ p_k = 1`. Probabilities are
/// constructed analytically by the generators, so drift beyond this
/// indicates a bug rather than round-off.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Arm-selection probabilities for one round: `p[k-1]` is the probability
/// of arm `k` (covariate e_k), `p0` the probability of the all-zeros
/// reference arm.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionProbs {
    p: Vec<f64>,
    p0: f64,
}

impl SelectionProbs {
    /// Validates positivity of every probability and the simplex constraint.
    pub fn new(p0: f64, p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Usage("at least one non-reference arm required".into()));
        }
        if !(p0 > 0.0) || p.iter().any(|&pk| !(pk > 0.0)) {
            return Err(Error::Parameter(format!(
                "selection probabilities must be strictly positive (p0 = {p0}, p = {p:?})"
            )));
        }
        let total = p0 + p.iter().sum::<f64>();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Parameter(format!(
                "selection probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self { p, p0 })
    }

    /// Probability of the reference arm 0.
    pub fn p0(&self) -> f64 {
        self.p0
    }

    /// Probabilities of arms 1..d0, in order.
    pub fn arm_probs(&self) -> &[f64] {
        &self.p
    }

    /// Number of non-reference arms.
    pub fn d0(&self) -> usize {
        self.p.len()
    }

    /// Probability of an arm by index, with index 0 the reference arm.
    pub fn prob_of(&self, arm_index: usize) -> f64 {
        if arm_index == 0 {
            self.p0
        } else {
            self.p[arm_index - 1]
        }
    }

    /// Arm probabilities as a column vector.
    pub fn arm_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.p)
    }
}

/// The covariance matrix Σ together with its symmetric square root and its
/// inverse, bundled so downstream code computes each once per sample.
#[derive(Debug, Clone)]
pub struct CovTriple {
    pub sigma: DMatrix<f64>,
    pub sqrt: DMatrix<f64>,
    pub inv: DMatrix<f64>,
}

impl CovTriple {
    pub fn compute(probs: &SelectionProbs) -> Self {
        Self {
            sigma: cov_matrix(probs),
            sqrt: cov_sqrt(probs),
            inv: cov_inverse_explicit(probs),
        }
    }
}

/// Conditional covariance Σ = diag(p) − p pᵀ of the covariate vector, i.e.
/// the expectation of (X − π)(X − π)ᵀ over the d0+1 atoms.
pub fn cov_matrix(probs: &SelectionProbs) -> DMatrix<f64> {
    let d0 = probs.d0();
    let p = probs.arm_vector();
    let mut sigma = DMatrix::from_diagonal(&p);
    sigma -= &p * p.transpose();
    debug_assert_eq!(sigma.nrows(), d0);
    sigma
}

/// Closed-form inverse of Σ: diagonal entries 1/p_k + γ and off-diagonal
/// entries γ, with γ = 1/p0.
pub fn cov_inverse_explicit(probs: &SelectionProbs) -> DMatrix<f64> {
    let d0 = probs.d0();
    let gamma = 1.0 / probs.p0();
    let mut inv = DMatrix::from_element(d0, d0, gamma);
    for k in 0..d0 {
        inv[(k, k)] += 1.0 / probs.arm_probs()[k];
    }
    inv
}

/// Canonical symmetric PSD square root of Σ, by eigendecomposition with
/// eigenvalues floored at 1e-14 before rooting. The floor guards against
/// negative round-off eigenvalues when some arm probability is tiny.
pub fn cov_sqrt(probs: &SelectionProbs) -> DMatrix<f64> {
    linalg::sym_sqrt_floored(&cov_matrix(probs), 1e-14)
}

/// Symmetric square root of the closed-form inverse, Σ^{-1/2}. This is the
/// weighting matrix of the partial-linear score.
pub fn cov_inverse_sqrt(probs: &SelectionProbs) -> DMatrix<f64> {
    linalg::sym_sqrt_floored(&cov_inverse_explicit(probs), 0.0)
}

/// Fixed-direction weight vector w = Σ⁻¹u / √(uᵀΣ⁻¹u) and the scalar
/// scale 1/√(uᵀΣ⁻¹u). The normalization makes E|⟨w, X − π⟩|² = 1.
pub fn direction_weight(probs: &SelectionProbs, u: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    if u.len() != probs.d0() {
        return Err(Error::Usage(format!(
            "direction has length {} but there are {} arms",
            u.len(),
            probs.d0()
        )));
    }
    if (u.norm() - 1.0).abs() > 1e-10 {
        return Err(Error::Parameter(format!(
            "direction must be unit-norm, got ‖u‖ = {}",
            u.norm()
        )));
    }
    let inv = cov_inverse_explicit(probs);
    let inv_u = &inv * u;
    let quad = u.dot(&inv_u);
    let scale = 1.0 / quad.sqrt();
    Ok((inv_u * scale, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gauss_jordan_invert, sym_eigen};
    use proptest::prelude::*;

    fn probs2() -> SelectionProbs {
        SelectionProbs::new(0.5, vec![0.25, 0.25]).unwrap()
    }

    /// All d0+1 covariate atoms with their probabilities; atom 0 is the
    /// zero vector.
    fn atoms(probs: &SelectionProbs) -> Vec<(f64, DVector<f64>)> {
        let d0 = probs.d0();
        let mut out = vec![(probs.p0(), DVector::zeros(d0))];
        for k in 0..d0 {
            let mut x = DVector::zeros(d0);
            x[k] = 1.0;
            out.push((probs.arm_probs()[k], x));
        }
        out
    }

    #[test]
    fn rejects_invalid_probabilities() {
        assert!(SelectionProbs::new(0.5, vec![0.5, 0.25]).is_err()); // sums to 1.25
        assert!(SelectionProbs::new(0.0, vec![1.0]).is_err()); // p0 zero
        assert!(SelectionProbs::new(0.5, vec![0.5, 0.0]).is_err()); // arm zero
        assert!(SelectionProbs::new(0.2, vec![]).is_err()); // no arms
    }

    #[test]
    fn cov_matrix_two_arm_example() {
        let sigma = cov_matrix(&probs2());
        let expect = DMatrix::from_row_slice(2, 2, &[0.1875, -0.0625, -0.0625, 0.1875]);
        assert!((sigma - expect).amax() < 1e-15);
    }

    #[test]
    fn cov_matrix_single_arm_is_bernoulli_variance() {
        let p = SelectionProbs::new(0.5, vec![0.5]).unwrap();
        assert!((cov_matrix(&p)[(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn cov_matrix_row_sums_equal_p0_times_p() {
        let p = SelectionProbs::new(0.3, vec![0.4, 0.2, 0.1]).unwrap();
        let sigma = cov_matrix(&p);
        let ones = DVector::from_element(3, 1.0);
        let rowsum = &sigma * ones;
        for k in 0..3 {
            assert!((rowsum[k] - p.p0() * p.arm_probs()[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn cov_inverse_two_arm_example() {
        let inv = cov_inverse_explicit(&probs2());
        let expect = DMatrix::from_row_slice(2, 2, &[6.0, 2.0, 2.0, 6.0]);
        assert!((inv - expect).amax() < 1e-12);
    }

    #[test]
    fn cov_inverse_single_arm_example() {
        let p = SelectionProbs::new(0.5, vec![0.5]).unwrap();
        assert!((cov_inverse_explicit(&p)[(0, 0)] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cov_sqrt_squares_to_cov_two_arm() {
        let s = cov_sqrt(&probs2());
        let sigma = cov_matrix(&probs2());
        assert!((&s * &s - sigma).amax() < 1e-12);
        // Eigenvalues by symmetry: p(1-2p) + p² = 0.25·0.75 − 0.0625 = 0.125
        // and 0.1875 + 0.0625 = 0.25.
        let (vals, _) = sym_eigen(&cov_matrix(&probs2()));
        let mut v: Vec<f64> = vals.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        assert!((v[0] - 0.125).abs() < 1e-12);
        assert!((v[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn cov_sqrt_single_arm() {
        let p = SelectionProbs::new(0.5, vec![0.5]).unwrap();
        assert!((cov_sqrt(&p)[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn direction_weight_single_arm_scale() {
        for p1 in [0.2, 0.5, 0.7] {
            let probs = SelectionProbs::new(1.0 - p1, vec![p1]).unwrap();
            let u = DVector::from_column_slice(&[1.0]);
            let (_, scale) = direction_weight(&probs, &u).unwrap();
            let p0 = 1.0 - p1;
            assert!((scale - (p0 * p1 / (p0 + p1)).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn direction_weight_two_arm_scale() {
        let u = DVector::from_column_slice(&[1.0, 0.0]);
        let (_, scale) = direction_weight(&probs2(), &u).unwrap();
        assert!((scale - 1.0 / 6.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn direction_weight_requires_unit_norm() {
        let u = DVector::from_column_slice(&[1.0, 1.0]);
        assert!(direction_weight(&probs2(), &u).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        /// Random valid probabilities with every atom bounded away from zero.
        #[test]
        fn explicit_inverse_matches_numeric_inverse(
            raw in prop::collection::vec(0.05f64..1.0, 1..=10),
            raw0 in 0.05f64..1.0,
        ) {
            let total: f64 = raw0 + raw.iter().sum::<f64>();
            let p: Vec<f64> = raw.iter().map(|r| r / total).collect();
            let probs = SelectionProbs::new(1.0 - p.iter().sum::<f64>(), p).unwrap();

            let explicit = cov_inverse_explicit(&probs);
            let numeric = gauss_jordan_invert(&cov_matrix(&probs)).unwrap();
            prop_assert!((explicit - numeric).amax() < 1e-10);
        }

        #[test]
        fn sqrt_squares_back_and_is_symmetric(
            raw in prop::collection::vec(0.05f64..1.0, 1..=10),
            raw0 in 0.05f64..1.0,
        ) {
            let total: f64 = raw0 + raw.iter().sum::<f64>();
            let p: Vec<f64> = raw.iter().map(|r| r / total).collect();
            let probs = SelectionProbs::new(1.0 - p.iter().sum::<f64>(), p).unwrap();

            let s = cov_sqrt(&probs);
            prop_assert!((&s * &s - cov_matrix(&probs)).amax() < 1e-10);
            prop_assert!((&s - s.transpose()).amax() < 1e-12);
        }

        #[test]
        fn atom_sum_reproduces_cov_matrix(
            raw in prop::collection::vec(0.05f64..1.0, 1..=8),
            raw0 in 0.05f64..1.0,
        ) {
            let total: f64 = raw0 + raw.iter().sum::<f64>();
            let p: Vec<f64> = raw.iter().map(|r| r / total).collect();
            let probs = SelectionProbs::new(1.0 - p.iter().sum::<f64>(), p).unwrap();

            let d0 = probs.d0();
            let pi = probs.arm_vector();
            let mut sum = DMatrix::<f64>::zeros(d0, d0);
            for (w, x) in atoms(&probs) {
                let centered = x - &pi;
                sum += w * &centered * centered.transpose();
            }
            prop_assert!((sum - cov_matrix(&probs)).amax() < 1e-14);
        }

        #[test]
        fn eigenvalue_lower_bound_from_min_probability(
            raw in prop::collection::vec(0.05f64..1.0, 1..=8),
            raw0 in 0.05f64..1.0,
        ) {
            let total: f64 = raw0 + raw.iter().sum::<f64>();
            let p: Vec<f64> = raw.iter().map(|r| r / total).collect();
            let probs = SelectionProbs::new(1.0 - p.iter().sum::<f64>(), p).unwrap();

            let c0 = probs
                .arm_probs()
                .iter()
                .copied()
                .fold(probs.p0(), f64::min);
            let (vals, _) = sym_eigen(&cov_matrix(&probs));
            let lambda_min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let d0 = probs.d0() as f64;
            prop_assert!(lambda_min >= c0 / (d0 + 2.0) - 1e-12);
        }

        #[test]
        fn direction_weight_is_variance_normalized(
            raw in prop::collection::vec(0.05f64..1.0, 2..=8),
            raw0 in 0.05f64..1.0,
            coords in prop::collection::vec(-1.0f64..1.0, 2..=8),
        ) {
            let total: f64 = raw0 + raw.iter().sum::<f64>();
            let p: Vec<f64> = raw.iter().map(|r| r / total).collect();
            let probs = SelectionProbs::new(1.0 - p.iter().sum::<f64>(), p).unwrap();

            let d0 = probs.d0();
            let mut u = DVector::zeros(d0);
            for k in 0..d0 {
                u[k] = coords.get(k).copied().unwrap_or(0.3) + 0.05;
            }
            u /= u.norm();

            let (w, scale) = direction_weight(&probs, &u).unwrap();
            prop_assert!(scale > 0.0);

            let pi = probs.arm_vector();
            let mut mean = 0.0;
            let mut second_moment = 0.0;
            for (prob, x) in atoms(&probs) {
                let t = w.dot(&(x - &pi));
                mean += prob * t;
                second_moment += prob * t * t;
            }
            prop_assert!(mean.abs() < 1e-13);
            prop_assert!((second_moment - 1.0).abs() < 1e-12);
        }
    }
}
