//! Small dense linear-algebra kernel shared by the estimators.
//!
//! The estimating equations are tiny (d0 × d0 with d0 rarely above 10), so
//! everything here favors transparency over scale: Gauss–Jordan elimination
//! with partial pivoting for solves and inverses (with a cheap pivot-ratio
//! condition estimate, so callers can refuse ill-posed systems instead of
//! silently regularizing), and symmetric eigendecompositions for the
//! canonical matrix square roots used by the score weightings.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solution of a linear system together with a cheap conditioning estimate.
#[derive(Debug, Clone)]
pub struct GjSolve {
    pub x: DVector<f64>,
    /// Ratio of largest to smallest absolute pivot met during elimination.
    /// A crude but monotone surrogate for the condition number; callers
    /// compare it against their own threshold.
    pub cond_estimate: f64,
}

/// Solves `a x = b` by Gauss–Jordan elimination with partial pivoting.
///
/// Fails only on an exactly (or subnormally) zero pivot; near-singular
/// systems are solved and reported through `cond_estimate`.
pub fn gauss_jordan_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<GjSolve> {
    let n = check_square(a)?;
    if b.len() != n {
        return Err(Error::Usage(format!(
            "right-hand side has length {} but the matrix is {}x{}",
            b.len(),
            n,
            n
        )));
    }
    let mut aug = DMatrix::<f64>::zeros(n, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.set_column(n, b);
    let cond_estimate = eliminate(&mut aug, n)?;
    Ok(GjSolve {
        x: aug.column(n).into_owned(),
        cond_estimate,
    })
}

/// Inverts `a` by Gauss–Jordan elimination with partial pivoting.
pub fn gauss_jordan_invert(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = check_square(a)?;
    let mut aug = DMatrix::<f64>::zeros(n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, n))
        .copy_from(&DMatrix::identity(n, n));
    eliminate(&mut aug, n)?;
    Ok(aug.view((0, n), (n, n)).into_owned())
}

/// Reduces the first `n` columns of `aug` to the identity, applying the same
/// row operations to the remaining columns. Returns the pivot-ratio
/// condition estimate.
fn eliminate(aug: &mut DMatrix<f64>, n: usize) -> Result<f64> {
    let cols = aug.ncols();
    let mut max_pivot: f64 = 0.0;
    let mut min_pivot = f64::INFINITY;
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_abs = aug[(col, col)].abs();
        for row in col + 1..n {
            let v = aug[(row, col)].abs();
            if v > pivot_abs {
                pivot_abs = v;
                pivot_row = row;
            }
        }
        if pivot_abs < f64::MIN_POSITIVE {
            return Err(Error::DegenerateDesign(format!(
                "zero pivot in column {col}: matrix is singular"
            )));
        }
        aug.swap_rows(col, pivot_row);
        max_pivot = max_pivot.max(pivot_abs);
        min_pivot = min_pivot.min(pivot_abs);
        let pivot = aug[(col, col)];
        for c in col..cols {
            aug[(col, c)] /= pivot;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = aug[(row, col)];
            if factor == 0.0 {
                continue;
            }
            for c in col..cols {
                aug[(row, c)] -= factor * aug[(col, c)];
            }
        }
    }
    Ok(max_pivot / min_pivot)
}

fn check_square(a: &DMatrix<f64>) -> Result<usize> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::Usage(format!(
            "expected a nonempty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(a.nrows())
}

/// Eigendecomposition of a symmetric matrix: `(eigenvalues, eigenvectors)`
/// with `a = V diag(λ) Vᵀ`, eigenvalues ascending. Input symmetry is the
/// caller's responsibility.
///
/// Cyclic Jacobi rotations rather than a QR iteration: for the small
/// covariance-sized matrices this library decomposes, Jacobi converges to
/// machine precision (off-diagonal entries are annihilated down to
/// round-off relative to their own diagonal), which the downstream
/// square-root and inverse identities rely on.
pub fn sym_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    // Quadratic convergence makes this cap generous; each sweep visits
    // every off-diagonal entry once.
    for _ in 0..30 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                let (app, aqq) = (m[(p, p)], m[(q, q)]);
                if apq.abs() <= 0.5 * f64::EPSILON * (app.abs() + aqq.abs()) {
                    continue;
                }
                rotated = true;
                // Stable rotation angle: the root of smaller magnitude of
                // t² + 2tθ − 1 = 0 (Rust's signum maps ±0 to ±1, which
                // picks the 45° rotation when the diagonal entries tie).
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                // The rotation zeroes this pair exactly in real
                // arithmetic; write the zero rather than keeping the
                // round-off residue.
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| m[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).copy_from(&v.column(src));
    }
    (values, vectors)
}

/// Rebuilds `V diag(f(λ)) Vᵀ` from an eigendecomposition.
pub fn sym_from_eigen(
    values: &DVector<f64>,
    vectors: &DMatrix<f64>,
    f: impl Fn(f64) -> f64,
) -> DMatrix<f64> {
    let mapped = DVector::from_iterator(values.len(), values.iter().map(|&v| f(v)));
    vectors * DMatrix::from_diagonal(&mapped) * vectors.transpose()
}

/// Symmetric PSD square root with eigenvalues clamped below at `floor`
/// (guards against negative round-off eigenvalues of nearly singular
/// covariances).
pub fn sym_sqrt_floored(a: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let (values, vectors) = sym_eigen(a);
    sym_from_eigen(&values, &vectors, |v| v.max(floor).sqrt())
}

/// Symmetric inverse square root with the same eigenvalue floor.
pub fn sym_inv_sqrt_floored(a: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let (values, vectors) = sym_eigen(a);
    sym_from_eigen(&values, &vectors, |v| 1.0 / v.max(floor).sqrt())
}

/// Minimum-norm least-squares solution of `q b ≈ y` via the pseudo-inverse
/// of the Gram matrix (`q⁺ = (qᵀq)⁺ qᵀ`). Returns the solution and whether
/// the Gram matrix was rank-deficient at the LAPACK-style tolerance
/// `max(n, p) · eps · λ_max`.
pub fn min_norm_least_squares(q: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    let (n, p) = (q.nrows(), q.ncols());
    if n == 0 || p == 0 {
        return Err(Error::Usage("empty design matrix".into()));
    }
    if y.len() != n {
        return Err(Error::Usage(format!(
            "design has {} rows but the response has length {}",
            n,
            y.len()
        )));
    }
    let gram = q.transpose() * q;
    let rhs = q.transpose() * y;
    let (values, vectors) = sym_eigen(&gram);
    let lambda_max = values.iter().copied().fold(0.0_f64, f64::max);
    let tol = (n.max(p) as f64) * f64::EPSILON * lambda_max.max(f64::MIN_POSITIVE);
    let mut deficient = false;
    let mut x = DVector::zeros(p);
    for k in 0..p {
        let lambda = values[k];
        if lambda > tol {
            let vk = vectors.column(k);
            x += vk * (vk.dot(&rhs) / lambda);
        } else {
            deficient = true;
        }
    }
    Ok((x, deficient))
}

/// Sums the terms after sorting them into a canonical order, so the result
/// depends only on the multiset of terms — not on the order they were
/// collected in. The estimating equations are symmetric sums over samples,
/// and this is what makes the estimators bitwise invariant to sample order.
pub fn canonical_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// A fixed grid of scalar accumulator slots (e.g. the entries of a matrix
/// being averaged over samples), each summed canonically via
/// [`canonical_sum`].
pub struct SumGrid {
    slots: Vec<Vec<f64>>,
}

impl SumGrid {
    pub fn new(slots: usize, capacity: usize) -> Self {
        Self { slots: vec![Vec::with_capacity(capacity); slots] }
    }

    pub fn push(&mut self, slot: usize, term: f64) {
        self.slots[slot].push(term);
    }

    /// Canonical sum of every slot, in slot order.
    pub fn sums(&mut self) -> Vec<f64> {
        self.slots.iter_mut().map(|s| canonical_sum(s)).collect()
    }

    /// Empties all slots for reuse (capacity is kept).
    pub fn clear(&mut self) {
        for s in &mut self.slots {
            s.clear();
        }
    }
}
