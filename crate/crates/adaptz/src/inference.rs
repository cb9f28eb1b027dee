//! Confidence intervals, χ² regions, and coverage accounting.
//!
//! The estimators hand over a point estimate together with the exact scale
//! that standardizes it (`scale_bar` for scalars, `scaling` for vectors);
//! everything here is elementary normal-theory plumbing on top of that:
//! quantiles, interval endpoints, the χ² region statistic, and the
//! empirical coverage bookkeeping the simulation harness aggregates over
//! replications.
//!
//! The numeric special functions (normal quantile and CDF, regularized
//! incomplete gamma for χ²) are implemented here so the core has no
//! external numeric dependency; the test suite checks them against an
//! independent statistics crate.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::adaptz::{DirSolution, GLMSolution, PLSolution};
use crate::error::{Error, Result};

/// Which tail(s) a confidence interval leaves open.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntervalKind {
    /// `[lo, hi]`, splitting α across both tails.
    TwoSided,
    /// `[lo, ∞)`: a lower confidence bound, guarding against
    /// overestimation.
    UpperOneSided,
    /// `(−∞, hi]`: an upper confidence bound, guarding against
    /// underestimation.
    LowerOneSided,
}

/// A confidence interval at a given level (= 1 − α).
#[derive(Debug, Clone, Copy)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub kind: IntervalKind,
}

impl Interval {
    /// Whether the interval contains `x`.
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Confidence interval for a fixed-direction estimate.
///
/// The half-width is q·σ/(√n₂·scale_bar) with q the normal quantile at
/// 1 − α/2 (two-sided) or 1 − α (one-sided). For the generalized-linear
/// direction estimator the limit is already standardized to unit variance
/// by its `scale_bar`, so callers pass σ = 1 there.
pub fn dir_interval(
    sol: &DirSolution,
    sigma: f64,
    alpha: f64,
    kind: IntervalKind,
) -> Result<Interval> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if !(sol.scale_bar > 0.0) {
        return Err(Error::Parameter(format!(
            "interval needs a positive scale, got scale_bar = {}",
            sol.scale_bar
        )));
    }
    let se = sigma / ((sol.n2 as f64).sqrt() * sol.scale_bar);
    let level = 1.0 - alpha;
    let (lo, hi) = match kind {
        IntervalKind::TwoSided => {
            let q = inv_normal_cdf(1.0 - alpha / 2.0)?;
            (sol.theta_u - q * se, sol.theta_u + q * se)
        }
        IntervalKind::UpperOneSided => {
            let q = inv_normal_cdf(1.0 - alpha)?;
            (sol.theta_u - q * se, f64::INFINITY)
        }
        IntervalKind::LowerOneSided => {
            let q = inv_normal_cdf(1.0 - alpha)?;
            (f64::NEG_INFINITY, sol.theta_u + q * se)
        }
    };
    Ok(Interval { lo, hi, level, kind })
}

/// A full-vector solution exposing the pieces of its standardization
/// √n₂·scaling·(θ̂ − θ*)/σ → N(0, I).
pub trait VectorSolution {
    fn theta(&self) -> &DVector<f64>;
    fn scaling(&self) -> &DMatrix<f64>;
    fn n2(&self) -> usize;
    /// Noise scale dividing the standardized statistic; 1 for the
    /// generalized-linear estimator, whose scaling absorbs the response
    /// variance.
    fn noise_sd(&self) -> f64;
}

impl VectorSolution for PLSolution {
    fn theta(&self) -> &DVector<f64> {
        &self.theta
    }
    fn scaling(&self) -> &DMatrix<f64> {
        &self.scaling
    }
    fn n2(&self) -> usize {
        self.n2
    }
    fn noise_sd(&self) -> f64 {
        self.sigma_noise
    }
}

impl VectorSolution for GLMSolution {
    fn theta(&self) -> &DVector<f64> {
        &self.theta
    }
    fn scaling(&self) -> &DMatrix<f64> {
        &self.scaling
    }
    fn n2(&self) -> usize {
        self.n2
    }
    fn noise_sd(&self) -> f64 {
        1.0
    }
}

/// χ² region statistic ‖√n₂·scaling·(θ̂ − probe)‖²/σ². Under the
/// estimator's normal limit this is χ²-distributed with d0 degrees of
/// freedom at probe = θ*; callers compare against [`chi2_quantile`].
pub fn chi2_region_stat<S: VectorSolution>(sol: &S, theta_probe: &DVector<f64>) -> f64 {
    let standardized = (sol.n2() as f64).sqrt() * sol.scaling() * (sol.theta() - theta_probe);
    standardized.norm_squared() / (sol.noise_sd() * sol.noise_sd())
}

// ---------------------------------------------------------------------------
// Normal and χ² special functions.
// ---------------------------------------------------------------------------

/// ln Γ(z) by the Lanczos approximation (g = 7, 9 terms), with the
/// reflection formula below 1/2. Relative error ~1e-15 on the positive
/// axis.
fn ln_gamma(z: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if z < 0.5 {
        // Γ(z)Γ(1−z) = π/sin(πz)
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * z).sin().ln()
            - ln_gamma(1.0 - z);
    }
    let z = z - 1.0;
    let mut x = 0.99999999999980993;
    for (i, c) in COEFFS.iter().enumerate() {
        x += c / (z + i as f64 + 1.0);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + x.ln()
}

/// Regularized lower incomplete gamma P(a, x) by its power series;
/// accurate for x < a + 1 where the terms decay monotonically.
fn lower_gamma_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut sum = 1.0 / a;
    let mut del = sum;
    for _ in 0..500 {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (a * x.ln() - x - ln_gamma(a)).exp()
}

/// Regularized upper incomplete gamma Q(a, x) by the Legendre continued
/// fraction, evaluated with the modified Lentz algorithm; accurate for
/// x ≥ a + 1.
fn upper_gamma_cf(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (a * x.ln() - x - ln_gamma(a)).exp() * h
}

/// Regularized lower incomplete gamma P(a, x) for a > 0, x ≥ 0.
fn reg_lower_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        lower_gamma_series(a, x)
    } else {
        1.0 - upper_gamma_cf(a, x)
    }
}

/// Complementary error function. Small arguments go through the incomplete
/// gamma power series, large ones through the continued fraction, so the
/// result keeps full relative accuracy in the far tail.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    let x2 = x * x;
    if x2 < 1.5 {
        1.0 - lower_gamma_series(0.5, x2)
    } else {
        upper_gamma_cf(0.5, x2)
    }
}

/// Error function erf(x) = 1 − erfc(x), computed without cancellation for
/// small x.
pub fn erf(x: f64) -> f64 {
    let x2 = x * x;
    let magnitude = if x2 < 1.5 {
        lower_gamma_series(0.5, x2)
    } else {
        1.0 - upper_gamma_cf(0.5, x2)
    };
    if x < 0.0 {
        -magnitude
    } else {
        magnitude
    }
}

/// Standard normal CDF Φ(x) = erfc(−x/√2)/2.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile: rational initial approximation refined by one
/// Halley step on the CDF, giving absolute error far below the 1e-8
/// contract across (0, 1).
pub fn inv_normal_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Parameter(format!("quantile needs p in (0,1), got {p}")));
    }

    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| -> f64 {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let mut x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - P_LOW {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };

    // Halley refinement; skipped in the extreme tail where exp(x²/2)
    // overflows (the rational approximation alone already meets the
    // contract there).
    if x.abs() < 37.0 {
        let e = normal_cdf(x) - p;
        let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
        x -= u / (1.0 + x * u / 2.0);
    }
    Ok(x)
}

/// χ² CDF with `k` degrees of freedom: P(k/2, x/2).
pub fn chi2_cdf(x: f64, k: usize) -> f64 {
    reg_lower_gamma(k as f64 / 2.0, x / 2.0)
}

/// χ² density, used as the derivative in the quantile's Newton iteration.
fn chi2_pdf(x: f64, k: usize) -> f64 {
    let a = k as f64 / 2.0;
    ((a - 1.0) * x.ln() - x / 2.0 - a * 2.0_f64.ln() - ln_gamma(a)).exp()
}

/// χ² quantile with `k` degrees of freedom: the Wilson–Hilferty cube
/// approximation polished by a bracketed Newton iteration on the CDF.
pub fn chi2_quantile(p: f64, k: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Parameter(format!("quantile needs p in (0,1), got {p}")));
    }
    if k == 0 {
        return Err(Error::Parameter("χ² needs at least one degree of freedom".into()));
    }
    let kf = k as f64;
    let z = inv_normal_cdf(p)?;
    let cube = 1.0 - 2.0 / (9.0 * kf) + z * (2.0 / (9.0 * kf)).sqrt();
    let mut x = (kf * cube * cube * cube).max(1e-10);

    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    for _ in 0..200 {
        let err = chi2_cdf(x, k) - p;
        if err > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let step = err / chi2_pdf(x, k).max(f64::MIN_POSITIVE);
        let mut next = x - step;
        if !(next > lo && next < hi) {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x };
        }
        if (next - x).abs() <= 1e-14 * (1.0 + x.abs()) {
            x = next;
            break;
        }
        x = next;
    }
    Ok(x)
}

/// One-sample Kolmogorov–Smirnov statistic of `sample` against the
/// standard normal: D = sup_x |F_n(x) − Φ(x)|.
pub fn ks_statistic(sample: &[f64]) -> f64 {
    let mut sorted = sample.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = normal_cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// The level grid 0.80, 0.82, …, 0.98 used by the coverage figures.
pub fn default_level_grid() -> Vec<f64> {
    (40..=49).map(|k| k as f64 / 50.0).collect()
}

// ---------------------------------------------------------------------------
// Coverage accounting.
// ---------------------------------------------------------------------------

/// Coverage, width, and normality diagnostics for one estimator over T
/// replications, on a grid of levels.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CoverageReport {
    pub levels: Vec<f64>,
    /// Empirical coverage of the `[lo, ∞)` bounds, per level.
    pub cov_upper: Vec<f64>,
    /// Empirical coverage of the `(−∞, hi]` bounds, per level.
    pub cov_lower: Vec<f64>,
    /// Empirical coverage of the two-sided intervals, per level.
    pub cov_two: Vec<f64>,
    /// Binomial standard errors √(c(1−c)/T) for each coverage column.
    pub se_upper: Vec<f64>,
    pub se_lower: Vec<f64>,
    pub se_two: Vec<f64>,
    /// Mean two-sided width, per level.
    pub mean_width: Vec<f64>,
    /// Standardized errors (θ̂ − θ*)/se, one per replication.
    pub std_errors: Vec<f64>,
    pub std_error_mean: f64,
    /// Sample standard deviation (T − 1 denominator) of the standardized
    /// errors.
    pub std_error_sd: f64,
    /// Kolmogorov–Smirnov distance of the standardized errors from N(0,1).
    pub ks_normal: f64,
    /// Number of replications aggregated.
    pub replications: usize,
}

/// Aggregates one estimator's intervals into a [`CoverageReport`].
///
/// `intervals[r]` holds replication r's intervals across the level grid;
/// every replication must present the same (level, kind) cells, and every
/// level must come with all three kinds. `std_errors[r]` is replication
/// r's standardized error (θ̂ − truth)/se.
pub fn coverage_stats(
    truth: f64,
    intervals: &[Vec<Interval>],
    std_errors: &[f64],
) -> Result<CoverageReport> {
    let t = intervals.len();
    if t == 0 {
        return Err(Error::Usage("coverage needs at least one replication".into()));
    }
    if std_errors.len() != t {
        return Err(Error::Usage(format!(
            "got {t} interval sets but {} standardized errors",
            std_errors.len()
        )));
    }
    let layout: Vec<(u64, IntervalKind)> =
        intervals[0].iter().map(|iv| (iv.level.to_bits(), iv.kind)).collect();
    for (r, reps) in intervals.iter().enumerate() {
        let this: Vec<(u64, IntervalKind)> =
            reps.iter().map(|iv| (iv.level.to_bits(), iv.kind)).collect();
        if this != layout {
            return Err(Error::Usage(format!(

                "replication {r} has a different (level, kind) layout than replication 0"
            )));
        }
    }

    let mut levels: Vec<f64> = Vec::new();
    for iv in &intervals[0] {
        if !levels.iter().any(|l| l.to_bits() == iv.level.to_bits()) {
            levels.push(iv.level);
        }
    }
    levels.sort_unstable_by(f64::total_cmp);

    let tf = t as f64;
    let binom_se = |c: f64| (c * (1.0 - c) / tf).sqrt();
    let mut report = CoverageReport {
        levels: levels.clone(),
        cov_upper: Vec::new(),
        cov_lower: Vec::new(),
        cov_two: Vec::new(),
        se_upper: Vec::new(),
        se_lower: Vec::new(),
        se_two: Vec::new(),
        mean_width: Vec::new(),
        std_errors: std_errors.to_vec(),
        std_error_mean: 0.0,
        std_error_sd: 0.0,
        ks_normal: ks_statistic(std_errors),
        replications: t,
    };

    for &level in &levels {
        let cell = |kind: IntervalKind| -> Result<(f64, f64)> {
            let pos = intervals[0]
                .iter()
                .position(|iv| iv.level.to_bits() == level.to_bits() && iv.kind == kind)
                .ok_or_else(|| {
                    Error::Usage(format!(
                        "level {level} is missing a {kind:?} interval; every level \
                         needs all three kinds"
                    ))
                })?;
            let mut covered = 0usize;
            let mut width_sum = 0.0;
            for reps in intervals {
                let iv = &reps[pos];
                if iv.contains(truth) {
                    covered += 1;
                }
                width_sum += iv.width();
            }
            Ok((covered as f64 / tf, width_sum / tf))
        };
        let (cu, _) = cell(IntervalKind::UpperOneSided)?;
        let (cl, _) = cell(IntervalKind::LowerOneSided)?;
        let (ct, width) = cell(IntervalKind::TwoSided)?;
        report.cov_upper.push(cu);
        report.cov_lower.push(cl);
        report.cov_two.push(ct);
        report.se_upper.push(binom_se(cu));
        report.se_lower.push(binom_se(cl));
        report.se_two.push(binom_se(ct));
        report.mean_width.push(width);
    }

    report.std_error_mean = std_errors.iter().sum::<f64>() / tf;
    if t > 1 {
        let ss: f64 = std_errors.iter().map(|e| (e - report.std_error_mean).powi(2)).sum();
        report.std_error_sd = (ss / (tf - 1.0)).sqrt();
    }
    Ok(report)
}

/// Writes the per-level coverage table as CSV.
pub fn write_coverage_csv(report: &CoverageReport, out: &mut impl Write) -> Result<()> {
    writeln!(out, "level,cov_upper,cov_lower,cov_two,se_upper,se_lower,se_two,mean_width")?;
    for (i, level) in report.levels.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            level,
            report.cov_upper[i],
            report.cov_lower[i],
            report.cov_two[i],
            report.se_upper[i],
            report.se_lower[i],
            report.se_two[i],
            report.mean_width[i],
        )?;
    }
    Ok(())
}

/// Writes the raw standardized errors as a companion CSV.
pub fn write_std_errors_csv(report: &CoverageReport, out: &mut impl Write) -> Result<()> {
    writeln!(out, "replication,std_error")?;
    for (r, e) in report.std_errors.iter().enumerate() {
        writeln!(out, "{r},{e}")?;
    }
    Ok(())
}
